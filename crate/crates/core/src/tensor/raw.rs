//! Raw tensor files: `"CFDT"`, four little-endian `u32` dimensions
//! `(n, c, h, w)`, then row-major little-endian `f64` values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CFDT";

pub fn write_raw_to<W: Write>(tensor: &Tensor, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    for d in tensor.shape().dims() {
        let d = u32::try_from(d).map_err(|_| Error::invalid(format!("dimension {d} exceeds u32")))?;
        out.write_all(&d.to_le_bytes())?;
    }
    for v in tensor.data() {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one tensor. `offset` is the stream position of the first byte and
/// is only used to report where a malformed record starts.
pub fn read_raw_from<R: Read>(input: &mut R, offset: u64) -> Result<(Tensor, u64)> {
    let mut pos = offset;
    let mut magic = [0u8; 4];
    read_exact_at(input, &mut magic, pos, "tensor magic")?;
    if &magic != MAGIC {
        return Err(Error::format(pos, "bad tensor magic (expected \"CFDT\")"));
    }
    pos += 4;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let mut b = [0u8; 4];
        read_exact_at(input, &mut b, pos, "tensor shape")?;
        *d = u32::from_le_bytes(b) as usize;
        pos += 4;
    }
    let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format(offset + 4, "tensor shape overflows"))?;
    let mut bytes = vec![0u8; count * 8];
    read_exact_at(input, &mut bytes, pos, "tensor payload")?;
    pos += bytes.len() as u64;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((Tensor::from_vec(shape, data)?, pos))
}

pub(crate) fn read_exact_at<R: Read>(input: &mut R, buf: &mut [u8], pos: u64, what: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => {
                return Err(Error::format(
                    pos + filled as u64,
                    format!("truncated {what}: expected {} bytes, got {filled}", buf.len()),
                ))
            }
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(())
}

pub fn write_raw(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    write_raw_to(tensor, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_raw(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    let (t, _) = read_raw_from(&mut BufReader::new(file), 0)?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_in_memory() {
        let t = Tensor::from_fn((2, 3, 4, 5), |n, c, y, x| {
            (n * 1000 + c * 100 + y * 10 + x) as f64 * 0.37 - 3.0
        });
        let mut buf = Vec::new();
        write_raw_to(&t, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + t.numel() * 8);
        let (back, end) = read_raw_from(&mut buf.as_slice(), 0).unwrap();
        assert_eq!(back, t);
        assert_eq!(end as usize, buf.len());
    }

    #[test]
    fn truncated_payload_names_offset() {
        let t = Tensor::full((1, 1, 2, 2), 1.5);
        let mut buf = Vec::new();
        write_raw_to(&t, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        let err = read_raw_from(&mut buf.as_slice(), 0).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 49),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_magic() {
        let buf = b"XXXX\0\0\0\0".to_vec();
        assert!(matches!(
            read_raw_from(&mut buf.as_slice(), 0),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
