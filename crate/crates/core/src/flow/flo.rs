//! Middlebury `.flo`: the float 202021.25 (bytes `PIEH`), `i32` width,
//! `i32` height, then row-major interleaved `(u, v)` pairs as `f32`. All
//! little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::FlowField;
use crate::error::{Error, Result};
use crate::tensor::raw_read_exact_at as read_exact_at;

const MAGIC: &[u8; 4] = b"PIEH";

pub fn write_flo_to<W: Write>(flow: &FlowField, out: &mut W) -> Result<()> {
    let dim = |d: usize| i32::try_from(d).map_err(|_| Error::invalid(format!("flow dimension {d} exceeds i32")));
    out.write_all(MAGIC)?;
    out.write_all(&dim(flow.width())?.to_le_bytes())?;
    out.write_all(&dim(flow.height())?.to_le_bytes())?;
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.write_all(&(*u as f32).to_le_bytes())?;
        out.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_flo_from<R: Read>(input: &mut R) -> Result<FlowField> {
    let mut head = [0u8; 12];
    read_exact_at(input, &mut head[..4], 0, "flo magic")?;
    if &head[..4] != MAGIC {
        return Err(Error::format(0, "bad .flo magic"));
    }
    read_exact_at(input, &mut head[4..], 4, "flo header")?;
    let width = i32::from_le_bytes(head[4..8].try_into().expect("4 bytes"));
    let height = i32::from_le_bytes(head[8..12].try_into().expect("4 bytes"));
    if width < 0 || height < 0 {
        return Err(Error::format(4, format!("negative .flo size {width}x{height}")));
    }
    let (w, h) = (width as usize, height as usize);
    let mut payload = vec![0u8; w * h * 8];
    read_exact_at(input, &mut payload, 12, "flo payload")?;
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in payload.chunks_exact(8) {
        u.push(f32::from_le_bytes(px[..4].try_into().expect("4 bytes")) as f64);
        v.push(f32::from_le_bytes(px[4..].try_into().expect("4 bytes")) as f64);
    }
    FlowField::from_components(h, w, u, v)
}

pub fn write_flo(flow: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    write_flo_to(flow, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_flo_from(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn magic_is_the_middlebury_float() {
        assert_eq!(f32::from_le_bytes(*MAGIC), 202021.25);
    }

    #[test]
    fn roundtrip_random_8x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (h, w) = (6, 8);
        let u = (0..h * w).map(|_| rng.gen_range(-5.0f32..5.0) as f64).collect();
        let v = (0..h * w).map(|_| rng.gen_range(-5.0f32..5.0) as f64).collect();
        let f = FlowField::from_components(h, w, u, v).unwrap();
        let mut buf = Vec::new();
        write_flo_to(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 12 + h * w * 8);
        let back = read_flo_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, f);
        let mut again = Vec::new();
        write_flo_to(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn empty_field() {
        let f = FlowField::zeros(0, 0);
        let mut buf = Vec::new();
        write_flo_to(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 12);
        assert_eq!(read_flo_from(&mut buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn corrupted_magic() {
        let mut buf = Vec::new();
        write_flo_to(&FlowField::zeros(2, 2), &mut buf).unwrap();
        buf[0] = b'X';
        let err = read_flo_from(&mut buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("bad .flo magic"), "{err}");
    }

    #[test]
    fn truncated_payload() {
        let mut buf = Vec::new();
        write_flo_to(&FlowField::zeros(2, 3), &mut buf).unwrap();
        buf.truncate(20);
        match read_flo_from(&mut buf.as_slice()).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 20),
            e => panic!("unexpected {e:?}"),
        }
    }
}
