//! Checkpoint files:
//!
//! ```text
//! "CFDM"
//! u32 LE  config length L, then L bytes of JSON (the model config)
//! u32 LE  tensor count K
//! K times: u32 LE name length, UTF-8 name, raw "CFDT" tensor record
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CfdModel, ModelConfig, ParamMap};
use crate::error::{Error, Result};
use crate::tensor::{raw_read_exact_at, read_raw_from, write_raw_to};

const MAGIC: &[u8; 4] = b"CFDM";

fn write_u32<W: Write>(out: &mut W, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))?;
    out.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(input: &mut R, pos: &mut u64, what: &str) -> Result<usize> {
    let mut b = [0u8; 4];
    raw_read_exact_at(input, &mut b, *pos, what)?;
    *pos += 4;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint_to<W: Write>(model: &CfdModel, out: &mut W) -> Result<()> {
    out.write_all(MAGIC)?;
    let json = serde_json::to_vec(model.config())?;
    write_u32(out, json.len(), "config length")?;
    out.write_all(&json)?;
    write_u32(out, model.params().len(), "tensor count")?;
    for (name, t) in model.params() {
        write_u32(out, name.len(), "name length")?;
        out.write_all(name.as_bytes())?;
        write_raw_to(t, out)?;
    }
    Ok(())
}

pub fn read_checkpoint_from<R: Read>(input: &mut R) -> Result<CfdModel> {
    let mut pos = 0u64;
    let mut magic = [0u8; 4];
    raw_read_exact_at(input, &mut magic, pos, "checkpoint magic")?;
    if &magic != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic (expected \"CFDM\")"));
    }
    pos += 4;
    let len = read_u32(input, &mut pos, "config length")?;
    let mut json = vec![0u8; len];
    raw_read_exact_at(input, &mut json, pos, "config block")?;
    let config: ModelConfig =
        serde_json::from_slice(&json).map_err(|e| Error::format(pos, format!("bad config block: {e}")))?;
    pos += len as u64;
    let count = read_u32(input, &mut pos, "tensor count")?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let name_at = pos;
        let len = read_u32(input, &mut pos, "name length")?;
        let mut name = vec![0u8; len];
        raw_read_exact_at(input, &mut name, pos, "tensor name")?;
        pos += len as u64;
        let name = String::from_utf8(name).map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?;
        let (t, end) = read_raw_from(input, pos)?;
        pos = end;
        if params.insert(name.clone(), t).is_some() {
            return Err(Error::format(name_at, format!("duplicate tensor `{name}`")));
        }
    }
    CfdModel::from_params(config, params)
}

pub fn save_checkpoint(model: &CfdModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::file(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint_to(model, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CfdModel> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::file(path, e))?;
    read_checkpoint_from(&mut BufReader::new(file))
}
