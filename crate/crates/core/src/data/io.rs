//! PNG frames and JSON sequence manifests.
//!
//! A manifest lists paths relative to its own directory:
//!
//! ```json
//! {
//!   "name": "clip",
//!   "frames": ["lr/000.png", "lr/001.png"],
//!   "hr": ["hr/000.png", "hr/001.png"],
//!   "flows": { "forward": ["flow/fwd_000.flo"], "backward": ["flow/bwd_000.flo"] }
//! }
//! ```
//!
//! `hr` and `flows` are optional.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{SequenceFlows, VideoSequence};
use crate::error::{Error, Result};
use crate::flow::{read_flo, write_flo};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFlows {
    pub forward: Vec<PathBuf>,
    pub backward: Vec<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub name: String,
    pub frames: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hr: Option<Vec<PathBuf>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flows: Option<ManifestFlows>,
}

/// Reads an 8-bit PNG (any color type) as a `(1, 3, h, w)` tensor in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::file(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    }))
}

/// Writes the first sample of an RGB (or single-channel, replicated)
/// tensor, clamping to `[0, 1]` and rounding to 8 bits.
pub fn write_png(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let s = t.shape();
    if s.c != 3 && s.c != 1 {
        return Err(Error::shape(format!("PNG output needs 1 or 3 channels, got {s}")));
    }
    let quant = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let img: RgbImage = ImageBuffer::from_fn(s.w as u32, s.h as u32, |x, y| {
        let px = |c: usize| quant(t.at(0, c.min(s.c - 1), y as usize, x as usize));
        Rgb([px(0), px(1), px(2)])
    });
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Loads the sequence described by the manifest at `path`.
pub fn load_sequence(path: impl AsRef<Path>) -> Result<VideoSequence> {
    let path = path.as_ref();
    let m = read_manifest(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let frames = m
        .frames
        .iter()
        .map(|p| read_png(dir.join(p)))
        .collect::<Result<Vec<_>>>()?;
    let hr = match &m.hr {
        Some(list) => Some(list.iter().map(|p| read_png(dir.join(p))).collect::<Result<Vec<_>>>()?),
        None => None,
    };
    let flows = match &m.flows {
        Some(f) => {
            let load = |list: &[PathBuf]| list.iter().map(|p| read_flo(dir.join(p))).collect::<Result<Vec<_>>>();
            Some(SequenceFlows {
                forward: load(&f.forward)?,
                backward: load(&f.backward)?,
            })
        }
        None => None,
    };
    let name = if m.name.is_empty() {
        dir.file_name()
            .map_or_else(|| "sequence".into(), |n| n.to_string_lossy().into_owned())
    } else {
        m.name
    };
    let seq = VideoSequence {
        name,
        frames,
        hr,
        flows,
    };
    seq.validate()
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    Ok(seq)
}

/// Writes `seq` under `dir` (`lr/`, `hr/`, `flow/`, `manifest.json`) and
/// returns the manifest path.
pub fn save_sequence(seq: &VideoSequence, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let mkdir = |sub: &str| -> Result<()> {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::file(p, e))
    };
    mkdir("lr")?;
    let mut m = Manifest {
        name: seq.name.clone(),
        ..Default::default()
    };
    for (t, f) in seq.frames.iter().enumerate() {
        let rel = PathBuf::from(format!("lr/{t:03}.png"));
        write_png(f, dir.join(&rel))?;
        m.frames.push(rel);
    }
    if let Some(hr) = &seq.hr {
        mkdir("hr")?;
        let mut list = Vec::new();
        for (t, f) in hr.iter().enumerate() {
            let rel = PathBuf::from(format!("hr/{t:03}.png"));
            write_png(f, dir.join(&rel))?;
            list.push(rel);
        }
        m.hr = Some(list);
    }
    if let Some(fl) = &seq.flows {
        mkdir("flow")?;
        let mut mf = ManifestFlows::default();
        for (t, f) in fl.forward.iter().enumerate() {
            let rel = PathBuf::from(format!("flow/fwd_{t:03}.flo"));
            write_flo(f, dir.join(&rel))?;
            mf.forward.push(rel);
        }
        for (t, f) in fl.backward.iter().enumerate() {
            let rel = PathBuf::from(format!("flow/bwd_{t:03}.flo"));
            write_flo(f, dir.join(&rel))?;
            mf.backward.push(rel);
        }
        m.flows = Some(mf);
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&m)? + "\n").map_err(|e| Error::file(&path, e))?;
    Ok(path)
}
