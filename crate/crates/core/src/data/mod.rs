//! Frames, degradations, synthetic clips and training patches.

mod io;
mod resize;
mod synth;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::seed;
use crate::tensor::Tensor;

pub use io::{load_sequence, read_png, save_sequence, write_png, Manifest, ManifestFlows};
pub use resize::{cubic, downscale_bd, downscale_bi, gaussian_blur, gaussian_kernel, resize_bicubic, BD_KERNEL_SIZE};
pub use synth::{motion_flow, render_frame, synth_sequence, Motion, SynthSpec, Texture};

/// Blur sigma of the BD degradation.
pub const BD_SIGMA: f64 = 1.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Degradation {
    /// Antialiased bicubic downscale.
    #[default]
    Bi,
    /// Gaussian blur (sigma 1.6) then point sampling.
    Bd,
}

/// Flows between adjacent frames; see [`crate::model::ClipFlows`] for the
/// direction convention.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFlows {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
}

/// An ordered clip of `(1, 3, h, w)` RGB frames in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub name: String,
    pub frames: Vec<Tensor>,
    pub hr: Option<Vec<Tensor>>,
    pub flows: Option<SequenceFlows>,
}

impl VideoSequence {
    pub fn new(name: impl Into<String>, frames: Vec<Tensor>) -> Result<Self> {
        let seq = VideoSequence {
            name: name.into(),
            frames,
            hr: None,
            flows: None,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// LR `(height, width)`.
    pub fn size(&self) -> (usize, usize) {
        self.frames.first().map_or((0, 0), |f| (f.shape().h, f.shape().w))
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Ok(());
        };
        let s = first.shape();
        if s.n != 1 || s.c != 3 {
            return Err(Error::shape(format!("frames must be (1, 3, h, w), got {s}")));
        }
        if let Some((t, f)) = self.frames.iter().enumerate().find(|(_, f)| f.shape() != s) {
            return Err(Error::shape(format!("frame {t} is {} but frame 0 is {s}", f.shape())));
        }
        if let Some(hr) = &self.hr {
            if hr.len() != self.frames.len() {
                return Err(Error::shape(format!(
                    "{} HR targets for {} frames",
                    hr.len(),
                    self.frames.len()
                )));
            }
            for (t, h) in hr.iter().enumerate() {
                let hs = h.shape();
                if hs.n != 1 || hs.c != 3 || hs.h != 4 * s.h || hs.w != 4 * s.w {
                    return Err(Error::shape(format!("HR target {t} is {hs}, expected 4x of {s}")));
                }
            }
        }
        if let Some(fl) = &self.flows {
            let k = self.frames.len() - 1;
            if fl.forward.len() != k || fl.backward.len() != k {
                return Err(Error::shape(format!(
                    "{} frames need {k} flows per direction, got {} forward and {} backward",
                    self.frames.len(),
                    fl.forward.len(),
                    fl.backward.len()
                )));
            }
            for f in fl.forward.iter().chain(&fl.backward) {
                if f.height() != s.h || f.width() != s.w {
                    return Err(Error::shape(format!(
                        "flow is {}x{} but frames are {}x{}",
                        f.height(),
                        f.width(),
                        s.h,
                        s.w
                    )));
                }
            }
        }
        Ok(())
    }

    /// The same clip in reverse order, with flow directions swapped.
    pub fn reversed(&self) -> VideoSequence {
        let rev = |v: &[Tensor]| v.iter().rev().cloned().collect::<Vec<_>>();
        VideoSequence {
            name: format!("{}-reversed", self.name),
            frames: rev(&self.frames),
            hr: self.hr.as_deref().map(rev),
            flows: self.flows.as_ref().map(|f| SequenceFlows {
                forward: f.backward.iter().rev().cloned().collect(),
                backward: f.forward.iter().rev().cloned().collect(),
            }),
        }
    }
}

/// Degrades every frame of `hr` (taken from `frames`) and attaches the
/// originals as targets.
pub fn degrade(hr: &VideoSequence, kind: Degradation, scale: usize) -> Result<VideoSequence> {
    let frames = hr
        .frames
        .par_iter()
        .map(|f| match kind {
            Degradation::Bi => downscale_bi(f, scale),
            Degradation::Bd => downscale_bd(f, BD_SIGMA, scale),
        })
        .collect::<Result<Vec<_>>>()?;
    let seq = VideoSequence {
        name: hr.name.clone(),
        frames,
        hr: Some(hr.frames.clone()),
        flows: None,
    };
    seq.validate()?;
    Ok(seq)
}

pub fn degrade_bi(hr: &VideoSequence, scale: usize) -> Result<VideoSequence> {
    degrade(hr, Degradation::Bi, scale)
}

pub fn degrade_bd(hr: &VideoSequence, scale: usize) -> Result<VideoSequence> {
    degrade(hr, Degradation::Bd, scale)
}

/// `count` co-located random crops of `patch x patch` LR pixels (and the
/// matching `4 * patch` HR crops and flows). Deterministic in `seed`.
pub fn sample_patches(seq: &VideoSequence, patch: usize, count: usize, seed_root: u64) -> Result<Vec<VideoSequence>> {
    let (h, w) = seq.size();
    if seq.is_empty() {
        return Err(Error::invalid("cannot sample patches from an empty sequence"));
    }
    if patch == 0 || patch > h || patch > w {
        return Err(Error::invalid(format!("patch {patch} does not fit frames of {h}x{w}")));
    }
    let mut rng = seed::rng_for(seed_root, "data/patches");
    (0..count)
        .map(|i| {
            let y = rng.gen_range(0..=h - patch);
            let x = rng.gen_range(0..=w - patch);
            crop_sequence(seq, y, x, patch, patch, i)
        })
        .collect()
}

/// LR crop at `(y, x)` with the HR crop at `(4y, 4x)`.
pub fn crop_sequence(
    seq: &VideoSequence,
    y: usize,
    x: usize,
    h: usize,
    w: usize,
    index: usize,
) -> Result<VideoSequence> {
    let frames = seq
        .frames
        .iter()
        .map(|f| f.crop(y, x, h, w))
        .collect::<Result<Vec<_>>>()?;
    let hr = match &seq.hr {
        Some(hr) => Some(
            hr.iter()
                .map(|f| f.crop(4 * y, 4 * x, 4 * h, 4 * w))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let crop_flows = |v: &[FlowField]| v.iter().map(|f| f.crop(y, x, h, w)).collect::<Result<Vec<_>>>();
    let flows = match &seq.flows {
        Some(fl) => Some(SequenceFlows {
            forward: crop_flows(&fl.forward)?,
            backward: crop_flows(&fl.backward)?,
        }),
        None => None,
    };
    Ok(VideoSequence {
        name: format!("{}-patch{index}", seq.name),
        frames,
        hr,
        flows,
    })
}
