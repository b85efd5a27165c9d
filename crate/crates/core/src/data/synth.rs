//! Synthetic clips with exact motion.
//!
//! A texture is a sum of seeded sinusoids defined on the continuous LR
//! plane. HR frames sample it on the 4x grid (HR pixel `X` sits at LR
//! coordinate `(X + 0.5) / 4 - 0.5`) and are then degraded, so the
//! ground-truth flow between LR frames is known in closed form.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{degrade, Degradation, SequenceFlows, VideoSequence};
use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::seed;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Motion {
    /// Content moves by `(dx, dy)` LR pixels per frame.
    Translate { dx: f64, dy: f64 },
    /// Content rotates by `degrees` per frame about the frame center.
    RotateTexture { degrees: f64 },
}

impl Default for Motion {
    fn default() -> Self {
        Motion::Translate { dx: 1.0, dy: 0.5 }
    }
}

/// Recipe for a synthetic clip. Sizes are LR sizes; HR is 4x.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub motion: Motion,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Number of sinusoids in the texture.
    pub components: usize,
    /// Highest spatial frequency, in cycles per LR pixel.
    pub max_frequency: f64,
    pub degradation: Degradation,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            motion: Motion::default(),
            frames: 3,
            height: 32,
            width: 32,
            components: 24,
            max_frequency: 0.25,
            degradation: Degradation::Bi,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("synth.frames must be >= 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("synth.height and synth.width must be >= 1".into()));
        }
        if !(self.max_frequency > 0.0) {
            return Err(Error::Config("synth.max_frequency must be positive".into()));
        }
        let finite = match self.motion {
            Motion::Translate { dx, dy } => dx.is_finite() && dy.is_finite(),
            Motion::RotateTexture { degrees } => degrees.is_finite(),
        };
        if !finite {
            return Err(Error::Config("synth.motion must be finite".into()));
        }
        Ok(())
    }
}

struct Wave {
    fx: f64,
    fy: f64,
    amp: [f64; 3],
    phase: [f64; 3],
}

/// Band-limited RGB texture on the LR plane, values inside `[0.05, 0.95]`.
pub struct Texture {
    waves: Vec<Wave>,
}

impl Texture {
    pub fn new(components: usize, max_frequency: f64, seed_root: u64) -> Self {
        let mut rng = seed::rng_for(seed_root, "synth/texture");
        let mut waves: Vec<Wave> = (0..components)
            .map(|_| {
                let f = rng.gen_range(0.03..max_frequency);
                let theta = rng.gen_range(0.0..PI);
                let a: f64 = rng.gen_range(0.3..1.0);
                Wave {
                    fx: f * theta.cos(),
                    fy: f * theta.sin(),
                    amp: [
                        a * rng.gen_range(0.6..1.0),
                        a * rng.gen_range(0.6..1.0),
                        a * rng.gen_range(0.6..1.0),
                    ],
                    phase: [
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_range(0.0..2.0 * PI),
                        rng.gen_range(0.0..2.0 * PI),
                    ],
                }
            })
            .collect();
        for c in 0..3 {
            let total: f64 = waves.iter().map(|w| w.amp[c]).sum();
            if total > 0.0 {
                waves.iter_mut().for_each(|w| w.amp[c] *= 0.45 / total);
            }
        }
        Texture { waves }
    }

    /// Value of channel `c` at LR-plane point `(x, y)`.
    pub fn value(&self, c: usize, x: f64, y: f64) -> f64 {
        0.5 + self
            .waves
            .iter()
            .map(|w| w.amp[c] * (2.0 * PI * (w.fx * x + w.fy * y) + w.phase[c]).cos())
            .sum::<f64>()
    }
}

/// Where frame `t` samples the texture when asked for LR point `p`.
fn source_point(motion: Motion, t: usize, (x, y): (f64, f64), (cx, cy): (f64, f64)) -> (f64, f64) {
    let t = t as f64;
    match motion {
        Motion::Translate { dx, dy } => (x - t * dx, y - t * dy),
        Motion::RotateTexture { degrees } => {
            let a = -(t * degrees).to_radians();
            let (s, c) = a.sin_cos();
            let (px, py) = (x - cx, y - cy);
            (c * px - s * py + cx, s * px + c * py + cy)
        }
    }
}

/// Flow on an `h x w` LR grid from a frame to the next one (`sign = 1`)
/// or the previous one (`sign = -1`).
pub fn motion_flow(motion: Motion, h: usize, w: usize, sign: f64) -> FlowField {
    let mut f = FlowField::zeros(h, w);
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    for y in 0..h {
        for x in 0..w {
            let d = match motion {
                Motion::Translate { dx, dy } => (sign * dx, sign * dy),
                Motion::RotateTexture { degrees } => {
                    let (s, c) = (sign * degrees).to_radians().sin_cos();
                    let (px, py) = (x as f64 - cx, y as f64 - cy);
                    (c * px - s * py + cx - x as f64, s * px + c * py + cy - y as f64)
                }
            };
            f.set(y, x, d);
        }
    }
    f
}

/// Renders frame `t` at `scale` times the LR size.
pub fn render_frame(texture: &Texture, motion: Motion, t: usize, h: usize, w: usize, scale: usize) -> Tensor {
    let center = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let k = scale as f64;
    Tensor::from_fn(Shape::new(1, 3, h * scale, w * scale), |_, c, y, x| {
        let p = ((x as f64 + 0.5) / k - 0.5, (y as f64 + 0.5) / k - 0.5);
        let (sx, sy) = source_point(motion, t, p, center);
        texture.value(c, sx, sy)
    })
}

/// A clip with HR targets and exact LR flows attached.
pub fn synth_sequence(spec: &SynthSpec) -> Result<VideoSequence> {
    spec.validate()?;
    let texture = Texture::new(spec.components, spec.max_frequency, spec.seed);
    let hr: Vec<Tensor> = (0..spec.frames)
        .map(|t| render_frame(&texture, spec.motion, t, spec.height, spec.width, 4))
        .collect();
    let k = spec.frames - 1;
    let forward = vec![motion_flow(spec.motion, spec.height, spec.width, 1.0); k];
    let backward = vec![motion_flow(spec.motion, spec.height, spec.width, -1.0); k];
    let hr_seq = VideoSequence {
        name: format!("synth-{}", spec.seed),
        frames: hr,
        hr: None,
        flows: None,
    };
    let mut seq = degrade(&hr_seq, spec.degradation, 4)?;
    seq.flows = Some(SequenceFlows { forward, backward });
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::warp_image;

    #[test]
    fn single_frame_has_no_flows() {
        let seq = synth_sequence(&SynthSpec {
            frames: 1,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(seq.len(), 1);
        let f = seq.flows.unwrap();
        assert!(f.forward.is_empty() && f.backward.is_empty());
        assert_eq!(seq.hr.unwrap()[0].shape(), Shape::new(1, 3, 32, 32));
    }

    #[test]
    fn translation_flows_are_constant() {
        let spec = SynthSpec {
            motion: Motion::Translate { dx: 2.0, dy: 0.0 },
            frames: 4,
            height: 12,
            width: 12,
            ..Default::default()
        };
        let seq = synth_sequence(&spec).unwrap();
        let f = seq.flows.unwrap();
        assert_eq!(f.forward.len(), 3);
        for fl in &f.forward {
            assert!(fl.u().iter().all(|&u| u == 2.0) && fl.v().iter().all(|&v| v == 0.0));
        }
        for fl in &f.backward {
            assert!(fl.u().iter().all(|&u| u == -2.0));
        }
    }

    #[test]
    fn rotation_flow_inverts_exactly_on_texture() {
        let motion = Motion::RotateTexture { degrees: 3.0 };
        let tex = Texture::new(8, 0.2, 1);
        let (h, w) = (9, 11);
        let f = motion_flow(motion, h, w, 1.0);
        // frame t+1 sampled at x + s(x) equals frame t at x
        let c = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        for y in 0..h {
            for x in 0..w {
                let (u, v) = f.at(y, x);
                let a = source_point(motion, 2, (x as f64, y as f64), c);
                let b = source_point(motion, 3, (x as f64 + u, y as f64 + v), c);
                assert!((tex.value(1, a.0, a.1) - tex.value(1, b.0, b.1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn integer_translation_warps_back() {
        let spec = SynthSpec {
            motion: Motion::Translate { dx: 1.0, dy: -1.0 },
            frames: 2,
            height: 16,
            width: 16,
            ..Default::default()
        };
        let seq = synth_sequence(&spec).unwrap();
        let fwd = &seq.flows.as_ref().unwrap().forward[0];
        let warped = warp_image(&seq.frames[1], fwd).unwrap();
        for y in 3..13 {
            for x in 3..13 {
                for c in 0..3 {
                    assert!((warped.at(0, c, y, x) - seq.frames[0].at(0, c, y, x)).abs() < 1e-9);
                }
            }
        }
    }
}
