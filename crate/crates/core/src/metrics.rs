//! Image quality metrics and model accounting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::gaussian_kernel;
use crate::error::{Error, Result};
use crate::model::{CfdModel, ModelConfig};
use crate::tensor::{Shape, Tensor};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
/// Published parameter count of the full-size model, in millions.
pub const REFERENCE_PARAMS_M: f64 = 6.6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelMode {
    Rgb,
    #[default]
    Y,
}

/// Studio-range luma `(65.481 R + 128.553 G + 24.966 B + 16) / 255` of
/// every sample, shaped `(n, 1, h, w)`.
pub fn rgb_to_y(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.c != 3 {
        return Err(Error::shape(format!("luma needs 3 channels, got {s}")));
    }
    Ok(Tensor::from_fn(Shape::new(s.n, 1, s.h, s.w), |n, _, y, x| {
        (65.481 * t.at(n, 0, y, x) + 128.553 * t.at(n, 1, y, x) + 24.966 * t.at(n, 2, y, x) + 16.0) / 255.0
    }))
}

fn check_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {} vs {}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` with unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, mode: ChannelMode) -> Result<f64> {
    check_same(a, b, "psnr")?;
    let mse = match mode {
        ChannelMode::Rgb => mse(a, b),
        ChannelMode::Y => mse(&rgb_to_y(a)?, &rgb_to_y(b)?),
    };
    Ok(if mse == 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    })
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

/// Valid-mode separable filtering of one plane.
fn filter_valid(p: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let m = k.len();
    let (oh, ow) = (h + 1 - m, w + 1 - m);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k.iter().enumerate().map(|(i, kv)| kv * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over every valid 11x11 Gaussian window (sigma 1.5), no border
/// crop. Three-channel inputs are compared on luma.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same(a, b, "ssim")?;
    let (a, b) = match a.shape().c {
        1 => (a.clone(), b.clone()),
        3 => (rgb_to_y(a)?, rgb_to_y(b)?),
        _ => return Err(Error::shape(format!("ssim needs 1 or 3 channels, got {}", a.shape()))),
    };
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            s.h, s.w
        )));
    }
    let k = gaussian_kernel(SSIM_SIGMA, SSIM_WINDOW);
    let mut total = 0.0;
    let mut count = 0usize;
    for n in 0..s.n {
        let (pa, pb) = (a.plane(n, 0), b.plane(n, 0));
        let prod = |f: &dyn Fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, s.h, s.w, &k);
        let mu_b = filter_valid(pb, s.h, s.w, &k);
        let e_aa = filter_valid(&prod(&|x, _| x * x), s.h, s.w, &k);
        let e_bb = filter_valid(&prod(&|_, y| y * y), s.h, s.w, &k);
        let e_ab = filter_valid(&prod(&|x, y| x * y), s.h, s.w, &k);
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Row `row` of every frame stacked in time: `(T, 3, 1, W)`.
pub fn temporal_profile(frames: &[Tensor], row: usize) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("temporal profile of zero frames"))?;
    let s = first.shape();
    if row >= s.h {
        return Err(Error::invalid(format!(
            "profile row {row} out of range for height {}",
            s.h
        )));
    }
    let rows = frames
        .iter()
        .map(|f| {
            if f.shape() != s {
                return Err(Error::shape(format!("frame {} differs from {s}", f.shape())));
            }
            f.sample(0).crop(row, 0, 1, s.w)
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&rows)
}

/// A `(T, c, 1, W)` profile laid out as one `(1, c, T, W)` image.
pub fn profile_image(profile: &Tensor) -> Tensor {
    let s = profile.shape();
    Tensor::from_fn(Shape::new(1, s.c, s.n, s.w), |_, c, y, x| profile.at(y, c, 0, x))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: ChannelMode,
    pub frame_count: usize,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub frames: Vec<FrameScore>,
    pub note: String,
}

pub const EVAL_NOTE: &str =
    "PSNR peak 1.0, capped at 99 dB; SSIM on luma, 11x11 Gaussian window (sigma 1.5), valid positions, no border crop";

/// Scores `outputs[t]` against `targets[t]`.
pub fn evaluate(outputs: &[Tensor], targets: &[Tensor], mode: ChannelMode) -> Result<EvalReport> {
    if outputs.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} outputs for {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    if outputs.is_empty() {
        return Err(Error::invalid("nothing to evaluate"));
    }
    let frames = outputs
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(t, (a, b))| {
            Ok(FrameScore {
                frame: t,
                psnr: psnr(a, b, mode)?,
                ssim: ssim(a, b)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    Ok(EvalReport {
        mode,
        frame_count: frames.len(),
        mean_psnr: frames.iter().map(|f| f.psnr).sum::<f64>() / n,
        mean_ssim: frames.iter().map(|f| f.ssim).sum::<f64>() / n,
        frames,
        note: EVAL_NOTE.into(),
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned text table, one row per frame plus the mean.
    pub fn to_table(&self) -> String {
        let mode = match self.mode {
            ChannelMode::Rgb => "RGB",
            ChannelMode::Y => "Y",
        };
        let mut s = format!("# {}\n# PSNR channel: {mode}\n", self.note);
        let _ = writeln!(s, "{:>6}  {:>9}  {:>8}", "frame", "psnr_db", "ssim");
        for f in &self.frames {
            let _ = writeln!(s, "{:>6}  {:>9.4}  {:>8.5}", f.frame, f.psnr, f.ssim);
        }
        let _ = writeln!(s, "{:>6}  {:>9.4}  {:>8.5}", "mean", self.mean_psnr, self.mean_ssim);
        s
    }
}

/// Parameters of a `k x k` convolution with bias.
pub fn conv_params(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

pub fn count_params(model: &CfdModel) -> usize {
    model.num_params()
}

/// Closed-form parameter count of a config; equals `count_params` of any
/// model built from it.
pub fn config_params(cfg: &ModelConfig) -> usize {
    let c = cfg.channels;
    let res = 2 * conv_params(c, c, 3);
    let fe = conv_params(3, c, 3) + cfg.fe_blocks * res;
    let prop = 2 * (res + conv_params(2 * c, c, 3) + cfg.prop_blocks * res);
    let gcfb = conv_params(2 * c, 4 * c, 1) + conv_params(1, 4 * c, 3) + conv_params(2 * c, c, 1);
    let cfp = 2 * 3 * c + 2 * conv_params(3 * c, c, 3) + conv_params(2 * c, c, 3) + cfg.gcfb_count * gcfb;
    let rec = conv_params(4 * c, c, 3) + cfg.rec_blocks * res + 2 * conv_params(c, 4 * c, 3) + conv_params(c, 3, 3);
    fe + prop + cfp + rec
}

/// FLOPs of one forward pass over `n_frames` frames of `h x w` LR pixels:
/// `2 * MACs` for convolutions and one per output element for every
/// elementwise, normalization, warping and DAC operation.
pub fn estimate_flops(cfg: &ModelConfig, h: usize, w: usize, n_frames: usize) -> u64 {
    let c = cfg.channels as u64;
    let p = (h * w) as u64;
    let n = n_frames as u64;
    let conv = |c_in: u64, c_out: u64, k: u64, pixels: u64| 2 * c_in * c_out * k * k * pixels;
    let res = 2 * conv(c, c, 3, p) + 2 * c * p;

    let fe = conv(3, c, 3, p) + cfg.fe_blocks as u64 * res;
    // per direction and round: every frame runs the align block, DAC, the
    // fusion conv and the stack; all but the first visited frame warp
    let prop_step = res + c * p + conv(2 * c, c, 3, p) + cfg.prop_blocks as u64 * res;
    let prop = 2 * cfg.prop_rounds as u64 * (n * prop_step + n.saturating_sub(1) * c * p);
    let gru = 3 * c * p + 2 * conv(3 * c, c, 3, p) + conv(2 * c, c, 3, p) + 8 * c * p;
    let gcfb = conv(2 * c, 4 * c, 1, p) + 2 * 9 * 4 * c * p + conv(2 * c, c, 1, p) + 2 * c * p + 2 * c * p + 2 * c * p;
    let cfp = gru + cfg.gcfb_count as u64 * gcfb;
    let rec = conv(4 * c, c, 3, p)
        + cfg.rec_blocks as u64 * res
        + conv(c, 4 * c, 3, p)
        + conv(c, 4 * c, 3, 4 * p)
        + conv(c, 3, 3, 16 * p)
        + 2 * 3 * 16 * p;
    n * (fe + cfp + rec) + prop
}

/// Parameter count of a model next to the published figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub config: ModelConfig,
    pub params: usize,
    pub reference_params_m: f64,
    pub flops: u64,
    pub flops_frames: usize,
    pub flops_height: usize,
    pub flops_width: usize,
    pub note: String,
}

pub const PARAM_NOTE: &str = "Reference figure is the published 6.6 M for the full model. It is unclear whether that \
    figure includes the optical flow network; this implementation has no learned flow network, so the comparison is \
    informational only.";

impl ParamReport {
    /// FLOPs are evaluated on three 180x320 frames.
    pub fn new(model: &CfdModel) -> Self {
        let (n, h, w) = (3, 180, 320);
        ParamReport {
            config: *model.config(),
            params: count_params(model),
            reference_params_m: REFERENCE_PARAMS_M,
            flops: estimate_flops(model.config(), h, w, n),
            flops_frames: n,
            flops_height: h,
            flops_width: w,
            note: PARAM_NOTE.into(),
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "parameters: {} ({:.3} M; reference {:.1} M)\nflops: {} ({:.2} G on {} frames of {}x{})\nnote: {}\n",
            self.params,
            self.params as f64 / 1e6,
            self.reference_params_m,
            self.flops,
            self.flops as f64 / 1e9,
            self.flops_frames,
            self.flops_height,
            self.flops_width,
            self.note
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_cases() {
        let a = Tensor::full((1, 3, 4, 4), 0.5);
        assert_eq!(psnr(&a, &a, ChannelMode::Rgb).unwrap(), 99.0);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, ChannelMode::Rgb).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &Tensor::zeros((1, 3, 4, 5)), ChannelMode::Y).is_err());
    }

    #[test]
    fn white_luma() {
        let y = rgb_to_y(&Tensor::full((1, 3, 1, 1), 1.0)).unwrap();
        assert!((y.data()[0] - 235.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn ssim_constant_images() {
        let a = Tensor::full((1, 1, 16, 16), 0.5);
        let b = Tensor::full((1, 1, 16, 16), 0.6);
        let expected = (2.0 * 0.5 * 0.6 + SSIM_C1) / (0.25 + 0.36 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-6);
        assert!((expected - 0.98361).abs() < 1e-5);
        assert!(ssim(&Tensor::zeros((1, 1, 10, 16)), &Tensor::zeros((1, 1, 10, 16))).is_err());
    }

    #[test]
    fn profile_shapes() {
        let frames = vec![Tensor::from_fn((1, 3, 4, 32), |_, c, y, x| (c + y + x) as f64); 5];
        let p = temporal_profile(&frames, 2).unwrap();
        assert_eq!(p.shape(), Shape::new(5, 3, 1, 32));
        assert!(temporal_profile(&frames, 4).is_err());
        assert_eq!(profile_image(&p).shape(), Shape::new(1, 3, 5, 32));
    }

    #[test]
    fn single_layer_params() {
        assert_eq!(conv_params(64, 64, 3), 36_928);
        assert_eq!(conv_params(128, 64, 1), 8_256);
    }

    #[test]
    fn closed_form_param_count() {
        for cfg in [
            ModelConfig::tiny(3),
            ModelConfig::default(),
            ModelConfig {
                gcfb_count: 2,
                rec_blocks: 5,
                ..ModelConfig::tiny(8)
            },
        ] {
            let m = CfdModel::new(cfg).unwrap();
            assert_eq!(config_params(&cfg), count_params(&m));
        }
    }

    #[test]
    fn flop_estimate_matches_tape() {
        use crate::model::{ClipFlows, ParamVars};
        use crate::tensor::GradTape;
        let cfg = ModelConfig {
            gcfb_count: 2,
            prop_blocks: 2,
            ..ModelConfig::tiny(3)
        };
        let m = CfdModel::new(cfg).unwrap();
        let frames = vec![Tensor::full((1, 3, 5, 6), 0.3); 3];
        let mut tape = GradTape::new();
        let pv = ParamVars::bind(&mut tape, m.params(), false);
        m.forward(&mut tape, &pv, &frames, &ClipFlows::zeros(1, 3, 5, 6))
            .unwrap();
        assert_eq!(tape.flops(), estimate_flops(&cfg, 5, 6, 3));
    }
}
