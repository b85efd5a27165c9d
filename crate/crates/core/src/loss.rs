//! Training objectives: a per-element Charbonnier penalty plus an L1
//! distance between 2-D Fourier spectra.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradTape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Charbonnier smoothing constant.
    pub eps: f64,
    /// Weight of the frequency-domain term.
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { eps: 1e-3, lambda: 0.1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("loss.eps must be > 0, got {}", self.eps)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

fn same_shape(sr: &Tensor, gt: &Tensor) -> Result<()> {
    if sr.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "loss inputs differ in shape: {} vs {}",
            sr.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Mean over elements of `sqrt(d^2 + eps^2)`.
///
/// Accumulated as `eps` plus the mean excess `d^2 / (sqrt(d^2 + eps^2) + eps)`,
/// so identical inputs give exactly `eps`.
pub fn charbonnier(sr: &Tensor, gt: &Tensor, eps: f64) -> Result<f64> {
    same_shape(sr, gt)?;
    let e2 = eps * eps;
    let excess: f64 = sr
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| {
            let d2 = (a - b) * (a - b);
            if d2 == 0.0 {
                0.0
            } else {
                d2 / ((d2 + e2).sqrt() + eps.abs())
            }
        })
        .sum();
    Ok(eps.abs() + excess / sr.numel().max(1) as f64)
}

pub(crate) fn charbonnier_grad(sr: &Tensor, gt: &Tensor, eps: f64) -> Tensor {
    let e2 = eps * eps;
    let n = sr.numel().max(1) as f64;
    sr.zip_map(gt, |a, b| {
        let d = a - b;
        d / (d * d + e2).sqrt() / n
    })
    .expect("shapes checked in forward")
}

/// In-place unnormalized 2-D DFT of an `h x w` row-major plane.
/// `inverse` flips the sign of the exponent (no `1/N` factor).
fn dft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    if h == 0 || w == 0 {
        return;
    }
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    row_fft.process(buf);
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut col = vec![Complex64::default(); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
}

/// Unnormalized 2-D DFT of every `(n, c)` plane. Returns one spectrum per
/// plane, each row-major `h x w`.
pub fn dft2(t: &Tensor) -> Vec<Vec<Complex64>> {
    let s = t.shape();
    let mut planner = FftPlanner::new();
    let mut out = Vec::with_capacity(s.n * s.c);
    for n in 0..s.n {
        for c in 0..s.c {
            let mut buf: Vec<Complex64> = t.plane(n, c).iter().map(|&v| Complex64::new(v, 0.0)).collect();
            dft2_in_place(&mut buf, s.h, s.w, false, &mut planner);
            out.push(buf);
        }
    }
    out
}

fn spectrum_residual(sr: &Tensor, gt: &Tensor) -> Vec<Vec<Complex64>> {
    let diff = sr.zip_map(gt, |a, b| a - b).expect("shapes checked");
    dft2(&diff)
}

/// `sum |F(sr) - F(gt)|` over all planes and frequencies, divided by the
/// element count.
pub fn fft_loss(sr: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(sr, gt)?;
    // F is linear, so F(sr) - F(gt) = F(sr - gt)
    let total: f64 = spectrum_residual(sr, gt).iter().flatten().map(|z| z.norm()).sum();
    Ok(total / sr.numel().max(1) as f64)
}

/// d/dx of `sum |F(x) - G|` is `Re(F^-1_unnormalized(E / |E|))`.
pub(crate) fn fft_loss_grad(sr: &Tensor, gt: &Tensor) -> Tensor {
    let s = sr.shape();
    let norm = sr.numel().max(1) as f64;
    let mut planner = FftPlanner::new();
    let mut out = Tensor::zeros(s);
    for (i, mut spec) in spectrum_residual(sr, gt).into_iter().enumerate() {
        for z in spec.iter_mut() {
            let m = z.norm();
            *z = if m > 0.0 { *z / m } else { Complex64::default() };
        }
        dft2_in_place(&mut spec, s.h, s.w, true, &mut planner);
        let (n, c) = (i / s.c, i % s.c);
        for (dst, z) in out.plane_mut(n, c).iter_mut().zip(&spec) {
            *dst = z.re / norm;
        }
    }
    out
}

/// Loss components for one prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossValue {
    pub charbonnier: f64,
    pub fft: f64,
    pub total: f64,
}

pub fn total_loss(sr: &Tensor, gt: &Tensor, cfg: &LossConfig) -> Result<LossValue> {
    let charbonnier = charbonnier(sr, gt, cfg.eps)?;
    let fft = fft_loss(sr, gt)?;
    Ok(LossValue {
        charbonnier,
        fft,
        total: charbonnier + cfg.lambda * fft,
    })
}

/// Records the combined loss on a tape and returns `(total, charbonnier, fft)`.
pub fn total_loss_on_tape(tape: &mut GradTape, sr: Var, gt: &Tensor, cfg: &LossConfig) -> Result<(Var, Var, Var)> {
    let ch = tape.charbonnier(sr, gt, cfg.eps)?;
    let ff = tape.fft_l1(sr, gt)?;
    let weighted = tape.affine(ff, cfg.lambda, 0.0);
    let total = tape.add(ch, weighted)?;
    Ok((total, ch, ff))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charbonnier_cases() {
        let x = Tensor::from_fn((1, 3, 4, 4), |_, c, y, x| (c + y * x) as f64 * 0.1);
        assert_eq!(charbonnier(&x, &x, 1e-3).unwrap(), 1e-3);
        let y = x.map(|v| v + 3e-3);
        let v = charbonnier(&y, &x, 1e-3).unwrap();
        assert!((v - 1e-5f64.sqrt()).abs() < 1e-12);
        assert!((v - 3.16228e-3).abs() < 1e-8);
        assert!(charbonnier(&x, &Tensor::zeros((1, 3, 4, 3)), 1e-3).is_err());
    }

    #[test]
    fn fft_delta_example() {
        let gt = Tensor::zeros((1, 1, 2, 2));
        let mut sr = gt.clone();
        sr.set(0, 0, 1, 0, 0.25);
        assert!((fft_loss(&sr, &gt).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(fft_loss(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn total_composition() {
        let gt = Tensor::zeros((1, 1, 2, 2));
        let mut sr = gt.clone();
        sr.set(0, 0, 0, 1, 0.5);
        let cfg = LossConfig::default();
        let v = total_loss(&sr, &gt, &cfg).unwrap();
        assert_eq!(v.total, v.charbonnier + 0.1 * v.fft);
        let zero = LossConfig { lambda: 0.0, ..cfg };
        assert_eq!(total_loss(&sr, &gt, &zero).unwrap().total, v.charbonnier);
        assert_eq!(total_loss(&gt, &gt, &cfg).unwrap().total, cfg.eps);
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig { eps: 0.0, lambda: 0.1 }.validate().is_err());
        assert!(LossConfig {
            eps: 1e-3,
            lambda: -1.0
        }
        .validate()
        .is_err());
        assert!(LossConfig::default().validate().is_ok());
    }
}
