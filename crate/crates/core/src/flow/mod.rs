//! Dense optical flow: representation, Middlebury `.flo` files, a
//! pyramidal Lucas–Kanade estimator and constructed ground truth.
//!
//! A flow `s` between a reference frame `R` and a target frame `T` is the
//! per-pixel displacement such that `T(x + s(x)) ≈ R(x)`: warping the
//! target by the flow reproduces the reference.

mod flo;
mod lk;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{kernels, Shape, Tensor};

pub use flo::{read_flo, read_flo_from, write_flo, write_flo_to};
pub use lk::{estimate_flow, luma, FlowEstimate, LkParams};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    u: Vec<f64>,
    v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField {
            h,
            w,
            u: vec![0.0; h * w],
            v: vec![0.0; h * w],
        }
    }

    pub fn from_components(h: usize, w: usize, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if u.len() != h * w || v.len() != h * w {
            return Err(Error::shape(format!(
                "flow components of length {} and {} do not match {h}x{w}",
                u.len(),
                v.len()
            )));
        }
        Ok(FlowField { h, w, u, v })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Horizontal displacement, row-major.
    pub fn u(&self) -> &[f64] {
        &self.u
    }

    /// Vertical displacement, row-major.
    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let i = y * self.w + x;
        (self.u[i], self.v[i])
    }

    pub fn set(&mut self, y: usize, x: usize, (u, v): (f64, f64)) {
        let i = y * self.w + x;
        self.u[i] = u;
        self.v[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.u.iter().chain(&self.v).fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Mean `(u, v)` over pixels at least `margin` away from every border.
    pub fn interior_mean(&self, margin: usize) -> (f64, f64) {
        let (mut su, mut sv, mut k) = (0.0, 0.0, 0usize);
        for y in margin..self.h.saturating_sub(margin) {
            for x in margin..self.w.saturating_sub(margin) {
                let (u, v) = self.at(y, x);
                su += u;
                sv += v;
                k += 1;
            }
        }
        if k == 0 {
            (0.0, 0.0)
        } else {
            (su / k as f64, sv / k as f64)
        }
    }

    /// `(1, 2, h, w)` tensor with `u` in channel 0 and `v` in channel 1.
    pub fn to_tensor(&self) -> Tensor {
        let mut data = self.u.clone();
        data.extend_from_slice(&self.v);
        Tensor::from_vec(Shape::new(1, 2, self.h, self.w), data).expect("sized by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.n != 1 || s.c != 2 {
            return Err(Error::shape(format!("flow tensor must be (1, 2, h, w), got {s}")));
        }
        Ok(FlowField {
            h: s.h,
            w: s.w,
            u: t.plane(0, 0).to_vec(),
            v: t.plane(0, 1).to_vec(),
        })
    }

    /// Absolute sampling positions `x + s(x)`, shaped `(1, 2, h, w)`.
    pub fn sample_grid(&self) -> Tensor {
        let mut t = Tensor::zeros(Shape::new(1, 2, self.h, self.w));
        for y in 0..self.h {
            for x in 0..self.w {
                let (u, v) = self.at(y, x);
                t.set(0, 0, y, x, x as f64 + u);
                t.set(0, 1, y, x, y as f64 + v);
            }
        }
        t
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<FlowField> {
        FlowField::from_tensor(&self.to_tensor().crop(y0, x0, h, w)?)
    }
}

/// Sampling grid for a batch of flows, shaped `(n, 2, h, w)`.
pub fn batch_grid(flows: &[FlowField]) -> Result<Tensor> {
    let grids: Vec<Tensor> = flows.iter().map(FlowField::sample_grid).collect();
    Tensor::stack_batch(&grids)
}

/// Constant flow `(dx, dy)` everywhere.
pub fn gt_translation_flow(h: usize, w: usize, dx: f64, dy: f64) -> FlowField {
    FlowField {
        h,
        w,
        u: vec![dx; h * w],
        v: vec![dy; h * w],
    }
}

/// Resamples `image` (any channel count, batch of one) along `flow`.
pub fn warp_image(image: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let s = image.shape();
    if s.h != flow.h || s.w != flow.w || s.n != 1 {
        return Err(Error::shape(format!("cannot warp {s} by a {}x{} flow", flow.h, flow.w)));
    }
    kernels::bilinear_sample(image, &flow.sample_grid())
}

/// Where a sequence's flows come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    /// Pyramidal Lucas–Kanade on the LR frames.
    #[default]
    Estimate,
    /// `.flo` files listed in the sequence manifest.
    Files,
    /// Ground truth attached by the synthetic generator.
    GroundTruth,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translation_field() {
        let f = gt_translation_flow(4, 4, 1.0, 0.0);
        assert!(f.u().iter().all(|&u| u == 1.0));
        assert!(f.v().iter().all(|&v| v == 0.0));
        assert_eq!(gt_translation_flow(3, 2, 0.0, 0.0), FlowField::zeros(3, 2));
    }

    #[test]
    fn tensor_roundtrip() {
        let mut f = FlowField::zeros(3, 5);
        f.set(1, 2, (0.5, -1.25));
        assert_eq!(FlowField::from_tensor(&f.to_tensor()).unwrap(), f);
        assert_eq!(f.sample_grid().at(0, 0, 1, 2), 2.5);
        assert_eq!(f.sample_grid().at(0, 1, 1, 2), -0.25);
    }

    #[test]
    fn warp_undoes_integer_shift() {
        let img = Tensor::from_fn((1, 1, 8, 8), |_, _, y, x| ((x * 3 + y * 5) % 7) as f64);
        // target content moved right by 2
        let shifted = Tensor::from_fn((1, 1, 8, 8), |_, _, y, x| img.at(0, 0, y, x.saturating_sub(2)));
        let back = warp_image(&shifted, &gt_translation_flow(8, 8, 2.0, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..6 {
                assert!((back.at(0, 0, y, x) - img.at(0, 0, y, x)).abs() < 1e-6);
            }
        }
    }
}
