use serde::{Deserialize, Serialize};

use super::FlowField;
use crate::error::{Error, Result};
use crate::tensor::{kernels, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LkParams {
    /// Pyramid levels, including full resolution.
    pub levels: usize,
    /// Gauss–Newton iterations per level.
    pub iters: usize,
    /// Side of the square aggregation window (odd).
    pub window: usize,
}

impl Default for LkParams {
    fn default() -> Self {
        LkParams {
            levels: 3,
            iters: 10,
            window: 5,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowEstimate {
    pub flow: FlowField,
    pub levels_used: usize,
    pub warnings: Vec<String>,
}

/// BT.601 luma of an RGB frame; single-channel frames pass through.
pub fn luma(frame: &Tensor) -> Result<Vec<f64>> {
    let s = frame.shape();
    if s.n != 1 {
        return Err(Error::shape(format!("expected a single frame, got {s}")));
    }
    match s.c {
        1 => Ok(frame.plane(0, 0).to_vec()),
        3 => {
            let (r, g, b) = (frame.plane(0, 0), frame.plane(0, 1), frame.plane(0, 2));
            Ok((0..s.plane())
                .map(|i| 0.299 * r[i] + 0.587 * g[i] + 0.114 * b[i])
                .collect())
        }
        c => Err(Error::shape(format!("flow estimation needs 1 or 3 channels, got {c}"))),
    }
}

/// Tikhonov term added to the structure tensor, relative to its mean trace.
const RIDGE: f64 = 1e-3;
/// Pixels whose smaller structure eigenvalue falls below this fraction of
/// the mean trace keep their flow (aperture problem).
const MIN_EIGEN: f64 = 1e-3;

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Plane {
    #[inline]
    fn get(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.px[y * self.w + x]
    }

    /// 5-tap binomial blur then 2x decimation.
    fn downsample(&self) -> Plane {
        const K: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
        let mut tmp = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                tmp[y * self.w + x] = (0..5)
                    .map(|k| K[k] * self.get(y as isize, x as isize + k as isize - 2))
                    .sum();
            }
        }
        let horiz = Plane {
            h: self.h,
            w: self.w,
            px: tmp,
        };
        let (h2, w2) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let mut px = Vec::with_capacity(h2 * w2);
        for y in 0..h2 {
            for x in 0..w2 {
                px.push(
                    (0..5)
                        .map(|k| K[k] * horiz.get(2 * y as isize + k as isize - 2, 2 * x as isize))
                        .sum(),
                );
            }
        }
        Plane { h: h2, w: w2, px }
    }

    /// Bilinear sample with the border replicated.
    fn sample(&self, y: f64, x: f64) -> f64 {
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let (y0, x0) = (y.floor(), x.floor());
        let (fy, fx) = (y - y0, x - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let top = self.get(y0, x0) * (1.0 - fx) + self.get(y0, x0 + 1) * fx;
        let bottom = self.get(y0 + 1, x0) * (1.0 - fx) + self.get(y0 + 1, x0 + 1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    /// Central differences, one-sided at the border.
    fn gradients(&self) -> (Vec<f64>, Vec<f64>) {
        let (h, w) = (self.h as isize, self.w as isize);
        let mut gx = vec![0.0; self.px.len()];
        let mut gy = vec![0.0; self.px.len()];
        for y in 0..h {
            for x in 0..w {
                let i = (y * w + x) as usize;
                let (xl, xr) = ((x - 1).max(0), (x + 1).min(w - 1));
                let (yu, yd) = ((y - 1).max(0), (y + 1).min(h - 1));
                if xr > xl {
                    gx[i] = (self.get(y, xr) - self.get(y, xl)) / (xr - xl) as f64;
                }
                if yd > yu {
                    gy[i] = (self.get(yd, x) - self.get(yu, x)) / (yd - yu) as f64;
                }
            }
        }
        (gx, gy)
    }
}

/// Box sum over a `(2r+1)^2` window, clamped to the image.
fn box_sum(src: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            tmp[y * w + x] = src[y * w + lo..=y * w + hi].iter().sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        for x in 0..w {
            out[y * w + x] = (lo..=hi).map(|yy| tmp[yy * w + x]).sum();
        }
    }
    out
}

/// 3x3 median of each flow component, window clamped to the field.
fn median3(flow: &FlowField) -> FlowField {
    let (h, w) = (flow.h, flow.w);
    let filter = |src: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        let mut win = Vec::with_capacity(9);
        for y in 0..h {
            for x in 0..w {
                win.clear();
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        win.push(src[yy * w + xx]);
                    }
                }
                win.sort_by(f64::total_cmp);
                let m = win.len();
                out[y * w + x] = if m % 2 == 1 {
                    win[m / 2]
                } else {
                    0.5 * (win[m / 2 - 1] + win[m / 2])
                };
            }
        }
        out
    };
    FlowField {
        h,
        w,
        u: filter(&flow.u),
        v: filter(&flow.v),
    }
}

/// Resize a flow to a finer level, scaling displacements accordingly.
fn upscale_flow(flow: &FlowField, h: usize, w: usize) -> FlowField {
    let sy = h as f64 / flow.height() as f64;
    let sx = w as f64 / flow.width() as f64;
    let coords = Tensor::from_fn(Shape::new(1, 2, h, w), |_, c, y, x| {
        if c == 0 {
            (x as f64 + 0.5) / sx - 0.5
        } else {
            (y as f64 + 0.5) / sy - 0.5
        }
    });
    let t = kernels::bilinear_sample(&flow.to_tensor(), &coords).expect("grid matches");
    let mut out = FlowField::from_tensor(&t).expect("two channels");
    out.u.iter_mut().for_each(|u| *u *= sx);
    out.v.iter_mut().for_each(|v| *v *= sy);
    out
}

/// Coarse-to-fine dense Lucas–Kanade. Returns `s` with
/// `target(x + s(x)) ≈ reference(x)`.
pub fn estimate_flow(reference: &Tensor, target: &Tensor, params: LkParams) -> Result<FlowEstimate> {
    if reference.shape() != target.shape() {
        return Err(Error::shape(format!(
            "flow frames differ in shape: {} vs {}",
            reference.shape(),
            target.shape()
        )));
    }
    if params.window.is_multiple_of(2) || params.window == 0 {
        return Err(Error::invalid(format!("LK window must be odd, got {}", params.window)));
    }
    let s = reference.shape();
    let (h, w) = (s.h, s.w);
    if h == 0 || w == 0 {
        return Ok(FlowEstimate {
            flow: FlowField::zeros(h, w),
            levels_used: 0,
            warnings: Vec::new(),
        });
    }

    let mut warnings = Vec::new();
    let mut levels = params.levels.max(1);
    while levels > 1 && h.min(w) < (1usize << levels) {
        levels -= 1;
    }
    if levels != params.levels.max(1) {
        let msg = format!(
            "{h}x{w} frame too small for {} pyramid levels; using {levels}",
            params.levels
        );
        log::warn!("{msg}");
        warnings.push(msg);
    }

    let mut ref_pyr = vec![Plane {
        h,
        w,
        px: luma(reference)?,
    }];
    let mut tgt_pyr = vec![Plane {
        h,
        w,
        px: luma(target)?,
    }];
    for _ in 1..levels {
        let r = ref_pyr.last().expect("non-empty").downsample();
        let t = tgt_pyr.last().expect("non-empty").downsample();
        ref_pyr.push(r);
        tgt_pyr.push(t);
    }

    let radius = params.window / 2;
    let mut flow = FlowField::zeros(ref_pyr[levels - 1].h, ref_pyr[levels - 1].w);
    for level in (0..levels).rev() {
        let rp = &ref_pyr[level];
        let tp = &tgt_pyr[level];
        if flow.height() != rp.h || flow.width() != rp.w {
            flow = upscale_flow(&flow, rp.h, rp.w);
        }
        let (gx, gy) = rp.gradients();
        let n = rp.px.len();
        let sq = |f: &dyn Fn(usize) -> f64| box_sum(&(0..n).map(f).collect::<Vec<_>>(), rp.h, rp.w, radius);
        let ixx = sq(&|i| gx[i] * gx[i]);
        let ixy = sq(&|i| gx[i] * gy[i]);
        let iyy = sq(&|i| gy[i] * gy[i]);
        // ridge and eigenvalue floor scale with the mean structure energy
        let energy = ixx.iter().zip(&iyy).map(|(a, b)| a + b).sum::<f64>() / n as f64;
        let ridge = RIDGE * energy;
        let r = radius as isize;
        let (hmax, wmax) = ((rp.h - 1) as f64, (rp.w - 1) as f64);
        for i in 0..n {
            let trace = ixx[i] + iyy[i];
            let gap = ((ixx[i] - iyy[i]).powi(2) + 4.0 * ixy[i] * ixy[i]).sqrt();
            if energy <= 0.0 || 0.5 * (trace - gap) < MIN_EIGEN * energy {
                continue;
            }
            let (py, px) = ((i / rp.w) as isize, (i % rp.w) as isize);
            let mut best = (f64::INFINITY, flow.u[i], flow.v[i]);
            for _ in 0..params.iters {
                // the whole window moves with this pixel's flow; samples that
                // land outside the target frame are left out
                let (u, v) = (flow.u[i], flow.v[i]);
                let (mut a, mut b, mut d, mut bx, mut by, mut ssd, mut count) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0usize);
                for qy in (py - r).max(0)..=(py + r).min(rp.h as isize - 1) {
                    for qx in (px - r).max(0)..=(px + r).min(rp.w as isize - 1) {
                        let (ty, tx) = (qy as f64 + v, qx as f64 + u);
                        if !(0.0..=hmax).contains(&ty) || !(0.0..=wmax).contains(&tx) {
                            continue;
                        }
                        let q = (qy * rp.w as isize + qx) as usize;
                        let it = tp.sample(ty, tx) - rp.px[q];
                        a += gx[q] * gx[q];
                        b += gx[q] * gy[q];
                        d += gy[q] * gy[q];
                        bx += gx[q] * it;
                        by += gy[q] * it;
                        ssd += it * it;
                        count += 1;
                    }
                }
                if count == 0 {
                    break;
                }
                let ssd = ssd / count as f64;
                if ssd < best.0 {
                    best = (ssd, u, v);
                }
                let (a, d) = (a + ridge, d + ridge);
                let det = a * d - b * b;
                let du = (-(d * bx - b * by) / det).clamp(-1.0, 1.0);
                let dv = (-(a * by - b * bx) / det).clamp(-1.0, 1.0);
                flow.u[i] += du;
                flow.v[i] += dv;
                if du.abs().max(dv.abs()) < 1e-4 {
                    best = (0.0, flow.u[i], flow.v[i]);
                    break;
                }
            }
            flow.u[i] = best.1;
            flow.v[i] = best.2;
        }
        flow = median3(&flow);
    }
    Ok(FlowEstimate {
        flow,
        levels_used: levels,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = Tensor::from_fn((1, 3, 24, 20), |_, c, y, x| {
            ((x as f64 * 0.7).sin() + (y as f64 * 0.4 + c as f64).cos()) * 0.3 + 0.5
        });
        let est = estimate_flow(&f, &f, LkParams::default()).unwrap();
        assert!(est.flow.max_abs() < 1e-6);
        assert!(est.warnings.is_empty());
    }

    #[test]
    fn small_frames_reduce_levels() {
        let f = Tensor::full((1, 1, 5, 6), 0.5);
        let est = estimate_flow(&f, &f, LkParams::default()).unwrap();
        assert_eq!(est.levels_used, 2);
        assert_eq!(est.warnings.len(), 1);
    }

    #[test]
    fn box_sum_clamps() {
        let v = vec![1.0; 9];
        let s = box_sum(&v, 3, 3, 1);
        assert_eq!(s, vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn rejects_mismatch() {
        assert!(estimate_flow(
            &Tensor::zeros((1, 1, 4, 4)),
            &Tensor::zeros((1, 1, 4, 5)),
            LkParams::default()
        )
        .is_err());
    }
}
