//! Forward and backward kernels on plain tensors.
//!
//! These are the numerical building blocks behind [`GradTape`](super::GradTape).
//! They never record anything; the tape calls the forward kernel and later
//! the matching backward kernel with the saved inputs.
//!
//! Parallel loops split work by output plane. Each plane is reduced in a
//! fixed order, so results are bit-identical regardless of thread count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Shape, Tensor};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// shifted plane helpers

/// `out[y][x] += wt * inp[y + dy][x + dx]` wherever both sides are in range.
#[inline]
fn accumulate_shifted(
    out: &mut [f64],
    (oh, ow): (usize, usize),
    inp: &[f64],
    (h, w): (usize, usize),
    (dy, dx): (isize, isize),
    wt: f64,
) {
    let x_lo = (-dx).max(0);
    let x_hi = (ow as isize).min(w as isize - dx);
    let y_lo = (-dy).max(0);
    let y_hi = (oh as isize).min(h as isize - dy);
    if x_lo >= x_hi || y_lo >= y_hi {
        return;
    }
    let len = (x_hi - x_lo) as usize;
    for y in y_lo..y_hi {
        let o0 = y as usize * ow + x_lo as usize;
        let i0 = (y + dy) as usize * w + (x_lo + dx) as usize;
        let o = &mut out[o0..o0 + len];
        let i = &inp[i0..i0 + len];
        for (a, b) in o.iter_mut().zip(i) {
            *a += wt * b;
        }
    }
}

/// `sum over (y, x) of g[y][x] * inp[y + dy][x + dx]`.
#[inline]
fn dot_shifted(
    g: &[f64],
    (oh, ow): (usize, usize),
    inp: &[f64],
    (h, w): (usize, usize),
    (dy, dx): (isize, isize),
) -> f64 {
    let x_lo = (-dx).max(0);
    let x_hi = (ow as isize).min(w as isize - dx);
    let y_lo = (-dy).max(0);
    let y_hi = (oh as isize).min(h as isize - dy);
    if x_lo >= x_hi || y_lo >= y_hi {
        return 0.0;
    }
    let len = (x_hi - x_lo) as usize;
    let mut acc = 0.0;
    for y in y_lo..y_hi {
        let g0 = y as usize * ow + x_lo as usize;
        let i0 = (y + dy) as usize * w + (x_lo + dx) as usize;
        acc += g[g0..g0 + len]
            .iter()
            .zip(&inp[i0..i0 + len])
            .map(|(a, b)| a * b)
            .sum::<f64>();
    }
    acc
}

// ---------------------------------------------------------------------------
// convolution

/// Geometry of a square-kernel convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub k: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    fn offset(&self, ky: usize, kx: usize) -> (isize, isize) {
        (ky as isize - self.padding as isize, kx as isize - self.padding as isize)
    }
}

fn kernel_geometry(input: Shape, weight: Shape, padding: usize) -> Result<ConvGeometry> {
    if weight.h != weight.w {
        return Err(Error::shape(format!(
            "kernel must be square, got {}x{}",
            weight.h, weight.w
        )));
    }
    let k = weight.h;
    if k.is_multiple_of(2) {
        return Err(Error::shape(format!("kernel size must be odd, got {k}")));
    }
    if input.h + 2 * padding < k || input.w + 2 * padding < k {
        return Err(Error::shape(format!(
            "input {}x{} with padding {padding} is smaller than kernel {k}",
            input.h, input.w
        )));
    }
    Ok(ConvGeometry {
        k,
        padding,
        out_h: input.h + 2 * padding + 1 - k,
        out_w: input.w + 2 * padding + 1 - k,
    })
}

fn check_bias(bias: Option<&Tensor>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.numel() != c_out {
            return Err(Error::shape(format!("bias has {} values, expected {c_out}", b.numel())));
        }
    }
    Ok(())
}

/// Validates a dense convolution and returns its geometry.
pub fn conv2d_geometry(input: Shape, weight: Shape, bias: Option<&Tensor>, padding: usize) -> Result<ConvGeometry> {
    if weight.c != input.c {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels but weight {weight} expects {}",
            input.c, weight.c
        )));
    }
    check_bias(bias, weight.n)?;
    kernel_geometry(input, weight, padding)
}

pub fn conv2d_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    let g = conv2d_geometry(is, ws, bias, padding)?;
    let (c_in, c_out, k) = (is.c, ws.n, g.k);
    let mut out = Tensor::zeros(Shape::new(is.n, c_out, g.out_h, g.out_w));
    let plane = g.out_h * g.out_w;
    let wdata = weight.data();
    out.data_mut().par_chunks_mut(plane).enumerate().for_each(|(idx, o)| {
        let (n, co) = (idx / c_out, idx % c_out);
        if let Some(b) = bias {
            o.fill(b.data()[co]);
        }
        for ci in 0..c_in {
            let src = input.plane(n, ci);
            let wbase = (co * c_in + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let wt = wdata[wbase + ky * k + kx];
                    if wt != 0.0 {
                        accumulate_shifted(o, (g.out_h, g.out_w), src, (is.h, is.w), g.offset(ky, kx), wt);
                    }
                }
            }
        }
    });
    Ok(out)
}

pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Option<Tensor>,
    pub bias: Option<Tensor>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
    grad_out: &Tensor,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (is, ws) = (input.shape(), weight.shape());
    let g = kernel_geometry(is, ws, padding).expect("validated in forward");
    let (c_in, c_out, k) = (is.c, ws.n, g.k);
    let (oh, ow) = (g.out_h, g.out_w);
    let wdata = weight.data();

    let grad_input = need.0.then(|| {
        let mut gi = Tensor::zeros(is);
        gi.data_mut()
            .par_chunks_mut(is.plane())
            .enumerate()
            .for_each(|(idx, dst)| {
                let (n, ci) = (idx / c_in, idx % c_in);
                for co in 0..c_out {
                    let go = grad_out.plane(n, co);
                    let wbase = (co * c_in + ci) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wt = wdata[wbase + ky * k + kx];
                            let (dy, dx) = g.offset(ky, kx);
                            accumulate_shifted(dst, (is.h, is.w), go, (oh, ow), (-dy, -dx), wt);
                        }
                    }
                }
            });
        gi
    });

    let grad_weight = need.1.then(|| {
        let mut gw = Tensor::zeros(ws);
        gw.data_mut()
            .par_chunks_mut(c_in * k * k)
            .enumerate()
            .for_each(|(co, dst)| {
                for ci in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = 0.0;
                            for n in 0..is.n {
                                acc += dot_shifted(
                                    grad_out.plane(n, co),
                                    (oh, ow),
                                    input.plane(n, ci),
                                    (is.h, is.w),
                                    g.offset(ky, kx),
                                );
                            }
                            dst[(ci * k + ky) * k + kx] = acc;
                        }
                    }
                }
            });
        gw
    });

    let grad_bias = need.2.then(|| channel_sums(grad_out));

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: grad_bias,
    }
}

/// Per-channel sums over batch and space, as a `(c, 1, 1, 1)` tensor.
fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut out = Tensor::zeros(Shape::new(s.c, 1, 1, 1));
    for c in 0..s.c {
        out.data_mut()[c] = (0..s.n).map(|n| t.plane(n, c).iter().sum::<f64>()).sum();
    }
    out
}

pub fn depthwise_geometry(input: Shape, weight: Shape, bias: Option<&Tensor>, padding: usize) -> Result<ConvGeometry> {
    if weight.n != input.c || weight.c != 1 {
        return Err(Error::shape(format!(
            "depthwise conv: input has {} channels, weight {weight} must be ({}, 1, k, k)",
            input.c, input.c
        )));
    }
    check_bias(bias, weight.n)?;
    kernel_geometry(input, weight, padding)
}

pub fn depthwise_forward(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, padding: usize) -> Result<Tensor> {
    let (is, ws) = (input.shape(), weight.shape());
    let g = depthwise_geometry(is, ws, bias, padding)?;
    let (c, k) = (is.c, g.k);
    let mut out = Tensor::zeros(Shape::new(is.n, c, g.out_h, g.out_w));
    let wdata = weight.data();
    out.data_mut()
        .par_chunks_mut(g.out_h * g.out_w)
        .enumerate()
        .for_each(|(idx, o)| {
            let (n, ch) = (idx / c, idx % c);
            if let Some(b) = bias {
                o.fill(b.data()[ch]);
            }
            let src = input.plane(n, ch);
            for ky in 0..k {
                for kx in 0..k {
                    let wt = wdata[ch * k * k + ky * k + kx];
                    accumulate_shifted(o, (g.out_h, g.out_w), src, (is.h, is.w), g.offset(ky, kx), wt);
                }
            }
        });
    Ok(out)
}

pub fn depthwise_backward(
    input: &Tensor,
    weight: &Tensor,
    padding: usize,
    grad_out: &Tensor,
    need: (bool, bool, bool),
) -> ConvGrads {
    let (is, ws) = (input.shape(), weight.shape());
    let g = kernel_geometry(is, ws, padding).expect("validated in forward");
    let (c, k) = (is.c, g.k);
    let (oh, ow) = (g.out_h, g.out_w);
    let wdata = weight.data();

    let grad_input = need.0.then(|| {
        let mut gi = Tensor::zeros(is);
        gi.data_mut()
            .par_chunks_mut(is.plane())
            .enumerate()
            .for_each(|(idx, dst)| {
                let (n, ch) = (idx / c, idx % c);
                let go = grad_out.plane(n, ch);
                for ky in 0..k {
                    for kx in 0..k {
                        let (dy, dx) = g.offset(ky, kx);
                        accumulate_shifted(
                            dst,
                            (is.h, is.w),
                            go,
                            (oh, ow),
                            (-dy, -dx),
                            wdata[ch * k * k + ky * k + kx],
                        );
                    }
                }
            });
        gi
    });

    let grad_weight = need.1.then(|| {
        let mut gw = Tensor::zeros(ws);
        gw.data_mut().par_chunks_mut(k * k).enumerate().for_each(|(ch, dst)| {
            for ky in 0..k {
                for kx in 0..k {
                    dst[ky * k + kx] = (0..is.n)
                        .map(|n| {
                            dot_shifted(
                                grad_out.plane(n, ch),
                                (oh, ow),
                                input.plane(n, ch),
                                (is.h, is.w),
                                g.offset(ky, kx),
                            )
                        })
                        .sum();
                }
            }
        });
        gw
    });

    ConvGrads {
        input: grad_input,
        weight: grad_weight,
        bias: need.2.then(|| channel_sums(grad_out)),
    }
}

// ---------------------------------------------------------------------------
// layer norm

/// Per-sample statistics saved by [`layer_norm_forward`].
#[derive(Clone, Debug)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Normalizes each sample over all of `(c, h, w)`, then applies a
/// per-channel affine transform.
pub fn layer_norm_forward(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, NormStats)> {
    let s = input.shape();
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer norm eps must be > 0, got {eps}")));
    }
    if gamma.numel() != s.c || beta.numel() != s.c {
        return Err(Error::shape(format!(
            "layer norm over {} channels needs gamma/beta of that length, got {} and {}",
            s.c,
            gamma.numel(),
            beta.numel()
        )));
    }
    let per = s.c * s.plane();
    let mut out = Tensor::zeros(s);
    let mut stats = NormStats {
        mean: Vec::with_capacity(s.n),
        rstd: Vec::with_capacity(s.n),
    };
    for n in 0..s.n {
        let x = &input.data()[n * per..(n + 1) * per];
        let mean = x.iter().sum::<f64>() / per as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let o = &mut out.data_mut()[n * per..(n + 1) * per];
        for c in 0..s.c {
            let (gc, bc) = (gamma.data()[c], beta.data()[c]);
            let range = c * s.plane()..(c + 1) * s.plane();
            for (ov, xv) in o[range.clone()].iter_mut().zip(&x[range]) {
                *ov = (xv - mean) * rstd * gc + bc;
            }
        }
        stats.mean.push(mean);
        stats.rstd.push(rstd);
    }
    Ok((out, stats))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub fn layer_norm_backward(
    input: &Tensor,
    gamma: &Tensor,
    stats: &NormStats,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let s = input.shape();
    let p = s.plane();
    let per = s.c * p;
    let mut gi = Tensor::zeros(s);
    let mut gg = Tensor::zeros(gamma.shape());
    let mut gb = Tensor::zeros(gamma.shape());
    for n in 0..s.n {
        let (mean, rstd) = (stats.mean[n], stats.rstd[n]);
        let x = &input.data()[n * per..(n + 1) * per];
        let dy = &grad_out.data()[n * per..(n + 1) * per];
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..s.c {
            let gc = gamma.data()[c];
            let (mut dgc, mut dbc) = (0.0, 0.0);
            for i in c * p..(c + 1) * p {
                let xhat = (x[i] - mean) * rstd;
                dgc += dy[i] * xhat;
                dbc += dy[i];
                let dxhat = dy[i] * gc;
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
            }
            gg.data_mut()[c] += dgc;
            gb.data_mut()[c] += dbc;
        }
        let m_dxhat = sum_dxhat / per as f64;
        let m_dxhat_xhat = sum_dxhat_xhat / per as f64;
        let g = &mut gi.data_mut()[n * per..(n + 1) * per];
        for c in 0..s.c {
            let gc = gamma.data()[c];
            for i in c * p..(c + 1) * p {
                let xhat = (x[i] - mean) * rstd;
                g[i] = rstd * (dy[i] * gc - m_dxhat - xhat * m_dxhat_xhat);
            }
        }
    }
    (gi, gg, gb)
}

// ---------------------------------------------------------------------------
// activations

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    /// Exact form `x * Phi(x)` with the Gaussian CDF.
    Gelu,
    Relu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Tanh => x.tanh(),
            Activation::Gelu => x * std_normal_cdf(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative given the input `x` and the output `y = apply(x)`.
    #[inline]
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Gelu => std_normal_cdf(x) + x * std_normal_pdf(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// permutations

pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let s = input.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::shape(format!(
            "pixel shuffle: {} channels not divisible by r^2 = {}",
            s.c,
            r * r
        )));
    }
    let c_out = s.c / (r * r);
    let os = Shape::new(s.n, c_out, s.h * r, s.w * r);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..c_out {
            let dst = out.plane_mut(n, c);
            for i in 0..r {
                for j in 0..r {
                    let src = input.plane(n, c * r * r + i * r + j);
                    for y in 0..s.h {
                        let orow = (y * r + i) * os.w;
                        for x in 0..s.w {
                            dst[orow + x * r + j] = src[y * s.w + x];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let s = input.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::shape(format!(
            "pixel unshuffle: {}x{} not divisible by {r}",
            s.h, s.w
        )));
    }
    let os = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = Tensor::zeros(os);
    for n in 0..s.n {
        for c in 0..s.c {
            let src = input.plane(n, c);
            for i in 0..r {
                for j in 0..r {
                    let dst = out.plane_mut(n, c * r * r + i * r + j);
                    for y in 0..os.h {
                        for x in 0..os.w {
                            dst[y * os.w + x] = src[(y * r + i) * s.w + x * r + j];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn concat_channels(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::shape("concat of an empty list"))?
        .shape();
    let mut c_total = 0;
    for t in items {
        if !t.shape().same_nhw(&first) {
            return Err(Error::shape(format!(
                "concat: spatial/batch mismatch {} vs {}",
                t.shape(),
                first
            )));
        }
        c_total += t.shape().c;
    }
    let p = first.plane();
    let mut data = Vec::with_capacity(first.n * c_total * p);
    for n in 0..first.n {
        for t in items {
            let c = t.shape().c;
            data.extend_from_slice(&t.data()[n * c * p..(n + 1) * c * p]);
        }
    }
    Tensor::from_vec(Shape::new(first.n, c_total, first.h, first.w), data)
}

pub fn split_channels(input: &Tensor, counts: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = counts.iter().sum();
    if total != input.shape().c {
        return Err(Error::shape(format!(
            "split counts {counts:?} do not sum to {} channels",
            input.shape().c
        )));
    }
    let mut start = 0;
    counts
        .iter()
        .map(|&len| {
            let t = input.narrow_channels(start, len);
            start += len;
            t
        })
        .collect()
}

// ---------------------------------------------------------------------------
// bilinear sampling

#[derive(Clone, Copy, Debug)]
struct Tap {
    idx: [usize; 4],
    wt: [f64; 4],
}

/// Bilinear taps for one sampling position, clamped to the border.
#[inline]
fn bilinear_tap(x: f64, y: f64, h: usize, w: usize) -> Tap {
    let clampf = |v: f64, hi: usize| {
        if v.is_nan() {
            0.0
        } else {
            v.clamp(0.0, (hi - 1) as f64)
        }
    };
    let x = clampf(x, w);
    let y = clampf(y, h);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    Tap {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wt: [(1.0 - fy) * (1.0 - fx), (1.0 - fy) * fx, fy * (1.0 - fx), fy * fx],
    }
}

fn sample_taps(coords: &Tensor, n: usize, h: usize, w: usize) -> Vec<Tap> {
    let xs = coords.plane(n, 0);
    let ys = coords.plane(n, 1);
    xs.iter().zip(ys).map(|(&x, &y)| bilinear_tap(x, y, h, w)).collect()
}

pub fn check_sample_coords(input: Shape, coords: Shape) -> Result<()> {
    if coords.c != 2 || coords.n != input.n {
        return Err(Error::shape(format!(
            "sampling grid {coords} must be ({}, 2, h, w)",
            input.n
        )));
    }
    if input.h == 0 || input.w == 0 {
        return Err(Error::shape("cannot sample an empty image"));
    }
    Ok(())
}

/// Samples `input` at absolute pixel positions `coords` (channel 0 is x,
/// channel 1 is y). Positions outside the image clamp to the border.
pub fn bilinear_sample(input: &Tensor, coords: &Tensor) -> Result<Tensor> {
    let (is, cs) = (input.shape(), coords.shape());
    check_sample_coords(is, cs)?;
    let mut out = Tensor::zeros(Shape::new(is.n, is.c, cs.h, cs.w));
    for n in 0..is.n {
        let taps = sample_taps(coords, n, is.h, is.w);
        for c in 0..is.c {
            let src = input.plane(n, c);
            let dst = out.plane_mut(n, c);
            for (d, t) in dst.iter_mut().zip(&taps) {
                *d = src[t.idx[0]] * t.wt[0]
                    + src[t.idx[1]] * t.wt[1]
                    + src[t.idx[2]] * t.wt[2]
                    + src[t.idx[3]] * t.wt[3];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`bilinear_sample`] with respect to its input.
pub fn bilinear_sample_backward(input_shape: Shape, coords: &Tensor, grad_out: &Tensor) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    for n in 0..input_shape.n {
        let taps = sample_taps(coords, n, input_shape.h, input_shape.w);
        for c in 0..input_shape.c {
            let go = grad_out.plane(n, c);
            let dst = gi.plane_mut(n, c);
            for (g, t) in go.iter().zip(&taps) {
                for k in 0..4 {
                    dst[t.idx[k]] += g * t.wt[k];
                }
            }
        }
    }
    gi
}

/// Bilinear resize by an integer factor with half-pixel centers
/// (`src = (dst + 0.5) / factor - 0.5`), clamped at the border.
pub fn upsample_bilinear(input: &Tensor, factor: usize) -> Tensor {
    let s = input.shape();
    let (oh, ow) = (s.h * factor, s.w * factor);
    let coords = Tensor::from_fn(Shape::new(s.n, 2, oh, ow), |_, c, y, x| {
        let v = if c == 0 { x } else { y };
        (v as f64 + 0.5) / factor as f64 - 0.5
    });
    bilinear_sample(input, &coords).expect("grid built to match")
}

// ---------------------------------------------------------------------------
// alignment correction

/// Pointwise: keep `warped` where `|warped| >= |shallow|`, else `shallow`.
pub fn dac_forward(warped: &Tensor, shallow: &Tensor) -> Result<Tensor> {
    warped.zip_map(shallow, |a, b| if a.abs() >= b.abs() { a } else { b })
}

/// Routes `grad_out` to whichever input was selected.
pub fn dac_backward(warped: &Tensor, shallow: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor) {
    let mut gw = Tensor::zeros(warped.shape());
    let mut gs = Tensor::zeros(warped.shape());
    for i in 0..warped.numel() {
        if warped.data()[i].abs() >= shallow.data()[i].abs() {
            gw.data_mut()[i] = grad_out.data()[i];
        } else {
            gs.data_mut()[i] = grad_out.data()[i];
        }
    }
    (gw, gs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn delta3(c_out: usize, c_in: usize) -> Tensor {
        Tensor::from_fn(
            (c_out, c_in, 3, 3),
            |o, i, y, x| {
                if o == i && y == 1 && x == 1 {
                    1.0
                } else {
                    0.0
                }
            },
        )
    }

    #[test]
    fn conv_scalar_product() {
        let x = Tensor::scalar(1.0);
        let w = Tensor::scalar(2.0);
        let y = conv2d_forward(&x, &w, None, 0).unwrap();
        assert_eq!(y.data(), &[2.0]);
    }

    #[test]
    fn conv_delta_is_identity() {
        let x = Tensor::from_fn((2, 3, 5, 4), |n, c, y, x| ((n * 7 + c * 3 + y * 5 + x) as f64).sin());
        let y = conv2d_forward(&x, &delta3(3, 3), None, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_ones_counts_overlap() {
        let x = Tensor::full((1, 1, 3, 3), 1.0);
        let w = Tensor::full((1, 1, 3, 3), 1.0);
        let y = conv2d_forward(&x, &w, None, 1).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes() {
        let x = Tensor::zeros((1, 2, 4, 4));
        assert!(matches!(
            conv2d_forward(&x, &Tensor::zeros((1, 3, 3, 3)), None, 1),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            conv2d_forward(&x, &Tensor::zeros((1, 2, 2, 2)), None, 0),
            Err(Error::Shape(_))
        ));
        assert!(conv2d_forward(&x, &Tensor::zeros((3, 2, 3, 3)), Some(&Tensor::zeros((2, 1, 1, 1))), 1).is_err());
    }

    #[test]
    fn conv_valid_padding_shrinks() {
        let x = Tensor::full((1, 1, 5, 6), 1.0);
        let y = conv2d_forward(&x, &Tensor::full((2, 1, 3, 3), 1.0), None, 0).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 4));
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn depthwise_per_channel_delta() {
        let x = Tensor::from_fn((1, 2, 4, 4), |_, c, y, x| (c * 16 + y * 4 + x) as f64);
        let w = Tensor::from_fn(
            (2, 1, 3, 3),
            |c, _, y, x| {
                if y == 1 && x == 1 {
                    [1.0, 3.0][c]
                } else {
                    0.0
                }
            },
        );
        let y = depthwise_forward(&x, &w, None, 1).unwrap();
        assert_eq!(y.plane(0, 0), x.plane(0, 0));
        let tripled: Vec<f64> = x.plane(0, 1).iter().map(|v| v * 3.0).collect();
        assert_eq!(y.plane(0, 1), tripled.as_slice());
    }

    #[test]
    fn depthwise_zero_weights() {
        let x = Tensor::full((1, 3, 4, 4), 2.5);
        let y = depthwise_forward(&x, &Tensor::zeros((3, 1, 3, 3)), Some(&Tensor::zeros((3, 1, 1, 1))), 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(depthwise_forward(&x, &Tensor::zeros((2, 1, 3, 3)), None, 1).is_err());
    }

    #[test]
    fn conv1x1_channel_sum_and_identity() {
        let x = Tensor::from_fn((1, 2, 2, 2), |_, c, y, x| (c * 10 + y * 2 + x) as f64);
        let w = Tensor::full((1, 2, 1, 1), 1.0);
        let y = conv2d_forward(&x, &w, None, 0).unwrap();
        assert_eq!(y.data(), &[10.0, 12.0, 14.0, 16.0]);
        let eye = Tensor::from_fn((2, 2, 1, 1), |o, i, _, _| if o == i { 1.0 } else { 0.0 });
        assert_eq!(conv2d_forward(&x, &eye, None, 0).unwrap(), x);
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full((1, 1, 1, 1), 1.0);
        let zero = Tensor::zeros((1, 1, 1, 1));
        let (y, _) = layer_norm_forward(&Tensor::full((1, 1, 3, 3), 4.2), &one, &zero, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));

        let x = Tensor::from_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let (y, _) = layer_norm_forward(&x, &one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);

        assert!(matches!(
            layer_norm_forward(&x, &one, &zero, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn activation_values() {
        assert_eq!(Activation::Sigmoid.apply(0.0), 0.5);
        assert_eq!(Activation::Tanh.apply(0.0), 0.0);
        assert_eq!(Activation::Gelu.apply(0.0), 0.0);
        assert_eq!(Activation::Relu.apply(-1.0), 0.0);
        assert_eq!(Activation::Sigmoid.derivative(0.0, 0.5), 0.25);
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn pixel_shuffle_definition() {
        let x = Tensor::from_vec((1, 4, 1, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = pixel_shuffle(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(y.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            pixel_shuffle(&Tensor::zeros((1, 64, 4, 4)), 2).unwrap().shape(),
            Shape::new(1, 16, 8, 8)
        );
        assert!(pixel_shuffle(&Tensor::zeros((1, 3, 2, 2)), 2).is_err());
    }

    #[test]
    fn concat_split() {
        let a = Tensor::full((1, 2, 2, 2), 1.0);
        let b = Tensor::full((1, 3, 2, 2), 2.0);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), Shape::new(1, 5, 2, 2));
        let parts = split_channels(&c, &[2, 3]).unwrap();
        assert_eq!(parts, vec![a.clone(), b]);
        assert!(concat_channels(&[&a, &Tensor::zeros((1, 1, 3, 2))]).is_err());
        assert!(split_channels(&c, &[2, 2]).is_err());
    }

    #[test]
    fn bilinear_cases() {
        let img = Tensor::from_vec((1, 1, 1, 2), vec![0.0, 1.0]).unwrap();
        let mid = Tensor::from_vec((1, 2, 1, 1), vec![0.5, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&img, &mid).unwrap().data(), &[0.5]);
        let far = Tensor::from_vec((1, 2, 1, 1), vec![-3.7, 0.0]).unwrap();
        assert_eq!(bilinear_sample(&img, &far).unwrap().data(), &[0.0]);

        let x = Tensor::from_fn((2, 3, 4, 5), |n, c, y, x| ((n + 2 * c + 3 * y + 5 * x) as f64).cos());
        let grid = Tensor::from_fn((2, 2, 4, 5), |_, c, y, x| if c == 0 { x as f64 } else { y as f64 });
        assert_eq!(bilinear_sample(&x, &grid).unwrap(), x);
    }

    #[test]
    fn dac_selection() {
        let w = Tensor::from_vec((1, 1, 1, 3), vec![0.2, 0.7, -0.4]).unwrap();
        let s = Tensor::from_vec((1, 1, 1, 3), vec![-0.5, 0.1, 0.4]).unwrap();
        let out = dac_forward(&w, &s).unwrap();
        assert_eq!(out.data(), &[-0.5, 0.7, -0.4]);
    }
}
