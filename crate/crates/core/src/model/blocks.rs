//! The network's building blocks as functions over a [`GradTape`].
//!
//! Every block takes the parameter handles it needs through a
//! [`ParamVars`] and a name prefix, so the same code serves training,
//! inference and gradient checks.

use super::ParamVars;
use crate::error::{Error, Result};
use crate::tensor::{kernels, GradTape, Shape, Tensor, Var};

/// Layer-norm epsilon inside the feedback ConvGRU.
pub const LN_EPS: f64 = 1e-5;

pub fn conv(tape: &mut GradTape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let (w, b) = pv.conv(prefix)?;
    tape.conv2d_same(x, w, Some(b))
}

/// `x + conv2(relu(conv1(x)))`.
pub fn res_block(tape: &mut GradTape, pv: &ParamVars, prefix: &str, x: Var) -> Result<Var> {
    let y = conv(tape, pv, &format!("{prefix}.conv1"), x)?;
    let y = tape.relu(y);
    let y = conv(tape, pv, &format!("{prefix}.conv2"), y)?;
    tape.add(x, y)
}

fn res_stack(tape: &mut GradTape, pv: &ParamVars, prefix: &str, blocks: usize, mut x: Var) -> Result<Var> {
    for i in 0..blocks {
        x = res_block(tape, pv, &format!("{prefix}.res{i}"), x)?;
    }
    Ok(x)
}

/// Resamples features along a flow given as `(n, 2, h, w)` displacements:
/// `out(x) = h(x + s(x))`, bilinear, clamped at the border. Gradients reach
/// the features only.
pub fn warp(tape: &mut GradTape, features: Var, flow: &Tensor) -> Result<Var> {
    let fs = tape.shape(features);
    let s = flow.shape();
    if s.n != fs.n || s.c != 2 || s.h != fs.h || s.w != fs.w {
        return Err(Error::shape(format!("warp: flow {s} does not match features {fs}")));
    }
    let mut grid = flow.clone();
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let ix = grid.index(n, 0, y, x);
                grid.data_mut()[ix] += x as f64;
                let iy = grid.index(n, 1, y, x);
                grid.data_mut()[iy] += y as f64;
            }
        }
    }
    tape.bilinear_sample(features, &grid)
}

/// Discriminative alignment correction: per element, keep the warped
/// feature when its magnitude is at least the shallow feature's.
pub fn dac(tape: &mut GradTape, warped: Var, shallow: Var) -> Result<Var> {
    tape.dac(warped, shallow)
}

/// One convolution then `fe_blocks` residual blocks.
pub fn feature_extract(tape: &mut GradTape, pv: &ParamVars, fe_blocks: usize, frame: Var) -> Result<Var> {
    let x = conv(tape, pv, "fe.conv_in", frame)?;
    res_stack(tape, pv, "fe", fe_blocks, x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn prefix(self) -> &'static str {
        match self {
            Direction::Forward => "prop.fwd",
            Direction::Backward => "prop.bwd",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Direction::Forward => "forward",
            Direction::Backward => "backward",
        }
    }
}

/// Flows consumed by one propagation direction.
///
/// For the forward branch `flows[t]` aligns frame `t - 1` onto frame `t`
/// (so `flows[0]` is unused); for the backward branch it aligns frame
/// `t + 1` onto frame `t` (so `flows[N - 1]` is unused). Entries are
/// `(n, 2, h, w)` displacement tensors.
pub struct BranchFlows<'a> {
    pub flows: Vec<Option<&'a Tensor>>,
}

/// Recurrent propagation in one direction:
/// `h_t = Prop(concat(x_t, dac(Align(warp(h_prev, s_t)), f_t)))`, with a
/// zero hidden state at the first visited frame.
pub fn propagate(
    tape: &mut GradTape,
    pv: &ParamVars,
    prop_blocks: usize,
    direction: Direction,
    inputs: &[Var],
    shallow: &[Var],
    flows: &BranchFlows<'_>,
) -> Result<Vec<Var>> {
    let n = inputs.len();
    if shallow.len() != n || flows.flows.len() != n {
        return Err(Error::shape(format!(
            "propagate: {} inputs, {} shallow features, {} flow slots",
            n,
            shallow.len(),
            flows.flows.len()
        )));
    }
    let prefix = direction.prefix();
    let order: Vec<usize> = match direction {
        Direction::Forward => (0..n).collect(),
        Direction::Backward => (0..n).rev().collect(),
    };
    let mut out: Vec<Option<Var>> = vec![None; n];
    let mut hidden: Option<Var> = None;
    for t in order {
        let warped = match hidden {
            None => tape.constant(Tensor::zeros(tape.shape(shallow[t]))),
            Some(h) => {
                let flow = flows.flows[t].ok_or(Error::MissingFlow {
                    timestep: t,
                    direction: direction.name(),
                })?;
                warp(tape, h, flow)?
            }
        };
        let corrected = res_block(tape, pv, &format!("{prefix}.align"), warped)?;
        let aligned = dac(tape, corrected, shallow[t])?;
        let x = tape.concat_channels(&[inputs[t], aligned])?;
        let x = conv(tape, pv, &format!("{prefix}.conv_in"), x)?;
        let h = res_stack(tape, pv, prefix, prop_blocks, x)?;
        out[t] = Some(h);
        hidden = Some(h);
    }
    Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
}

fn same_channels(tape: &GradTape, what: &str, vars: &[Var]) -> Result<Shape> {
    let first = tape.shape(vars[0]);
    for &v in &vars[1..] {
        if tape.shape(v) != first {
            return Err(Error::shape(format!(
                "{what}: input shapes differ ({} vs {first})",
                tape.shape(v)
            )));
        }
    }
    Ok(first)
}

/// Feedback ConvGRU:
///
/// ```text
/// v = LN(concat(r_prev, h_f, h_b_next))
/// z = sigmoid(conv_z(v)),  w = sigmoid(conv_w(v))
/// q = tanh(conv_q(concat(w * h_f, h_b_next)))
/// r = (1 - z) * h_f + z * q
/// ```
pub fn feedback_convgru(tape: &mut GradTape, pv: &ParamVars, r_prev: Var, h_f: Var, h_b_next: Var) -> Result<Var> {
    same_channels(tape, "feedback ConvGRU", &[r_prev, h_f, h_b_next])?;
    let cat = tape.concat_channels(&[r_prev, h_f, h_b_next])?;
    let v = tape.layer_norm(cat, pv.get("cfp.ln.gamma")?, pv.get("cfp.ln.beta")?, LN_EPS)?;
    let z = conv(tape, pv, "cfp.gru.conv_z", v)?;
    let z = tape.sigmoid(z);
    let w = conv(tape, pv, "cfp.gru.conv_w", v)?;
    let w = tape.sigmoid(w);
    let gated = tape.mul(w, h_f)?;
    let qin = tape.concat_channels(&[gated, h_b_next])?;
    let q = conv(tape, pv, "cfp.gru.conv_q", qin)?;
    let q = tape.tanh(q);
    let keep = tape.affine(z, -1.0, 1.0);
    let a = tape.mul(keep, h_f)?;
    let b = tape.mul(z, q)?;
    tape.add(a, b)
}

/// Gated collaborative feed-forward block:
///
/// ```text
/// e = expand_1x1(concat(r, h_b_next))        2C -> 4C
/// (r1, r2) = split(dconv_3x3(e))             4C -> 2C + 2C
/// g = gelu(r1) * r2                          2C
/// out = project_1x1(g) * gelu(h_b_next)      2C -> C
/// ```
pub fn gcfb(tape: &mut GradTape, pv: &ParamVars, prefix: &str, r: Var, h_b_next: Var) -> Result<Var> {
    let s = same_channels(tape, "GCFB", &[r, h_b_next])?;
    let c = s.c;
    let cat = tape.concat_channels(&[r, h_b_next])?;
    let (we, be) = pv.conv(&format!("{prefix}.expand"))?;
    let expanded = tape.conv1x1(cat, we, Some(be))?;
    let (wd, bd) = pv.conv(&format!("{prefix}.dconv"))?;
    let spatial = tape.depthwise_conv2d(expanded, wd, Some(bd), 1)?;
    let halves = tape.split_channels(spatial, &[2 * c, 2 * c])?;
    let gate = tape.gelu(halves[0]);
    let gated = tape.mul(gate, halves[1])?;
    let (wp, bp) = pv.conv(&format!("{prefix}.project"))?;
    let projected = tape.conv1x1(gated, wp, Some(bp))?;
    let future = tape.gelu(h_b_next);
    tape.mul(projected, future)
}

/// Collaborative feedback propagation over the whole clip, scanning
/// `t = 0..N`. Uses zero tensors for `r_{-1}` and `h_b[N]`.
pub fn cfp(tape: &mut GradTape, pv: &ParamVars, gcfb_count: usize, h_fwd: &[Var], h_bwd: &[Var]) -> Result<Vec<Var>> {
    if h_fwd.len() != h_bwd.len() {
        return Err(Error::shape(format!(
            "CFP branches differ in length: {} forward vs {} backward",
            h_fwd.len(),
            h_bwd.len()
        )));
    }
    let n = h_fwd.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let zero_shape = tape.shape(h_fwd[0]);
    let mut r_prev = tape.constant(Tensor::zeros(zero_shape));
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let future = if t + 1 < n {
            h_bwd[t + 1]
        } else {
            tape.constant(Tensor::zeros(zero_shape))
        };
        let mut r = feedback_convgru(tape, pv, r_prev, h_fwd[t], future)?;
        for k in 0..gcfb_count {
            r = gcfb(tape, pv, &format!("cfp.gcfb{k}"), r, future)?;
        }
        out.push(r);
        r_prev = r;
    }
    Ok(out)
}

/// `HR = R(concat(f, h_f, h_b, r)) + upsample_bilinear(lr, 4)` where `R` is
/// conv(4C -> C), residual blocks, two [conv(C -> 4C), pixel shuffle x2]
/// stages and conv(C -> 3).
#[allow(clippy::too_many_arguments)]
pub fn reconstruct(
    tape: &mut GradTape,
    pv: &ParamVars,
    rec_blocks: usize,
    f: Var,
    h_f: Var,
    h_b: Var,
    r: Var,
    lr_frame: &Tensor,
) -> Result<Var> {
    let fs = same_channels(tape, "reconstruct", &[f, h_f, h_b, r])?;
    let ls = lr_frame.shape();
    if !ls.same_nhw(&fs) || ls.c != 3 {
        return Err(Error::shape(format!(
            "reconstruct: LR frame {ls} must be 3-channel at the feature size {fs}"
        )));
    }
    let cat = tape.concat_channels(&[f, h_f, h_b, r])?;
    let mut x = conv(tape, pv, "rec.conv_in", cat)?;
    x = res_stack(tape, pv, "rec", rec_blocks, x)?;
    for stage in ["rec.up1", "rec.up2"] {
        x = conv(tape, pv, stage, x)?;
        x = tape.pixel_shuffle(x, 2)?;
    }
    let residual = conv(tape, pv, "rec.conv_out", x)?;
    let lr = tape.constant(lr_frame.clone());
    let grid = upsample_grid(ls, 4);
    let base = tape.bilinear_sample(lr, &grid)?;
    tape.add(residual, base)
}

/// Sampling grid for an integer-factor bilinear resize with half-pixel
/// centers.
pub(crate) fn upsample_grid(s: Shape, factor: usize) -> Tensor {
    Tensor::from_fn(Shape::new(s.n, 2, s.h * factor, s.w * factor), |_, c, y, x| {
        let v = if c == 0 { x } else { y };
        (v as f64 + 0.5) / factor as f64 - 0.5
    })
}

/// Bilinear x`factor` upsampling of a plain tensor.
pub fn upsample_bilinear(t: &Tensor, factor: usize) -> Tensor {
    kernels::upsample_bilinear(t, factor)
}
