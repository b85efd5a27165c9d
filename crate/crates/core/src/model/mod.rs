//! The super-resolution network.
//!
//! Per clip: shallow features from every LR frame; `prop_rounds` rounds of
//! backward then forward recurrent propagation with flow warping and
//! discriminative alignment correction; collaborative feedback propagation
//! fusing forward features with the next frame's backward features; and a
//! pixel-shuffle reconstruction head added to a bilinear upsample of the
//! input.

pub mod blocks;
mod checkpoint;
mod config;
mod params;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::tensor::{GradTape, Tensor, Var};

pub use blocks::Direction;
pub use checkpoint::{load_checkpoint, read_checkpoint_from, save_checkpoint, write_checkpoint_to};
pub use config::ModelConfig;
pub use params::{ParamMap, ParamVars};

use blocks::BranchFlows;

/// Flows for a clip (or a batch of equally long clips).
///
/// `forward[t]` has frame `t` as reference and frame `t + 1` as target, so
/// warping frame `t + 1` by it reproduces frame `t`; `backward[t]` is the
/// reverse pair. Each entry is an `(n, 2, h, w)` tensor of `(u, v)`
/// displacements. Both lists hold `N - 1` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipFlows {
    pub forward: Vec<Tensor>,
    pub backward: Vec<Tensor>,
}

impl ClipFlows {
    pub fn from_fields(forward: &[FlowField], backward: &[FlowField]) -> Self {
        ClipFlows {
            forward: forward.iter().map(FlowField::to_tensor).collect(),
            backward: backward.iter().map(FlowField::to_tensor).collect(),
        }
    }

    /// Zero motion between every pair of an `n_frames` clip.
    pub fn zeros(batch: usize, n_frames: usize, h: usize, w: usize) -> Self {
        let z = Tensor::zeros((batch, 2, h, w));
        let k = n_frames.saturating_sub(1);
        ClipFlows {
            forward: vec![z.clone(); k],
            backward: vec![z; k],
        }
    }

    /// Stack per-clip flows along the batch axis.
    pub fn stack(items: &[ClipFlows]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("cannot stack zero clips"))?;
        let k = first.forward.len();
        if items.iter().any(|c| c.forward.len() != k || c.backward.len() != k) {
            return Err(Error::shape("clips in a batch have different flow counts"));
        }
        let gather = |pick: fn(&ClipFlows) -> &Vec<Tensor>| -> Result<Vec<Tensor>> {
            (0..k)
                .map(|t| {
                    let parts: Vec<Tensor> = items.iter().map(|c| pick(c)[t].clone()).collect();
                    Tensor::stack_batch(&parts)
                })
                .collect()
        };
        Ok(ClipFlows {
            forward: gather(|c| &c.forward)?,
            backward: gather(|c| &c.backward)?,
        })
    }

    /// Flow slots for one propagation branch of an `n`-frame clip.
    fn branch(&self, direction: Direction, n: usize) -> BranchFlows<'_> {
        let flows = (0..n)
            .map(|t| match direction {
                // align frame t-1 onto t: reference t, target t-1
                Direction::Forward => t.checked_sub(1).and_then(|p| self.backward.get(p)),
                // align frame t+1 onto t: reference t, target t+1
                Direction::Backward => self.forward.get(t),
            })
            .collect();
        BranchFlows { flows }
    }
}

/// Intermediate features of one forward pass, kept for inspection.
pub struct ForwardTrace {
    pub shallow: Vec<Var>,
    pub h_fwd: Vec<Var>,
    pub h_bwd: Vec<Var>,
    pub refined: Vec<Var>,
    pub outputs: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CfdModel {
    config: ModelConfig,
    params: ParamMap,
}

impl CfdModel {
    /// Freshly initialized parameters for `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(CfdModel {
            config,
            params: params::init_params(&config),
        })
    }

    /// Wraps existing parameters, checking names and shapes against the
    /// layout implied by `config`.
    pub fn from_params(config: ModelConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        let specs = params::param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for spec in &specs {
            match params.get(&spec.name) {
                Some(t) if t.shape() == spec.shape => {}
                Some(t) => {
                    return Err(Error::shape(format!(
                        "parameter `{}` has shape {}, expected {}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::invalid(format!("missing parameter `{}`", spec.name))),
            }
        }
        Ok(CfdModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    /// Sets every parameter, layer-norm scale included, to zero.
    pub fn zero_params(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Records a full forward pass on `tape`. `frames[t]` is an
    /// `(n, 3, h, w)` batch of LR frames in `[0, 1]`.
    pub fn forward_traced(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        frames: &[Tensor],
        flows: &ClipFlows,
    ) -> Result<ForwardTrace> {
        let n = frames.len();
        if n == 0 {
            return Err(Error::invalid("model forward needs at least one frame"));
        }
        let s0 = frames[0].shape();
        if s0.c != 3 {
            return Err(Error::shape(format!("frames must have 3 channels, got {s0}")));
        }
        if let Some(f) = frames.iter().find(|f| f.shape() != s0) {
            return Err(Error::shape(format!("frame shapes differ: {} vs {s0}", f.shape())));
        }
        let cfg = &self.config;

        let mut shallow = Vec::with_capacity(n);
        for frame in frames {
            let x = tape.constant(frame.clone());
            shallow.push(blocks::feature_extract(tape, pv, cfg.fe_blocks, x)?);
        }

        let bwd_flows = flows.branch(Direction::Backward, n);
        let fwd_flows = flows.branch(Direction::Forward, n);
        let mut h_bwd = shallow.clone();
        let mut h_fwd = shallow.clone();
        for _ in 0..cfg.prop_rounds {
            h_bwd = blocks::propagate(
                tape,
                pv,
                cfg.prop_blocks,
                Direction::Backward,
                &h_bwd,
                &shallow,
                &bwd_flows,
            )?;
            h_fwd = blocks::propagate(
                tape,
                pv,
                cfg.prop_blocks,
                Direction::Forward,
                &h_fwd,
                &shallow,
                &fwd_flows,
            )?;
        }

        let refined = blocks::cfp(tape, pv, cfg.gcfb_count, &h_fwd, &h_bwd)?;

        let mut outputs = Vec::with_capacity(n);
        for t in 0..n {
            outputs.push(blocks::reconstruct(
                tape,
                pv,
                cfg.rec_blocks,
                shallow[t],
                h_fwd[t],
                h_bwd[t],
                refined[t],
                &frames[t],
            )?);
        }
        Ok(ForwardTrace {
            shallow,
            h_fwd,
            h_bwd,
            refined,
            outputs,
        })
    }

    pub fn forward(
        &self,
        tape: &mut GradTape,
        pv: &ParamVars,
        frames: &[Tensor],
        flows: &ClipFlows,
    ) -> Result<Vec<Var>> {
        Ok(self.forward_traced(tape, pv, frames, flows)?.outputs)
    }

    /// Inference without gradient bookkeeping. Returns one `(n, 3, 4h, 4w)`
    /// tensor per input frame.
    pub fn infer(&self, frames: &[Tensor], flows: &ClipFlows) -> Result<Vec<Tensor>> {
        let mut tape = GradTape::new();
        let pv = ParamVars::bind(&mut tape, &self.params, false);
        let outs = self.forward(&mut tape, &pv, frames, flows)?;
        Ok(outs.into_iter().map(|v| tape.value(v).clone()).collect())
    }
}
