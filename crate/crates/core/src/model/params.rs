use std::collections::{BTreeMap, HashMap};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{GradTape, Shape, Tensor, Var};

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum ParamKind {
    /// Convolution weight `(c_out, c_in, k, k)`, fan-in `c_in * k * k`.
    Weight,
    /// Convolution bias `(c_out, 1, 1, 1)`, same bound as its weight.
    Bias { fan_in: usize },
    /// Layer-norm scale, initialized to one.
    Gamma,
    /// Layer-norm shift, initialized to zero.
    Beta,
}

/// Shape and initialization of one parameter.
#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub kind: ParamKind,
}

/// Layout of every parameter for a config, in a fixed order.
pub(crate) fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let c = cfg.channels;
    let mut specs = Vec::new();
    let mut conv = |name: String, c_out: usize, c_in: usize, k: usize| {
        specs.push(ParamSpec {
            name: format!("{name}.w"),
            shape: Shape::new(c_out, c_in, k, k),
            kind: ParamKind::Weight,
        });
        specs.push(ParamSpec {
            name: format!("{name}.b"),
            shape: Shape::new(c_out, 1, 1, 1),
            kind: ParamKind::Bias { fan_in: c_in * k * k },
        });
    };

    conv("fe.conv_in".into(), c, 3, 3);
    for i in 0..cfg.fe_blocks {
        conv(format!("fe.res{i}.conv1"), c, c, 3);
        conv(format!("fe.res{i}.conv2"), c, c, 3);
    }
    for dir in ["bwd", "fwd"] {
        conv(format!("prop.{dir}.align.conv1"), c, c, 3);
        conv(format!("prop.{dir}.align.conv2"), c, c, 3);
        conv(format!("prop.{dir}.conv_in"), c, 2 * c, 3);
        for i in 0..cfg.prop_blocks {
            conv(format!("prop.{dir}.res{i}.conv1"), c, c, 3);
            conv(format!("prop.{dir}.res{i}.conv2"), c, c, 3);
        }
    }
    conv("cfp.gru.conv_z".into(), c, 3 * c, 3);
    conv("cfp.gru.conv_w".into(), c, 3 * c, 3);
    conv("cfp.gru.conv_q".into(), c, 2 * c, 3);
    for i in 0..cfg.gcfb_count {
        conv(format!("cfp.gcfb{i}.expand"), 4 * c, 2 * c, 1);
        // depthwise: one 3x3 kernel per channel, fan-in 9
        conv(format!("cfp.gcfb{i}.dconv"), 4 * c, 1, 3);
        conv(format!("cfp.gcfb{i}.project"), c, 2 * c, 1);
    }
    conv("rec.conv_in".into(), c, 4 * c, 3);
    for i in 0..cfg.rec_blocks {
        conv(format!("rec.res{i}.conv1"), c, c, 3);
        conv(format!("rec.res{i}.conv2"), c, c, 3);
    }
    conv("rec.up1".into(), 4 * c, c, 3);
    conv("rec.up2".into(), 4 * c, c, 3);
    conv("rec.conv_out".into(), 3, c, 3);

    specs.push(ParamSpec {
        name: "cfp.ln.gamma".into(),
        shape: Shape::new(3 * c, 1, 1, 1),
        kind: ParamKind::Gamma,
    });
    specs.push(ParamSpec {
        name: "cfp.ln.beta".into(),
        shape: Shape::new(3 * c, 1, 1, 1),
        kind: ParamKind::Beta,
    });
    specs
}

/// Fan-in scaled uniform init, bound `sqrt(1 / fan_in)`. Each tensor draws
/// from its own stream `derive_seed(seed, "init/<name>")`.
pub(crate) fn init_params(cfg: &ModelConfig) -> ParamMap {
    param_specs(cfg)
        .into_iter()
        .map(|spec| {
            let t = match spec.kind {
                ParamKind::Gamma => Tensor::full(spec.shape, 1.0),
                ParamKind::Beta => Tensor::zeros(spec.shape),
                ParamKind::Weight | ParamKind::Bias { .. } => {
                    let fan_in = match spec.kind {
                        ParamKind::Bias { fan_in } => fan_in,
                        _ => spec.shape.c * spec.shape.h * spec.shape.w,
                    };
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let mut rng = seed::rng_for(cfg.seed, &format!("init/{}", spec.name));
                    Tensor::uniform(spec.shape, -bound, bound, &mut rng)
                }
            };
            (spec.name, t)
        })
        .collect()
}

/// Parameters recorded on a tape for one forward pass.
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    /// Records every parameter as a leaf. With `trainable = false` they are
    /// constants and no gradient bookkeeping happens.
    pub fn bind(tape: &mut GradTape, params: &ParamMap, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    /// Handles already on a tape, keyed by parameter name.
    pub fn from_vars(vars: HashMap<String, Var>) -> Self {
        ParamVars { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    /// Weight and bias of the convolution `prefix`.
    pub fn conv(&self, prefix: &str) -> Result<(Var, Var)> {
        Ok((self.get(&format!("{prefix}.w"))?, self.get(&format!("{prefix}.b"))?))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
