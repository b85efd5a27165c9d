//! Finite-difference checks of every differentiable operation and block.
//!
//! Each trial draws random inputs, a random output projection `R` and a
//! random direction `d` over all differentiable inputs, then compares the
//! directional derivative `<grad f, d>` of `f = sum(R * out)` against the
//! central difference `(f(x + h d) - f(x - h d)) / 2h`. The full-model
//! check instead compares individual parameter coordinates.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::loss::{total_loss_on_tape, LossConfig};
use crate::model::blocks::{self, BranchFlows, Direction};
use crate::model::{CfdModel, ClipFlows, ModelConfig, ParamVars};
use crate::seed;
use crate::tensor::{Activation, GradTape, Shape, Tensor, Var};

pub const TRIALS: usize = 20;
/// Central-difference step.
pub const STEP: f64 = 1e-4;
pub const TOL_ELEMENTWISE: f64 = 1e-4;
pub const TOL_BLOCK: f64 = 1e-3;
pub const TOL_MODEL: f64 = 1e-2;
/// Parameter coordinates probed by the full-model check.
pub const MODEL_COORDS: usize = 25;
/// Give up on a check after this many discarded trials.
pub const MAX_REDRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    /// Trials discarded because the probe straddled a non-smooth point.
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub step: f64,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>6} {:>7} {:>12} {:>9}  result",
            "check", "trials", "redrawn", "max_rel_err", "tol"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<28} {:>6} {:>7} {:>12.3e} {:>9.0e}  {}",
                c.name,
                c.trials,
                c.redrawn,
                c.max_rel_err,
                c.tolerance,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        let failed = self.checks.iter().filter(|c| !c.passed).count();
        let _ = writeln!(s, "{} checks, {failed} failed", self.checks.len());
        s
    }

    pub fn get(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Random differentiable inputs plus constants for one trial.
pub struct Trial {
    pub vars: Vec<(String, Tensor)>,
    pub consts: Vec<Tensor>,
}

type Bound = HashMap<String, Var>;
type Build = dyn Fn(&mut GradTape, &Bound, &[Tensor]) -> Result<Var>;

/// One operation under test.
pub struct Case {
    pub name: String,
    pub tolerance: f64,
    generate: Box<dyn Fn(&mut ChaCha8Rng) -> Trial>,
    build: Box<Build>,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        tolerance: f64,
        generate: impl Fn(&mut ChaCha8Rng) -> Trial + 'static,
        build: impl Fn(&mut GradTape, &Bound, &[Tensor]) -> Result<Var> + 'static,
    ) -> Self {
        Case {
            name: name.into(),
            tolerance,
            generate: Box::new(generate),
            build: Box::new(build),
        }
    }

    fn run(&self, trial: &Trial, values: &[Tensor], trainable: bool) -> Result<(GradTape, Var, Bound)> {
        let mut tape = GradTape::new();
        let bound: Bound = trial
            .vars
            .iter()
            .zip(values)
            .map(|((name, _), v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (name.clone(), var)
            })
            .collect();
        let out = (self.build)(&mut tape, &bound, &trial.consts)?;
        Ok((tape, out, bound))
    }

    fn projected(&self, trial: &Trial, values: &[Tensor], r: &Tensor) -> Result<(f64, Vec<bool>)> {
        let (tape, out, _) = self.run(trial, values, false)?;
        let f = tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((f, tape.selection_signature()))
    }

    /// Relative error of one directional-derivative trial, or `None` when
    /// the probe points straddle a DAC or ReLU switch.
    pub fn trial_error(&self, rng: &mut ChaCha8Rng) -> Result<Option<f64>> {
        let trial = (self.generate)(rng);
        let values: Vec<Tensor> = trial.vars.iter().map(|(_, t)| t.clone()).collect();
        let (mut tape, out, bound) = self.run(&trial, &values, true)?;
        let r = Tensor::uniform(tape.shape(out), -1.0, 1.0, rng);
        let rv = tape.constant(r.clone());
        let proj = tape.mul(out, rv)?;
        let f = tape.sum(proj);
        let grads = tape.backward(f)?;
        let dirs: Vec<Tensor> = values
            .iter()
            .map(|v| Tensor::uniform(v.shape(), -1.0, 1.0, rng))
            .collect();
        let mut analytic = 0.0;
        for ((name, _), d) in trial.vars.iter().zip(&dirs) {
            if let Some(g) = grads.get(bound[name]) {
                analytic += g.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let shifted = |sign: f64| -> Vec<Tensor> {
            values
                .iter()
                .zip(&dirs)
                .map(|(v, d)| v.zip_map(d, |a, b| a + sign * STEP * b).expect("same shape"))
                .collect()
        };
        let (hi, sig_hi) = self.projected(&trial, &shifted(1.0), &r)?;
        let (lo, sig_lo) = self.projected(&trial, &shifted(-1.0), &r)?;
        let sig = tape.selection_signature();
        if sig != sig_hi || sig != sig_lo {
            return Ok(None);
        }
        let numeric = (hi - lo) / (2.0 * STEP);
        Ok(Some(relative_error(analytic, numeric)))
    }
}

/// `|a - n| / max(|a|, |n|)`, or the absolute error when both are below
/// `1e-9`.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-9 {
        (a - n).abs()
    } else {
        (a - n).abs() / scale
    }
}

pub fn run_case(case: &Case, trials: usize, root: u64) -> Result<CheckResult> {
    let mut rng = seed::rng_for(root, &format!("gradcheck/{}", case.name));
    let mut worst: f64 = 0.0;
    let (mut done, mut redrawn) = (0, 0);
    while done < trials && redrawn < MAX_REDRAWS {
        match case.trial_error(&mut rng)? {
            Some(e) => {
                worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
                done += 1;
            }
            None => redrawn += 1,
        }
    }
    if done < trials {
        worst = f64::INFINITY;
    }
    Ok(CheckResult {
        name: case.name.clone(),
        trials: done,
        redrawn,
        max_rel_err: worst,
        tolerance: case.tolerance,
        passed: worst < case.tolerance,
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

fn vars(list: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    list.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Randomly initialized parameters of a small model, with layer-norm
/// affine terms moved off their identity values.
fn block_params(rng: &mut ChaCha8Rng, cfg: ModelConfig) -> Vec<(String, Tensor)> {
    let model = CfdModel::new(ModelConfig { seed: rng.gen(), ..cfg }).expect("valid config");
    model
        .params()
        .iter()
        .map(|(name, t)| {
            let t = match name.as_str() {
                "cfp.ln.gamma" => rand_t(rng, t.shape(), 0.5, 1.5),
                "cfp.ln.beta" => rand_t(rng, t.shape(), -0.5, 0.5),
                _ => t.clone(),
            };
            (name.clone(), t)
        })
        .collect()
}

fn pv(bound: &Bound) -> ParamVars {
    ParamVars::from_vars(bound.clone())
}

fn unary(name: &str, tol: f64, shape: Shape, lo: f64, hi: f64, f: fn(&mut GradTape, Var) -> Result<Var>) -> Case {
    Case::new(
        name,
        tol,
        move |rng| Trial {
            vars: vars(vec![("x", rand_t(rng, shape, lo, hi))]),
            consts: vec![],
        },
        move |tape, b, _| f(tape, b["x"]),
    )
}

fn binary(name: &str, tol: f64, f: fn(&mut GradTape, Var, Var) -> Result<Var>) -> Case {
    let shape = Shape::new(2, 3, 4, 5);
    Case::new(
        name,
        tol,
        move |rng| Trial {
            vars: vars(vec![
                ("a", rand_t(rng, shape, -1.0, 1.0)),
                ("b", rand_t(rng, shape, -1.0, 1.0)),
            ]),
            consts: vec![],
        },
        move |tape, b, _| f(tape, b["a"], b["b"]),
    )
}

/// Primitive tape operations.
pub fn primitive_cases() -> Vec<Case> {
    let e = TOL_ELEMENTWISE;
    let s = Shape::new(2, 3, 4, 5);
    let mut cases = vec![
        Case::new(
            "conv2d_3x3",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![
                    ("x", rand_t(rng, (2, 3, 5, 6), -1.0, 1.0)),
                    ("w", rand_t(rng, (4, 3, 3, 3), -0.5, 0.5)),
                    ("b", rand_t(rng, (4, 1, 1, 1), -0.5, 0.5)),
                ]),
                consts: vec![],
            },
            |tape, b, _| tape.conv2d(b["x"], b["w"], Some(b["b"]), 1),
        ),
        Case::new(
            "conv2d_valid",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![
                    ("x", rand_t(rng, (1, 2, 6, 5), -1.0, 1.0)),
                    ("w", rand_t(rng, (3, 2, 3, 3), -0.5, 0.5)),
                ]),
                consts: vec![],
            },
            |tape, b, _| tape.conv2d(b["x"], b["w"], None, 0),
        ),
        Case::new(
            "conv1x1",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![
                    ("x", rand_t(rng, (2, 4, 3, 5), -1.0, 1.0)),
                    ("w", rand_t(rng, (6, 4, 1, 1), -0.5, 0.5)),
                    ("b", rand_t(rng, (6, 1, 1, 1), -0.5, 0.5)),
                ]),
                consts: vec![],
            },
            |tape, b, _| tape.conv1x1(b["x"], b["w"], Some(b["b"])),
        ),
        Case::new(
            "depthwise_conv2d",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![
                    ("x", rand_t(rng, (2, 4, 5, 6), -1.0, 1.0)),
                    ("w", rand_t(rng, (4, 1, 3, 3), -0.5, 0.5)),
                    ("b", rand_t(rng, (4, 1, 1, 1), -0.5, 0.5)),
                ]),
                consts: vec![],
            },
            |tape, b, _| tape.depthwise_conv2d(b["x"], b["w"], Some(b["b"]), 1),
        ),
        Case::new(
            "layer_norm",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![
                    ("x", rand_t(rng, (2, 6, 4, 5), -1.0, 1.0)),
                    ("g", rand_t(rng, (6, 1, 1, 1), 0.5, 1.5)),
                    ("b", rand_t(rng, (6, 1, 1, 1), -0.5, 0.5)),
                ]),
                consts: vec![],
            },
            |tape, b, _| tape.layer_norm(b["x"], b["g"], b["b"], 1e-5),
        ),
        unary("sigmoid", e, s, -4.0, 4.0, |t, x| {
            Ok(t.activation(x, Activation::Sigmoid))
        }),
        unary("tanh", e, s, -3.0, 3.0, |t, x| Ok(t.activation(x, Activation::Tanh))),
        unary("gelu", e, s, -3.0, 3.0, |t, x| Ok(t.activation(x, Activation::Gelu))),
        unary("relu", e, s, -1.0, 1.0, |t, x| Ok(t.activation(x, Activation::Relu))),
        unary("affine", e, s, -1.0, 1.0, |t, x| Ok(t.affine(x, -0.7, 0.2))),
        unary("sum", e, s, -1.0, 1.0, |t, x| Ok(t.sum(x))),
        unary("mean", e, s, -1.0, 1.0, |t, x| Ok(t.mean(x))),
        unary("pixel_shuffle", e, Shape::new(1, 8, 3, 4), -1.0, 1.0, |t, x| {
            t.pixel_shuffle(x, 2)
        }),
        unary("pixel_unshuffle", e, Shape::new(1, 2, 6, 8), -1.0, 1.0, |t, x| {
            t.pixel_unshuffle(x, 2)
        }),
        unary("narrow_channels", e, Shape::new(2, 5, 3, 4), -1.0, 1.0, |t, x| {
            t.narrow_channels(x, 1, 3)
        }),
        unary("split_channels", e, Shape::new(1, 5, 3, 4), -1.0, 1.0, |t, x| {
            let parts = t.split_channels(x, &[2, 3])?;
            let a = t.affine(parts[0], 2.0, 0.0);
            let b = t.narrow_channels(parts[1], 0, 2)?;
            t.mul(a, b)
        }),
        binary("add", e, |t, a, b| t.add(a, b)),
        binary("sub", e, |t, a, b| t.sub(a, b)),
        binary("mul", e, |t, a, b| t.mul(a, b)),
        binary("dac", e, |t, a, b| t.dac(a, b)),
        Case::new(
            "concat_channels",
            e,
            |rng| Trial {
                vars: vars(vec![
                    ("a", rand_t(rng, (2, 2, 3, 4), -1.0, 1.0)),
                    ("b", rand_t(rng, (2, 3, 3, 4), -1.0, 1.0)),
                ]),
                consts: vec![],
            },
            |tape, b, _| tape.concat_channels(&[b["a"], b["b"], b["a"]]),
        ),
        Case::new(
            "bilinear_sample",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![("x", rand_t(rng, (2, 3, 5, 6), -1.0, 1.0))]),
                // includes out-of-range positions to exercise clamping
                consts: vec![rand_t(rng, (2, 2, 4, 7), -1.5, 6.5)],
            },
            |tape, b, c| tape.bilinear_sample(b["x"], &c[0]),
        ),
        Case::new(
            "charbonnier",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![("x", rand_t(rng, (1, 3, 6, 5), 0.0, 1.0))]),
                consts: vec![rand_t(rng, (1, 3, 6, 5), 0.0, 1.0)],
            },
            |tape, b, c| tape.charbonnier(b["x"], &c[0], 1e-3),
        ),
        Case::new(
            "fft_l1",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![("x", rand_t(rng, (2, 3, 6, 5), 0.0, 1.0))]),
                consts: vec![rand_t(rng, (2, 3, 6, 5), 0.0, 1.0)],
            },
            |tape, b, c| tape.fft_l1(b["x"], &c[0]),
        ),
    ];
    cases.push(Case::new(
        "total_loss",
        TOL_BLOCK,
        |rng| Trial {
            vars: vars(vec![("x", rand_t(rng, (1, 3, 8, 8), 0.0, 1.0))]),
            consts: vec![rand_t(rng, (1, 3, 8, 8), 0.0, 1.0)],
        },
        |tape, b, c| Ok(total_loss_on_tape(tape, b["x"], &c[0], &LossConfig::default())?.0),
    ));
    cases
}

const C: usize = 3;

fn feat(rng: &mut ChaCha8Rng) -> Tensor {
    rand_t(rng, (1, C, 4, 5), -1.0, 1.0)
}

fn with_params(rng: &mut ChaCha8Rng, cfg: ModelConfig, mut extra: Vec<(String, Tensor)>) -> Vec<(String, Tensor)> {
    extra.extend(block_params(rng, cfg));
    extra
}

/// Network building blocks.
pub fn block_cases() -> Vec<Case> {
    let tiny = ModelConfig::tiny(C);
    vec![
        Case::new(
            "res_block",
            TOL_BLOCK,
            move |rng| {
                let x = feat(rng);
                Trial {
                    vars: with_params(rng, tiny, vars(vec![("x", x)])),
                    consts: vec![],
                }
            },
            |tape, b, _| blocks::res_block(tape, &pv(b), "fe.res0", b["x"]),
        ),
        Case::new(
            "warp",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![("h", feat(rng))]),
                consts: vec![rand_t(rng, (1, 2, 4, 5), -1.8, 1.8)],
            },
            |tape, b, c| blocks::warp(tape, b["h"], &c[0]),
        ),
        Case::new(
            "feature_extract",
            TOL_BLOCK,
            move |rng| {
                let x = rand_t(rng, (1, 3, 4, 5), 0.0, 1.0);
                let cfg = ModelConfig { fe_blocks: 2, ..tiny };
                Trial {
                    vars: with_params(rng, cfg, vars(vec![("x", x)])),
                    consts: vec![],
                }
            },
            |tape, b, _| blocks::feature_extract(tape, &pv(b), 2, b["x"]),
        ),
        Case::new(
            "feedback_convgru",
            TOL_BLOCK,
            move |rng| {
                let v = vars(vec![("r", feat(rng)), ("hf", feat(rng)), ("hb", feat(rng))]);
                Trial {
                    vars: with_params(rng, tiny, v),
                    consts: vec![],
                }
            },
            |tape, b, _| blocks::feedback_convgru(tape, &pv(b), b["r"], b["hf"], b["hb"]),
        ),
        Case::new(
            "gcfb",
            TOL_BLOCK,
            move |rng| {
                let v = vars(vec![("r", feat(rng)), ("hb", feat(rng))]);
                Trial {
                    vars: with_params(rng, tiny, v),
                    consts: vec![],
                }
            },
            |tape, b, _| blocks::gcfb(tape, &pv(b), "cfp.gcfb0", b["r"], b["hb"]),
        ),
        Case::new(
            "cfp",
            TOL_BLOCK,
            move |rng| {
                let v = vars(vec![
                    ("f0", feat(rng)),
                    ("f1", feat(rng)),
                    ("f2", feat(rng)),
                    ("b0", feat(rng)),
                    ("b1", feat(rng)),
                    ("b2", feat(rng)),
                ]);
                Trial {
                    vars: with_params(rng, tiny, v),
                    consts: vec![],
                }
            },
            |tape, b, _| {
                let out = blocks::cfp(
                    tape,
                    &pv(b),
                    1,
                    &[b["f0"], b["f1"], b["f2"]],
                    &[b["b0"], b["b1"], b["b2"]],
                )?;
                let cat = tape.concat_channels(&out)?;
                Ok(cat)
            },
        ),
        propagate_case(Direction::Forward),
        propagate_case(Direction::Backward),
        Case::new(
            "reconstruct",
            TOL_BLOCK,
            move |rng| {
                let v = vars(vec![
                    ("f", feat(rng)),
                    ("hf", feat(rng)),
                    ("hb", feat(rng)),
                    ("r", feat(rng)),
                ]);
                let lr = rand_t(rng, (1, 3, 4, 5), 0.0, 1.0);
                Trial {
                    vars: with_params(rng, tiny, v),
                    consts: vec![lr],
                }
            },
            |tape, b, c| blocks::reconstruct(tape, &pv(b), 1, b["f"], b["hf"], b["hb"], b["r"], &c[0]),
        ),
    ]
}

fn propagate_case(direction: Direction) -> Case {
    let tiny = ModelConfig::tiny(C);
    Case::new(
        format!("propagate_{}", direction.name()),
        TOL_BLOCK,
        move |rng| {
            let v = vars(vec![("x0", feat(rng)), ("x1", feat(rng)), ("x2", feat(rng))]);
            let flows = (0..3).map(|_| rand_t(rng, (1, 2, 4, 5), -1.5, 1.5)).collect();
            Trial {
                vars: with_params(rng, tiny, v),
                consts: flows,
            }
        },
        move |tape, b, c| {
            let xs = [b["x0"], b["x1"], b["x2"]];
            let flows = BranchFlows {
                flows: c.iter().map(Some).collect(),
            };
            let out = blocks::propagate(tape, &pv(b), 1, direction, &xs, &xs, &flows)?;
            tape.concat_channels(&out)
        },
    )
}

/// Gradient of the frame-averaged total loss of a tiny model (C = 4,
/// one block each, two 8x8 frames) against central differences on
/// `MODEL_COORDS` random parameter coordinates.
pub fn full_model_check(root: u64) -> Result<CheckResult> {
    let mut rng = seed::rng_for(root, "gradcheck/full_model");
    let cfg = ModelConfig {
        channels: 4,
        seed: rng.gen(),
        ..ModelConfig::tiny(4)
    };
    let model = CfdModel::new(cfg)?;
    let frames: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, (1, 3, 8, 8), 0.0, 1.0)).collect();
    let targets: Vec<Tensor> = (0..2).map(|_| rand_t(&mut rng, (1, 3, 32, 32), 0.0, 1.0)).collect();
    let mut flows = ClipFlows::zeros(1, 2, 8, 8);
    flows.forward[0] = rand_t(&mut rng, (1, 2, 8, 8), -1.5, 1.5);
    flows.backward[0] = rand_t(&mut rng, (1, 2, 8, 8), -1.5, 1.5);
    let loss = LossConfig::default();
    let objective = |m: &CfdModel, trainable: bool| -> Result<(GradTape, Var, ParamVars)> {
        let mut tape = GradTape::new();
        let pv = ParamVars::bind(&mut tape, m.params(), trainable);
        let outs = m.forward(&mut tape, &pv, &frames, &flows)?;
        let mut total = None;
        for (o, gt) in outs.iter().zip(&targets) {
            let l = total_loss_on_tape(&mut tape, *o, gt, &loss)?.0;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        let f = tape.affine(total.expect("two frames"), 0.5, 0.0);
        Ok((tape, f, pv))
    };
    let (tape, f, pv) = objective(&model, true)?;
    let grads = tape.backward(f)?;
    let sig = tape.selection_signature();
    let names: Vec<&String> = model.params().keys().collect();
    let mut seen: Vec<(String, usize)> = Vec::new();
    let mut worst: f64 = 0.0;
    let (mut done, mut redrawn) = (0, 0);
    while done < MODEL_COORDS && redrawn < MAX_REDRAWS {
        let name = *names.choose(&mut rng).expect("non-empty");
        let idx = rng.gen_range(0..model.params()[name].numel());
        if seen.iter().any(|(n, i)| n == name && *i == idx) {
            continue;
        }
        seen.push((name.clone(), idx));
        let analytic = grads.get(pv.get(name)?).map_or(0.0, |g| g.data()[idx]);
        let eval = |delta: f64| -> Result<(f64, Vec<bool>)> {
            let mut m = model.clone();
            m.params_mut().get_mut(name).expect("known").data_mut()[idx] += delta;
            let (tape, f, _) = objective(&m, false)?;
            Ok((tape.value(f).data()[0], tape.selection_signature()))
        };
        let ((hi, sig_hi), (lo, sig_lo)) = (eval(STEP)?, eval(-STEP)?);
        if sig_hi != sig || sig_lo != sig {
            redrawn += 1;
            continue;
        }
        let e = relative_error(analytic, (hi - lo) / (2.0 * STEP));
        worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        done += 1;
    }
    if done < MODEL_COORDS {
        worst = f64::INFINITY;
    }
    Ok(CheckResult {
        name: "full_model".into(),
        trials: done,
        redrawn,
        max_rel_err: worst,
        tolerance: TOL_MODEL,
        passed: worst < TOL_MODEL,
    })
}

/// Every primitive and block check plus the full-model check.
pub fn run_suite(root: u64) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for case in primitive_cases().iter().chain(block_cases().iter()) {
        checks.push(run_case(case, TRIALS, root)?);
    }
    checks.push(full_model_check(root)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(GradcheckReport {
        seed: root,
        step: STEP,
        checks,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // f(x) = x * x recorded as mul(x, constant copy of x): the tape sees
        // only one factor, so the gradient is half the true one
        let case = Case::new(
            "broken",
            TOL_BLOCK,
            |rng| Trial {
                vars: vars(vec![("x", rand_t(rng, (1, 1, 2, 2), 0.5, 1.0))]),
                consts: vec![],
            },
            |tape, b, _| {
                let c = tape.constant(tape.value(b["x"]).clone());
                tape.mul(b["x"], c)
            },
        );
        let r = run_case(&case, 3, 1).unwrap();
        assert!(!r.passed && r.max_rel_err > 0.1);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }
}
