//! The training loop: random co-located patches, Charbonnier + FFT loss
//! averaged over frames, Adam with a cosine learning rate.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{sample_patches, SequenceFlows, VideoSequence};
use crate::error::{Error, Result};
use crate::flow::{estimate_flow, FlowSource, LkParams};
use crate::loss::{total_loss_on_tape, LossConfig, LossValue};
use crate::model::{save_checkpoint, CfdModel, ClipFlows, ParamMap, ParamVars};
use crate::optim::{cosine_lr, LrSchedule, OptimState};
use crate::seed;
use crate::tensor::{GradTape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// LR patch side.
    pub patch: usize,
    pub steps: usize,
    pub schedule: LrSchedule,
    /// Root seed for patch sampling.
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 disables intermediate
    /// checkpoints; the final one is always written).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            patch: 32,
            steps: 2000,
            schedule: LrSchedule::default(),
            seed: 0,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be >= 1".into()));
        }
        if self.patch == 0 {
            return Err(Error::Config("training.patch must be >= 1".into()));
        }
        let s = self.schedule;
        if !(s.eta_max > 0.0 && s.eta_min >= 0.0 && s.eta_min <= s.eta_max) {
            return Err(Error::Config(format!(
                "training.schedule needs 0 <= eta_min <= eta_max and eta_max > 0, got {} and {}",
                s.eta_min, s.eta_max
            )));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub charbonnier: f64,
    pub fft: f64,
    pub total: f64,
    pub wall_ms: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,lr,charbonnier,fft,total,wall_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:.3}",
            self.step, self.lr, self.charbonnier, self.fft, self.total, self.wall_ms
        )
    }
}

/// Flows for `seq` from the requested source.
pub fn resolve_flows(seq: &VideoSequence, source: FlowSource, lk: LkParams) -> Result<SequenceFlows> {
    match source {
        FlowSource::Files | FlowSource::GroundTruth => seq.flows.clone().ok_or_else(|| {
            let which = if source == FlowSource::Files {
                "files"
            } else {
                "ground-truth"
            };
            Error::Config(format!("flow source `{which}` needs flows in sequence `{}`", seq.name))
        }),
        FlowSource::Estimate => {
            let mut forward = Vec::new();
            let mut backward = Vec::new();
            for pair in seq.frames.windows(2) {
                forward.push(estimate_flow(&pair[0], &pair[1], lk)?.flow);
                backward.push(estimate_flow(&pair[1], &pair[0], lk)?.flow);
            }
            Ok(SequenceFlows { forward, backward })
        }
    }
}

pub fn clip_flows(flows: &SequenceFlows) -> ClipFlows {
    ClipFlows::from_fields(&flows.forward, &flows.backward)
}

/// LR frames, HR targets and flows of equally shaped clips, stacked along
/// the batch axis.
pub struct Batch {
    pub frames: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub flows: ClipFlows,
}

impl Batch {
    pub fn from_clips(clips: &[VideoSequence]) -> Result<Batch> {
        let first = clips.first().ok_or_else(|| Error::invalid("empty batch"))?;
        let n = first.len();
        let mut frames = Vec::with_capacity(n);
        let mut targets = Vec::with_capacity(n);
        for t in 0..n {
            let lr: Vec<Tensor> = clips.iter().map(|c| c.frames[t].clone()).collect();
            frames.push(Tensor::stack_batch(&lr)?);
            let hr = clips
                .iter()
                .map(|c| {
                    c.hr.as_ref()
                        .map(|h| h[t].clone())
                        .ok_or_else(|| Error::invalid(format!("clip `{}` has no HR targets", c.name)))
                })
                .collect::<Result<Vec<_>>>()?;
            targets.push(Tensor::stack_batch(&hr)?);
        }
        let flows = clips
            .iter()
            .map(|c| {
                c.flows.as_ref().map(clip_flows).ok_or(Error::MissingFlow {
                    timestep: 0,
                    direction: "forward",
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Batch {
            frames,
            targets,
            flows: ClipFlows::stack(&flows)?,
        })
    }
}

/// Forward, loss averaged over frames, and gradients by parameter name.
pub fn loss_and_grads(model: &CfdModel, batch: &Batch, loss: &LossConfig) -> Result<(LossValue, ParamMap)> {
    let mut tape = GradTape::new();
    let pv = ParamVars::bind(&mut tape, model.params(), true);
    let outs = model.forward(&mut tape, &pv, &batch.frames, &batch.flows)?;
    let n = outs.len() as f64;
    let mut terms = Vec::with_capacity(outs.len());
    let (mut ch, mut ff) = (0.0, 0.0);
    for (out, gt) in outs.iter().zip(&batch.targets) {
        let (total, c, f) = total_loss_on_tape(&mut tape, *out, gt, loss)?;
        ch += tape.value(c).data()[0];
        ff += tape.value(f).data()[0];
        terms.push(total);
    }
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = tape.add(sum, t)?;
    }
    let objective = tape.affine(sum, 1.0 / n, 0.0);
    let value = LossValue {
        charbonnier: ch / n,
        fft: ff / n,
        total: tape.value(objective).data()[0],
    };
    let mut grads = tape.backward(objective)?;
    let mut out = ParamMap::new();
    for (name, var) in pv.iter() {
        if let Some(g) = grads.take(var) {
            out.insert(name.to_string(), g);
        }
    }
    Ok((value, out))
}

/// Model, optimizer state and the training clip with its flows.
pub struct Trainer {
    pub model: CfdModel,
    pub optim: OptimState,
    pub config: TrainConfig,
    pub loss: LossConfig,
    clip: VideoSequence,
    step: usize,
}

impl Trainer {
    /// `clip` must carry HR targets and flows (see [`resolve_flows`]).
    pub fn new(model: CfdModel, clip: VideoSequence, config: TrainConfig, loss: LossConfig) -> Result<Self> {
        config.validate()?;
        loss.validate()?;
        clip.validate()?;
        if clip.hr.is_none() {
            return Err(Error::invalid(format!(
                "training clip `{}` has no HR targets",
                clip.name
            )));
        }
        if clip.flows.is_none() && clip.len() > 1 {
            return Err(Error::MissingFlow {
                timestep: 0,
                direction: "forward",
            });
        }
        let mut clip = clip;
        if clip.flows.is_none() {
            clip.flows = Some(SequenceFlows {
                forward: Vec::new(),
                backward: Vec::new(),
            });
        }
        Ok(Trainer {
            model,
            optim: OptimState::new(),
            config,
            loss,
            clip,
            step: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn clip(&self) -> &VideoSequence {
        &self.clip
    }

    /// The patches drawn at `step`; independent of any other step.
    pub fn batch_at(&self, step: usize) -> Result<Batch> {
        let seed = seed::derive_seed(self.config.seed, &format!("train/step/{step}"));
        let clips = sample_patches(&self.clip, self.config.patch, self.config.batch_size, seed)?;
        Batch::from_clips(&clips)
    }

    pub fn step(&mut self) -> Result<StepLog> {
        let start = Instant::now();
        let lr = cosine_lr(
            self.step,
            self.config.steps,
            self.config.schedule.eta_max,
            self.config.schedule.eta_min,
        );
        let batch = self.batch_at(self.step)?;
        let (value, grads) = loss_and_grads(&self.model, &batch, &self.loss)?;
        self.optim.adam_step(self.model.params_mut(), &grads, lr)?;
        let log = StepLog {
            step: self.step,
            lr,
            charbonnier: value.charbonnier,
            fft: value.fft,
            total: value.total,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        self.step += 1;
        Ok(log)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub logs: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Runs `run.training.steps` steps, writing `train_log.csv`, periodic
/// `checkpoint_<step>.cfdm` files and `final.cfdm` under `out_dir`.
pub fn train_run(run: &RunConfig, out_dir: impl AsRef<Path>) -> Result<(CfdModel, TrainSummary)> {
    run.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut clip = run.data.load()?;
    if clip.hr.is_none() {
        return Err(Error::Config(format!(
            "training data `{}` has no HR targets",
            clip.name
        )));
    }
    clip.flows = Some(resolve_flows(&clip, run.flow, run.lk)?);
    let model = CfdModel::new(run.model)?;
    let mut trainer = Trainer::new(model, clip, run.training, run.loss)?;

    let log_path = out_dir.join("train_log.csv");
    let file = File::create(&log_path).map_err(|e| Error::file(&log_path, e))?;
    let mut csv = BufWriter::new(file);
    writeln!(csv, "{}", StepLog::CSV_HEADER)?;
    let mut logs = Vec::with_capacity(run.training.steps);
    let mut checkpoints = Vec::new();
    for _ in 0..run.training.steps {
        let log = trainer.step()?;
        writeln!(csv, "{}", log.csv_row())?;
        let done = log.step + 1;
        if log.step % 100 == 0 {
            log::info!("step {} lr {:.3e} loss {:.5}", log.step, log.lr, log.total);
        }
        logs.push(log);
        let every = run.training.checkpoint_every;
        if every > 0 && done % every == 0 && done < run.training.steps {
            let p = out_dir.join(format!("checkpoint_{done:06}.cfdm"));
            save_checkpoint(&trainer.model, &p)?;
            checkpoints.push(p);
        }
    }
    csv.flush()?;
    let final_checkpoint = out_dir.join("final.cfdm");
    save_checkpoint(&trainer.model, &final_checkpoint)?;
    Ok((
        trainer.model,
        TrainSummary {
            logs,
            checkpoints,
            final_checkpoint,
        },
    ))
}

/// Means of consecutive `window`-step blocks of the total loss.
pub fn smoothed_losses(logs: &[StepLog], window: usize) -> Vec<f64> {
    logs.chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().map(|l| l.total).sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_sequence, SynthSpec};
    use crate::model::ModelConfig;

    fn trainer(steps: usize) -> Trainer {
        let clip = synth_sequence(&SynthSpec {
            frames: 2,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap();
        let model = CfdModel::new(ModelConfig::tiny(2)).unwrap();
        let cfg = TrainConfig {
            batch_size: 2,
            patch: 6,
            steps,
            ..Default::default()
        };
        Trainer::new(model, clip, cfg, LossConfig::default()).unwrap()
    }

    #[test]
    fn steps_are_deterministic_and_update_params() {
        let mut a = trainer(3);
        let mut b = trainer(3);
        let before = a.model.clone();
        for _ in 0..3 {
            let (la, lb) = (a.step().unwrap(), b.step().unwrap());
            assert_eq!(la.total, lb.total);
            assert!(la.total.is_finite());
        }
        assert_eq!(a.model, b.model);
        assert_ne!(a.model, before);
        assert_eq!(a.optim.step_count(), 3);
    }

    #[test]
    fn missing_targets_rejected() {
        let mut clip = synth_sequence(&SynthSpec {
            frames: 2,
            height: 8,
            width: 8,
            ..Default::default()
        })
        .unwrap();
        clip.hr = None;
        let model = CfdModel::new(ModelConfig::tiny(2)).unwrap();
        assert!(Trainer::new(model, clip, TrainConfig::default(), LossConfig::default()).is_err());
    }

    #[test]
    fn smoothing_blocks() {
        let logs: Vec<StepLog> = (0..5)
            .map(|i| StepLog {
                step: i,
                lr: 0.0,
                charbonnier: 0.0,
                fft: 0.0,
                total: i as f64,
                wall_ms: 0.0,
            })
            .collect();
        assert_eq!(smoothed_losses(&logs, 2), vec![0.5, 2.5]);
    }
}
