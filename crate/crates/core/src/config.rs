//! The single JSON document that drives a run.
//!
//! Every field has a default, so `{}` is a valid config. Unknown keys are
//! rejected at every level. Defaults:
//!
//! ```json
//! {
//!   "model": { "channels": 8, "scale": 4, "fe_blocks": 5, "prop_blocks": 10,
//!              "rec_blocks": 3, "gcfb_count": 5, "prop_rounds": 2, "seed": 0 },
//!   "loss": { "eps": 0.001, "lambda": 0.1 },
//!   "training": { "batch_size": 2, "patch": 32, "steps": 2000,
//!                 "schedule": { "eta_max": 0.001, "eta_min": 1e-7 },
//!                 "seed": 0, "checkpoint_every": 500 },
//!   "data": { "manifest": null,
//!             "synth": { "motion": { "kind": "translate", "dx": 1.0, "dy": 0.5 },
//!                        "frames": 3, "height": 48, "width": 48, "components": 24,
//!                        "max_frequency": 0.25, "degradation": "bi", "seed": 0 } },
//!   "flow": "estimate",
//!   "lk": { "levels": 3, "iters": 10, "window": 5 }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_sequence, synth_sequence, SynthSpec, VideoSequence};
use crate::error::{Error, Result};
use crate::flow::{FlowSource, LkParams};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Where training data comes from: a manifest when given, otherwise the
/// synthetic recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            synth: SynthSpec {
                height: 48,
                width: 48,
                ..SynthSpec::default()
            },
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<VideoSequence> {
        match &self.manifest {
            Some(p) => load_sequence(p),
            None => synth_sequence(&self.synth),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub training: TrainConfig,
    pub data: DataConfig,
    pub flow: FlowSource,
    pub lk: LkParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig {
                channels: 8,
                ..ModelConfig::default()
            },
            loss: LossConfig::default(),
            training: TrainConfig::default(),
            data: DataConfig::default(),
            flow: FlowSource::default(),
            lk: LkParams::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.training.validate()?;
        if self.data.manifest.is_none() {
            self.data.synth.validate()?;
        }
        if self.lk.window.is_multiple_of(2) {
            return Err(Error::Config(format!("lk.window must be odd, got {}", self.lk.window)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.channels, 8);
        assert_eq!(cfg.training.batch_size, 2);
        assert_eq!(cfg.training.patch, 32);
        assert_eq!(cfg.training.steps, 2000);
        assert_eq!(cfg.training.schedule.eta_max, 1e-3);
    }

    #[test]
    fn roundtrip_through_json() {
        let mut cfg = RunConfig {
            flow: FlowSource::GroundTruth,
            ..RunConfig::default()
        };
        cfg.training.steps = 7;
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_fields_named() {
        let e = RunConfig::from_json(r#"{"training": {"stpes": 3}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("stpes"), "{e}");
        let e = RunConfig::from_json(r#"{"model": {"gcfb_count": 0}}"#)
            .unwrap_err()
            .to_string();
        assert!(e.contains("gcfb_count"), "{e}");
        let e = RunConfig::from_json(r#"{"flow": "magic"}"#).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
    }
}
