use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evaluation::{ProtocolConfig, DEFAULT_TARGET_FPR};
use crate::generation::SamplerConfig;
use crate::model::{LoraConfig, ModelConfig};
use crate::training::{PretrainConfig, TrainingConfig};
use crate::{rng, Error, Result};

/// Keys for seeds derived from the top-level `seed`.
const SEED_DOMAIN: u64 = 0xC1;
pub const SEED_INIT: u64 = 1;
pub const SEED_SPLIT: u64 = 2;
pub const SEED_PRETRAIN: u64 = 3;
pub const SEED_TRAIN: u64 = 4;
pub const SEED_PERFORMER: u64 = 5;
pub const SEED_OBSERVER: u64 = 6;
pub const SEED_SAMPLER: u64 = 7;
pub const SEED_PROTOCOL: u64 = 8;
pub const SEED_GRADCHECK: u64 = 9;

pub fn sub_seed(seed: u64, key: u64) -> u64 {
    rng::derive_seed(seed, &[SEED_DOMAIN, key])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub trials: usize,
    pub eps: f64,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            trials: 20,
            eps: 1e-3,
            tolerance: 1e-6,
        }
    }
}

/// One JSON document configuring every command. The `seed` fields inside
/// sections are overwritten with values derived from the top-level `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub performer: LoraConfig,
    pub observer: LoraConfig,
    pub pretrain: PretrainConfig,
    pub training: TrainingConfig,
    pub sampler: SamplerConfig,
    pub protocol: ProtocolConfig,
    pub gradcheck: GradcheckConfig,
    /// Training text; documents are separated by blank lines.
    pub corpus: Option<PathBuf>,
    pub eval_fraction: f64,
    /// Base weights for `train`.
    pub base_checkpoint: Option<PathBuf>,
    /// Trained checkpoint for `generate`, `score` and `eval`.
    pub checkpoint: Option<PathBuf>,
    /// One document per line, for `generate` (prompts) and `score`.
    pub input: Option<PathBuf>,
    /// Human documents for `eval`, one per line; defaults to the corpus eval split.
    pub human: Option<PathBuf>,
    /// Machine documents for `eval`, one per line.
    pub machine: Option<PathBuf>,
    /// Generate the machine side of `eval` from human prefixes instead of reading `machine`.
    pub generate_machine: bool,
    /// Scatter CSV for `calibrate`.
    pub scatter: Option<PathBuf>,
    pub target_fpr: f64,
    pub fpr_targets: Vec<f64>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            performer: LoraConfig::performer_default(),
            observer: LoraConfig::observer_default(),
            pretrain: PretrainConfig::default(),
            training: TrainingConfig::default(),
            sampler: SamplerConfig::default(),
            protocol: ProtocolConfig::default(),
            gradcheck: GradcheckConfig::default(),
            corpus: None,
            eval_fraction: 0.05,
            base_checkpoint: None,
            checkpoint: None,
            input: None,
            human: None,
            machine: None,
            generate_machine: false,
            scatter: None,
            target_fpr: DEFAULT_TARGET_FPR,
            fpr_targets: vec![0.01, 0.05, 0.1],
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Fills in derived seeds.
    pub fn resolve(mut self) -> Self {
        self.pretrain.seed = sub_seed(self.seed, SEED_PRETRAIN);
        self.training.seed = sub_seed(self.seed, SEED_TRAIN);
        self.sampler.seed = sub_seed(self.seed, SEED_SAMPLER);
        self.protocol.seed = sub_seed(self.seed, SEED_PROTOCOL);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.performer.validate()?;
        self.observer.validate()?;
        self.pretrain.validate()?;
        self.training.validate()?;
        self.sampler.validate()?;
        if self.protocol.prompt_len == 0 {
            return Err(Error::Config("protocol.prompt_len must be >= 1".into()));
        }
        if self.sampler.max_new_tokens >= self.model.context_len {
            return Err(Error::Config(format!(
                "sampler.max_new_tokens {} leaves no room for a prompt in context {}",
                self.sampler.max_new_tokens, self.model.context_len
            )));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return Err(Error::Config(format!(
                "eval_fraction must be in (0, 1), got {}",
                self.eval_fraction
            )));
        }
        for &t in self.fpr_targets.iter().chain([&self.target_fpr]) {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "FPR targets must be in [0, 1], got {t}"
                )));
            }
        }
        let g = &self.gradcheck;
        if g.trials == 0 || !(g.eps > 0.0) || !(g.tolerance > 0.0) {
            return Err(Error::Config(
                "gradcheck needs trials >= 1, eps > 0 and tolerance > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| Error::Config(format!("`{key}` must be set for this command")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_unknown_keys_fail() {
        RunConfig::default().resolve().validate().unwrap();
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 1}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"training": {"lambda": 0.1, "x": 1}}"#).is_err()
        );
        let c: RunConfig = serde_json::from_str(
            r#"{"model": {"d_model": 32}, "performer": {"rank": 4, "alpha": 8}}"#,
        )
        .unwrap();
        assert_eq!(c.model.d_model, 32);
        assert_eq!(c.model.n_layers, ModelConfig::default().n_layers);
    }

    #[test]
    fn seeds_flow_from_top_level() {
        let a = RunConfig {
            seed: 1,
            ..Default::default()
        }
        .resolve();
        let b = RunConfig {
            seed: 2,
            ..Default::default()
        }
        .resolve();
        assert_ne!(a.training.seed, b.training.seed);
        assert_ne!(a.training.seed, a.pretrain.seed);
        assert_eq!(
            a,
            RunConfig {
                seed: 1,
                ..Default::default()
            }
            .resolve()
        );
    }
}
