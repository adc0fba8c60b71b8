//! Watermark objectives, barrier penalties and the performer/observer training loop.

mod objective;
mod optim;
mod pretrain;
mod trainer;

pub use objective::{
    barrier_exp, barrier_quad, barrier_value, compose_total, objective_terms, Parts, Terms, Update,
    EXP_CLAMP,
};
pub use optim::{grad_norm, AdamW, AdamWConfig};
pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};
pub use trainer::{
    generation_prompt, objective_gradcheck, task_loss, train, train_step, L0Tracker, TrainOutcome,
    Trainer, GRADCHECK_FLOOR, METRICS_HEADER,
};

use serde::{Deserialize, Serialize};

use crate::binoculars::ScoreConfig;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// `task − λ(B_real + B_gen)`
    Eq1,
    /// Same algebra as `Eq1`.
    Alg1,
    /// `barrier(task, L0) + λ(B_real − B_gen)`
    ConstrainedSeparation,
    /// `task − λ·B_real + B_gen`
    Hybrid,
    /// Performer minimizes `task − λ·B_real`, observer minimizes `B_gen`, on alternating steps.
    Separate,
    /// Performer minimizes `task + XPPL_real`, observer minimizes `−XPPL_gen`.
    XpplAlign,
    /// `task − λ·XPPL_real + XPPL_gen`
    XpplAlignFlipped,
}

impl Objective {
    pub const ALL: [Objective; 7] = [
        Self::Eq1,
        Self::Alg1,
        Self::ConstrainedSeparation,
        Self::Hybrid,
        Self::Separate,
        Self::XpplAlign,
        Self::XpplAlignFlipped,
    ];

    pub fn uses_barrier(self) -> bool {
        self == Self::ConstrainedSeparation
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Barrier {
    None,
    #[serde(alias = "exp")]
    Exponential,
    #[serde(alias = "quad")]
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoKeyword {
    Auto,
}

/// Task-loss budget: a fixed value in nats, or `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum L0Setting {
    Auto(AutoKeyword),
    Value(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub lambda: f64,
    pub l0: L0Setting,
    /// Steps over which `"auto"` averages the base model's task loss before freezing it.
    pub l0_warmup_steps: usize,
    pub l0_ema_decay: f64,
    pub barrier: Barrier,
    pub objective: Objective,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub gen_len: usize,
    pub gen_temperature: f64,
    pub gen_top_k: usize,
    /// Upper bound on the generation prompt taken from each real sequence.
    pub gen_prompt_max: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_grad_norm: f64,
    /// Periodic checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub max_skip_fraction: f64,
    pub score: ScoreConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            l0: L0Setting::Auto(AutoKeyword::Auto),
            l0_warmup_steps: 50,
            l0_ema_decay: 0.99,
            barrier: Barrier::Exponential,
            objective: Objective::ConstrainedSeparation,
            learning_rate: 1e-3,
            batch_size: 4,
            steps: 2000,
            seed: 0,
            gen_len: 32,
            gen_temperature: 1.0,
            gen_top_k: 0,
            gen_prompt_max: 32,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_grad_norm: 1.0,
            checkpoint_every: 0,
            max_skip_fraction: 0.05,
            score: ScoreConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err(format!(
                "lambda must be a finite value >= 0, got {}",
                self.lambda
            ));
        }
        if self.steps == 0 {
            return err("steps must be >= 1".into());
        }
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if self.gen_len == 0 {
            return err("gen_len must be >= 1".into());
        }
        if self.gen_prompt_max == 0 {
            return err("gen_prompt_max must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(self.gen_temperature >= 0.0 && self.gen_temperature.is_finite()) {
            return err(format!(
                "gen_temperature must be >= 0, got {}",
                self.gen_temperature
            ));
        }
        if let L0Setting::Value(v) = self.l0 {
            if !v.is_finite() {
                return err(format!("L0 must be finite, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.l0_ema_decay) {
            return err(format!(
                "l0_ema_decay must be in [0, 1), got {}",
                self.l0_ema_decay
            ));
        }
        if self.l0_warmup_steps == 0 {
            return err("l0_warmup_steps must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.max_skip_fraction) {
            return err("max_skip_fraction must be in [0, 1]".into());
        }
        match (self.objective.uses_barrier(), self.barrier) {
            (true, Barrier::None) => err(format!(
                "objective {:?} embeds the task-loss constraint and needs an exponential or quadratic barrier",
                self.objective
            )),
            (false, b) if b != Barrier::None => err(format!(
                "objective {:?} has no constraint; barrier must be none, got {b:?}",
                self.objective
            )),
            _ => Ok(()),
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

/// Per-step averages over the sequences that were not skipped.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub task_loss: f64,
    pub b_real: f64,
    pub b_gen: f64,
    pub barrier_value: f64,
    pub total: f64,
    pub skipped: usize,
    pub xppl_real: f64,
    pub xppl_gen: f64,
    /// L0 in effect for this step (NaN when no barrier is configured).
    pub l0: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn barrier_pairing() {
        let mut c = TrainingConfig::default();
        assert!(c.validate().is_ok());
        c.barrier = Barrier::None;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.objective = Objective::Eq1;
        assert!(c.validate().is_ok());
        c.barrier = Barrier::Quadratic;
        assert!(c.validate().is_err());
    }

    #[test]
    fn guards() {
        let ok = TrainingConfig::default();
        for bad in [
            TrainingConfig {
                steps: 0,
                ..ok.clone()
            },
            TrainingConfig {
                lambda: -1.0,
                ..ok.clone()
            },
            TrainingConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainingConfig {
                gen_len: 0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn l0_json_forms() {
        let c: TrainingConfig = serde_json::from_str(r#"{"l0": "auto"}"#).unwrap();
        assert_eq!(c.l0, L0Setting::Auto(AutoKeyword::Auto));
        let c: TrainingConfig = serde_json::from_str(r#"{"l0": 2.5, "barrier": "quad"}"#).unwrap();
        assert_eq!(c.l0, L0Setting::Value(2.5));
        assert_eq!(c.barrier, Barrier::Quadratic);
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"l0": "soon"}"#).is_err());
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"lamda": 1}"#).is_err());
        let v: TrainingConfig =
            serde_json::from_str(r#"{"objective": "xppl_align_flipped", "barrier": "none"}"#)
                .unwrap();
        assert_eq!(v.objective, Objective::XpplAlignFlipped);
    }
}
