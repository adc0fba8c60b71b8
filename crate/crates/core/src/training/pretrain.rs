use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AdamW, AdamWConfig};
use crate::binoculars::alignment;
use crate::data::{sample_batch, Corpus};
use crate::model::{save_checkpoint, ParamGroup, TransformerLM};
use crate::numerics::{Real, Tape};
use crate::{Error, Result};

/// Plain next-token training of the base weights, no adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warm-up length; afterwards the rate follows a cosine down to `min_lr_fraction`.
    pub warmup_steps: usize,
    pub min_lr_fraction: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 8,
            learning_rate: 3e-3,
            warmup_steps: 100,
            min_lr_fraction: 0.1,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "pretrain steps and batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("pretrain learning_rate must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_fraction) {
            return Err(Error::Config("min_lr_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.steps - self.warmup_steps.min(self.steps)).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.learning_rate * (self.min_lr_fraction + (1.0 - self.min_lr_fraction) * cosine)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Mean batch cross-entropy per step, before that step's update.
    pub losses: Vec<f64>,
}

/// Trains the base weights on `corpus`, then freezes them. With `out_dir`,
/// writes `pretrain_loss.csv` and `base.bin`.
pub fn pretrain(
    model: &mut TransformerLM,
    corpus: &Corpus,
    cfg: &PretrainConfig,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    model.set_base_trainable(true);
    let mut opt = AdamW::new(AdamWConfig {
        learning_rate: cfg.learning_rate,
        weight_decay: cfg.weight_decay,
        max_grad_norm: cfg.max_grad_norm,
        ..Default::default()
    });
    let mut losses = Vec::with_capacity(cfg.steps);
    let result = (|| {
        for step in 0..cfg.steps {
            let batch = sample_batch(corpus, cfg.batch_size, cfg.seed, step)?;
            model.zero_grad();
            let mut total = 0.0;
            for s in &batch {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape);
                let logits = model.forward_tape(&mut tape, &bound, None, s.tokens())?;
                let lp = tape.log_softmax(logits)?;
                let (rows, targets) = alignment(s)?;
                let loss = tape.nll(lp, &rows, &targets)?;
                let value = tape.item(loss) as f64;
                if !value.is_finite() {
                    return Err(Error::NanLoss { step, dump: None });
                }
                total += value;
                tape.backward(loss)?;
                model.accumulate_grads_where(&tape, &bound, |g| g == ParamGroup::Base);
            }
            let mean = total / batch.len() as f64;
            if step % 250 == 0 || step + 1 == cfg.steps {
                log::info!("pretrain step {step}: loss {mean:.4}");
            }
            losses.push(mean);
            opt.set_learning_rate(cfg.learning_rate_at(step));
            opt.step(
                model.params_mut(ParamGroup::Base),
                1.0 / batch.len() as Real,
            );
        }
        Ok(())
    })();
    model.set_base_trainable(false);
    result?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut w = csv::Writer::from_path(dir.join("pretrain_loss.csv"))?;
        w.write_record(["step", "loss"])?;
        for (i, l) in losses.iter().enumerate() {
            w.write_record([i.to_string(), l.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(dir, e))?;
        save_checkpoint(model, &dir.join("base.bin"))?;
    }
    Ok(PretrainOutcome { losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_corpus;
    use crate::model::{init_model, ModelConfig};

    #[test]
    fn loss_decreases_and_base_freezes() {
        let text = crate::data::synthetic::generate(2, 6_000);
        let corpus = parse_corpus(&text, Path::new("toy"), 24, 0.2, 1).unwrap().0;
        let cfg_m = ModelConfig {
            context_len: 24,
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            ..Default::default()
        };
        let mut m = init_model(&cfg_m, 0).unwrap();
        let cfg = PretrainConfig {
            steps: 60,
            batch_size: 4,
            warmup_steps: 5,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = pretrain(&mut m, &corpus, &cfg, None).unwrap();
        assert_eq!(out.losses.len(), 60);
        let head: f64 = out.losses[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = out.losses[55..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(!m.base_trainable());
    }

    #[test]
    fn schedule_shape() {
        let c = PretrainConfig {
            steps: 100,
            warmup_steps: 10,
            learning_rate: 1.0,
            min_lr_fraction: 0.1,
            ..Default::default()
        };
        assert!((c.learning_rate_at(0) - 0.1).abs() < 1e-12);
        assert!((c.learning_rate_at(10) - 1.0).abs() < 1e-12);
        assert!((c.learning_rate_at(99) - 0.1).abs() < 1e-3);
    }
}
