use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::objective::objective_terms;
use super::{AdamW, L0Setting, LossBreakdown, Objective, TrainingConfig};
use crate::binoculars::log_perplexity;
use crate::data::{sample_batch, Corpus, Origin, TokenSeq};
use crate::generation::{generate, SamplerConfig};
use crate::model::{save_checkpoint, ParamGroup, Role, TransformerLM};
use crate::numerics::{central_difference, max_relative_error_floor, Real, Tape, Tensor};
use crate::{rng, Error, Result};

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "task_loss",
    "b_real",
    "b_gen",
    "barrier",
    "total",
    "skipped",
];

/// Mean cross-entropy of the performer on the scored positions of `s_real`.
pub fn task_loss(performer_logits: &Tensor, s_real: &TokenSeq) -> Result<f64> {
    log_perplexity(performer_logits, s_real)
}

/// The first `min(max_len, len / 2)` tokens of `s_real` (at least one).
pub fn generation_prompt(s_real: &TokenSeq, max_len: usize) -> Result<TokenSeq> {
    let n = (s_real.len() / 2).min(max_len).max(1);
    TokenSeq::new(s_real.tokens()[..n].to_vec(), Origin::Real, 0, usize::MAX)
}

/// Running estimate of L0 for `"auto"`: a bias-corrected exponential moving
/// average of the base model's task loss, frozen after the warm-up steps.
#[derive(Debug, Clone)]
pub struct L0Tracker {
    setting: L0Setting,
    decay: f64,
    warmup: usize,
    ema: f64,
    observations: usize,
}

impl L0Tracker {
    pub fn new(cfg: &TrainingConfig) -> Self {
        Self {
            setting: cfg.l0,
            decay: cfg.l0_ema_decay,
            warmup: cfg.l0_warmup_steps,
            ema: 0.0,
            observations: 0,
        }
    }

    pub fn wants_observation(&self, step: usize) -> bool {
        matches!(self.setting, L0Setting::Auto(_)) && (step < self.warmup || self.observations == 0)
    }

    pub fn observe(&mut self, base_task_loss: f64) {
        self.ema = self.decay * self.ema + (1.0 - self.decay) * base_task_loss;
        self.observations += 1;
    }

    pub fn value(&self) -> Option<f64> {
        match self.setting {
            L0Setting::Value(v) => Some(v),
            L0Setting::Auto(_) if self.observations == 0 => None,
            L0Setting::Auto(_) => {
                Some(self.ema / (1.0 - self.decay.powi(self.observations as i32)))
            }
        }
    }
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    sequence_index: usize,
    task_loss: f64,
    b_real: f64,
    b_gen: f64,
    xppl_real: f64,
    xppl_gen: f64,
    total: f64,
    l0: f64,
    real_tokens: &'a [u32],
    generated_tokens: &'a [u32],
}

/// Optimizer state and L0 bookkeeping carried across steps.
pub struct Trainer {
    cfg: TrainingConfig,
    performer_opt: AdamW,
    observer_opt: AdamW,
    l0: L0Tracker,
    dump_dir: Option<PathBuf>,
}

fn active_roles(objective: Objective, step: usize) -> [bool; 2] {
    match objective {
        Objective::Separate if step % 2 == 0 => [true, false],
        Objective::Separate => [false, true],
        _ => [true, true],
    }
}

impl Trainer {
    pub fn new(cfg: &TrainingConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg: cfg.clone(),
            performer_opt: AdamW::new(cfg.adamw()),
            observer_opt: AdamW::new(cfg.adamw()),
            l0: L0Tracker::new(cfg),
            dump_dir: None,
        })
    }

    /// Directory for the JSON diagnostics written when a loss turns non-finite.
    pub fn with_dump_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.dump_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn l0(&self) -> Option<f64> {
        self.l0.value()
    }

    fn sampler(&self, step: usize, index: usize, max_new_tokens: usize) -> SamplerConfig {
        SamplerConfig {
            max_new_tokens,
            temperature: self.cfg.gen_temperature,
            top_k: self.cfg.gen_top_k,
            seed: rng::derive_seed(
                self.cfg.seed,
                &[rng::DOMAIN_SAMPLER, step as u64, index as u64],
            ),
        }
    }

    /// Samples `s_gen` for one real sequence; the tokens are constants downstream.
    pub fn generate_for_training(
        &self,
        model: &TransformerLM,
        s_real: &TokenSeq,
        step: usize,
        index: usize,
    ) -> Result<TokenSeq> {
        let prompt = generation_prompt(s_real, self.cfg.gen_prompt_max)?;
        let room = model.config().context_len.saturating_sub(prompt.len());
        let n = self.cfg.gen_len.min(room);
        generate(
            model,
            Some(Role::Performer),
            &prompt,
            &self.sampler(step, index, n),
        )
    }

    fn dump(&self, d: &NanDump) -> Option<PathBuf> {
        let dir = self.dump_dir.as_ref()?;
        let path = dir.join(format!("nan_step_{}.json", d.step));
        let json = serde_json::to_string_pretty(d).ok()?;
        fs::create_dir_all(dir).ok()?;
        fs::write(&path, json).ok()?;
        Some(path)
    }

    /// One optimization step over `batch`: generate, score, compose, backpropagate, update.
    pub fn step(
        &mut self,
        model: &mut TransformerLM,
        batch: &[TokenSeq],
        step: usize,
    ) -> Result<LossBreakdown> {
        model.require_adapter(Role::Performer)?;
        model.require_adapter(Role::Observer)?;
        if batch.is_empty() {
            return Err(Error::Empty("training batch".into()));
        }
        if self.l0.wants_observation(step) {
            let mut total = 0.0;
            for s in batch {
                total += task_loss(&model.logits(None, s.tokens())?, s)?;
            }
            self.l0.observe(total / batch.len() as f64);
        }
        let l0 = self.l0.value().unwrap_or(f64::NAN);
        model.zero_grad();

        let mut sum = LossBreakdown {
            step,
            l0: if self.cfg.objective.uses_barrier() {
                l0
            } else {
                f64::NAN
            },
            ..Default::default()
        };
        let mut used = 0usize;
        for (index, s_real) in batch.iter().enumerate() {
            let s_gen = self.generate_for_training(model, s_real, step, index)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let terms = match objective_terms(
                &mut tape, model, &bound, s_real, &s_gen, &self.cfg, l0, step,
            ) {
                Ok(t) => t,
                Err(Error::DegenerateDenominator { value, .. }) => {
                    log::warn!("step {step}: sequence {index} skipped, |log XPPL| = {value:e}");
                    sum.skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let parts = terms.parts(&tape);
            let total = tape.item(terms.total) as f64;
            let barrier = terms.barrier.map_or(0.0, |b| tape.item(b) as f64);
            if !total.is_finite() {
                let dump = self.dump(&NanDump {
                    step,
                    sequence_index: index,
                    task_loss: parts.task,
                    b_real: parts.b_real,
                    b_gen: parts.b_gen,
                    xppl_real: parts.xppl_real,
                    xppl_gen: parts.xppl_gen,
                    total,
                    l0,
                    real_tokens: s_real.tokens(),
                    generated_tokens: s_gen.tokens(),
                });
                return Err(Error::NanLoss { step, dump });
            }
            for &(objective, update) in &terms.objectives {
                tape.zero_grad();
                tape.backward(objective)?;
                model.accumulate_grads_where(&tape, &bound, |g| match g {
                    ParamGroup::Base => false,
                    ParamGroup::Adapter(r) => update.includes(r),
                });
            }
            used += 1;
            sum.task_loss += parts.task;
            sum.b_real += parts.b_real;
            sum.b_gen += parts.b_gen;
            sum.xppl_real += parts.xppl_real;
            sum.xppl_gen += parts.xppl_gen;
            sum.barrier_value += barrier;
            sum.total += total;
        }
        if used == 0 {
            return Ok(LossBreakdown {
                task_loss: f64::NAN,
                b_real: f64::NAN,
                b_gen: f64::NAN,
                barrier_value: f64::NAN,
                total: f64::NAN,
                xppl_real: f64::NAN,
                xppl_gen: f64::NAN,
                ..sum
            });
        }
        let n = used as f64;
        let scale = 1.0 / used as Real;
        let [perf, obs] = active_roles(self.cfg.objective, step);
        for (role, on) in [(Role::Performer, perf), (Role::Observer, obs)] {
            if !on {
                continue;
            }
            let params = model.params_mut(ParamGroup::Adapter(role));
            let norm = super::grad_norm(&params, scale);
            if !norm.is_finite() {
                return Err(Error::NanLoss { step, dump: None });
            }
            let opt = match role {
                Role::Performer => &mut self.performer_opt,
                Role::Observer => &mut self.observer_opt,
            };
            opt.step(params, scale);
        }
        Ok(LossBreakdown {
            task_loss: sum.task_loss / n,
            b_real: sum.b_real / n,
            b_gen: sum.b_gen / n,
            barrier_value: sum.barrier_value / n,
            total: sum.total / n,
            xppl_real: sum.xppl_real / n,
            xppl_gen: sum.xppl_gen / n,
            ..sum
        })
    }
}

/// Single-step convenience wrapper around [`Trainer::step`].
pub fn train_step(
    trainer: &mut Trainer,
    model: &mut TransformerLM,
    batch: &[TokenSeq],
    step: usize,
) -> Result<LossBreakdown> {
    trainer.step(model, batch, step)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<LossBreakdown>,
    pub l0: Option<f64>,
    pub skipped: usize,
    pub seen: usize,
}

fn metrics_row(b: &LossBreakdown) -> [String; 7] {
    [
        b.step.to_string(),
        b.task_loss.to_string(),
        b.b_real.to_string(),
        b.b_gen.to_string(),
        b.barrier_value.to_string(),
        b.total.to_string(),
        b.skipped.to_string(),
    ]
}

/// Runs `cfg.steps` steps. With `out_dir`, writes `metrics.csv`, periodic
/// `checkpoint_<step>.bin` files and `final.bin`.
pub fn train(
    model: &mut TransformerLM,
    corpus: &Corpus,
    cfg: &TrainingConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.require_adapter(Role::Performer)?;
    model.require_adapter(Role::Observer)?;
    model.set_base_trainable(false);
    let mut trainer = Trainer::new(cfg)?;
    let mut writer = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            trainer = trainer.with_dump_dir(dir);
            let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
            w.write_record(METRICS_HEADER)?;
            Some(w)
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.steps);
    let (mut skipped, mut seen) = (0, 0);
    for step in 0..cfg.steps {
        let batch = sample_batch(corpus, cfg.batch_size, cfg.seed, step)?;
        let b = trainer.step(model, &batch, step)?;
        skipped += b.skipped;
        seen += batch.len();
        if let Some(w) = writer.as_mut() {
            w.write_record(metrics_row(&b))?;
        }
        if step % 50 == 0 || step + 1 == cfg.steps {
            log::info!(
                "step {step}: task {:.4} b_real {:.4} b_gen {:.4} total {:.4}",
                b.task_loss,
                b.b_real,
                b.b_gen,
                b.total
            );
        }
        history.push(b);
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0
                && (step + 1) % cfg.checkpoint_every == 0
                && step + 1 != cfg.steps
            {
                save_checkpoint(model, &dir.join(format!("checkpoint_{:06}.bin", step + 1)))?;
            }
        }
    }
    if let Some(mut w) = writer {
        w.flush()
            .map_err(|e| Error::io(out_dir.expect("writer implies dir"), e))?;
    }
    if let Some(dir) = out_dir {
        save_checkpoint(model, &dir.join("final.bin"))?;
    }
    if skipped as f64 > cfg.max_skip_fraction * seen as f64 {
        return Err(Error::TooManySkipped { skipped, seen });
    }
    Ok(TrainOutcome {
        history,
        l0: trainer.l0(),
        skipped,
        seen,
    })
}

/// Denominator floor for [`objective_gradcheck`].
pub const GRADCHECK_FLOOR: Real = 1e-6;

/// Central-difference check of every objective that `cfg` differentiates at
/// `step`, against the parameters that objective updates. Returns
/// `(objective index, role, max relative error)` per checked pair.
pub fn objective_gradcheck(
    model: &TransformerLM,
    s_real: &TokenSeq,
    s_gen: &TokenSeq,
    cfg: &TrainingConfig,
    l0: f64,
    step: usize,
    eps: Real,
) -> Result<Vec<(usize, Role, Real)>> {
    let mut model = model.clone();
    model.zero_grad();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let terms = objective_terms(&mut tape, &model, &bound, s_real, s_gen, cfg, l0, step)?;
    let objectives = terms.objectives.clone();
    let mut out = Vec::new();
    for (k, &(objective, update)) in objectives.iter().enumerate() {
        tape.zero_grad();
        tape.backward(objective)?;
        let mut analytic_model = model.clone();
        analytic_model.zero_grad();
        analytic_model.accumulate_grads(&tape, &bound);
        for role in [Role::Performer, Role::Observer] {
            if !update.includes(role) {
                continue;
            }
            let group = ParamGroup::Adapter(role);
            let analytic: Vec<Real> = analytic_model
                .params(group)
                .iter()
                .flat_map(|t| t.grad().expect("adapter grads").to_vec())
                .collect();
            let mut probe = model.clone();
            let mut numeric = Vec::with_capacity(analytic.len());
            let count = probe.params(group).len();
            for i in 0..count {
                let mut values = probe.params(group)[i].data().to_vec();
                let fd = central_difference(&mut values, eps, |v| {
                    probe.params_mut(group)[i].data_mut().copy_from_slice(v);
                    let mut t = Tape::new();
                    let b = probe.bind_frozen(&mut t);
                    let terms = objective_terms(&mut t, &probe, &b, s_real, s_gen, cfg, l0, step)
                        .expect("objective stays finite under small perturbations");
                    t.item(terms.objectives[k].0)
                });
                probe.params_mut(group)[i]
                    .data_mut()
                    .copy_from_slice(&values);
                numeric.extend(fd);
            }
            out.push((
                k,
                role,
                max_relative_error_floor(&analytic, &numeric, GRADCHECK_FLOOR),
            ));
        }
    }
    Ok(out)
}
