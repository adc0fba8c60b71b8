use super::{Barrier, Objective, TrainingConfig};
use crate::binoculars::{alignment, binoculars_tape, TapeScore};
use crate::data::TokenSeq;
use crate::model::{Bound, Role, TransformerLM};
use crate::numerics::{Real, Tape, Var};
use crate::Result;

/// Exponent cap of the exponential barrier.
pub const EXP_CLAMP: f64 = 50.0;

/// `exp(task − L0)`, with the exponent capped at [`EXP_CLAMP`].
pub fn barrier_exp(task_loss: f64, l0: f64) -> f64 {
    let z = task_loss - l0;
    if z > EXP_CLAMP {
        log::warn!("exponential barrier exponent {z:.3} clamped to {EXP_CLAMP}");
        EXP_CLAMP.exp()
    } else {
        z.exp()
    }
}

/// `max(task − L0, 0)²`; zero value and zero gradient inside the budget.
pub fn barrier_quad(task_loss: f64, l0: f64) -> f64 {
    let z = (task_loss - l0).max(0.0);
    z * z
}

pub fn barrier_value(barrier: Barrier, task_loss: f64, l0: f64) -> f64 {
    match barrier {
        Barrier::None => 0.0,
        Barrier::Exponential => barrier_exp(task_loss, l0),
        Barrier::Quadratic => barrier_quad(task_loss, l0),
    }
}

/// Scalar ingredients of every objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Parts {
    pub task: f64,
    pub b_real: f64,
    pub b_gen: f64,
    pub xppl_real: f64,
    pub xppl_gen: f64,
}

/// The objective value for `cfg.objective`. For the two split variants this is the
/// sum of the performer and observer sub-objectives.
pub fn compose_total(p: &Parts, cfg: &TrainingConfig, l0: f64) -> f64 {
    let lam = cfg.lambda;
    match cfg.objective {
        Objective::Eq1 | Objective::Alg1 => p.task - lam * (p.b_real + p.b_gen),
        Objective::ConstrainedSeparation => {
            barrier_value(cfg.barrier, p.task, l0) + lam * (p.b_real - p.b_gen)
        }
        Objective::Hybrid => p.task - lam * p.b_real + p.b_gen,
        Objective::Separate => (p.task - lam * p.b_real) + p.b_gen,
        Objective::XpplAlign => (p.task + p.xppl_real) + (-p.xppl_gen),
        Objective::XpplAlignFlipped => p.task - lam * p.xppl_real + p.xppl_gen,
    }
}

/// Which adapters receive the gradient of an objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Update {
    Joint,
    Only(Role),
}

impl Update {
    pub fn includes(self, role: Role) -> bool {
        match self {
            Update::Joint => true,
            Update::Only(r) => r == role,
        }
    }
}

/// Tape handles for one `(s_real, s_gen)` pair.
pub struct Terms {
    pub task: Var,
    pub real: TapeScore,
    pub generated: TapeScore,
    pub barrier: Option<Var>,
    pub total: Var,
    /// Objectives to differentiate this step and the adapters each one updates.
    pub objectives: Vec<(Var, Update)>,
}

impl Terms {
    pub fn parts(&self, tape: &Tape) -> Parts {
        let v = |x: Var| tape.item(x) as f64;
        Parts {
            task: v(self.task),
            b_real: v(self.real.score),
            b_gen: v(self.generated.score),
            xppl_real: v(self.real.log_xppl),
            xppl_gen: v(self.generated.log_xppl),
        }
    }
}

fn tape_barrier(tape: &mut Tape, barrier: Barrier, task: Var, l0: f64) -> Option<Var> {
    let z = tape.add_scalar(task, -(l0 as Real));
    match barrier {
        Barrier::None => None,
        Barrier::Exponential => {
            if tape.item(z) as f64 > EXP_CLAMP {
                log::warn!(
                    "exponential barrier exponent {:.3} clamped to {EXP_CLAMP}",
                    tape.item(z)
                );
            }
            let z = tape.clamp_max(z, EXP_CLAMP as Real);
            Some(tape.exp(z))
        }
        Barrier::Quadratic => {
            let z = tape.relu(z);
            Some(tape.square(z))
        }
    }
}

/// Records task loss, both Binoculars scores and the configured objective.
/// `step` selects the phase of the alternating `separate` variant (even: performer).
///
/// The task loss covers every scored position of `s_real`. `B(s_real)` is
/// scored on the same region as `B(s_gen)`: the positions after the
/// `s_gen.prompt_len()` tokens the generator was conditioned on. Otherwise the
/// observer can separate the two by position alone.
pub fn objective_terms(
    tape: &mut Tape,
    model: &TransformerLM,
    bound: &Bound,
    s_real: &TokenSeq,
    s_gen: &TokenSeq,
    cfg: &TrainingConfig,
    l0: f64,
    step: usize,
) -> Result<Terms> {
    let region = s_gen
        .prompt_len()
        .max(s_real.prompt_len())
        .min(s_real.len().saturating_sub(1));
    let real = binoculars_tape(
        tape,
        model,
        bound,
        &s_real.with_prompt_len(region)?,
        &cfg.score,
    )?;
    let (rows, targets) = alignment(s_real)?;
    let task = tape.nll(real.performer_logprobs, &rows, &targets)?;
    let generated = binoculars_tape(tape, model, bound, s_gen, &cfg.score)?;
    let lam = cfg.lambda as Real;
    let barrier = tape_barrier(tape, cfg.barrier, task, l0);
    let (total, objectives) = match cfg.objective {
        Objective::Eq1 | Objective::Alg1 => {
            let b = tape.add(real.score, generated.score);
            let b = tape.scale(b, lam);
            let t = tape.sub(task, b);
            (t, vec![(t, Update::Joint)])
        }
        Objective::ConstrainedSeparation => {
            let sep = tape.sub(real.score, generated.score);
            let sep = tape.scale(sep, lam);
            let t = tape.add(barrier.expect("validated barrier"), sep);
            (t, vec![(t, Update::Joint)])
        }
        Objective::Hybrid => {
            let b = tape.scale(real.score, lam);
            let t = tape.sub(task, b);
            let t = tape.add(t, generated.score);
            (t, vec![(t, Update::Joint)])
        }
        Objective::Separate => {
            let b = tape.scale(real.score, lam);
            let perf = tape.sub(task, b);
            let obs = generated.score;
            let t = tape.add(perf, obs);
            let active = if step % 2 == 0 {
                (perf, Update::Only(Role::Performer))
            } else {
                (obs, Update::Only(Role::Observer))
            };
            (t, vec![active])
        }
        Objective::XpplAlign => {
            let perf = tape.add(task, real.log_xppl);
            let obs = tape.scale(generated.log_xppl, -1.0);
            let t = tape.add(perf, obs);
            (
                t,
                vec![
                    (perf, Update::Only(Role::Performer)),
                    (obs, Update::Only(Role::Observer)),
                ],
            )
        }
        Objective::XpplAlignFlipped => {
            let x = tape.scale(real.log_xppl, lam);
            let t = tape.sub(task, x);
            let t = tape.add(t, generated.log_xppl);
            (t, vec![(t, Update::Joint)])
        }
    };
    Ok(Terms {
        task,
        real,
        generated,
        barrier,
        total,
        objectives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_barrier_values() {
        assert!((barrier_exp(3.0, 3.0) - 1.0).abs() < 1e-15);
        assert!((barrier_exp(3.0 + 2f64.ln(), 3.0) - 2.0).abs() < 1e-12);
        assert!((barrier_exp(-2.0, 3.0) - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert_eq!(barrier_exp(500.0, 0.0), 50f64.exp());
    }

    #[test]
    fn quadratic_barrier_values() {
        assert_eq!(barrier_quad(1.0, 2.0), 0.0);
        assert_eq!(barrier_quad(2.0, 2.0), 0.0);
        assert!((barrier_quad(2.5, 2.0) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn quadratic_subgradient_at_budget_is_zero() {
        for task in [1.5, 2.0] {
            let mut tape = Tape::new();
            let t = tape.leaf(&crate::numerics::Tensor::scalar(task).with_grad());
            let b = tape_barrier(&mut tape, Barrier::Quadratic, t, 2.0).unwrap();
            tape.backward(b).unwrap();
            assert_eq!(tape.item(b), 0.0);
            assert_eq!(tape.grad(t).unwrap(), [0.0]);
        }
    }

    #[test]
    fn compositions() {
        let p = Parts {
            task: 2.0,
            b_real: 1.0,
            b_gen: 1.2,
            xppl_real: 3.0,
            xppl_gen: 2.5,
        };
        let cfg = |objective, barrier, lambda| TrainingConfig {
            objective,
            barrier,
            lambda,
            ..Default::default()
        };
        assert_eq!(
            compose_total(&p, &cfg(Objective::Eq1, Barrier::None, 0.0), 0.0),
            2.0
        );
        let cs = compose_total(
            &p,
            &cfg(Objective::ConstrainedSeparation, Barrier::Exponential, 1e-2),
            2.0,
        );
        assert!((cs - 0.998).abs() < 1e-12);
        let eq1 = compose_total(&p, &cfg(Objective::Eq1, Barrier::None, 1e-2), 0.0);
        assert!((eq1 - (2.0 - 0.01 * 2.2)).abs() < 1e-12);
        assert_eq!(
            compose_total(&p, &cfg(Objective::Alg1, Barrier::None, 1e-2), 0.0),
            eq1
        );
        let hy = compose_total(&p, &cfg(Objective::Hybrid, Barrier::None, 0.5), 0.0);
        assert!((hy - (2.0 - 0.5 + 1.2)).abs() < 1e-12);
        let xa = compose_total(&p, &cfg(Objective::XpplAlign, Barrier::None, 0.5), 0.0);
        assert!((xa - 2.5).abs() < 1e-12);
        let xf = compose_total(
            &p,
            &cfg(Objective::XpplAlignFlipped, Barrier::None, 0.5),
            0.0,
        );
        assert!((xf - (2.0 - 1.5 + 2.5)).abs() < 1e-12);
    }
}
