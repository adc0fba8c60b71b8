//! Log-perplexity, cross-perplexity and the Binoculars ratio.
//!
//! Logit row `i - 1` predicts token `i`. A sequence scores positions
//! `max(1, prompt_len)..L`, so the first token is never scored and a prompt
//! conditions without being scored. All quantities are in nats per scored
//! position.

use serde::{Deserialize, Serialize};

use crate::data::TokenSeq;
use crate::model::{Bound, Role, TransformerLM};
use crate::numerics::{kernels, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_DENOMINATOR_EPS: f64 = 1e-6;

/// Which model's perplexity forms the numerator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Numerator {
    #[default]
    Observer,
    Performer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub numerator: Numerator,
    pub denominator_eps: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            numerator: Numerator::Observer,
            denominator_eps: DEFAULT_DENOMINATOR_EPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinocularsScore {
    pub log_ppl: f64,
    pub log_xppl: f64,
    pub score: f64,
    pub seq_len: usize,
}

/// `(rows, targets)` of the scored positions.
pub(crate) fn alignment(s: &TokenSeq) -> Result<(Vec<usize>, Vec<usize>)> {
    let positions = s.scored_positions();
    if positions.is_empty() {
        return Err(Error::Sequence(format!(
            "no scored positions in a sequence of length {} with prompt_len {}",
            s.len(),
            s.prompt_len()
        )));
    }
    let rows = positions.clone().map(|p| p - 1).collect();
    let targets = positions.map(|p| s.tokens()[p] as usize).collect();
    Ok((rows, targets))
}

fn check_logits(logits: &Tensor, s: &TokenSeq, what: &str) -> Result<usize> {
    match logits.shape() {
        [l, v] if *l == s.len() => Ok(*v),
        shape => Err(Error::Shape(format!(
            "{what} logits {shape:?} do not match a sequence of length {}",
            s.len()
        ))),
    }
}

fn log_softmax_rows(logits: &Tensor, rows: &[usize], v: usize) -> Vec<Vec<Real>> {
    rows.iter()
        .map(|&r| {
            let mut row = logits.data()[r * v..(r + 1) * v].to_vec();
            kernels::log_softmax_row(&mut row);
            row
        })
        .collect()
}

fn check_finite(t: &Tensor) -> Result<()> {
    match t.data().iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: t.data()[index] as f64,
        }),
        None => Ok(()),
    }
}

/// Mean negative log-likelihood of the scored tokens under `logits`.
pub fn log_perplexity(logits: &Tensor, s: &TokenSeq) -> Result<f64> {
    let v = check_logits(logits, s, "observer")?;
    check_finite(logits)?;
    let (rows, targets) = alignment(s)?;
    let lp = log_softmax_rows(logits, &rows, v);
    let mut total = 0.0;
    for (row, &t) in lp.iter().zip(&targets) {
        if t >= v {
            return Err(Error::TargetOutOfVocab {
                token: t as u32,
                position: 0,
                vocab: v,
            });
        }
        total += row[t];
    }
    Ok(-(total as f64) / rows.len() as f64)
}

/// Mean cross-entropy from the observer's next-token distribution to the performer's.
pub fn cross_perplexity(
    observer_logits: &Tensor,
    performer_logits: &Tensor,
    s: &TokenSeq,
) -> Result<f64> {
    if observer_logits.shape() != performer_logits.shape() {
        return Err(Error::Shape(format!(
            "observer logits {:?} vs performer logits {:?}",
            observer_logits.shape(),
            performer_logits.shape()
        )));
    }
    let v = check_logits(observer_logits, s, "observer")?;
    check_finite(observer_logits)?;
    check_finite(performer_logits)?;
    let (rows, _) = alignment(s)?;
    let lo = log_softmax_rows(observer_logits, &rows, v);
    let lp = log_softmax_rows(performer_logits, &rows, v);
    let total: Real = lo
        .iter()
        .zip(&lp)
        .map(|(o, p)| o.iter().zip(p).map(|(a, b)| a.exp() * b).sum::<Real>())
        .sum();
    Ok(-(total as f64) / rows.len() as f64)
}

fn ratio(log_ppl: f64, log_xppl: f64, cfg: &ScoreConfig) -> Result<f64> {
    if log_xppl.abs() < cfg.denominator_eps {
        return Err(Error::DegenerateDenominator {
            value: log_xppl.abs(),
            threshold: cfg.denominator_eps,
        });
    }
    Ok(log_ppl / log_xppl)
}

/// Score from precomputed observer and performer logits.
pub fn score_from_logits(
    observer_logits: &Tensor,
    performer_logits: &Tensor,
    s: &TokenSeq,
    cfg: &ScoreConfig,
) -> Result<BinocularsScore> {
    let numerator_logits = match cfg.numerator {
        Numerator::Observer => observer_logits,
        Numerator::Performer => performer_logits,
    };
    let log_ppl = log_perplexity(numerator_logits, s)?;
    let log_xppl = cross_perplexity(observer_logits, performer_logits, s)?;
    Ok(BinocularsScore {
        log_ppl,
        log_xppl,
        score: ratio(log_ppl, log_xppl, cfg)?,
        seq_len: s.len(),
    })
}

/// Runs the observer and performer adapters over `s` and forms the ratio.
pub fn binoculars_score(
    model: &TransformerLM,
    s: &TokenSeq,
    cfg: &ScoreConfig,
) -> Result<BinocularsScore> {
    let obs = model.logits(Some(Role::Observer), s.tokens())?;
    let perf = model.logits(Some(Role::Performer), s.tokens())?;
    score_from_logits(&obs, &perf, s, cfg)
}

/// Differentiable score components recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct TapeScore {
    pub log_ppl: Var,
    pub log_xppl: Var,
    pub score: Var,
    /// Performer log-probabilities `[L, V]`, for reuse by the task loss.
    pub performer_logprobs: Var,
}

/// Differentiable [`binoculars_score`]; gradients reach whichever adapters are bound as trainable.
pub fn binoculars_tape(
    tape: &mut Tape,
    model: &TransformerLM,
    bound: &Bound,
    s: &TokenSeq,
    cfg: &ScoreConfig,
) -> Result<TapeScore> {
    let (rows, targets) = alignment(s)?;
    let obs = model.forward_tape(tape, bound, Some(Role::Observer), s.tokens())?;
    let obs = tape.log_softmax(obs)?;
    let perf = model.forward_tape(tape, bound, Some(Role::Performer), s.tokens())?;
    let perf = tape.log_softmax(perf)?;
    let num = match cfg.numerator {
        Numerator::Observer => obs,
        Numerator::Performer => perf,
    };
    let log_ppl = tape.nll(num, &rows, &targets)?;
    let log_xppl = tape.soft_cross_entropy(obs, perf, &rows)?;
    ratio(tape.item(log_ppl) as f64, tape.item(log_xppl) as f64, cfg)?;
    let score = tape.div(log_ppl, log_xppl);
    Ok(TapeScore {
        log_ppl,
        log_xppl,
        score,
        performer_logprobs: perf,
    })
}

/// Mean per-position Shannon entropy of `logits` over the scored rows of `s`.
pub fn mean_entropy(logits: &Tensor, s: &TokenSeq) -> Result<f64> {
    let v = check_logits(logits, s, "observer")?;
    let (rows, _) = alignment(s)?;
    let lp = log_softmax_rows(logits, &rows, v);
    let total: Real = lp
        .iter()
        .map(|r| -r.iter().map(|x| x.exp() * x).sum::<Real>())
        .sum();
    Ok(total as f64 / rows.len() as f64)
}
