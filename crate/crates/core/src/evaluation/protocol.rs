//! Held-out detection protocol: the performer continues the prefix of each
//! human sequence to the same length, and both sides are scored on the
//! region after the shared prompt.

use serde::{Deserialize, Serialize};

use super::{Label, ScoredSample};
use crate::binoculars::{binoculars_score, log_perplexity, ScoreConfig};
use crate::data::TokenSeq;
use crate::generation::{generate, SamplerConfig};
use crate::model::{Role, TransformerLM};
use crate::training::generation_prompt;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Upper bound on the prompt; each sequence uses `min(prompt_len, len / 2)` tokens.
    pub prompt_len: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub seed: u64,
    pub score: ScoreConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            prompt_len: 32,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
            score: ScoreConfig::default(),
        }
    }
}

/// Performer continuations of each human prefix, matching the human length.
pub fn machine_sequences(
    model: &TransformerLM,
    human: &[TokenSeq],
    cfg: &ProtocolConfig,
) -> Result<Vec<TokenSeq>> {
    if cfg.prompt_len == 0 {
        return Err(Error::Config("prompt_len must be >= 1".into()));
    }
    human
        .iter()
        .enumerate()
        .filter(|(_, s)| s.len() >= 2)
        .map(|(i, s)| {
            let prompt = generation_prompt(s, cfg.prompt_len)?;
            let sampler = SamplerConfig {
                max_new_tokens: s.len() - prompt.len(),
                temperature: cfg.temperature,
                top_k: cfg.top_k,
                seed: rng::derive_seed(cfg.seed, &[rng::DOMAIN_EVAL, i as u64]),
            };
            generate(model, Some(Role::Performer), &prompt, &sampler)
        })
        .collect()
}

/// Scores the human sequences and their machine continuations. Human
/// sequences are scored after the same prompt the generator saw.
pub fn detection_samples(
    model: &TransformerLM,
    human: &[TokenSeq],
    cfg: &ProtocolConfig,
) -> Result<Vec<ScoredSample>> {
    let machine = machine_sequences(model, human, cfg)?;
    let mut out = Vec::with_capacity(2 * machine.len());
    for (i, s) in human.iter().filter(|s| s.len() >= 2).enumerate() {
        let prompt = generation_prompt(s, cfg.prompt_len)?.len();
        let scored = s.with_prompt_len(prompt.max(s.prompt_len()).min(s.len() - 1))?;
        let b = binoculars_score(model, &scored, &cfg.score)?;
        out.push(ScoredSample::new(
            format!("human:{i}"),
            Label::Human,
            b.score,
        ));
    }
    for (i, s) in machine.iter().enumerate() {
        if s.scored_positions().is_empty() {
            continue;
        }
        let b = binoculars_score(model, s, &cfg.score)?;
        out.push(ScoredSample::new(
            format!("machine:{i}"),
            Label::Machine,
            b.score,
        ));
    }
    Ok(out)
}

/// Mean over sequences of the per-token cross-entropy under `role` (the base when `None`).
pub fn heldout_task_loss(
    model: &TransformerLM,
    role: Option<Role>,
    seqs: &[TokenSeq],
) -> Result<f64> {
    if seqs.is_empty() {
        return Err(Error::Empty("held-out sequences".into()));
    }
    let mut total = 0.0;
    for s in seqs {
        total += log_perplexity(&model.logits(role, s.tokens())?, s)?;
    }
    Ok(total / seqs.len() as f64)
}
