//! Ancestral sampling with temperature and top-k.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Origin, TokenSeq, EOS};
use crate::model::{Decoder, Role, TransformerLM};
use crate::numerics::Real;
use crate::{rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub max_new_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    /// 0 disables the top-k restriction.
    pub top_k: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            temperature: 1.0,
            top_k: 0,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

fn argmax(xs: &[Real]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Draws one token from `softmax(logits / temperature)` restricted to the `top_k` largest logits.
pub fn sample_token(logits: &[Real], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> u32 {
    if temperature == 0.0 || top_k == 1 {
        return argmax(logits) as u32;
    }
    let t = temperature as Real;
    let mut allowed: Vec<usize> = (0..logits.len()).collect();
    if top_k > 0 && top_k < logits.len() {
        allowed.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        allowed.truncate(top_k);
        allowed.sort_unstable();
    }
    let max = allowed
        .iter()
        .map(|&i| logits[i])
        .fold(Real::NEG_INFINITY, Real::max);
    let weights: Vec<f64> = allowed
        .iter()
        .map(|&i| (((logits[i] - max) / t) as f64).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&i, w) in allowed.iter().zip(&weights) {
        if u < *w {
            return i as u32;
        }
        u -= w;
    }
    *allowed.last().expect("non-empty vocabulary") as u32
}

/// Extends `prompt` by up to `max_new_tokens` tokens sampled from `role`'s
/// adapter (or the base when `None`), stopping after an EOS.
pub fn generate(
    model: &TransformerLM,
    role: Option<Role>,
    prompt: &TokenSeq,
    cfg: &SamplerConfig,
) -> Result<TokenSeq> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(Error::Empty("prompt".into()));
    }
    let context_len = model.config().context_len;
    if prompt.len() + cfg.max_new_tokens > context_len {
        return Err(Error::ContextOverflow {
            len: prompt.len() + cfg.max_new_tokens,
            context_len,
        });
    }
    let mut rng = rng::stream(cfg.seed, &[rng::DOMAIN_SAMPLER]);
    let mut dec = Decoder::new(model, role)?;
    let mut tokens = prompt.tokens().to_vec();
    let mut logits = Vec::new();
    for &t in prompt.tokens() {
        logits = dec.step(t)?;
    }
    for i in 0..cfg.max_new_tokens {
        let next = sample_token(&logits, cfg.temperature, cfg.top_k, &mut rng);
        tokens.push(next);
        if next == EOS || i + 1 == cfg.max_new_tokens {
            break;
        }
        logits = dec.step(next)?;
    }
    TokenSeq::new(
        tokens,
        Origin::Generated,
        prompt.len(),
        model.config().vocab_size,
    )
}
