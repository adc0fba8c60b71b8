use serde::{Deserialize, Serialize};

use crate::data::BYTE_VOCAB;
use crate::{Error, Result};

/// Shape of the decoder-only transformer.
///
/// Fixed architecture: learned absolute position embeddings, pre-norm blocks
/// (`x + attn(ln(x))`, `x + mlp(ln(x))`), bias-free attention projections,
/// tanh-approximated GELU in the MLP, a final layer norm, and an LM head tied
/// to the token embedding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            context_len: 64,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.vocab_size < 2 {
            return err(format!("vocab_size must be >= 2, got {}", self.vocab_size));
        }
        if self.context_len < 2 {
            return err(format!(
                "context_len must be >= 2, got {}",
                self.context_len
            ));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return err("d_model, n_layers, n_heads and d_ff must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form count of base parameters.
    pub fn num_parameters(&self) -> usize {
        let (v, c, d, f) = (self.vocab_size, self.context_len, self.d_model, self.d_ff);
        let per_layer = 4 * d * d + 4 * d + 2 * d * f + f + d;
        v * d + c * d + 2 * d + self.n_layers * per_layer
    }
}

/// Attention projection wrapped by a LoRA factor pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    #[serde(alias = "q_proj", alias = "q")]
    Query,
    #[serde(alias = "k_proj", alias = "k")]
    Key,
    #[serde(alias = "v_proj", alias = "v")]
    Value,
    #[serde(alias = "o_proj", alias = "o")]
    Output,
}

impl Projection {
    pub const ALL: [Projection; 4] = [Self::Query, Self::Key, Self::Value, Self::Output];

    pub fn short(self) -> &'static str {
        match self {
            Self::Query => "q",
            Self::Key => "k",
            Self::Value => "v",
            Self::Output => "o",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default = "all_projections")]
    pub targets: Vec<Projection>,
}

fn all_projections() -> Vec<Projection> {
    Projection::ALL.to_vec()
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64) -> Self {
        Self {
            rank,
            alpha,
            targets: all_projections(),
        }
    }

    /// Observer default: the larger adapter.
    pub fn observer_default() -> Self {
        Self::new(32, 128.0)
    }

    pub fn performer_default() -> Self {
        Self::new(16, 32.0)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "LoRA alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA target set is empty".into()));
        }
        Ok(())
    }

    /// Targets sorted and de-duplicated, the order adapter slots are laid out in.
    pub fn target_set(&self) -> Vec<Projection> {
        let mut t = self.targets.clone();
        t.sort();
        t.dedup();
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Performer,
    Observer,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Performer => "performer",
            Role::Observer => "observer",
        }
    }
}
