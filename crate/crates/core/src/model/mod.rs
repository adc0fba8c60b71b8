//! Decoder-only transformer with a frozen base and two LoRA adapter sets.

mod checkpoint;
mod config;
mod decoder;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use config::{LoraConfig, ModelConfig, Projection, Role};
pub use decoder::Decoder;

use rand_distr::{Distribution, Normal};

use crate::data::TokenSeq;
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::{rng, Error, Result};

pub(crate) const LN_EPS: Real = 1e-5;
const INIT_STD: f64 = 0.02;

pub(crate) const TOK_EMB: usize = 0;
pub(crate) const POS_EMB: usize = 1;
pub(crate) const LNF_G: usize = 2;
pub(crate) const LNF_B: usize = 3;
const GLOBALS: usize = 4;

pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const WQ: usize = 2;
pub(crate) const WK: usize = 3;
pub(crate) const WV: usize = 4;
pub(crate) const WO: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W1: usize = 8;
pub(crate) const B1: usize = 9;
pub(crate) const W2: usize = 10;
pub(crate) const B2: usize = 11;
const PER_LAYER: usize = 12;
const LAYER_NAMES: [&str; PER_LAYER] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.q",
    "attn.k",
    "attn.v",
    "attn.o",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

pub(crate) fn layer_index(layer: usize, k: usize) -> usize {
    GLOBALS + layer * PER_LAYER + k
}

pub(crate) fn projection_weight(p: Projection) -> usize {
    match p {
        Projection::Query => WQ,
        Projection::Key => WK,
        Projection::Value => WV,
        Projection::Output => WO,
    }
}

/// Names and shapes of the base tensors, in storage order.
pub(crate) fn base_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (v, c, d, f) = (cfg.vocab_size, cfg.context_len, cfg.d_model, cfg.d_ff);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![c, d]),
        ("ln_f.gamma".to_string(), vec![d]),
        ("ln_f.beta".to_string(), vec![d]),
    ];
    for l in 0..cfg.n_layers {
        let shapes = [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![f, d],
            vec![f],
            vec![d, f],
            vec![d],
        ];
        for (name, shape) in LAYER_NAMES.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out
}

/// Low-rank update `ΔW = (alpha / r) · B A` on each targeted projection of every layer.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    role: Role,
    config: LoraConfig,
    slots: Vec<(usize, Projection)>,
    /// `[r, d_in]` per slot.
    a: Vec<Tensor>,
    /// `[d_out, r]` per slot, zero at initialization.
    b: Vec<Tensor>,
}

impl LoraAdapter {
    fn new(model_cfg: &ModelConfig, config: &LoraConfig, role: Role, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = model_cfg.d_model;
        let r = config.rank;
        let mut rng = rng::stream(seed, &[rng::DOMAIN_ADAPTER, role as u64]);
        let normal = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("valid std");
        let mut slots = Vec::new();
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for layer in 0..model_cfg.n_layers {
            for p in config.target_set() {
                slots.push((layer, p));
                a.push(Tensor::from_fn(&[r, d], |_| normal.sample(&mut rng) as Real).with_grad());
                b.push(Tensor::zeros(&[d, r]).with_grad());
            }
        }
        Ok(Self {
            role,
            config: config.clone(),
            slots,
            a,
            b,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn scale(&self) -> Real {
        self.config.scale() as Real
    }

    pub fn slots(&self) -> &[(usize, Projection)] {
        &self.slots
    }

    pub fn slot(&self, layer: usize, p: Projection) -> Option<usize> {
        self.slots.iter().position(|&s| s == (layer, p))
    }

    pub fn factors(&self, slot: usize) -> (&Tensor, &Tensor) {
        (&self.a[slot], &self.b[slot])
    }

    /// `(name, tensor)` pairs, A then B per slot.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for (i, (layer, p)) in self.slots.iter().enumerate() {
            let prefix = format!("{}.layers.{layer}.{}", self.role.name(), p.short());
            out.push((format!("{prefix}.lora_a"), &self.a[i]));
            out.push((format!("{prefix}.lora_b"), &self.b[i]));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.a
            .iter_mut()
            .zip(self.b.iter_mut())
            .flat_map(|(a, b)| [a, b])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.a.iter().chain(&self.b).map(Tensor::numel).sum()
    }
}

/// Tape handles for every parameter, produced by [`TransformerLM::bind`].
pub struct Bound {
    base: Vec<Var>,
    performer: Option<Vec<Var>>,
    observer: Option<Vec<Var>>,
}

impl Bound {
    fn adapter(&self, role: Role) -> Option<&Vec<Var>> {
        match role {
            Role::Performer => self.performer.as_ref(),
            Role::Observer => self.observer.as_ref(),
        }
    }
}

/// Which parameters an optimizer or gradient query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Base,
    Adapter(Role),
}

#[derive(Debug, Clone)]
pub struct TransformerLM {
    cfg: ModelConfig,
    base: Vec<Tensor>,
    performer: Option<LoraAdapter>,
    observer: Option<LoraAdapter>,
}

/// Builds a model with seeded Gaussian weights and a frozen base.
pub fn init_model(cfg: &ModelConfig, seed: u64) -> Result<TransformerLM> {
    TransformerLM::init(cfg, seed)
}

impl TransformerLM {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, &[rng::DOMAIN_INIT]);
        let std = INIT_STD;
        let out_std = INIT_STD / (2.0 * cfg.n_layers as f64).sqrt();
        let mut base = Vec::new();
        for (i, (name, shape)) in base_layout(cfg).into_iter().enumerate() {
            let t = if name.ends_with("gamma") {
                Tensor::from_fn(&shape, |_| 1.0)
            } else if name.ends_with("beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                Tensor::zeros(&shape)
            } else {
                let s = if i >= GLOBALS && matches!((i - GLOBALS) % PER_LAYER, WO | W2) {
                    out_std
                } else {
                    std
                };
                let normal = Normal::new(0.0, s).expect("valid std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as Real)
            };
            base.push(t);
        }
        Ok(Self {
            cfg: cfg.clone(),
            base,
            performer: None,
            observer: None,
        })
    }

    pub(crate) fn from_parts(
        cfg: ModelConfig,
        base: Vec<Tensor>,
        performer: Option<LoraAdapter>,
        observer: Option<LoraAdapter>,
    ) -> Self {
        Self {
            cfg,
            base,
            performer,
            observer,
        }
    }

    pub(crate) fn adapter_from_parts(
        role: Role,
        config: LoraConfig,
        model_cfg: &ModelConfig,
        tensors: Vec<Tensor>,
    ) -> LoraAdapter {
        let slots: Vec<(usize, Projection)> = (0..model_cfg.n_layers)
            .flat_map(|l| config.target_set().into_iter().map(move |p| (l, p)))
            .collect();
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (i, mut t) in tensors.into_iter().enumerate() {
            t.set_requires_grad(true);
            if i % 2 == 0 {
                a.push(t);
            } else {
                b.push(t);
            }
        }
        LoraAdapter {
            role,
            config,
            slots,
            a,
            b,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn base_tensors(&self) -> &[Tensor] {
        &self.base
    }

    pub fn named_base_tensors(&self) -> Vec<(String, &Tensor)> {
        base_layout(&self.cfg)
            .into_iter()
            .map(|(n, _)| n)
            .zip(&self.base)
            .collect()
    }

    /// Registers a fresh adapter: A Gaussian with variance `1/d_in`, B zero.
    pub fn attach_adapter(
        &mut self,
        cfg: &LoraConfig,
        role: Role,
        seed: u64,
    ) -> Result<&LoraAdapter> {
        if self.adapter(role).is_some() {
            return Err(Error::DuplicateAdapter(role.name()));
        }
        let adapter = LoraAdapter::new(&self.cfg, cfg, role, seed)?;
        let slot = match role {
            Role::Performer => &mut self.performer,
            Role::Observer => &mut self.observer,
        };
        Ok(slot.insert(adapter))
    }

    pub fn adapter(&self, role: Role) -> Option<&LoraAdapter> {
        match role {
            Role::Performer => self.performer.as_ref(),
            Role::Observer => self.observer.as_ref(),
        }
    }

    pub fn adapter_mut(&mut self, role: Role) -> Option<&mut LoraAdapter> {
        match role {
            Role::Performer => self.performer.as_mut(),
            Role::Observer => self.observer.as_mut(),
        }
    }

    pub fn require_adapter(&self, role: Role) -> Result<&LoraAdapter> {
        self.adapter(role).ok_or(Error::UnknownAdapter(role.name()))
    }

    /// Makes base weights trainable (pretraining) or frozen, dropping their gradient buffers.
    pub fn set_base_trainable(&mut self, on: bool) {
        for t in &mut self.base {
            t.set_requires_grad(on);
        }
    }

    pub fn base_trainable(&self) -> bool {
        self.base.iter().any(Tensor::requires_grad)
    }

    /// Mutable parameter tensors of one group, in a stable order.
    pub fn params_mut(&mut self, group: ParamGroup) -> Vec<&mut Tensor> {
        match group {
            ParamGroup::Base => self.base.iter_mut().collect(),
            ParamGroup::Adapter(role) => self
                .adapter_mut(role)
                .map(LoraAdapter::tensors_mut)
                .unwrap_or_default(),
        }
    }

    pub fn params(&self, group: ParamGroup) -> Vec<&Tensor> {
        match group {
            ParamGroup::Base => self.base.iter().collect(),
            ParamGroup::Adapter(role) => self
                .adapter(role)
                .map(|a| a.named_tensors().into_iter().map(|(_, t)| t).collect())
                .unwrap_or_default(),
        }
    }

    pub fn zero_grad(&mut self) {
        for t in &mut self.base {
            t.zero_grad();
        }
        for role in [Role::Performer, Role::Observer] {
            for t in self.params_mut(ParamGroup::Adapter(role)) {
                t.zero_grad();
            }
        }
    }

    /// Records every parameter on `tape`; trainable tensors become gradient leaves.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let base = self.base.iter().map(|t| tape.leaf(t)).collect();
        let bind_adapter = |tape: &mut Tape, a: &Option<LoraAdapter>| {
            a.as_ref().map(|a| {
                a.named_tensors()
                    .into_iter()
                    .map(|(_, t)| tape.leaf(t))
                    .collect()
            })
        };
        let performer = bind_adapter(tape, &self.performer);
        let observer = bind_adapter(tape, &self.observer);
        Bound {
            base,
            performer,
            observer,
        }
    }

    /// Records every parameter as a constant; nothing on the tape is differentiable.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Bound {
        let c = |tape: &mut Tape, t: &Tensor| tape.constant(t.shape(), t.data().to_vec());
        let base = self.base.iter().map(|t| c(tape, t)).collect();
        let bind_adapter = |tape: &mut Tape, a: &Option<LoraAdapter>| {
            a.as_ref().map(|a| {
                a.named_tensors()
                    .into_iter()
                    .map(|(_, t)| c(tape, t))
                    .collect()
            })
        };
        let performer = bind_adapter(tape, &self.performer);
        let observer = bind_adapter(tape, &self.observer);
        Bound {
            base,
            performer,
            observer,
        }
    }

    /// Adds the tape gradients of every bound trainable parameter into its tensor.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) {
        self.accumulate_grads_where(tape, bound, |_| true);
    }

    /// Like [`Self::accumulate_grads`], restricted to the groups `include` accepts.
    pub fn accumulate_grads_where(
        &mut self,
        tape: &Tape,
        bound: &Bound,
        include: impl Fn(ParamGroup) -> bool,
    ) {
        if include(ParamGroup::Base) {
            for (t, &v) in self.base.iter_mut().zip(&bound.base) {
                if let Some(g) = tape.grad(v) {
                    t.accumulate_grad(g);
                }
            }
        }
        for role in [Role::Performer, Role::Observer] {
            if !include(ParamGroup::Adapter(role)) {
                continue;
            }
            if let (Some(vars), Some(adapter)) = (bound.adapter(role), self.adapter_mut(role)) {
                for (t, &v) in adapter.tensors_mut().into_iter().zip(vars) {
                    if let Some(g) = tape.grad(v) {
                        t.accumulate_grad(g);
                    }
                }
            }
        }
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.cfg.context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context_len: self.cfg.context_len,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.cfg.vocab_size)
        {
            return Err(Error::TargetOutOfVocab {
                token,
                position,
                vocab: self.cfg.vocab_size,
            });
        }
        Ok(())
    }

    fn project(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        role: Option<Role>,
        h: Var,
        layer: usize,
        p: Projection,
    ) -> Var {
        let y = tape.linear(h, bound.base[layer_index(layer, projection_weight(p))]);
        let Some(role) = role else { return y };
        let adapter = self.adapter(role).expect("checked by caller");
        let Some(slot) = adapter.slot(layer, p) else {
            return y;
        };
        let vars = bound.adapter(role).expect("adapter bound");
        let t = tape.linear(h, vars[2 * slot]);
        let t = tape.linear(t, vars[2 * slot + 1]);
        let t = tape.scale(t, adapter.scale());
        tape.add(y, t)
    }

    /// Causal next-token logits `[L, V]` on `tape`; row `i` depends on `tokens[..=i]` only.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        role: Option<Role>,
        tokens: &[u32],
    ) -> Result<Var> {
        self.check_tokens(tokens)?;
        if let Some(r) = role {
            self.require_adapter(r)?;
            if bound.adapter(r).is_none() {
                return Err(Error::UnknownAdapter(r.name()));
            }
        }
        let b = &bound.base;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let te = tape.embedding(b[TOK_EMB], &ids);
        let pe = tape.embedding(b[POS_EMB], &positions);
        let mut x = tape.add(te, pe);
        for l in 0..self.cfg.n_layers {
            let w = |k| b[layer_index(l, k)];
            let h = tape.layer_norm(x, w(LN1_G), w(LN1_B), LN_EPS);
            let q = self.project(tape, bound, role, h, l, Projection::Query);
            let k = self.project(tape, bound, role, h, l, Projection::Key);
            let v = self.project(tape, bound, role, h, l, Projection::Value);
            let a = tape.causal_attention(q, k, v, self.cfg.n_heads);
            let o = self.project(tape, bound, role, a, l, Projection::Output);
            x = tape.add(x, o);
            let h = tape.layer_norm(x, w(LN2_G), w(LN2_B), LN_EPS);
            let f = tape.linear(h, w(W1));
            let f = tape.add_row(f, w(B1));
            let f = tape.gelu(f);
            let f = tape.linear(f, w(W2));
            let f = tape.add_row(f, w(B2));
            x = tape.add(x, f);
        }
        let x = tape.layer_norm(x, b[LNF_G], b[LNF_B], LN_EPS);
        Ok(tape.linear(x, b[TOK_EMB]))
    }

    /// Logits `[L, V]` without gradient tracking.
    pub fn forward(&self, role: Option<Role>, seq: &TokenSeq) -> Result<Tensor> {
        self.forward_tokens(role, seq.tokens())
    }

    pub fn forward_tokens(&self, role: Option<Role>, tokens: &[u32]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let logits = self.forward_tape(&mut tape, &bound, role, tokens)?;
        Ok(tape.tensor(logits))
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 11,
        context_len: 8,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 12,
    }
}
