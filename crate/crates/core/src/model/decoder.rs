//! Token-at-a-time inference with a key/value cache.
//!
//! Used for sampling and bulk scoring, where building a tape per prefix would
//! be quadratic. LoRA deltas are merged into the projection weights up front.

use super::{
    layer_index, projection_weight, Projection, Role, TransformerLM, B1, B2, LN1_B, LN1_G, LN2_B,
    LN2_G, LNF_B, LNF_G, LN_EPS, POS_EMB, TOK_EMB, W1, W2,
};
use crate::numerics::kernels::{axpy, dot, gelu, matmul_nn, matvec};
use crate::numerics::{Real, Tensor};
use crate::{Error, Result};

struct Layer {
    /// Merged `[d, d]` projections indexed by `Projection as usize`.
    proj: [Vec<Real>; 4],
    keys: Vec<Real>,
    values: Vec<Real>,
}

pub struct Decoder<'m> {
    model: &'m TransformerLM,
    layers: Vec<Layer>,
    pos: usize,
}

fn layer_norm(x: &[Real], g: &[Real], b: &[Real]) -> Vec<Real> {
    let n = x.len() as Real;
    let mean = x.iter().sum::<Real>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    let rs = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .zip(g)
        .zip(b)
        .map(|((v, g), b)| (v - mean) * rs * g + b)
        .collect()
}

impl<'m> Decoder<'m> {
    pub fn new(model: &'m TransformerLM, role: Option<Role>) -> Result<Self> {
        let adapter = match role {
            Some(r) => Some(model.require_adapter(r)?),
            None => None,
        };
        let cfg = model.config();
        let d = cfg.d_model;
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let proj = Projection::ALL.map(|p| {
                    let mut w = model.base[layer_index(l, projection_weight(p))]
                        .data()
                        .to_vec();
                    if let Some(slot) = adapter.and_then(|a| a.slot(l, p)) {
                        let a = adapter.expect("slot implies adapter");
                        let (fa, fb) = a.factors(slot);
                        let r = a.config().rank;
                        let delta = matmul_nn(fb.data(), fa.data(), d, r, d);
                        axpy(a.scale(), &delta, &mut w);
                    }
                    w
                });
                Layer {
                    proj,
                    keys: Vec::with_capacity(cfg.context_len * d),
                    values: Vec::with_capacity(cfg.context_len * d),
                }
            })
            .collect();
        Ok(Self {
            model,
            layers,
            pos: 0,
        })
    }

    /// Number of tokens consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn reset(&mut self) {
        self.pos = 0;
        for l in &mut self.layers {
            l.keys.clear();
            l.values.clear();
        }
    }

    /// Feeds one token and returns the logits predicting the next one.
    pub fn step(&mut self, token: u32) -> Result<Vec<Real>> {
        let m = self.model;
        let cfg = m.config();
        if self.pos >= cfg.context_len {
            return Err(Error::ContextOverflow {
                len: self.pos + 1,
                context_len: cfg.context_len,
            });
        }
        if token as usize >= cfg.vocab_size {
            return Err(Error::TargetOutOfVocab {
                token,
                position: self.pos,
                vocab: cfg.vocab_size,
            });
        }
        let (d, f, heads) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let base = |i: usize| m.base[i].data();
        let t = token as usize;
        let mut x: Vec<Real> = base(TOK_EMB)[t * d..(t + 1) * d]
            .iter()
            .zip(&base(POS_EMB)[self.pos * d..(self.pos + 1) * d])
            .map(|(a, b)| a + b)
            .collect();
        let n = self.pos + 1;
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let w = |k| m.base[layer_index(l, k)].data();
            let h = layer_norm(&x, w(LN1_G), w(LN1_B));
            let q = matvec(&layer.proj[0], &h, d, d);
            layer.keys.extend(matvec(&layer.proj[1], &h, d, d));
            layer.values.extend(matvec(&layer.proj[2], &h, d, d));
            let mut att = vec![0.0; d];
            let mut scores = vec![0.0; n];
            for hd in 0..heads {
                let off = hd * dh;
                let qh = &q[off..off + dh];
                let mut max = Real::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(qh, &layer.keys[j * d + off..j * d + off + dh]) * scale;
                    max = max.max(*s);
                }
                let mut z = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    z += *s;
                }
                let o = &mut att[off..off + dh];
                for (j, s) in scores.iter().enumerate() {
                    axpy(s / z, &layer.values[j * d + off..j * d + off + dh], o);
                }
            }
            let o = matvec(&layer.proj[3], &att, d, d);
            axpy(1.0, &o, &mut x);
            let h = layer_norm(&x, w(LN2_G), w(LN2_B));
            let mut hidden = matvec(w(W1), &h, f, d);
            for (v, b) in hidden.iter_mut().zip(w(B1)) {
                *v = gelu(*v + b);
            }
            let out = matvec(w(W2), &hidden, d, f);
            for ((xv, o), b) in x.iter_mut().zip(&out).zip(w(B2)) {
                *xv += o + b;
            }
        }
        self.pos += 1;
        let x = layer_norm(&x, base(LNF_G), base(LNF_B));
        Ok(matvec(base(TOK_EMB), &x, cfg.vocab_size, d))
    }

    /// Logits `[L, V]` for a whole sequence, starting from an empty cache.
    pub fn logits(&mut self, tokens: &[u32]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.model.config().context_len {
            return Err(Error::ContextOverflow {
                len: tokens.len(),
                context_len: self.model.config().context_len,
            });
        }
        self.reset();
        let mut data = Vec::with_capacity(tokens.len() * self.model.config().vocab_size);
        for &t in tokens {
            data.extend(self.step(t)?);
        }
        Tensor::new(vec![tokens.len(), self.model.config().vocab_size], data)
    }
}

impl TransformerLM {
    /// Logits `[L, V]` via the cached decoder; agrees with [`TransformerLM::forward`] to rounding.
    pub fn logits(&self, role: Option<Role>, tokens: &[u32]) -> Result<Tensor> {
        Decoder::new(self, role)?.logits(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, tiny_config, LoraConfig};
    use rand::Rng;

    #[test]
    fn matches_tape_forward() {
        let mut m = init_model(&tiny_config(), 7).unwrap();
        m.attach_adapter(&LoraConfig::new(2, 4.0), Role::Observer, 1)
            .unwrap();
        let mut r = crate::rng::stream(1, &[]);
        for t in m.adapter_mut(Role::Observer).unwrap().tensors_mut() {
            for x in t.data_mut() {
                *x += r.random_range(-0.2..0.2);
            }
        }
        let toks = [3, 1, 4, 1, 5, 9, 2, 6];
        let tol = if crate::numerics::REAL_BITS == 64 {
            1e-10
        } else {
            1e-4
        };
        for role in [None, Some(Role::Observer)] {
            let tape = m.forward_tokens(role, &toks).unwrap();
            let fast = m.logits(role, &toks).unwrap();
            assert_eq!(tape.shape(), fast.shape());
            for (a, b) in tape.data().iter().zip(fast.data()) {
                assert!((a - b).abs() < tol, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn overflow_and_unknown_role() {
        let m = init_model(&tiny_config(), 7).unwrap();
        assert!(matches!(
            Decoder::new(&m, Some(Role::Performer)),
            Err(Error::UnknownAdapter(_))
        ));
        let mut dec = Decoder::new(&m, None).unwrap();
        for _ in 0..8 {
            dec.step(1).unwrap();
        }
        assert!(matches!(dec.step(1), Err(Error::ContextOverflow { .. })));
    }
}
