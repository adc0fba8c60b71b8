use super::kernels::{self, axpy, dot};
use super::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation.
pub trait CustomOp {
    fn name(&self) -> &str;
    /// Returns `(shape, values)` of the output.
    fn forward(&self, inputs: &[&[Real]], shapes: &[&[usize]]) -> (Vec<usize>, Vec<Real>);
    /// Vector-Jacobian product: one gradient per input, each the length of that input.
    fn backward(&self, inputs: &[&[Real]], output: &[Real], grad_out: &[Real]) -> Vec<Vec<Real>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, Real),
    AddScalar(Var),
    ClampMax(Var, Real),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Linear {
        x: Var,
        w: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        rstd: Vec<Real>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<Real>,
    },
    LogSoftmax(Var),
    Nll {
        logprobs: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
    },
    SoftCrossEntropy {
        reference: Var,
        model: Var,
        rows: Vec<usize>,
    },
    Custom {
        op: Box<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<Real>,
    op: Op,
    requires_grad: bool,
    /// Persistent gradient of a trainable leaf; accumulates across backward calls.
    grad: Option<Vec<Real>>,
}

/// Wengert list recording every operation in evaluation order.
///
/// Inputs are always recorded before the operations that consume them, so a
/// single reverse sweep visits each node after all of its consumers.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn add_into(adj: &mut [Option<Vec<Real>>], v: Var, g: Vec<Real>) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (a, b) in existing.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<Real>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it takes part in gradients iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let rg = t.requires_grad();
        let id = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, rg);
        if rg {
            self.nodes[id.0].grad = Some(vec![0.0; t.numel()]);
        }
        id
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, shape: &[usize], data: Vec<Real>) -> Var {
        assert_eq!(numel(shape), data.len(), "constant: shape/data mismatch");
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: Real) -> Var {
        self.constant(&[], vec![x])
    }

    pub fn value(&self, v: Var) -> &[Real] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn item(&self, v: Var) -> Real {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "item() on non-scalar {:?}", n.shape);
        n.value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            if let Some(g) = &mut n.grad {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(Real, Real) -> Real) -> Var {
        let value = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(Real) -> Real) -> Var {
        let value = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        self.push(self.shape(a).to_vec(), value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "div");
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// `x[m, n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let n = *self.shape(x).last().expect("add_row on scalar");
        assert_eq!(self.shape(bias), [n], "add_row: bias must be [{n}]");
        let b = self.value(bias).to_vec();
        let mut value = self.value(x).to_vec();
        for row in value.chunks_exact_mut(n) {
            for (o, bb) in row.iter_mut().zip(&b) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(self.shape(x).to_vec(), value, Op::AddRow { x, bias }, rg)
    }

    pub fn scale(&mut self, a: Var, c: Real) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: Real) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + c)
    }

    /// `min(x, c)`; gradient is zero where clamped.
    pub fn clamp_max(&mut self, a: Var, c: Real) -> Var {
        self.map(a, Op::ClampMax(a, c), |x| x.min(c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), Real::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, Op::Log(a), Real::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), Real::tanh)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, Op::Gelu(a), kernels::gelu)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<Real>() / v.len() as Real;
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Mean(a), rg)
    }

    /// `x[m, k] · w[n, k]ᵀ`, the layout of a dense layer with weight `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert!(
            xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1],
            "linear: {xs:?} x {ws:?}ᵀ"
        );
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        let value = kernels::matmul_nt(self.value(x), self.value(w), m, k, n);
        let rg = self.rg(x) || self.rg(w);
        self.push(vec![m, n], value, Op::Linear { x, w }, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (as_, bs) = (self.shape(a), self.shape(b));
        assert!(
            as_.len() == 2 && bs.len() == 2 && as_[1] == bs[0],
            "matmul: {as_:?} x {bs:?}"
        );
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let value = kernels::matmul_nn(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        self.push(vec![m, n], value, Op::MatMul { a, b }, rg)
    }

    /// Gathers rows `ids` of `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let ts = self.shape(table);
        assert_eq!(ts.len(), 2, "embedding table must be 2-D");
        let (rows, d) = (ts[0], ts[1]);
        let t = self.value(table);
        let mut value = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < rows, "embedding index {i} out of range {rows}");
            value.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            vec![ids.len(), d],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: Real) -> Var {
        let xs = self.shape(x).to_vec();
        let n = *xs.last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), [n]);
        assert_eq!(self.shape(beta), [n]);
        let (g, b) = (self.value(gamma), self.value(beta));
        let xv = self.value(x);
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut value = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<Real>() / n as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n as Real;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                value[r * n + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            xs,
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Multi-head causal self-attention over `q, k, v: [L, d]`, heads split along `d`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let s = self.shape(q).to_vec();
        assert_eq!(s.len(), 2);
        assert_eq!(self.shape(k), s.as_slice());
        assert_eq!(self.shape(v), s.as_slice());
        let (l, d) = (s[0], s[1]);
        assert!(
            heads > 0 && d % heads == 0,
            "d={d} not divisible by heads={heads}"
        );
        let dh = d / heads;
        let scale = 1.0 / (dh as Real).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; heads * l * l];
        let mut out = vec![0.0; l * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..l {
                let qi = &qv[i * d + off..i * d + off + dh];
                let p = &mut probs[(h * l + i) * l..(h * l + i) * l + l];
                let mut max = Real::NEG_INFINITY;
                for j in 0..=i {
                    let sc = dot(qi, &kv[j * d + off..j * d + off + dh]) * scale;
                    p[j] = sc;
                    max = max.max(sc);
                }
                let mut z = 0.0;
                for pj in p[..=i].iter_mut() {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..=i {
                    p[j] /= z;
                    axpy(p[j], &vv[j * d + off..j * d + off + dh], o);
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            s,
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Log-softmax over the last dimension. Fails on non-finite input.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let n = *s
            .last()
            .ok_or_else(|| Error::Shape("log_softmax on scalar".into()))?;
        if n < 2 {
            return Err(Error::Shape(format!(
                "log_softmax needs last dim >= 2, got {n}"
            )));
        }
        let mut value = self.value(x).to_vec();
        if let Some((index, &v)) = value.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFinite {
                index,
                value: v as f64,
            });
        }
        for row in value.chunks_exact_mut(n) {
            kernels::log_softmax_row(row);
        }
        let rg = self.rg(x);
        Ok(self.push(s, value, Op::LogSoftmax(x), rg))
    }

    /// Mean negative log-likelihood `-(1/n) Σ_k logprobs[rows[k], targets[k]]`.
    pub fn nll(&mut self, logprobs: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let s = self.shape(logprobs);
        if s.len() != 2 {
            return Err(Error::Shape(format!("nll expects [L, V], got {s:?}")));
        }
        let (l, vocab) = (s[0], s[1]);
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::Shape(format!(
                "nll: {} rows vs {} targets",
                rows.len(),
                targets.len()
            )));
        }
        for (pos, (&r, &t)) in rows.iter().zip(targets).enumerate() {
            if r >= l {
                return Err(Error::Shape(format!("nll row {r} out of range {l}")));
            }
            if t >= vocab {
                return Err(Error::TargetOutOfVocab {
                    token: t as u32,
                    position: pos,
                    vocab,
                });
            }
        }
        let lp = self.value(logprobs);
        let total: Real = rows
            .iter()
            .zip(targets)
            .map(|(&r, &t)| lp[r * vocab + t])
            .sum();
        let value = -total / rows.len() as Real;
        let rg = self.rg(logprobs);
        Ok(self.push(
            vec![],
            vec![value],
            Op::Nll {
                logprobs,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `-(1/n) Σ_k ⟨exp(reference[r_k]), model[r_k]⟩` for two log-probability matrices.
    pub fn soft_cross_entropy(
        &mut self,
        reference: Var,
        model: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let s = self.shape(reference);
        if s.len() != 2 || s != self.shape(model) {
            return Err(Error::Shape(format!(
                "soft_cross_entropy: {s:?} vs {:?}",
                self.shape(model)
            )));
        }
        let (l, vocab) = (s[0], s[1]);
        if rows.is_empty() || rows.iter().any(|&r| r >= l) {
            return Err(Error::Shape(format!(
                "soft_cross_entropy rows invalid for L={l}"
            )));
        }
        let (p, q) = (self.value(reference), self.value(model));
        let mut total = 0.0;
        for &r in rows {
            let pr = &p[r * vocab..(r + 1) * vocab];
            let qr = &q[r * vocab..(r + 1) * vocab];
            total += pr.iter().zip(qr).map(|(a, b)| a.exp() * b).sum::<Real>();
        }
        let value = -total / rows.len() as Real;
        let rg = self.rg(reference) || self.rg(model);
        Ok(self.push(
            vec![],
            vec![value],
            Op::SoftCrossEntropy {
                reference,
                model,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var]) -> Var {
        let vals: Vec<&[Real]> = inputs.iter().map(|&v| self.value(v)).collect();
        let shapes: Vec<&[usize]> = inputs.iter().map(|&v| self.shape(v)).collect();
        let (shape, value) = op.forward(&vals, &shapes);
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(
            shape,
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from the scalar `loss`, adding `∂loss/∂leaf` into the
    /// gradient of every trainable leaf it depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NotScalar {
                shape: ln.shape.clone(),
            });
        }
        let mut adj: Vec<Option<Vec<Real>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                let leaf = self.nodes[id]
                    .grad
                    .as_mut()
                    .expect("trainable leaf has grad");
                for (a, b) in leaf.iter_mut().zip(&g) {
                    *a += b;
                }
                continue;
            }
            self.propagate(id, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[Real], adj: &mut [Option<Vec<Real>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let val = |v: Var| self.value(v);
        let want = |v: Var| self.rg(v);
        let elementwise = |adj: &mut [Option<Vec<Real>>], a: Var, f: &dyn Fn(usize) -> Real| {
            if want(a) {
                add_into(adj, a, (0..g.len()).map(|i| g[i] * f(i)).collect());
            }
        };
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                elementwise(adj, *a, &|_| 1.0);
                elementwise(adj, *b, &|_| 1.0);
            }
            Op::Sub(a, b) => {
                elementwise(adj, *a, &|_| 1.0);
                elementwise(adj, *b, &|_| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                elementwise(adj, *a, &|i| bv[i]);
                elementwise(adj, *b, &|i| av[i]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                elementwise(adj, *a, &|i| 1.0 / bv[i]);
                elementwise(adj, *b, &|i| -av[i] / (bv[i] * bv[i]));
            }
            Op::AddRow { x, bias } => {
                elementwise(adj, *x, &|_| 1.0);
                if want(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    add_into(adj, *bias, gb);
                }
            }
            Op::Scale(a, c) => elementwise(adj, *a, &|_| *c),
            Op::AddScalar(a) => elementwise(adj, *a, &|_| 1.0),
            Op::ClampMax(a, c) => {
                let av = val(*a);
                elementwise(adj, *a, &|i| if av[i] < *c { 1.0 } else { 0.0 });
            }
            Op::Exp(a) => elementwise(adj, *a, &|i| out[i]),
            Op::Log(a) => {
                let av = val(*a);
                elementwise(adj, *a, &|i| 1.0 / av[i]);
            }
            Op::Tanh(a) => elementwise(adj, *a, &|i| 1.0 - out[i] * out[i]),
            Op::Gelu(a) => {
                let av = val(*a);
                elementwise(adj, *a, &|i| kernels::gelu_grad(av[i]));
            }
            Op::Relu(a) => {
                let av = val(*a);
                elementwise(adj, *a, &|i| if av[i] > 0.0 { 1.0 } else { 0.0 });
            }
            Op::Square(a) => {
                let av = val(*a);
                elementwise(adj, *a, &|i| 2.0 * av[i]);
            }
            Op::Sum(a) => {
                if want(*a) {
                    add_into(adj, *a, vec![g[0]; val(*a).len()]);
                }
            }
            Op::Mean(a) => {
                if want(*a) {
                    let n = val(*a).len();
                    add_into(adj, *a, vec![g[0] / n as Real; n]);
                }
            }
            Op::Linear { x, w } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[0];
                if want(*x) {
                    add_into(adj, *x, kernels::matmul_nn(g, val(*w), m, n, k));
                }
                if want(*w) {
                    add_into(adj, *w, kernels::matmul_tn(g, val(*x), m, n, k));
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if want(*a) {
                    add_into(adj, *a, kernels::matmul_nt(g, val(*b), m, n, k));
                }
                if want(*b) {
                    add_into(adj, *b, kernels::matmul_tn(val(*a), g, m, k, n));
                }
            }
            Op::Embedding { table, ids } => {
                if want(*table) {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![0.0; val(*table).len()];
                    for (r, &i) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[i * d..(i + 1) * d]);
                    }
                    add_into(adj, *table, gt);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.shape(*gamma)[0];
                let gm = val(*gamma);
                if want(*gamma) {
                    let mut gg = vec![0.0; n];
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for c in 0..n {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                    add_into(adj, *gamma, gg);
                }
                if want(*beta) {
                    let mut gb = vec![0.0; n];
                    for gr in g.chunks_exact(n) {
                        axpy(1.0, gr, &mut gb);
                    }
                    add_into(adj, *beta, gb);
                }
                if want(*x) {
                    let mut gx = vec![0.0; g.len()];
                    let nf = n as Real;
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            s1 += dh;
                            s2 += dh * hr[c];
                        }
                        for c in 0..n {
                            let dh = gr[c] * gm[c];
                            gx[r * n + c] = rs / nf * (nf * dh - s1 - hr[c] * s2);
                        }
                    }
                    add_into(adj, *x, gx);
                }
            }
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            } => {
                let (l, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let dh = d / heads;
                let scale = 1.0 / (dh as Real).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let mut gq = vec![0.0; l * d];
                let mut gk = vec![0.0; l * d];
                let mut gv = vec![0.0; l * d];
                let mut dp = vec![0.0; l];
                for h in 0..*heads {
                    let off = h * dh;
                    for i in 0..l {
                        let p = &probs[(h * l + i) * l..(h * l + i) * l + l];
                        let go = &g[i * d + off..i * d + off + dh];
                        let mut wsum = 0.0;
                        for j in 0..=i {
                            dp[j] = dot(go, &vv[j * d + off..j * d + off + dh]);
                            wsum += p[j] * dp[j];
                            axpy(p[j], go, &mut gv[j * d + off..j * d + off + dh]);
                        }
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - wsum) * scale;
                            if ds != 0.0 {
                                axpy(
                                    ds,
                                    &kv[j * d + off..j * d + off + dh],
                                    &mut gq[i * d + off..i * d + off + dh],
                                );
                                axpy(
                                    ds,
                                    &qv[i * d + off..i * d + off + dh],
                                    &mut gk[j * d + off..j * d + off + dh],
                                );
                            }
                        }
                    }
                }
                if want(*q) {
                    add_into(adj, *q, gq);
                }
                if want(*k) {
                    add_into(adj, *k, gk);
                }
                if want(*v) {
                    add_into(adj, *v, gv);
                }
            }
            Op::LogSoftmax(x) => {
                if want(*x) {
                    let n = *node.shape.last().unwrap();
                    let mut gx = g.to_vec();
                    for (gr, yr) in gx.chunks_exact_mut(n).zip(out.chunks_exact(n)) {
                        let s: Real = gr.iter().sum();
                        for (a, y) in gr.iter_mut().zip(yr) {
                            *a -= y.exp() * s;
                        }
                    }
                    add_into(adj, *x, gx);
                }
            }
            Op::Nll {
                logprobs,
                rows,
                targets,
            } => {
                if want(*logprobs) {
                    let vocab = self.shape(*logprobs)[1];
                    let mut gl = vec![0.0; val(*logprobs).len()];
                    let c = -g[0] / rows.len() as Real;
                    for (&r, &t) in rows.iter().zip(targets) {
                        gl[r * vocab + t] += c;
                    }
                    add_into(adj, *logprobs, gl);
                }
            }
            Op::SoftCrossEntropy {
                reference,
                model,
                rows,
            } => {
                let vocab = self.shape(*reference)[1];
                let (p, q) = (val(*reference), val(*model));
                let c = -g[0] / rows.len() as Real;
                if want(*model) {
                    let mut gm = vec![0.0; q.len()];
                    for &r in rows {
                        for v in r * vocab..(r + 1) * vocab {
                            gm[v] += c * p[v].exp();
                        }
                    }
                    add_into(adj, *model, gm);
                }
                if want(*reference) {
                    let mut gr = vec![0.0; p.len()];
                    for &r in rows {
                        for v in r * vocab..(r + 1) * vocab {
                            gr[v] += c * p[v].exp() * q[v];
                        }
                    }
                    add_into(adj, *reference, gr);
                }
            }
            Op::Custom { op, inputs } => {
                let vals: Vec<&[Real]> = inputs.iter().map(|&v| val(v)).collect();
                let grads = op.backward(&vals, out, g);
                assert_eq!(
                    grads.len(),
                    inputs.len(),
                    "custom op {} returned wrong arity",
                    op.name()
                );
                for (&v, gv) in inputs.iter().zip(grads) {
                    if want(v) {
                        add_into(adj, v, gv);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<Real>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap().with_grad()
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[], vec![3.0]));
        let y = t.square(x);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[], vec![3.0]));
        let y = t.square(x);
        t.backward(y).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[12.0]);
        t.zero_grad();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(&param(&[2], vec![1.0, 2.0]));
        let y = t.square(x);
        assert!(matches!(t.backward(y), Err(Error::NotScalar { .. })));
    }

    #[test]
    fn log_softmax_pick_gradient_is_softmax_minus_onehot() {
        let logits = vec![0.5, -1.0, 2.0, 0.1];
        let mut t = Tape::new();
        let x = t.leaf(&param(&[1, 4], logits.clone()));
        let lp = t.log_softmax(x).unwrap();
        let loss = t.nll(lp, &[0], &[2]).unwrap();
        t.backward(loss).unwrap();
        let z: Real = logits.iter().map(|v| v.exp()).sum();
        for (i, g) in t.grad(x).unwrap().iter().enumerate() {
            let want = logits[i].exp() / z - if i == 2 { 1.0 } else { 0.0 };
            assert!((g - want).abs() < 1e-12, "{i}: {g} vs {want}");
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut t = Tape::new();
        let w = t.leaf(&Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = t.leaf(&param(&[1, 2], vec![1.0, -1.0]));
        let y = t.linear(x, w);
        let s = t.sum(y);
        t.backward(s).unwrap();
        assert!(t.grad(w).is_none());
        assert_eq!(t.grad(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn log_softmax_reports_non_finite_index() {
        let mut t = Tape::new();
        let x = t.constant(&[1, 3], vec![0.0, Real::NAN, 1.0]);
        match t.log_softmax(x) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
