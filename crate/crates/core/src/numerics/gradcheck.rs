//! Central finite-difference gradient checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use super::{CustomOp, Real, Tape, Tensor, Var};

/// `max_i |a_i - n_i| / (|a_i| + 1e-8)`.
pub fn max_relative_error(analytic: &[Real], numeric: &[Real]) -> Real {
    max_relative_error_floor(analytic, numeric, 1e-8)
}

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)`.
///
/// For losses of order one the central difference carries round-off noise
/// near `1e-16 / eps`; `floor` keeps elements below that noise from reading
/// as large relative errors.
pub fn max_relative_error_floor(analytic: &[Real], numeric: &[Real], floor: Real) -> Real {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, Real::max)
}

/// Central differences of `f` at `values`, restoring `values` afterwards.
pub fn central_difference(
    values: &mut [Real],
    eps: Real,
    mut f: impl FnMut(&[Real]) -> Real,
) -> Vec<Real> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let up = f(values);
        values[i] = orig - eps;
        let down = f(values);
        values[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// Fourth-order central differences (five-point stencil), restoring `values`.
pub fn central_difference_4(
    values: &mut [Real],
    eps: Real,
    mut f: impl FnMut(&[Real]) -> Real,
) -> Vec<Real> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..values.len() {
        let orig = values[i];
        let mut at = |k: Real| {
            values[i] = orig + k * eps;
            f(values)
        };
        let (p2, p1, m1, m2) = (at(2.0), at(1.0), at(-1.0), at(-2.0));
        values[i] = orig;
        // Grouped so equal evaluations cancel exactly.
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * eps));
    }
    out
}

/// Compares the tape gradient of the scalar `f(x)` against central
/// differences with step `eps`; returns the max relative error.
pub fn finite_diff_check(f: impl Fn(&mut Tape, Var) -> Var, x: &Tensor, eps: Real) -> Real {
    let mut tape = Tape::new();
    let mut leaf = x.clone();
    leaf.set_requires_grad(true);
    let xv = tape.leaf(&leaf);
    let y = f(&mut tape, xv);
    if tape.backward(y).is_err() {
        return Real::INFINITY;
    }
    let analytic = tape.grad(xv).expect("leaf is trainable").to_vec();
    let shape = x.shape().to_vec();
    let mut values = x.data().to_vec();
    let numeric = central_difference(&mut values, eps, |v| {
        let mut t = Tape::new();
        let xv = t.constant(&shape, v.to_vec());
        let y = f(&mut t, xv);
        t.item(y)
    });
    max_relative_error(&analytic, &numeric)
}

/// How random inputs for an operation are drawn.
#[derive(Debug, Clone, Copy)]
pub enum Domain {
    Normal,
    /// Uniform in `[0.5, 2]`.
    Positive,
    /// Magnitude uniform in `[0.2, 2]`, random sign; keeps kinks out of reach of `eps`.
    AwayFromZero,
}

impl Domain {
    fn sample(self, rng: &mut ChaCha8Rng) -> Real {
        match self {
            Domain::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                z as Real
            }
            Domain::Positive => rng.random_range(0.5..2.0),
            Domain::AwayFromZero => {
                let m: Real = rng.random_range(0.2..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            }
        }
    }
}

/// One differentiable operation under test.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<(Vec<usize>, Domain)>,
    pub build: fn(&mut Tape, &[Var]) -> Var,
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub eps: f64,
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
    pub passed: bool,
}

/// Checks one case on a single random draw; the output is reduced to a scalar
/// by a fixed random weighting so every output element carries gradient.
/// Uses the five-point stencil: two-point differences cannot resolve
/// near-zero gradient elements to 1e-6 relative error at 64-bit.
pub fn check_case(case: &GradCase, rng: &mut ChaCha8Rng, eps: Real) -> Real {
    let inputs: Vec<Tensor> = case
        .inputs
        .iter()
        .map(|(shape, dom)| Tensor::from_fn(shape, |_| dom.sample(rng)).with_grad())
        .collect();
    let probe = {
        let mut t = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x)).collect();
        let y = (case.build)(&mut t, &vars);
        t.shape(y).to_vec()
    };
    let weights: Vec<Real> = (0..probe.iter().product::<usize>())
        .map(|_| Domain::Normal.sample(rng))
        .collect();
    let reduce = |t: &mut Tape, y: Var| {
        let w = t.constant(&probe, weights.clone());
        let p = t.mul(y, w);
        t.sum(p)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x)).collect();
    let y = (case.build)(&mut tape, &vars);
    let loss = reduce(&mut tape, y);
    tape.backward(loss).expect("scalar loss");

    let mut worst: Real = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).expect("trainable input").to_vec();
        let mut values = x.data().to_vec();
        let numeric = central_difference_4(&mut values, eps, |v| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, other)| {
                    let data = if j == i {
                        v.to_vec()
                    } else {
                        other.data().to_vec()
                    };
                    t.constant(other.shape(), data)
                })
                .collect();
            let y = (case.build)(&mut t, &vs);
            let l = reduce(&mut t, y);
            t.item(l)
        });
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

pub fn run_suite(
    cases: &[GradCase],
    trials: usize,
    eps: Real,
    tolerance: Real,
    rng: &mut ChaCha8Rng,
) -> GradReport {
    let results: Vec<CaseResult> = cases
        .iter()
        .map(|case| {
            let err = (0..trials)
                .map(|_| check_case(case, rng, eps))
                .fold(0.0, Real::max);
            CaseResult {
                name: case.name.to_string(),
                trials,
                max_relative_error: err as f64,
                passed: err < tolerance,
            }
        })
        .collect();
    let passed = results.iter().all(|r| r.passed);
    GradReport {
        eps: eps as f64,
        tolerance: tolerance as f64,
        cases: results,
        passed,
    }
}

fn mat(shape: &[usize]) -> Vec<usize> {
    shape.to_vec()
}

/// Every differentiable tape operation, each on small random inputs.
pub fn op_suite() -> Vec<GradCase> {
    use Domain::*;
    vec![
        GradCase {
            name: "add",
            inputs: vec![(mat(&[3, 4]), Normal), (mat(&[3, 4]), Normal)],
            build: |t, v| t.add(v[0], v[1]),
        },
        GradCase {
            name: "sub",
            inputs: vec![(mat(&[3, 4]), Normal), (mat(&[3, 4]), Normal)],
            build: |t, v| t.sub(v[0], v[1]),
        },
        GradCase {
            name: "mul",
            inputs: vec![(mat(&[3, 4]), Normal), (mat(&[3, 4]), Normal)],
            build: |t, v| t.mul(v[0], v[1]),
        },
        GradCase {
            name: "div",
            inputs: vec![(mat(&[3, 4]), Normal), (mat(&[3, 4]), Positive)],
            build: |t, v| t.div(v[0], v[1]),
        },
        GradCase {
            name: "add_row",
            inputs: vec![(mat(&[3, 4]), Normal), (mat(&[4]), Normal)],
            build: |t, v| t.add_row(v[0], v[1]),
        },
        GradCase {
            name: "scale",
            inputs: vec![(mat(&[5]), Normal)],
            build: |t, v| t.scale(v[0], -1.7),
        },
        GradCase {
            name: "add_scalar",
            inputs: vec![(mat(&[5]), Normal)],
            build: |t, v| t.add_scalar(v[0], 0.3),
        },
        GradCase {
            name: "clamp_max",
            inputs: vec![(mat(&[6]), AwayFromZero)],
            build: |t, v| {
                let s = t.add_scalar(v[0], 0.0);
                t.clamp_max(s, 0.0)
            },
        },
        GradCase {
            name: "exp",
            inputs: vec![(mat(&[5]), Normal)],
            build: |t, v| t.exp(v[0]),
        },
        GradCase {
            name: "log",
            inputs: vec![(mat(&[5]), Positive)],
            build: |t, v| t.log(v[0]),
        },
        GradCase {
            name: "tanh",
            inputs: vec![(mat(&[5]), Normal)],
            build: |t, v| t.tanh(v[0]),
        },
        GradCase {
            name: "gelu",
            inputs: vec![(mat(&[7]), Normal)],
            build: |t, v| t.gelu(v[0]),
        },
        GradCase {
            name: "relu",
            inputs: vec![(mat(&[7]), AwayFromZero)],
            build: |t, v| t.relu(v[0]),
        },
        GradCase {
            name: "square",
            inputs: vec![(mat(&[5]), Normal)],
            build: |t, v| t.square(v[0]),
        },
        GradCase {
            name: "sum",
            inputs: vec![(mat(&[2, 3]), Normal)],
            build: |t, v| t.sum(v[0]),
        },
        GradCase {
            name: "mean",
            inputs: vec![(mat(&[2, 3]), Normal)],
            build: |t, v| t.mean(v[0]),
        },
        GradCase {
            name: "linear",
            inputs: vec![(mat(&[3, 5]), Normal), (mat(&[4, 5]), Normal)],
            build: |t, v| t.linear(v[0], v[1]),
        },
        GradCase {
            name: "matmul",
            inputs: vec![(mat(&[3, 5]), Normal), (mat(&[5, 2]), Normal)],
            build: |t, v| t.matmul(v[0], v[1]),
        },
        GradCase {
            name: "embedding",
            inputs: vec![(mat(&[5, 3]), Normal)],
            build: |t, v| t.embedding(v[0], &[4, 0, 4, 2]),
        },
        GradCase {
            name: "layer_norm",
            inputs: vec![
                (mat(&[3, 6]), Normal),
                (mat(&[6]), Normal),
                (mat(&[6]), Normal),
            ],
            build: |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        GradCase {
            name: "causal_attention",
            inputs: vec![
                (mat(&[4, 6]), Normal),
                (mat(&[4, 6]), Normal),
                (mat(&[4, 6]), Normal),
            ],
            build: |t, v| t.causal_attention(v[0], v[1], v[2], 2),
        },
        GradCase {
            name: "log_softmax",
            inputs: vec![(mat(&[3, 5]), Normal)],
            build: |t, v| t.log_softmax(v[0]).unwrap(),
        },
        GradCase {
            name: "nll",
            inputs: vec![(mat(&[4, 5]), Normal)],
            build: |t, v| {
                let lp = t.log_softmax(v[0]).unwrap();
                t.nll(lp, &[0, 1, 3], &[4, 0, 2]).unwrap()
            },
        },
        GradCase {
            name: "soft_cross_entropy",
            inputs: vec![(mat(&[4, 5]), Normal), (mat(&[4, 5]), Normal)],
            build: |t, v| {
                let p = t.log_softmax(v[0]).unwrap();
                let q = t.log_softmax(v[1]).unwrap();
                t.soft_cross_entropy(p, q, &[0, 2, 3]).unwrap()
            },
        },
    ]
}

/// `x²` whose backward rule has the wrong sign; used to prove the checker can fail.
struct SignFlippedSquare;

impl CustomOp for SignFlippedSquare {
    fn name(&self) -> &str {
        "sign_flipped_square"
    }

    fn forward(&self, inputs: &[&[Real]], shapes: &[&[usize]]) -> (Vec<usize>, Vec<Real>) {
        (
            shapes[0].to_vec(),
            inputs[0].iter().map(|x| x * x).collect(),
        )
    }

    fn backward(&self, inputs: &[&[Real]], _output: &[Real], grad_out: &[Real]) -> Vec<Vec<Real>> {
        vec![inputs[0]
            .iter()
            .zip(grad_out)
            .map(|(x, g)| -2.0 * x * g)
            .collect()]
    }
}

pub fn faulty_case() -> GradCase {
    GradCase {
        name: "sign_flipped_square",
        inputs: vec![(vec![4], Domain::AwayFromZero)],
        build: |t, v| t.custom(Box::new(SignFlippedSquare), &[v[0]]),
    }
}

#[cfg(all(test, not(feature = "f32")))]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let s = t.scale(x, 3.0);
                t.sum(s)
            },
            &x,
            1e-4,
        );
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn quadratic_is_second_order_accurate() {
        let x = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let s = t.square(x);
                t.sum(s)
            },
            &x,
            1e-4,
        );
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn three_layer_mlp_matches_finite_differences() {
        let mut r = rng::stream(11, &[]);
        let w1 = Tensor::from_fn(&[6, 4], |_| Domain::Normal.sample(&mut r));
        let w2 = Tensor::from_fn(&[5, 6], |_| Domain::Normal.sample(&mut r));
        let w3 = Tensor::from_fn(&[1, 5], |_| Domain::Normal.sample(&mut r));
        let b1 = Tensor::from_fn(&[6], |_| Domain::Normal.sample(&mut r));
        let x = Tensor::from_fn(&[2, 4], |_| Domain::Normal.sample(&mut r));
        let mlp = |t: &mut Tape, w: Var| {
            let xv = t.constant(x.shape(), x.data().to_vec());
            let b = t.constant(b1.shape(), b1.data().to_vec());
            let v2 = t.constant(w2.shape(), w2.data().to_vec());
            let v3 = t.constant(w3.shape(), w3.data().to_vec());
            let h = t.linear(xv, w);
            let h = t.add_row(h, b);
            let h = t.tanh(h);
            let h = t.linear(h, v2);
            let h = t.gelu(h);
            let o = t.linear(h, v3);
            t.sum(o)
        };
        let err = finite_diff_check(mlp, &w1, 1e-4);
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn op_suite_passes_at_f64() {
        let mut r = rng::stream(5, &[]);
        let report = run_suite(&op_suite(), 100, 1e-3, 1e-6, &mut r);
        for c in &report.cases {
            assert!(c.passed, "{} max rel err {}", c.name, c.max_relative_error);
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let mut r = rng::stream(5, &[]);
        let report = run_suite(&[faulty_case()], 3, 1e-3, 1e-6, &mut r);
        assert!(!report.passed);
        assert!(report.cases[0].max_relative_error > 1.0);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut r = rng::stream(9, &[]);
        let x = Tensor::from_fn(&[2, 3], |_| Domain::Normal.sample(&mut r)).with_grad();
        let grads = |which: u8| {
            let mut t = Tape::new();
            let v = t.leaf(&x);
            let a = {
                let e = t.exp(v);
                t.sum(e)
            };
            let b = {
                let s = t.log_softmax(v).unwrap();
                t.nll(s, &[0, 1], &[2, 0]).unwrap()
            };
            let loss = match which {
                0 => a,
                1 => b,
                _ => t.add(a, b),
            };
            t.backward(loss).unwrap();
            t.grad(v).unwrap().to_vec()
        };
        let (ga, gb, gab) = (grads(0), grads(1), grads(2));
        for i in 0..ga.len() {
            assert!((ga[i] + gb[i] - gab[i]).abs() < 1e-12);
        }
    }
}
