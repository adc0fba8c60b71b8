//! Row-major matrix kernels shared by the tape and the incremental decoder.
//!
//! Summation order is fixed, so results are bitwise reproducible on a given
//! machine.

use super::Real;

#[inline]
pub fn dot(a: &[Real], b: &[Real]) -> Real {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0 as Real; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: Real, x: &[Real], y: &mut [Real]) {
    debug_assert_eq!(x.len(), y.len());
    for (o, v) in y.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// `out[m, n] = a[m, k] · b[n, k]ᵀ`
pub fn matmul_nt(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        let ai = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(ai, &b[j * k..(j + 1) * k]);
        }
    }
    out
}

/// `out[m, n] += a[m, k] · b[k, n]`
pub fn matmul_nn_acc(a: &[Real], b: &[Real], m: usize, k: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip != 0.0 {
                axpy(aip, &b[p * n..(p + 1) * n], row);
            }
        }
    }
}

pub fn matmul_nn(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    matmul_nn_acc(a, b, m, k, n, &mut out);
    out
}

/// `out[m, n] += a[r, m]ᵀ · b[r, n]`
pub fn matmul_tn_acc(a: &[Real], b: &[Real], r: usize, m: usize, n: usize, out: &mut [Real]) {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    debug_assert_eq!(out.len(), m * n);
    for p in 0..r {
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in a[p * m..(p + 1) * m].iter().enumerate() {
            if api != 0.0 {
                axpy(api, brow, &mut out[i * n..(i + 1) * n]);
            }
        }
    }
}

pub fn matmul_tn(a: &[Real], b: &[Real], r: usize, m: usize, n: usize) -> Vec<Real> {
    let mut out = vec![0.0; m * n];
    matmul_tn_acc(a, b, r, m, n, &mut out);
    out
}

/// `out[n] = w[n, k] · x[k]`
pub fn matvec(w: &[Real], x: &[Real], n: usize, k: usize) -> Vec<Real> {
    debug_assert_eq!(w.len(), n * k);
    debug_assert_eq!(x.len(), k);
    w.chunks_exact(k).map(|row| dot(row, x)).collect()
}

const GELU_C: Real = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: Real = 0.044_715;

/// GELU, tanh approximation.
#[inline]
pub fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

/// `d gelu / dx`
#[inline]
pub fn gelu_grad(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// In-place numerically stable log-softmax of one row.
pub fn log_softmax_row(row: &mut [Real]) {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    let sum: Real = row.iter().map(|&x| (x - max).exp()).sum();
    let log_z = max + sum.ln();
    for x in row.iter_mut() {
        *x -= log_z;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[Real], b: &[Real], m: usize, k: usize, n: usize) -> Vec<Real> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[Real], rows: usize, cols: usize) -> Vec<Real> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<Real> = (0..m * k)
            .map(|i| ((i * 7 % 13) as Real - 6.0) / 5.0)
            .collect();
        let b: Vec<Real> = (0..k * n)
            .map(|i| ((i * 5 % 11) as Real - 5.0) / 3.0)
            .collect();
        let want = naive(&a, &b, m, k, n);
        let close = |x: &[Real], y: &[Real]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
        assert!(close(&matmul_nn(&a, &b, m, k, n), &want));
        assert!(close(&matmul_nt(&a, &transpose(&b, k, n), m, k, n), &want));
        assert!(close(&matmul_tn(&transpose(&a, m, k), &b, k, m, n), &want));
        let x: Vec<Real> = b[..k].to_vec();
        let mv = matvec(&a, &x, m, k);
        for i in 0..m {
            let s: Real = (0..k).map(|p| a[i * k + p] * x[p]).sum();
            assert!((mv[i] - s).abs() < 1e-9);
        }
    }
}
