//! Tape-free entry points over plain tensors.

use super::{Real, Tape, Tensor};
use crate::{Error, Result};

/// Log-softmax over the last dimension.
pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.shape(), logits.data().to_vec());
    let y = tape.log_softmax(x)?;
    Ok(tape.tensor(y))
}

/// Mean cross-entropy `-(1/L) Σ_i logprobs[i, targets[i]]` with rows aligned to targets.
pub fn cross_entropy(logprobs: &Tensor, targets: &[u32]) -> Result<Real> {
    let s = logprobs.shape();
    if s.len() != 2 || s[0] != targets.len() {
        return Err(Error::Shape(format!(
            "cross_entropy: logprobs {s:?} vs {} targets",
            targets.len()
        )));
    }
    let vocab = s[1];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t as usize >= vocab {
            return Err(Error::TargetOutOfVocab {
                token: t,
                position: i,
                vocab,
            });
        }
        total += logprobs.data()[i * vocab + t as usize];
    }
    Ok(-total / targets.len() as Real)
}

/// Shannon entropy (nats) of each row of a log-probability matrix.
pub fn entropy_rows(logprobs: &Tensor) -> Vec<Real> {
    let vocab = *logprobs.shape().last().expect("entropy of scalar");
    logprobs
        .data()
        .chunks_exact(vocab)
        .map(|row| -row.iter().map(|&l| l.exp() * l).sum::<Real>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_pair() {
        let y = log_softmax(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let ln2 = (2.0 as Real).ln();
        assert!((y.data()[0] + ln2).abs() < 1e-12);
        assert!((y.data()[1] + ln2).abs() < 1e-12);
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let y = log_softmax(&Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap()).unwrap();
        assert!(y.data()[0].abs() < 1e-12);
        assert!((y.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn random_row_matches_high_precision_reference() {
        // Reference values computed with mpmath at 50 digits for
        // x = [0.3, -1.7, 2.2, 0.05]: log(exp(x_i) / Σ exp(x)).
        let x = [0.3, -1.7, 2.2, 0.05];
        let want = [
            -2.151765750763319,
            -4.151765750763319,
            -0.2517657507633193,
            -2.401765750763319,
        ];
        let y = log_softmax(&Tensor::new(vec![4], x.to_vec()).unwrap()).unwrap();
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn rows_normalize_for_extreme_inputs() {
        let x = Tensor::from_fn(&[3, 5], |i| ((i * 7919) % 2001) as Real * 10.0 - 10000.0);
        let y = log_softmax(&x).unwrap();
        for row in y.data().chunks_exact(5) {
            let s: Real = row.iter().map(|l| l.exp()).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let ln4 = (4.0 as Real).ln();
        let uniform = Tensor::new(vec![3, 4], vec![-ln4; 12]).unwrap();
        assert!((cross_entropy(&uniform, &[0, 3, 1]).unwrap() - ln4).abs() < 1e-12);

        let mut perfect = vec![-1e30; 8];
        perfect[1] = 0.0;
        perfect[4 + 2] = 0.0;
        let perfect = Tensor::new(vec![2, 4], perfect).unwrap();
        assert_eq!(cross_entropy(&perfect, &[1, 2]).unwrap(), 0.0);

        let lp = Tensor::new(
            vec![2, 2],
            vec![
                (0.8 as Real).ln(),
                (0.2 as Real).ln(),
                (0.3 as Real).ln(),
                (0.7 as Real).ln(),
            ],
        )
        .unwrap();
        let want = -((0.8 as Real).ln() + (0.7 as Real).ln()) / 2.0;
        assert!((cross_entropy(&lp, &[0, 1]).unwrap() - want).abs() < 1e-12);

        assert!(matches!(
            cross_entropy(&lp, &[0, 2]),
            Err(Error::TargetOutOfVocab {
                token: 2,
                position: 1,
                ..
            })
        ));
    }
}
