use rand::seq::SliceRandom;

use super::{Corpus, TokenSeq};
use crate::rng::{self, DOMAIN_BATCH};
use crate::{Error, Result};

/// Batch `step` of an epoch-shuffled schedule: slot `step * B + j` maps to
/// position `slot % n` of the permutation for epoch `slot / n`, so each epoch
/// visits every sequence once and the schedule is a pure function of
/// `(corpus, seed)`.
pub fn sample_batch(
    corpus: &Corpus,
    batch_size: usize,
    seed: u64,
    step: usize,
) -> Result<Vec<TokenSeq>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let n = corpus.len();
    if n == 0 {
        return Err(Error::Empty("cannot sample from an empty corpus".into()));
    }
    let permutation = |epoch: usize| {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(&mut rng::stream(seed, &[DOMAIN_BATCH, epoch as u64]));
        p
    };
    let first = step * batch_size;
    let mut epoch = first / n;
    let mut perm = permutation(epoch);
    let mut out = Vec::with_capacity(batch_size);
    for slot in first..first + batch_size {
        if slot / n != epoch {
            epoch = slot / n;
            perm = permutation(epoch);
        }
        out.push(corpus.sequences[perm[slot % n]].clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Split, TokenSeq};
    use std::collections::HashSet;

    fn corpus(n: usize) -> Corpus {
        Corpus {
            sequences: (0..n)
                .map(|i| TokenSeq::real(vec![i as u32 % 256, 1]).unwrap())
                .collect(),
            source: "mem".into(),
            split: Split::Train,
        }
    }

    #[test]
    fn size_and_determinism() {
        let c = corpus(10);
        let a = sample_batch(&c, 4, 3, 7).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a, sample_batch(&c, 4, 3, 7).unwrap());
        assert!(sample_batch(&c, 0, 3, 7).is_err());
    }

    #[test]
    fn every_sequence_is_drawn_within_ten_corpus_sizes() {
        let n = 37;
        let c = corpus(n);
        let b = 4;
        let mut seen = HashSet::new();
        for step in 0..(10 * n).div_ceil(b) {
            for s in sample_batch(&c, b, 11, step).unwrap() {
                seen.insert(s.tokens()[0]);
            }
        }
        assert_eq!(seen.len(), n);
    }
}
