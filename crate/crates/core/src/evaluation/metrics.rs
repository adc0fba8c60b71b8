//! Threshold sweeps over scored samples.
//!
//! Orientation: [`POSITIVE`] (machine) is the positive class and a sample is
//! predicted positive iff `score >= t`. Equal scores cross a threshold
//! together, which gives tied human/machine pairs half credit in the ROC AUC.
//!
//! PR AUC is average precision with step-wise interpolation:
//! `Σ_k (R_k − R_{k−1}) · P_k` over distinct thresholds in decreasing order,
//! with no linear interpolation between points. The curve starts at
//! `(0, P_1)`, the precision at the highest threshold.

use super::{Label, ScoredSample, POSITIVE};
use crate::{Error, Result};

/// Confusion counts at one threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn at(samples: &[ScoredSample], t: f64) -> Self {
        let mut c = Confusion::default();
        for s in samples {
            match (s.label == POSITIVE, s.score >= t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, true) => c.fp += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// F1 of the positive class; 0 when there are no true positives.
    pub fn f1(&self) -> f64 {
        ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }

    pub fn tpr(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    pub accuracy: f64,
    pub f1: f64,
    pub fpr: f64,
    pub tpr: f64,
}

pub fn metrics_at_threshold(samples: &[ScoredSample], t: f64) -> ThresholdMetrics {
    let c = Confusion::at(samples, t);
    ThresholdMetrics {
        accuracy: c.accuracy(),
        f1: c.f1(),
        fpr: c.fpr(),
        tpr: c.tpr(),
    }
}

/// `(score, positives, negatives)` per distinct score, highest first.
struct Groups {
    groups: Vec<(f64, usize, usize)>,
    pos: usize,
    neg: usize,
}

fn check_finite(samples: &[ScoredSample]) -> Result<()> {
    match samples.iter().position(|s| !s.score.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: samples[index].score,
        }),
        None => Ok(()),
    }
}

fn label_counts(samples: &[ScoredSample]) -> (usize, usize) {
    let pos = samples.iter().filter(|s| s.label == POSITIVE).count();
    (pos, samples.len() - pos)
}

fn require_both(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    check_finite(samples)?;
    let (pos, neg) = label_counts(samples);
    if pos == 0 || neg == 0 {
        let (human, machine) = if POSITIVE == Label::Machine {
            (neg, pos)
        } else {
            (pos, neg)
        };
        return Err(Error::SingleClass { human, machine });
    }
    Ok((pos, neg))
}

fn groups(samples: &[ScoredSample]) -> Result<Groups> {
    let (pos, neg) = require_both(samples)?;
    let mut sorted: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (s.score, s.label == POSITIVE))
        .collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (score, is_pos) in sorted {
        match groups.last_mut() {
            Some(g) if g.0 == score => {}
            _ => groups.push((score, 0, 0)),
        }
        let g = groups.last_mut().expect("just pushed");
        if is_pos {
            g.1 += 1;
        } else {
            g.2 += 1;
        }
    }
    Ok(Groups { groups, pos, neg })
}

/// ROC curve as `(fpr, tpr)` points from `(0, 0)` to `(1, 1)`, and its trapezoidal area.
pub fn roc_auc(samples: &[ScoredSample]) -> Result<(Vec<(f64, f64)>, f64)> {
    let g = groups(samples)?;
    let mut curve = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    // Twice the area in units of 1 / (pos · neg), kept integral.
    let mut area2: u128 = 0;
    for &(_, p, n) in &g.groups {
        area2 += n as u128 * (2 * tp + p) as u128;
        tp += p;
        fp += n;
        curve.push((fp as f64 / g.neg as f64, tp as f64 / g.pos as f64));
    }
    let auc = area2 as f64 / (2.0 * g.pos as f64 * g.neg as f64);
    Ok((curve, auc))
}

/// PR curve as `(recall, precision)` points and its step-wise area (average precision).
pub fn pr_auc(samples: &[ScoredSample]) -> Result<(Vec<(f64, f64)>, f64)> {
    let g = groups(samples)?;
    let mut curve = Vec::with_capacity(g.groups.len() + 1);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    for &(_, p, n) in &g.groups {
        tp += p;
        fp += n;
        let precision = tp as f64 / (tp + fp) as f64;
        if curve.is_empty() {
            curve.push((0.0, precision));
        }
        auc += p as f64 * precision;
        curve.push((tp as f64 / g.pos as f64, precision));
    }
    Ok((curve, auc / g.pos as f64))
}

/// Distinct scores in increasing order.
fn distinct_ascending(samples: &[ScoredSample]) -> Vec<f64> {
    let mut xs: Vec<f64> = samples.iter().map(|s| s.score).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// A threshold strictly above `lo` and at most `hi`.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let m = 0.5 * lo + 0.5 * hi;
    if m > lo && m <= hi {
        m
    } else {
        hi
    }
}

/// Candidate thresholds in increasing order: the minimum score, then the
/// midpoints of adjacent distinct scores.
fn sweep_candidates(samples: &[ScoredSample]) -> Vec<f64> {
    let xs = distinct_ascending(samples);
    let mut out = Vec::with_capacity(xs.len());
    out.push(xs[0]);
    out.extend(xs.windows(2).map(|w| midpoint(w[0], w[1])));
    out
}

/// Confusion counts at every sweep candidate, from prefix sums over the ascending groups.
fn sweep(samples: &[ScoredSample]) -> Result<Vec<(f64, Confusion)>> {
    let g = groups(samples)?;
    let candidates = sweep_candidates(samples);
    let mut out = Vec::with_capacity(candidates.len());
    // Groups are descending; candidate i predicts positive on groups[..len - i].
    let (mut tp, mut fp) = (g.pos, g.neg);
    for (i, &t) in candidates.iter().enumerate() {
        if i > 0 {
            let (_, p, n) = g.groups[g.groups.len() - i];
            tp -= p;
            fp -= n;
        }
        out.push((
            t,
            Confusion {
                tp,
                fp,
                tn: g.neg - fp,
                fn_: g.pos - tp,
            },
        ));
    }
    Ok(out)
}

fn best_by(samples: &[ScoredSample], metric: impl Fn(&Confusion) -> f64) -> Result<(f64, f64)> {
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for (t, c) in sweep(samples)? {
        let v = metric(&c);
        if v >= best.1 {
            best = (t, v);
        }
    }
    Ok(best)
}

/// Threshold maximizing F1 over the sweep candidates; ties go to the larger threshold.
pub fn best_f1_threshold(samples: &[ScoredSample]) -> Result<(f64, f64)> {
    best_by(samples, Confusion::f1)
}

/// Threshold maximizing accuracy over the sweep candidates; ties go to the larger threshold.
pub fn best_accuracy_threshold(samples: &[ScoredSample]) -> Result<(f64, f64)> {
    best_by(samples, Confusion::accuracy)
}

/// Smallest threshold among the distinct scores and `next_up(max)` whose
/// empirical FPR is at most `target_fpr`, with the TPR it achieves.
pub fn threshold_at_fpr(samples: &[ScoredSample], target_fpr: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::Config(format!(
            "target FPR must be in [0, 1], got {target_fpr}"
        )));
    }
    if samples.is_empty() {
        return Err(Error::Empty("no scored samples".into()));
    }
    check_finite(samples)?;
    let (pos, neg) = label_counts(samples);
    let mut candidates = distinct_ascending(samples);
    candidates.push(candidates.last().expect("non-empty").next_up());
    // FPR is non-increasing in t, so scan from the top for the last feasible candidate.
    let mut sorted: Vec<(f64, bool)> = samples
        .iter()
        .map(|s| (s.score, s.label == POSITIVE))
        .collect();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut chosen = (*candidates.last().expect("non-empty"), 0.0);
    let mut next = 0;
    for &t in candidates.iter().rev() {
        while next < sorted.len() && sorted[next].0 >= t {
            if sorted[next].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            next += 1;
        }
        if ratio(fp, neg) <= target_fpr {
            chosen = (t, ratio(tp, pos));
        } else {
            break;
        }
    }
    Ok(chosen)
}
