use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::rng;

fn labeled(machine: &[f64], human: &[f64]) -> Vec<ScoredSample> {
    let m = machine
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredSample::new(format!("m{i}"), Label::Machine, s));
    let h = human
        .iter()
        .enumerate()
        .map(|(i, &s)| ScoredSample::new(format!("h{i}"), Label::Human, s));
    m.chain(h).collect()
}

/// Scores drawn from a small grid so that ties are common.
fn random_set(seed: u64, max_n: usize) -> Vec<ScoredSample> {
    let mut r = rng::stream(seed, &[]);
    let n = r.random_range(2..=max_n);
    let grid = r.random_range(2..40) as f64;
    let mut out: Vec<ScoredSample> = (0..n)
        .map(|i| {
            let label = if r.random_bool(0.4) {
                Label::Machine
            } else {
                Label::Human
            };
            let score = if r.random_bool(0.5) {
                (r.random_range(0..grid as u32) as f64) / grid
            } else {
                r.random::<f64>() * 2.0 - 0.5
            };
            ScoredSample::new(i.to_string(), label, score)
        })
        .collect();
    out[0].label = Label::Machine;
    out[1].label = Label::Human;
    out
}

fn mann_whitney(s: &[ScoredSample]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for m in s.iter().filter(|x| x.label == Label::Machine) {
        for h in s.iter().filter(|x| x.label == Label::Human) {
            pairs += 1.0;
            num += if m.score > h.score {
                1.0
            } else if m.score == h.score {
                0.5
            } else {
                0.0
            };
        }
    }
    num / pairs
}

fn counts_at(s: &[ScoredSample], t: f64) -> (usize, usize, usize, usize) {
    let tp = s
        .iter()
        .filter(|x| x.label == Label::Machine && x.score >= t)
        .count();
    let fp = s
        .iter()
        .filter(|x| x.label == Label::Human && x.score >= t)
        .count();
    let p = s.iter().filter(|x| x.label == Label::Machine).count();
    (tp, fp, p - tp, s.len() - p - fp)
}

fn sorted_distinct(s: &[ScoredSample]) -> Vec<f64> {
    let mut xs: Vec<f64> = s.iter().map(|x| x.score).collect();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup();
    xs
}

fn brute_ap(s: &[ScoredSample]) -> f64 {
    let p = s.iter().filter(|x| x.label == Label::Machine).count() as f64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for &t in sorted_distinct(s).iter().rev() {
        let (tp, fp, _, _) = counts_at(s, t);
        let recall = tp as f64 / p;
        ap += (recall - prev_recall) * (tp as f64 / (tp + fp) as f64);
        prev_recall = recall;
    }
    ap
}

fn brute_best_f1(s: &[ScoredSample]) -> (f64, f64) {
    let xs = sorted_distinct(s);
    let mut cands = vec![xs[0]];
    cands.extend(xs.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    let mut best = (f64::NAN, -1.0);
    for t in cands {
        let (tp, fp, fn_, _) = counts_at(s, t);
        let f1 = if tp == 0 {
            0.0
        } else {
            (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
        };
        if f1 >= best.1 {
            best = (t, f1);
        }
    }
    best
}

fn brute_threshold_at_fpr(s: &[ScoredSample], target: f64) -> (f64, f64) {
    let mut cands = sorted_distinct(s);
    cands.push(cands.last().unwrap().next_up());
    let neg = s.iter().filter(|x| x.label == Label::Human).count() as f64;
    let pos = s.len() as f64 - neg;
    for t in cands {
        let (tp, fp, _, _) = counts_at(s, t);
        if fp as f64 / neg <= target {
            return (t, tp as f64 / pos);
        }
    }
    unreachable!("next_up(max) has zero false positives")
}

#[test]
fn roc_examples() {
    let (curve, auc) = roc_auc(&labeled(&[0.9, 0.8], &[0.4, 0.6])).unwrap();
    assert_eq!(auc, 1.0);
    assert_eq!(curve.first(), Some(&(0.0, 0.0)));
    assert_eq!(curve.last(), Some(&(1.0, 1.0)));
    let (_, auc) = roc_auc(&labeled(&[0.8, 0.5], &[0.6, 0.4])).unwrap();
    assert!((auc - 0.75).abs() < 1e-12);
    let (_, tied) = roc_auc(&labeled(&[0.5], &[0.5])).unwrap();
    assert_eq!(tied, 0.5);
}

#[test]
fn single_class_rejected() {
    let only = labeled(&[0.1, 0.2], &[]);
    assert!(matches!(
        roc_auc(&only),
        Err(Error::SingleClass {
            human: 0,
            machine: 2
        })
    ));
    assert!(pr_auc(&only).is_err());
    assert!(best_f1_threshold(&only).is_err());
    assert!(detection_report(&only, 0.05).is_err());
}

#[test]
fn shuffled_labels_average_half() {
    let mut r = rng::stream(21, &[]);
    let scores: Vec<f64> = (0..60).map(|_| r.random::<f64>()).collect();
    let mut total = 0.0;
    for trial in 0..1000 {
        let mut labels: Vec<Label> = (0..60)
            .map(|i| if i < 25 { Label::Machine } else { Label::Human })
            .collect();
        rand::seq::SliceRandom::shuffle(&mut labels[..], &mut rng::stream(trial, &[]));
        let s: Vec<_> = scores
            .iter()
            .zip(labels)
            .map(|(&x, l)| ScoredSample::new("", l, x))
            .collect();
        total += roc_auc(&s).unwrap().1;
    }
    assert!((total / 1000.0 - 0.5).abs() < 0.05);
}

#[test]
fn pr_examples() {
    let (curve, ap) = pr_auc(&labeled(&[0.9, 0.8], &[0.4, 0.6])).unwrap();
    assert_eq!(ap, 1.0);
    assert_eq!(curve.first().unwrap().0, 0.0);
    assert_eq!(curve.last().unwrap().0, 1.0);
    let flat = labeled(&[0.3; 3], &[0.3; 7]);
    let (curve, ap) = pr_auc(&flat).unwrap();
    assert!(curve.iter().all(|&(_, p)| (p - 0.3).abs() < 1e-15));
    assert!((ap - 0.3).abs() < 1e-15);
}

#[test]
fn metrics_hand_case() {
    let s = labeled(&[0.9, 0.7, 0.4], &[0.8, 0.3, 0.2]);
    // At 0.5: predicted machine = {0.9, 0.7, 0.8} -> tp 2, fp 1, fn 1, tn 2.
    let m = metrics_at_threshold(&s, 0.5);
    assert_eq!(m.accuracy, 4.0 / 6.0);
    assert_eq!(m.f1, 4.0 / 6.0);
    assert_eq!(m.fpr, 1.0 / 3.0);
    assert_eq!(m.tpr, 2.0 / 3.0);
    let low = metrics_at_threshold(&s, 0.0);
    assert_eq!((low.tpr, low.fpr, low.accuracy), (1.0, 1.0, 0.5));
    let high = metrics_at_threshold(&s, 1.0);
    assert_eq!((high.tpr, high.fpr), (0.0, 0.0));
}

#[test]
fn best_f1_examples() {
    let s = labeled(&[0.9, 0.8], &[0.4, 0.6]);
    let (t, f1) = best_f1_threshold(&s).unwrap();
    assert_eq!(f1, 1.0);
    assert!(t > 0.6 && t <= 0.8);
    let flat = labeled(&[1.0; 2], &[1.0; 6]);
    let p = 0.25;
    assert_eq!(best_f1_threshold(&flat).unwrap().1, 2.0 * p / (p + 1.0));
}

#[test]
fn fpr_threshold_examples() {
    let s = labeled(&[0.9, 0.7, 0.4], &[0.8, 0.3, 0.2]);
    assert_eq!(threshold_at_fpr(&s, 1.0).unwrap(), (0.2, 1.0));
    let (t, _) = threshold_at_fpr(&s, 0.0).unwrap();
    assert!(t > 0.8);
    assert_eq!(threshold_at_fpr(&s, 0.0).unwrap(), (0.9, 1.0 / 3.0));
    assert!(threshold_at_fpr(&s, 1.5).is_err());
    let s100 = random_set(5, 100);
    assert_eq!(
        threshold_at_fpr(&s100, 0.1).unwrap(),
        brute_threshold_at_fpr(&s100, 0.1)
    );
}

#[test]
fn oracles_on_random_sets() {
    for seed in 0..200 {
        let s = random_set(seed, 200);
        let (curve, auc) = roc_auc(&s).unwrap();
        assert!((auc - mann_whitney(&s)).abs() < 1e-9, "seed {seed}");
        assert_eq!(curve.first(), Some(&(0.0, 0.0)));
        assert_eq!(curve.last(), Some(&(1.0, 1.0)));
        let (pr_curve, ap) = pr_auc(&s).unwrap();
        assert!((ap - brute_ap(&s)).abs() < 1e-12, "seed {seed}");
        assert_eq!(pr_curve.last().unwrap().0, 1.0);
        let best = best_f1_threshold(&s).unwrap();
        assert_eq!(best, brute_best_f1(&s), "seed {seed}");
        assert_eq!(metrics_at_threshold(&s, best.0).f1, best.1);
        for target in [0.0, 0.1, 0.37, 1.0] {
            assert_eq!(
                threshold_at_fpr(&s, target).unwrap(),
                brute_threshold_at_fpr(&s, target)
            );
        }
    }
}

fn invariant_fields(r: &DetectionReport) -> (f64, f64, f64, f64, f64) {
    (r.roc_auc, r.pr_auc, r.f1, r.accuracy, r.tpr_at_fpr)
}

#[test]
fn monotone_invariance() {
    for seed in 0..50 {
        let s = random_set(seed, 120);
        let base = detection_report(&s, 0.1).unwrap();
        for f in [|x: f64| 2.0 * x + 1.0, f64::exp] {
            let t: Vec<_> = s
                .iter()
                .map(|x| ScoredSample {
                    score: f(x.score),
                    ..x.clone()
                })
                .collect();
            assert_eq!(
                invariant_fields(&detection_report(&t, 0.1).unwrap()),
                invariant_fields(&base)
            );
        }
    }
}

#[test]
fn report_json_is_flat() {
    let r = detection_report(&labeled(&[0.9, 0.8, 0.3], &[0.4, 0.6]), 0.5).unwrap();
    let v = serde_json::to_value(&r).unwrap();
    let obj = v.as_object().unwrap();
    assert!(obj.values().all(|x| x.is_number()));
    assert_eq!(obj["n_human"], 2);
    assert_eq!(obj["n_machine"], 3);
}

#[test]
fn scatter_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scatter.csv");
    let s = random_set(3, 30);
    export_scatter(&s, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), s.len() + 1);
    assert_eq!(text.lines().next(), Some("source_id,label,score"));
    assert_eq!(read_scatter(&path).unwrap(), s);
    export_scatter(&[], &path).unwrap();
    assert_eq!(
        std::fs::read_to_string(&path).unwrap(),
        "source_id,label,score\n"
    );
    assert!(read_scatter(&path).unwrap().is_empty());
}

#[test]
fn protocol_pairs_lengths_and_is_deterministic() {
    use crate::data::TokenSeq;
    use crate::model::{init_model, LoraConfig, ModelConfig, Role};
    let cfg = ModelConfig {
        vocab_size: 258,
        context_len: 20,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
    };
    let mut m = init_model(&cfg, 1).unwrap();
    m.attach_adapter(&LoraConfig::new(2, 4.0), Role::Performer, 2)
        .unwrap();
    m.attach_adapter(&LoraConfig::new(2, 8.0), Role::Observer, 3)
        .unwrap();
    let human: Vec<TokenSeq> = (0..4)
        .map(|i| {
            TokenSeq::real((0..12 + i).map(|t| 97 + (t * 7 + i) as u32 % 26).collect()).unwrap()
        })
        .collect();
    let pc = ProtocolConfig {
        prompt_len: 4,
        ..Default::default()
    };
    let machine = machine_sequences(&m, &human, &pc).unwrap();
    for (h, g) in human.iter().zip(&machine) {
        assert_eq!(g.prompt_len(), 4);
        assert_eq!(&g.tokens()[..4], &h.tokens()[..4]);
        assert!(g.len() <= h.len());
    }
    let a = detection_samples(&m, &human, &pc).unwrap();
    assert_eq!(a, detection_samples(&m, &human, &pc).unwrap());
    assert_eq!(a.iter().filter(|s| s.label == Label::Human).count(), 4);
    let loss = heldout_task_loss(&m, Some(Role::Performer), &human).unwrap();
    assert!(loss > 0.0 && loss.is_finite());
}

proptest! {
    #[test]
    fn rates_in_unit_interval(scores in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)) {
        let mut s: Vec<_> = scores
            .iter()
            .map(|&(x, m)| ScoredSample::new("", if m { Label::Machine } else { Label::Human }, x))
            .collect();
        s[0].label = Label::Machine;
        s[1].label = Label::Human;
        let r = detection_report(&s, 0.2).unwrap();
        for v in [r.roc_auc, r.pr_auc, r.accuracy, r.f1, r.tpr_at_fpr] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert_eq!(r.n_human + r.n_machine, s.len());
    }
}
