//! Detection metrics over per-sequence Binoculars scores.

mod metrics;
mod protocol;

pub use metrics::{
    best_accuracy_threshold, best_f1_threshold, metrics_at_threshold, pr_auc, roc_auc,
    threshold_at_fpr, Confusion, ThresholdMetrics,
};
pub use protocol::{detection_samples, heldout_task_loss, machine_sequences, ProtocolConfig};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Human,
    Machine,
}

/// The positive class. Higher scores count as more positive.
pub const POSITIVE: Label = Label::Machine;

pub const DEFAULT_TARGET_FPR: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub source_id: String,
    pub label: Label,
    pub score: f64,
}

impl ScoredSample {
    pub fn new(source_id: impl Into<String>, label: Label, score: f64) -> Self {
        Self {
            source_id: source_id.into(),
            label,
            score,
        }
    }
}

/// Accuracy and F1 are taken at `best_f1_threshold`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub roc_auc: f64,
    pub pr_auc: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub best_f1_threshold: f64,
    pub target_fpr: f64,
    pub fpr_threshold: f64,
    pub tpr_at_fpr: f64,
    pub n_human: usize,
    pub n_machine: usize,
}

pub fn detection_report(samples: &[ScoredSample], target_fpr: f64) -> Result<DetectionReport> {
    let (_, roc) = roc_auc(samples)?;
    let (_, pr) = pr_auc(samples)?;
    let (t, f1) = best_f1_threshold(samples)?;
    let at = metrics_at_threshold(samples, t);
    let (fpr_threshold, tpr_at_fpr) = threshold_at_fpr(samples, target_fpr)?;
    let n_machine = samples.iter().filter(|s| s.label == Label::Machine).count();
    Ok(DetectionReport {
        roc_auc: roc,
        pr_auc: pr,
        accuracy: at.accuracy,
        f1,
        best_f1_threshold: t,
        target_fpr,
        fpr_threshold,
        tpr_at_fpr,
        n_human: samples.len() - n_machine,
        n_machine,
    })
}

pub const SCATTER_HEADER: [&str; 3] = ["source_id", "label", "score"];

/// Writes `source_id,label,score` rows; scores use shortest round-trip formatting.
pub fn export_scatter(samples: &[ScoredSample], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(SCATTER_HEADER)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_scatter(path: &Path) -> Result<Vec<ScoredSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let s: ScoredSample = row?;
        if !s.score.is_finite() {
            return Err(Error::NonFinite {
                index: out.len(),
                value: s.score,
            });
        }
        out.push(s);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
