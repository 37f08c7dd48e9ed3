//! Calibration and accuracy metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SegmentSet;
use crate::decoder::{argmax, evaluate, DecoderModel};
use crate::error::{Error, Result};

pub const DEFAULT_ECE_BINS: usize = 15;

/// Gaussian negative log-likelihood `½ log v + (y − ȳ)² / (2v)`.
pub fn nll(y: f64, ybar: f64, v: f64) -> Result<f64> {
    if !(v > 0.0) {
        return Err(Error::invalid(format!("nll needs a positive variance, got {v}")));
    }
    Ok(0.5 * v.ln() + (y - ybar).powi(2) / (2.0 * v))
}

/// Predicted class probabilities and true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    /// Row-major `[n, k]`.
    pub probs: Vec<f64>,
    pub n_classes: usize,
    pub labels: Vec<usize>,
    /// True-class predictive variance per example, when available.
    pub variances: Option<Vec<f64>>,
}

impl EvalBatch {
    pub fn new(probs: Vec<f64>, n_classes: usize, labels: Vec<usize>, variances: Option<Vec<f64>>) -> Result<Self> {
        if n_classes == 0 || probs.len() != labels.len() * n_classes {
            return Err(Error::shape("eval batch", format!("{} probabilities for {} labels", probs.len(), labels.len())));
        }
        if labels.is_empty() {
            return Err(Error::Empty("eval batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {n_classes} classes")));
        }
        for row in probs.chunks(n_classes) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::invalid(format!("probability row sums to {s}")));
            }
        }
        if let Some(v) = &variances {
            if v.len() != labels.len() {
                return Err(Error::shape("eval batch", "one variance per example required"));
            }
        }
        Ok(Self { probs, n_classes, labels, variances })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

pub fn accuracy(batch: &EvalBatch) -> f64 {
    let hits = (0..batch.len()).filter(|&i| argmax(batch.row(i)) == batch.labels[i]).count();
    hits as f64 / batch.len() as f64
}

pub fn brier(batch: &EvalBatch) -> f64 {
    let k = batch.n_classes as f64;
    let total: f64 = (0..batch.len())
        .map(|i| {
            batch.row(i).iter().enumerate().map(|(j, &p)| (if j == batch.labels[i] { 1.0 } else { 0.0 } - p).powi(2)).sum::<f64>() / k
        })
        .sum();
    total / batch.len() as f64
}

/// One equal-width confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

pub fn reliability_bins(batch: &EvalBatch, n_bins: usize) -> Result<Vec<Bin>> {
    if n_bins == 0 {
        return Err(Error::invalid("ece needs at least one bin"));
    }
    let mut count = vec![0usize; n_bins];
    let mut hits = vec![0.0; n_bins];
    let mut conf = vec![0.0; n_bins];
    for i in 0..batch.len() {
        let row = batch.row(i);
        let pred = argmax(row);
        let c = row[pred];
        let b = ((c * n_bins as f64) as usize).min(n_bins - 1);
        count[b] += 1;
        conf[b] += c;
        if pred == batch.labels[i] {
            hits[b] += 1.0;
        }
    }
    Ok((0..n_bins)
        .map(|b| {
            let n = count[b].max(1) as f64;
            Bin {
                lower: b as f64 / n_bins as f64,
                upper: (b + 1) as f64 / n_bins as f64,
                count: count[b],
                accuracy: hits[b] / n,
                confidence: conf[b] / n,
            }
        })
        .collect())
}

pub fn ece(batch: &EvalBatch, n_bins: usize) -> Result<f64> {
    let n = batch.len() as f64;
    Ok(reliability_bins(batch, n_bins)?
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n * (b.accuracy - b.confidence).abs())
        .sum())
}

/// Mann-Whitney AUC with midranks for tied scores.
fn binary_auc(scores: &[f64], positive: &[bool]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = mid;
        }
        i = j + 1;
    }
    let n_pos = positive.iter().filter(|&&p| p).count() as f64;
    let n_neg = positive.len() as f64 - n_pos;
    let rank_sum: f64 = ranks.iter().zip(positive).filter(|(_, &p)| p).map(|(r, _)| r).sum();
    (rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg)
}

/// Macro one-vs-rest ROC-AUC over the classes present in the labels.
pub fn roc_auc(batch: &EvalBatch) -> Result<f64> {
    let mut present = vec![false; batch.n_classes];
    for &l in &batch.labels {
        present[l] = true;
    }
    let classes: Vec<usize> = (0..batch.n_classes).filter(|&k| present[k]).collect();
    if classes.len() < 2 {
        return Err(Error::invalid("roc_auc needs at least two classes present"));
    }
    let total: f64 = classes
        .iter()
        .map(|&k| {
            let scores: Vec<f64> = (0..batch.len()).map(|i| batch.row(i)[k]).collect();
            let positive: Vec<bool> = batch.labels.iter().map(|&l| l == k).collect();
            binary_auc(&scores, &positive)
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Mean error rate of `model` over corrupted copies of a set, keyed by
/// corruption (and severity).
pub fn corruption_error(model: &DecoderModel, corrupted_sets: &BTreeMap<String, SegmentSet>) -> Result<f64> {
    if corrupted_sets.is_empty() {
        return Err(Error::Empty("corrupted sets"));
    }
    let mut total = 0.0;
    for set in corrupted_sets.values() {
        let (_, acc) = evaluate(model, set)?;
        total += 1.0 - acc;
    }
    Ok(total / corrupted_sets.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub nll: f64,
    pub brier: f64,
    pub ece: f64,
    pub accuracy: f64,
    pub roc_auc: f64,
    pub corruption_error: Option<f64>,
}

/// All batch metrics. NLL needs per-example true-class variances.
pub fn metric_report(batch: &EvalBatch, corruption_error: Option<f64>) -> Result<MetricReport> {
    let v = batch.variances.as_ref().ok_or_else(|| Error::invalid("nll needs predictive variances"))?;
    let mut total = 0.0;
    for i in 0..batch.len() {
        total += nll(1.0, batch.row(i)[batch.labels[i]], v[i])?;
    }
    Ok(MetricReport {
        nll: total / batch.len() as f64,
        brier: brier(batch),
        ece: ece(batch, DEFAULT_ECE_BINS)?,
        accuracy: accuracy(batch),
        roc_auc: roc_auc(batch)?,
        corruption_error,
    })
}
