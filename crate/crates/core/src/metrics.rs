//! Evaluation metrics: RMSE, MAE, micro/macro precision and recall at K,
//! and NDCG at K.
//!
//! Ranking metrics consume a [`RankedPrediction`]: per example, the
//! predicted label ids in descending score order plus the true label set.
//! Macro averages divide by the total number of classes, and a class whose
//! precision or recall denominator is zero contributes zero.

use std::collections::BTreeSet;

use crate::error::{Error, Result};

/// Ranked label predictions with ground truth, for `n_classes` classes.
#[derive(Debug, Clone)]
pub struct RankedPrediction {
    n_classes: usize,
    ranked: Vec<Vec<usize>>,
    truth: Vec<BTreeSet<usize>>,
}

impl RankedPrediction {
    /// `ranked[i]` must hold unique class ids; `truth[i]` must be nonempty.
    pub fn new(
        n_classes: usize,
        ranked: Vec<Vec<usize>>,
        truth: Vec<BTreeSet<usize>>,
    ) -> Result<RankedPrediction> {
        if ranked.len() != truth.len() {
            return Err(Error::LengthMismatch(ranked.len(), truth.len()));
        }
        for (i, r) in ranked.iter().enumerate() {
            let unique: BTreeSet<usize> = r.iter().copied().collect();
            if unique.len() != r.len() {
                return Err(Error::Invalid(format!(
                    "example {i}: duplicate predicted labels"
                )));
            }
            if r.iter().any(|&c| c >= n_classes) {
                return Err(Error::Invalid(format!(
                    "example {i}: predicted label out of range"
                )));
            }
        }
        for (i, t) in truth.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Invalid(format!("example {i}: empty true label set")));
            }
            if t.iter().any(|&c| c >= n_classes) {
                return Err(Error::Invalid(format!(
                    "example {i}: true label out of range"
                )));
            }
        }
        Ok(RankedPrediction {
            n_classes,
            ranked,
            truth,
        })
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Every example is single-label.
    pub fn is_single_label(&self) -> bool {
        self.truth.iter().all(|t| t.len() == 1)
    }

    fn top_k(&self, i: usize, k: usize) -> &[usize] {
        let r = &self.ranked[i];
        &r[..k.min(r.len())]
    }

    /// Per-class true positives, false positives, false negatives at K.
    fn confusion_at_k(&self, k: usize) -> Vec<(usize, usize, usize)> {
        let mut counts = vec![(0usize, 0usize, 0usize); self.n_classes];
        for i in 0..self.len() {
            let top: BTreeSet<usize> = self.top_k(i, k).iter().copied().collect();
            for &c in &top {
                if self.truth[i].contains(&c) {
                    counts[c].0 += 1;
                } else {
                    counts[c].1 += 1;
                }
            }
            for &c in &self.truth[i] {
                if !top.contains(&c) {
                    counts[c].2 += 1;
                }
            }
        }
        counts
    }
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let sq: f64 = pred
        .iter()
        .zip(truth)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let abs: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(abs / pred.len() as f64)
}

/// Pooled (TP, FP, FN) over all classes at top-K:
/// precision = sum TP / (sum TP + sum FP), recall = sum TP / (sum TP + sum FN).
pub fn micro_pr_at_k(rp: &RankedPrediction, k: usize) -> (f64, f64) {
    assert!(k >= 1, "K must be at least 1");
    let counts = rp.confusion_at_k(k);
    let tp: usize = counts.iter().map(|c| c.0).sum();
    let fp: usize = counts.iter().map(|c| c.1).sum();
    let fne: usize = counts.iter().map(|c| c.2).sum();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fne);
    (precision, recall)
}

/// Unweighted mean of per-class precision/recall over *all* classes;
/// zero-denominator classes contribute zero.
pub fn macro_pr_at_k(rp: &RankedPrediction, k: usize) -> (f64, f64) {
    assert!(k >= 1, "K must be at least 1");
    let counts = rp.confusion_at_k(k);
    let n = rp.n_classes as f64;
    let p_sum: f64 = counts.iter().map(|&(tp, fp, _)| ratio(tp, tp + fp)).sum();
    let r_sum: f64 = counts.iter().map(|&(tp, _, fne)| ratio(tp, tp + fne)).sum();
    (p_sum / n, r_sum / n)
}

/// Mean over examples of DCG@K / IDCG@K with binary relevance:
/// DCG = sum over ranks `r = 1..=K` of `[pred_r relevant] / log2(r + 1)`,
/// IDCG = sum over `r = 1..=min(K, |truth|)` of `1 / log2(r + 1)`.
pub fn ndcg_at_k(rp: &RankedPrediction, k: usize) -> f64 {
    assert!(k >= 1, "K must be at least 1");
    if rp.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..rp.len() {
        let mut dcg = 0.0;
        for (rank, &c) in rp.top_k(i, k).iter().enumerate() {
            if rp.truth[i].contains(&c) {
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let ideal_len = k.min(rp.truth[i].len());
        let idcg: f64 = (0..ideal_len).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        total += dcg / idcg;
    }
    total / rp.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 { 0.0 } else { num as f64 / den as f64 }
}
