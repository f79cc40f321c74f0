//! Binary classification metrics for last-visit predictions.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    /// 0.5 when only one class is present; see `auc_defined`.
    pub auc: f64,
    pub auc_defined: bool,
    pub f1: f64,
    pub average_precision: f64,
    pub precision: f64,
    pub recall: f64,
    pub n: usize,
    pub positives: usize,
}

impl ClassificationMetrics {
    /// `(name, value)` pairs in report order.
    pub fn rows(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("ACC", self.accuracy),
            ("AUC", self.auc),
            ("F1", self.f1),
            ("AP", self.average_precision),
            ("P", self.precision),
            ("R", self.recall),
        ]
    }
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann-Whitney AUC; `None` unless both classes are present.
pub fn auc(scores: &[f64], truths: &[bool]) -> Option<f64> {
    let pos = truths.iter().filter(|&&t| t).count();
    let neg = truths.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(truths)
        .filter(|(_, &t)| t)
        .map(|(r, _)| r)
        .sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Some(u / (pos as f64 * neg as f64))
}

/// Sum over score thresholds of `(R_n - R_{n-1}) P_n`, with tied scores
/// forming a single threshold. Zero when there are no positives.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> f64 {
    let pos = truths.iter().filter(|&&t| t).count();
    if pos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// ACC, F1, P and R at `score >= threshold`, AUC and AP from the scores.
/// Undefined ratios (no predicted or no actual positives) are reported as 0.
pub fn classification_metrics(
    scores: &[f64],
    truths: &[bool],
    threshold: f64,
) -> Result<ClassificationMetrics> {
    if scores.len() != truths.len() {
        return Err(Error::Domain(format!(
            "{} scores but {} labels",
            scores.len(),
            truths.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::Empty("no predictions".into()));
    }
    let (mut tp, mut fp, mut tn, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &t) in scores.iter().zip(truths) {
        match (s >= threshold, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fneg += 1,
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fneg);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let auc_value = auc(scores, truths);
    Ok(ClassificationMetrics {
        accuracy: ratio(tp + tn, scores.len()),
        auc: auc_value.unwrap_or(0.5),
        auc_defined: auc_value.is_some(),
        f1,
        average_precision: average_precision(scores, truths),
        precision,
        recall,
        n: scores.len(),
        positives: tp + fneg,
    })
}
