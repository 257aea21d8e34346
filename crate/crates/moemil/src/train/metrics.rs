//! Multiclass classification metrics.
//!
//! Per-class binary metrics are macro-averaged (unweighted mean over
//! classes); 0/0 rates are defined as 0. AUC is macro one-vs-rest with
//! the pairwise-probability definition (ties count one half); classes
//! lacking either positives or negatives are skipped from the AUC macro
//! and flagged. MCC uses the multiclass covariance formula, 0 when the
//! denominator vanishes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub f1: f64,
    pub auc: f64,
    pub acc: f64,
    pub mcc: f64,
    pub sens: f64,
    pub spec: f64,
    pub ppv: f64,
    pub npv: f64,
    /// confusion[true][pred]
    pub confusion: Vec<Vec<usize>>,
    /// Classes skipped from the AUC macro (no positives or no negatives).
    pub auc_skipped: Vec<usize>,
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// One-vs-rest AUC by tie-aware rank sum; exactly equals brute-force pair
/// counting (rank sums of ties are integer halves).
fn auc_binary(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // average ranks over tie groups (1-based ranks)
    let mut rank = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            rank[ix] = avg;
        }
        i = j + 1;
    }
    let pos = positive.iter().filter(|&&p| p).count() as f64;
    let neg = n as f64 - pos;
    let rank_sum: f64 = (0..n).filter(|&i| positive[i]).map(|i| rank[i]).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Metrics from labels and per-sample class probabilities; predictions
/// are probability argmax (ties to the lower class index).
pub fn compute_metrics(labels: &[usize], probs: &[Vec<f64>]) -> Result<MetricsReport> {
    if labels.is_empty() || labels.len() != probs.len() {
        return Err(Error::contract(format!(
            "metrics need matching non-empty labels ({}) and probs ({})",
            labels.len(),
            probs.len()
        )));
    }
    let classes = probs[0].len();
    if classes == 0 {
        return Err(Error::contract("metrics need at least one class"));
    }
    for (i, p) in probs.iter().enumerate() {
        if p.len() != classes {
            return Err(Error::contract(format!(
                "probs row {i} has {} entries, expected {classes}",
                p.len()
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-4 {
            return Err(Error::contract(format!("probs row {i} sums to {sum}, not 1")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Index { op: "compute_metrics", index: bad, extent: classes });
    }

    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&label, p) in labels.iter().zip(probs) {
        let pred = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal).then(b.0.cmp(&a.0)))
            .unwrap()
            .0;
        confusion[label][pred] += 1;
    }

    let total = labels.len() as f64;
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let acc = correct as f64 / total;

    let mut f1 = 0.0;
    let mut sens = 0.0;
    let mut spec = 0.0;
    let mut ppv = 0.0;
    let mut npv = 0.0;
    for (c, row) in confusion.iter().enumerate() {
        let tp = row[c] as f64;
        let fn_ = row.iter().sum::<usize>() as f64 - tp;
        let fp = (0..classes).map(|r| confusion[r][c]).sum::<usize>() as f64 - tp;
        let tn = total - tp - fn_ - fp;
        f1 += safe_div(2.0 * tp, 2.0 * tp + fp + fn_);
        sens += safe_div(tp, tp + fn_);
        spec += safe_div(tn, tn + fp);
        ppv += safe_div(tp, tp + fp);
        npv += safe_div(tn, tn + fn_);
    }
    let k = classes as f64;
    f1 /= k;
    sens /= k;
    spec /= k;
    ppv /= k;
    npv /= k;

    // multiclass MCC via the covariance form
    let s = total;
    let c_sum = correct as f64;
    let p_k: Vec<f64> = (0..classes)
        .map(|c| (0..classes).map(|r| confusion[r][c]).sum::<usize>() as f64)
        .collect();
    let t_k: Vec<f64> = (0..classes)
        .map(|c| confusion[c].iter().sum::<usize>() as f64)
        .collect();
    let dot_pt: f64 = p_k.iter().zip(&t_k).map(|(p, t)| p * t).sum();
    let dot_pp: f64 = p_k.iter().map(|p| p * p).sum();
    let dot_tt: f64 = t_k.iter().map(|t| t * t).sum();
    let denom = ((s * s - dot_pp) * (s * s - dot_tt)).sqrt();
    let mcc = if denom == 0.0 { 0.0 } else { (c_sum * s - dot_pt) / denom };

    let mut auc_sum = 0.0;
    let mut auc_classes = 0usize;
    let mut auc_skipped = Vec::new();
    for c in 0..classes {
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let pos = positive.iter().filter(|&&p| p).count();
        if pos == 0 || pos == labels.len() {
            auc_skipped.push(c);
            continue;
        }
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        auc_sum += auc_binary(&scores, &positive);
        auc_classes += 1;
    }
    let auc = if auc_classes == 0 { 0.0 } else { auc_sum / auc_classes as f64 };

    Ok(MetricsReport {
        f1,
        auc,
        acc,
        mcc,
        sens,
        spec,
        ppv,
        npv,
        confusion,
        auc_skipped,
    })
}
