//! Metrics, checkpoint selection and FLOPs accounting.

mod flops;
mod report;
mod topsis;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use flops::{compare_flops, count_flops, dense_flops, efficiency_rows, FlopsLedger, FlopsRow};
pub use report::{ablation_table, flops_table, printed_disagrees, AblationRow};
pub use topsis::{topsis_scores, topsis_select, Criterion};

/// How an outfit is ranked for AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AucScore {
    /// The compatibility output.
    Ocr,
    /// `1 − mean(y_mid)`, for models without a trained compatibility head.
    MidMean,
}

/// Predicted outputs of one outfit, aligned with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_ocr: f64,
    pub y_mid: Vec<f64>,
}

/// Targets of one outfit.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub t_ocr: f64,
    pub t_mid: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    /// Percent of items whose thresholded prediction matches.
    pub binary_accuracy: f64,
    /// Percent of outfits whose whole thresholded vector matches.
    pub exact_match: f64,
    pub auc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub auc_undefined: Option<String>,
    pub outfits: usize,
    pub items: usize,
}

/// Area under the ROC curve from ranks (Mann-Whitney U, ties get half
/// credit). Errors when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> std::result::Result<f64, String> {
    if scores.len() != labels.len() {
        return Err(format!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(format!("AUC needs both classes, got {pos} positive and {neg} negative outfits"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err("scores contain NaN".into());
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Ranks are 1-based; a tie group spanning sorted positions i..j gets the
    // average rank (i + 1 + j) / 2, kept doubled to stay integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let doubled = (i + 1 + j) as u128;
        rank_sum2 += doubled * order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        i = j;
    }
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// MAE over outfits, thresholded item accuracy and exact match over real
/// items, and AUC over the outfits whose target is 0 or 1.
pub fn compute_metrics(preds: &[Prediction], targets: &[Target], threshold: f64, score: AucScore) -> Result<MetricReport> {
    if preds.len() != targets.len() {
        return Err(Error::dim("compute_metrics", &[preds.len()], &[targets.len()]));
    }
    if preds.is_empty() {
        return Err(Error::Contract("metrics need at least one outfit".into()));
    }
    let (mut abs, mut correct, mut items, mut exact) = (0.0, 0usize, 0usize, 0usize);
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (p, t) in preds.iter().zip(targets) {
        if p.y_mid.len() != t.t_mid.len() {
            return Err(Error::dim("item predictions", &[p.y_mid.len()], &[t.t_mid.len()]));
        }
        abs += (p.y_ocr - t.t_ocr).abs();
        let hits = p.y_mid.iter().zip(&t.t_mid).filter(|(y, &b)| (**y > threshold) == (b == 1)).count();
        correct += hits;
        items += t.t_mid.len();
        exact += usize::from(hits == t.t_mid.len());
        if t.t_ocr == 0.0 || t.t_ocr == 1.0 {
            scores.push(match score {
                AucScore::Ocr => p.y_ocr,
                AucScore::MidMean => 1.0 - p.y_mid.iter().sum::<f64>() / p.y_mid.len().max(1) as f64,
            });
            labels.push(t.t_ocr == 1.0);
        }
    }
    let n = preds.len();
    let (auc, auc_undefined) = match auc(&scores, &labels) {
        Ok(a) => (Some(a), None),
        Err(reason) => (None, Some(reason)),
    };
    Ok(MetricReport {
        mae: abs / n as f64,
        binary_accuracy: if items == 0 { 0.0 } else { 100.0 * correct as f64 / items as f64 },
        exact_match: 100.0 * exact as f64 / n as f64,
        auc,
        auc_undefined,
        outfits: n,
        items,
    })
}
