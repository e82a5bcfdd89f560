//! Evaluation metrics: normalized entropy and the transfer ratio.
//!
//! Normalized entropy is the mean binary cross-entropy divided by the
//! entropy of the label base rate, so the constant base-rate predictor
//! scores exactly 1.0 and lower is better. An improvement of 0.05% NE is
//! treated as significant in reports.

use crate::error::{Error, Result};

/// Reports flag NE differences at or beyond this magnitude (in percent)
/// as significant.
pub const SIGNIFICANT_NE_DIFF_PCT: f64 = 0.05;

/// Transfer ratios are undefined when the foundation-model NE difference is
/// below this absolute magnitude.
pub const TR_DENOMINATOR_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NeResult {
    pub task: String,
    pub ne: f64,
    pub n: usize,
    pub positive_rate: f64,
}

/// Normalized entropy of predictions against binary labels.
///
/// Requires at least one positive and one negative label (the base-rate
/// entropy is zero otherwise) and probabilities strictly inside (0, 1).
pub fn normalized_entropy(task: &str, labels: &[bool], probs: &[f64]) -> Result<NeResult> {
    if labels.len() != probs.len() {
        return Err(Error::Contract(format!(
            "{} labels vs {} probabilities",
            labels.len(),
            probs.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::NeUndefined(format!("task {task}: no examples")));
    }
    for &p in probs {
        if !(p > 0.0 && p < 1.0) || !p.is_finite() {
            return Err(Error::NeUndefined(format!(
                "task {task}: probability {p} outside (0, 1)"
            )));
        }
    }
    let n = labels.len();
    let positives = labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Err(Error::NeUndefined(format!(
            "task {task}: labels are all-{} ({positives}/{n} positive)",
            if positives == 0 { "negative" } else { "positive" }
        )));
    }
    let p = positives as f64 / n as f64;
    let mut ce = 0.0;
    for (&y, &q) in labels.iter().zip(probs.iter()) {
        ce -= if y { q.ln() } else { (1.0 - q).ln() };
    }
    ce /= n as f64;
    let base_entropy = -(p * p.ln() + (1.0 - p) * (1.0 - p).ln());
    Ok(NeResult {
        task: task.to_string(),
        ne: ce / base_entropy,
        n,
        positive_rate: p,
    })
}

/// Relative NE difference in percent against a base model; negative means
/// the model improves on the base.
pub fn ne_diff_pct(ne_model: f64, ne_base: f64) -> f64 {
    100.0 * (ne_model - ne_base) / ne_base
}

/// Transfer ratio between two foundation models for one expert pair:
/// (NE(Expert_FM1) - NE(Expert_FM2)) / (NE(FM1) - NE(FM2)).
pub fn transfer_ratio(ne_fm1: f64, ne_fm2: f64, ne_e1: f64, ne_e2: f64) -> Result<f64> {
    let denom = ne_fm1 - ne_fm2;
    if denom.abs() <= TR_DENOMINATOR_FLOOR {
        return Err(Error::TrUndefined(format!(
            "foundation NE difference {denom:.2e} below {TR_DENOMINATOR_FLOOR:.0e}"
        )));
    }
    Ok((ne_e1 - ne_e2) / denom)
}
