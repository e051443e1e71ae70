//! Threshold calibration and confusion-matrix metrics.
//!
//! Flagging convention everywhere: an example is flagged hallucinated when
//! its oriented score is >= the threshold.

use serde::{Deserialize, Serialize};

use crate::error::{CorvusError, Result};

/// Where a threshold came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CalibrationSource {
    CleanValidation,
    AttackedOracle,
}

/// Metrics of one threshold on one score table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    pub accuracy: f64,
    pub f1: f64,
    pub source: CalibrationSource,
}

/// Smallest threshold whose empirical FPR on the calibration negatives is
/// <= `target_fpr`. Candidates are the observed scores; when even the
/// maximum observed score flags too many (always the case at target 0),
/// the next float above the maximum is returned, which flags nothing from
/// the calibration set. Calibration sets under 20 negatives make the FPR
/// grid coarser than 5%; that is logged, not rejected.
pub fn calibrate_threshold(negatives: &[f64], target_fpr: f64) -> Result<f64> {
    if negatives.is_empty() {
        return Err(CorvusError::input("no negatives to calibrate on"));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(CorvusError::input("target FPR must be in [0, 1]"));
    }
    if negatives.iter().any(|v| !v.is_finite()) {
        return Err(CorvusError::input("non-finite calibration score"));
    }
    if negatives.len() < 20 {
        log::warn!(
            "calibrating on {} negatives; FPR resolution is {:.3}",
            negatives.len(),
            1.0 / negatives.len() as f64
        );
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    for i in 0..sorted.len() {
        if i > 0 && sorted[i] == sorted[i - 1] {
            continue; // same candidate threshold
        }
        let flagged = sorted.len() - i;
        if flagged as f64 / n <= target_fpr {
            return Ok(sorted[i]);
        }
    }
    Ok(sorted[sorted.len() - 1].next_up())
}

/// Confusion-matrix metrics at a fixed threshold. The hallucinated class
/// is positive; F1 is 0 when nothing is flagged.
pub fn operating_point(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
    source: CalibrationSource,
) -> Result<OperatingPoint> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CorvusError::input("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CorvusError::input("operating point needs both classes"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut tn = 0usize;
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => {}
        }
    }
    let tpr = tp as f64 / n_pos as f64;
    let fpr = fp as f64 / n_neg as f64;
    let accuracy = (tp + tn) as f64 / scores.len() as f64;
    let f1 = if tp + fp == 0 || tp == 0 {
        0.0
    } else {
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tpr;
        2.0 * precision * recall / (precision + recall)
    };
    Ok(OperatingPoint { threshold, fpr, tpr, accuracy, f1, source })
}

/// Oracle upper bound: recalibrate on the attacked scores themselves, then
/// measure at that threshold.
pub fn attack_calibrated_point(
    scores: &[f64],
    labels: &[bool],
    target_fpr: f64,
) -> Result<OperatingPoint> {
    let negatives: Vec<f64> =
        scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    let threshold = calibrate_threshold(&negatives, target_fpr)?;
    operating_point(scores, labels, threshold, CalibrationSource::AttackedOracle)
}

/// Threshold maximizing validation accuracy; ties take the smallest
/// qualifying threshold.
pub fn accuracy_threshold(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(CorvusError::input("scores and labels differ in length"));
    }
    let mut candidates = scores.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(candidates[candidates.len() - 1].next_up());
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &t in &candidates {
        let correct = scores
            .iter()
            .zip(labels)
            .filter(|(&s, &y)| (s >= t) == y)
            .count();
        let acc = correct as f64 / scores.len() as f64;
        if acc > best.0 {
            best = (acc, t);
        }
    }
    Ok(best.1)
}
