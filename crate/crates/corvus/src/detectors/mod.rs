//! Single-pass hallucination detectors over teacher-forced traces.
//!
//! Each detector reduces one trace to a scalar. Raw score directions are
//! arbitrary; an orientation flag fitted on validation data (and frozen
//! afterwards) makes "higher means hallucinated" hold everywhere
//! downstream.

pub mod icr;
pub mod llmcheck;
pub mod ppl;
pub mod sep;
pub mod window_entropy;

use serde::{Deserialize, Serialize};

use crate::error::{CorvusError, Result};
use crate::eval::auroc;
use crate::telemetry::ModelVariant;

/// The detector battery, in reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "ppl")]
    Ppl,
    #[serde(rename = "window_entropy")]
    WindowEntropy,
    #[serde(rename = "hidden_volume")]
    Hidden,
    #[serde(rename = "attention_diag")]
    Attention,
    #[serde(rename = "sep_probe")]
    Sep,
    #[serde(rename = "icr_probe")]
    Icr,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 6] = [
        DetectorKind::Ppl,
        DetectorKind::WindowEntropy,
        DetectorKind::Hidden,
        DetectorKind::Attention,
        DetectorKind::Sep,
        DetectorKind::Icr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Ppl => "ppl",
            DetectorKind::WindowEntropy => "window_entropy",
            DetectorKind::Hidden => "hidden_volume",
            DetectorKind::Attention => "attention_diag",
            DetectorKind::Sep => "sep_probe",
            DetectorKind::Icr => "icr_probe",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CorvusError::input(format!("unknown detector {s:?}")))
    }
}

/// Whether raw scores already point the right way.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Raw,
    Flipped,
}

impl Orientation {
    /// Maps a raw score to the oriented scale (higher = hallucinated).
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Orientation::Raw => v,
            Orientation::Flipped => -v,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Orientation::Raw => "raw",
            Orientation::Flipped => "flipped",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(Orientation::Raw),
            "flipped" => Ok(Orientation::Flipped),
            other => Err(CorvusError::input(format!("unknown orientation {other:?}"))),
        }
    }
}

/// One detector's output on one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub detector: DetectorKind,
    /// Raw value, before orientation.
    pub value: f64,
    pub layer: Option<usize>,
    pub variant: ModelVariant,
}

/// Picks the orientation on validation scores: flip iff flipping raises
/// AUROC above one half. An exact 0.5 keeps the raw direction.
pub fn orient(validation_scores: &[f64], labels: &[bool]) -> Result<Orientation> {
    let a = auroc(validation_scores, labels)?;
    Ok(if a < 0.5 { Orientation::Flipped } else { Orientation::Raw })
}

/// Exhaustive layer sweep: per-layer validation scores in, the layer and
/// orientation with the best oriented AUROC out. Ties keep the lowest
/// layer. `per_layer[j]` holds the scores of `layers[j]`.
pub fn sweep_layers(
    layers: &[usize],
    per_layer: &[Vec<f64>],
    labels: &[bool],
) -> Result<(usize, Orientation, f64)> {
    if layers.is_empty() || layers.len() != per_layer.len() {
        return Err(CorvusError::input("layer sweep needs matching nonempty inputs"));
    }
    let mut best: Option<(usize, Orientation, f64)> = None;
    for (j, scores) in per_layer.iter().enumerate() {
        let raw = auroc(scores, labels)?;
        let (o, oriented) =
            if raw < 0.5 { (Orientation::Flipped, 1.0 - raw) } else { (Orientation::Raw, raw) };
        if best.map_or(true, |(_, _, b)| oriented > b) {
            best = Some((layers[j], o, oriented));
        }
    }
    Ok(best.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weak_detector_gets_flipped() {
        // raw AUROC 0.3: positives score lower
        let scores = vec![0.1, 0.2, 0.3, 0.8, 0.9, 0.75, 0.25, 0.85, 0.15, 0.7];
        let labels = vec![true, true, true, false, false, false, true, false, true, false];
        let raw = auroc(&scores, &labels).unwrap();
        assert!(raw < 0.5);
        let o = orient(&scores, &labels).unwrap();
        assert_eq!(o, Orientation::Flipped);
        let flipped: Vec<f64> = scores.iter().map(|&s| o.apply(s)).collect();
        let after = auroc(&flipped, &labels).unwrap();
        assert!((after - (1.0 - raw)).abs() < 1e-12);
    }

    #[test]
    fn exact_half_keeps_raw() {
        let scores = vec![1.0, 1.0, 1.0, 1.0];
        let labels = vec![true, false, true, false];
        assert_eq!(orient(&scores, &labels).unwrap(), Orientation::Raw);
    }

    #[test]
    fn oriented_auroc_never_below_half() {
        for seed in 0..20 {
            let mut stream = crate::rng::stream(seed, "orient.rand");
            let scores: Vec<f64> = (0..30).map(|_| crate::rng::normal(&mut stream)).collect();
            let labels: Vec<bool> = (0..30).map(|i| i % 2 == 0).collect();
            let o = orient(&scores, &labels).unwrap();
            let oriented: Vec<f64> = scores.iter().map(|&s| o.apply(s)).collect();
            assert!(auroc(&oriented, &labels).unwrap() >= 0.5);
        }
    }

    #[test]
    fn sweep_finds_informative_layer() {
        let labels = vec![true, true, false, false, true, false];
        let noise = vec![0.5, 0.4, 0.45, 0.55, 0.52, 0.48];
        // layer 3 anti-correlates perfectly; should win, flipped
        let strong: Vec<f64> =
            labels.iter().map(|&l| if l { -1.0 } else { 1.0 }).collect();
        let (layer, o, a) =
            sweep_layers(&[1, 3], &[noise, strong], &labels).unwrap();
        assert_eq!(layer, 3);
        assert_eq!(o, Orientation::Flipped);
        assert_eq!(a, 1.0);
    }

    #[test]
    fn sweep_tie_prefers_lower_layer() {
        let labels = vec![true, false, true, false];
        let s = vec![1.0, 0.0, 1.0, 0.0];
        let (layer, _, _) = sweep_layers(&[2, 4], &[s.clone(), s], &labels).unwrap();
        assert_eq!(layer, 2);
    }
}
