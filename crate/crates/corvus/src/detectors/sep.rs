//! Semantic-entropy probe: a linear head on one hidden state, trained to
//! predict whether the model's sampled answers disagree with each other.
//!
//! Sampling happens once, at fit time, to build targets. Scoring is a dot
//! product on a single teacher-forced trace.

use serde::{Deserialize, Serialize};

use crate::error::{CorvusError, Result};
use crate::telemetry::ModelVariant;

/// Samples per prompt when building semantic-entropy targets.
pub const SEP_SAMPLES: usize = 10;
/// Sampling temperature for target construction.
pub const SEP_TEMPERATURE: f64 = 1.0;

const FIT_L2: f64 = 5e-2;
const FIT_LR: f64 = 0.5;
const FIT_ITERS: usize = 400;

/// Entropy of the cluster histogram of sampled answers; two answers are
/// equivalent iff their token sequences match exactly.
pub fn semantic_entropy(samples: &[Vec<usize>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(CorvusError::input("semantic entropy needs at least one sample"));
    }
    let mut counts: std::collections::HashMap<&[usize], usize> = std::collections::HashMap::new();
    for s in samples {
        *counts.entry(s.as_slice()).or_insert(0) += 1;
    }
    let n = samples.len() as f64;
    Ok(counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum())
}

/// Hidden position the probe reads: the last prompt token, where the
/// answer begins.
pub fn probe_position(prompt_len: usize) -> usize {
    prompt_len - 1
}

/// Fitted linear probe. Weights act on the raw hidden state; the fit-time
/// standardization is already folded in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SepProbe {
    /// 1-based hidden layer the features come from.
    pub layer: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Semantic-entropy cut that defined the binary targets, in nats.
    pub threshold: f64,
}

/// One training record: onset hidden states for every layer plus the
/// sampled-answer entropy. `variant` guards against fitting on adapted
/// telemetry.
#[derive(Debug, Clone)]
pub struct SepRecord {
    pub variant: ModelVariant,
    /// features[l-1] = hidden state of layer l at the probe position.
    pub features: Vec<Vec<f64>>,
    pub semantic_entropy: f64,
}

/// Median split of the target values. Returns the threshold and the
/// binarized targets (strictly above the median = high uncertainty).
pub fn binarize_at_median(values: &[f64]) -> Result<(f64, Vec<bool>)> {
    if values.is_empty() {
        return Err(CorvusError::input("no target values"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median =
        if n % 2 == 1 { sorted[n / 2] } else { (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0 };
    Ok((median, values.iter().map(|&v| v > median).collect()))
}

/// Fits the probe for one candidate layer. Rejects adapted-model records;
/// the protocol trains auditors on clean telemetry only.
pub fn fit_sep(records: &[SepRecord], layer: usize) -> Result<SepProbe> {
    if records.is_empty() {
        return Err(CorvusError::training("no SEP training records"));
    }
    if records.iter().any(|r| r.variant == ModelVariant::Adapted) {
        return Err(CorvusError::contract("SEP fitting received adapted-model records"));
    }
    let feats: Vec<&[f64]> = records
        .iter()
        .map(|r| {
            r.features
                .get(layer - 1)
                .map(|v| v.as_slice())
                .ok_or_else(|| CorvusError::input(format!("record lacks layer {layer}")))
        })
        .collect::<Result<_>>()?;
    let targets_raw: Vec<f64> = records.iter().map(|r| r.semantic_entropy).collect();
    let (threshold, targets) = binarize_at_median(&targets_raw)?;
    if targets.iter().all(|&t| t) || targets.iter().all(|&t| !t) {
        return Err(CorvusError::training("degenerate semantic-entropy targets"));
    }
    let (weights, bias) = fit_logistic(&feats, &targets)?;
    Ok(SepProbe { layer, weights, bias, threshold })
}

/// Probability of high semantic entropy from one hidden state.
pub fn sep_score(probe: &SepProbe, hidden: &[f64]) -> Result<f64> {
    if hidden.len() != probe.weights.len() {
        return Err(CorvusError::input(format!(
            "probe expects {} features, got {}",
            probe.weights.len(),
            hidden.len()
        )));
    }
    let z: f64 = probe.weights.iter().zip(hidden).map(|(w, h)| w * h).sum::<f64>() + probe.bias;
    Ok(sigmoid(z))
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// L2-regularized logistic regression by full-batch gradient descent on
/// standardized features. The returned weights act on raw features.
pub fn fit_logistic(features: &[&[f64]], targets: &[bool]) -> Result<(Vec<f64>, f64)> {
    let n = features.len();
    if n == 0 || n != targets.len() {
        return Err(CorvusError::input("feature/target mismatch"));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(CorvusError::input("ragged feature rows"));
    }

    let mut mu = vec![0.0; d];
    for f in features {
        for (m, &v) in mu.iter_mut().zip(*f) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for f in features {
        for ((s, &v), &m) in sd.iter_mut().zip(*f).zip(&mu) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    for s in &mut sd {
        *s = s.sqrt();
        if *s < 1e-12 {
            *s = 1.0; // constant feature: leave unscaled, weight stays ~0
        }
    }

    let z = |f: &[f64], j: usize| (f[j] - mu[j]) / sd[j];
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..FIT_ITERS {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (f, &y) in features.iter().zip(targets) {
            let mut s = b;
            for j in 0..d {
                s += w[j] * z(f, j);
            }
            let err = (sigmoid(s) - if y { 1.0 } else { 0.0 }) / n as f64;
            for (j, g) in gw.iter_mut().enumerate() {
                *g += err * z(f, j);
            }
            gb += err;
        }
        for (wj, g) in w.iter_mut().zip(&gw) {
            *wj -= FIT_LR * (g + FIT_L2 * *wj);
        }
        b -= FIT_LR * gb;
    }

    // fold standardization into raw-space weights
    let mut w_raw = vec![0.0; d];
    let mut b_raw = b;
    for j in 0..d {
        w_raw[j] = w[j] / sd[j];
        b_raw -= w[j] * mu[j] / sd[j];
    }
    Ok((w_raw, b_raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::auroc;

    #[test]
    fn identical_samples_have_zero_entropy() {
        let samples = vec![vec![1, 2, 3]; 10];
        assert_eq!(semantic_entropy(&samples).unwrap(), 0.0);
    }

    #[test]
    fn two_even_clusters_give_ln_two() {
        let mut samples = vec![vec![1, 2]; 5];
        samples.extend(vec![vec![3, 4]; 5]);
        let se = semantic_entropy(&samples).unwrap();
        assert!((se - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn matches_histogram_oracle() {
        // clusters of sizes 4, 3, 2, 1
        let mut samples = Vec::new();
        for (tok, count) in [(10usize, 4usize), (11, 3), (12, 2), (13, 1)] {
            for _ in 0..count {
                samples.push(vec![tok]);
            }
        }
        let want: f64 = [4.0, 3.0, 2.0, 1.0]
            .iter()
            .map(|c| {
                let p: f64 = c / 10.0;
                -p * p.ln()
            })
            .sum();
        assert!((semantic_entropy(&samples).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn empty_samples_rejected() {
        assert!(semantic_entropy(&[]).is_err());
    }

    fn record(se: f64, x: f64) -> SepRecord {
        SepRecord {
            variant: ModelVariant::Clean,
            features: vec![vec![x, 1.0]],
            semantic_entropy: se,
        }
    }

    #[test]
    fn separable_feature_fits_perfectly() {
        // entropy tracks the first feature exactly
        let records: Vec<SepRecord> =
            (0..20).map(|i| record(if i < 10 { 0.0 } else { 1.0 }, i as f64)).collect();
        let probe = fit_sep(&records, 1).unwrap();
        let scores: Vec<f64> = records
            .iter()
            .map(|r| sep_score(&probe, &r.features[0]).unwrap())
            .collect();
        let labels: Vec<bool> = records.iter().map(|r| r.semantic_entropy > 0.5).collect();
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn permuted_targets_fit_nothing() {
        let mut sum = 0.0;
        for seed in 0..20 {
            let mut stream = crate::rng::stream(seed, "sep.permute");
            let records: Vec<SepRecord> = (0..200)
                .map(|_| {
                    let x = crate::rng::normal(&mut stream);
                    let y = crate::rng::normal(&mut stream);
                    // targets independent of the features
                    let se = crate::rng::unit(&mut stream);
                    SepRecord {
                        variant: ModelVariant::Clean,
                        features: vec![vec![x, y]],
                        semantic_entropy: se,
                    }
                })
                .collect();
            let probe = fit_sep(&records, 1).unwrap();
            let scores: Vec<f64> = records
                .iter()
                .map(|r| sep_score(&probe, &r.features[0]).unwrap())
                .collect();
            let labels: Vec<bool> =
                records.iter().map(|r| r.semantic_entropy > probe.threshold).collect();
            sum += auroc(&scores, &labels).unwrap();
        }
        let mean = sum / 20.0;
        assert!((mean - 0.5).abs() < 0.1, "mean train AUROC {mean}");
    }

    #[test]
    fn refit_is_bit_identical() {
        let records: Vec<SepRecord> =
            (0..12).map(|i| record((i % 2) as f64, (i * 3 % 7) as f64)).collect();
        let a = fit_sep(&records, 1).unwrap();
        let b = fit_sep(&records, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn adapted_records_rejected() {
        let mut records: Vec<SepRecord> =
            (0..10).map(|i| record((i % 2) as f64, i as f64)).collect();
        records[3].variant = ModelVariant::Adapted;
        assert!(fit_sep(&records, 1).is_err());
    }

    #[test]
    fn degenerate_targets_rejected() {
        let records: Vec<SepRecord> = (0..10).map(|i| record(0.0, i as f64)).collect();
        assert!(fit_sep(&records, 1).is_err());
    }

    #[test]
    fn zero_probe_scores_half() {
        let probe = SepProbe { layer: 1, weights: vec![0.0; 4], bias: 0.0, threshold: 0.0 };
        assert_eq!(sep_score(&probe, &[1.0, -2.0, 3.0, 0.5]).unwrap(), 0.5);
    }

    #[test]
    fn score_is_monotone_along_weights() {
        let probe =
            SepProbe { layer: 1, weights: vec![0.3, -0.7, 1.1], bias: 0.2, threshold: 0.0 };
        let h = [0.5, 0.1, -0.4];
        let s0 = sep_score(&probe, &h).unwrap();
        let stepped: Vec<f64> =
            h.iter().zip(&probe.weights).map(|(&x, &w)| x + 0.1 * w).collect();
        let s1 = sep_score(&probe, &stepped).unwrap();
        assert!(s1 > s0);
    }

    #[test]
    fn score_matches_dot_product_oracle() {
        let probe =
            SepProbe { layer: 2, weights: vec![0.25, -1.5, 0.75], bias: -0.125, threshold: 0.0 };
        let h = [2.0, 0.5, -1.0];
        let z = 0.25 * 2.0 + (-1.5) * 0.5 + 0.75 * (-1.0) + (-0.125);
        let want = 1.0 / (1.0 + (-z as f64).exp());
        let got = sep_score(&probe, &h).unwrap();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let probe = SepProbe { layer: 1, weights: vec![0.0; 3], bias: 0.0, threshold: 0.0 };
        assert!(sep_score(&probe, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn median_split_is_balanced_for_distinct_values() {
        let values: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let (median, targets) = binarize_at_median(&values).unwrap();
        assert_eq!(median, 4.5);
        assert_eq!(targets.iter().filter(|&&t| t).count(), 5);
    }
}
