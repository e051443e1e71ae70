//! Rank-based AUROC with midrank tie handling.

use crate::error::{CorvusError, Result};

/// P(score_pos > score_neg) + ½·P(score_pos = score_neg) over all
/// positive/negative pairs, computed from midranks in O(n log n).
/// `labels[i] = true` marks the positive (hallucinated) class.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CorvusError::input("scores and labels differ in length"));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(CorvusError::input("non-finite score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(CorvusError::input("AUROC needs both classes"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks: tied scores share the average of their 1-based rank range
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }

    let np = n_pos as f64;
    let u = rank_sum_pos - np * (np + 1.0) / 2.0;
    Ok(u / (np * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// O(n²) pair enumeration, the reference the rank form must match.
    fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
        let pos: Vec<f64> =
            scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
        let neg: Vec<f64> =
            scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
        let mut wins = 0.0;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn separated_classes_score_one() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [true, true, false, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 1.0);
    }

    #[test]
    fn all_ties_score_half() {
        let scores = [3.0; 7];
        let labels = [true, false, true, false, false, true, false];
        assert_eq!(auroc(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(auroc(&[1.0, 2.0], &[true, true]).is_err());
        assert!(auroc(&[1.0, 2.0], &[false, false]).is_err());
        assert!(auroc(&[], &[]).is_err());
    }

    #[test]
    fn matches_pairwise_oracle_on_seeded_input() {
        let mut stream = crate::rng::stream(42, "auroc.test");
        let scores: Vec<f64> = (0..20).map(|_| crate::rng::normal(&mut stream)).collect();
        let labels: Vec<bool> = (0..20).map(|i| i % 3 == 0).collect();
        let fast = auroc(&scores, &labels).unwrap();
        assert_eq!(fast, pairwise(&scores, &labels));
    }

    proptest! {
        #[test]
        fn matches_pairwise_oracle(
            raw in prop::collection::vec((-4i32..4, any::<bool>()), 2..50)
        ) {
            // coarse integer scores force plenty of ties
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let fast = auroc(&scores, &labels).unwrap();
            let slow = pairwise(&scores, &labels);
            prop_assert!((fast - slow).abs() < 1e-12);
        }

        #[test]
        fn negation_flips_exactly(
            raw in prop::collection::vec((-4i32..4, any::<bool>()), 2..50)
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let fwd = auroc(&scores, &labels).unwrap();
            let neg: Vec<f64> = scores.iter().map(|&s| -s).collect();
            let rev = auroc(&neg, &labels).unwrap();
            prop_assert!((fwd + rev - 1.0).abs() < 1e-12);
        }
    }
}
