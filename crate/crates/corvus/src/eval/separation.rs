//! Between-class separation of the raw telemetry vectors.

use crate::error::{CorvusError, Result};

/// Euclidean distance between the class-conditional means of the
/// (TE, mean HV, mean AD) triples. Shrinks when camouflage works.
pub fn separation_delta(points: &[[f64; 3]], labels: &[bool]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(CorvusError::input("points and labels differ in length"));
    }
    let mut mean_pos = [0.0; 3];
    let mut mean_neg = [0.0; 3];
    let mut n_pos = 0usize;
    let mut n_neg = 0usize;
    for (p, &y) in points.iter().zip(labels) {
        let (m, n) = if y { (&mut mean_pos, &mut n_pos) } else { (&mut mean_neg, &mut n_neg) };
        for (acc, &v) in m.iter_mut().zip(p) {
            *acc += v;
        }
        *n += 1;
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(CorvusError::input("separation needs both classes"));
    }
    let mut d2 = 0.0;
    for j in 0..3 {
        let diff = mean_pos[j] / n_pos as f64 - mean_neg[j] / n_neg as f64;
        d2 += diff * diff;
    }
    Ok(d2.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_masses_at_distance_d() {
        let points = vec![[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [3.0, 4.0, 0.0]];
        let labels = vec![false, false, true, true];
        assert_eq!(separation_delta(&points, &labels).unwrap(), 5.0);
    }

    #[test]
    fn identical_distributions_separate_within_noise() {
        let mut stream = crate::rng::stream(3, "sep.delta");
        let n = 4000;
        let points: Vec<[f64; 3]> = (0..n)
            .map(|_| {
                [
                    crate::rng::normal(&mut stream),
                    crate::rng::normal(&mut stream),
                    crate::rng::normal(&mut stream),
                ]
            })
            .collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let d = separation_delta(&points, &labels).unwrap();
        // mean-difference std is sqrt(2/(n/2)) per coordinate; allow 3 sigma
        // on the 3-dimensional norm
        let sigma = (2.0 / (n as f64 / 2.0)).sqrt();
        assert!(d <= 3.0 * sigma * 3f64.sqrt(), "d = {d}");
    }

    #[test]
    fn single_class_rejected() {
        assert!(separation_delta(&[[1.0, 2.0, 3.0]], &[true]).is_err());
    }
}
