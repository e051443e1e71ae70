//! Dense row-major f64 matrices and the few kernels the engine needs.
//!
//! Everything downstream (the tape, telemetry, probes) works on `Mat`.
//! Kernels are plain loops in a fixed order so repeated runs are
//! bit-identical.

use crate::error::{CorvusError, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Mat { rows, cols, data }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Max absolute entry-wise difference; matrices must share a shape.
    pub fn max_abs_diff(&self, other: &Mat) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// out = a (m×k) · b (k×n). Accumulates in the ikj order.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out = a (m×k) · bᵀ where b is (n×k).
pub fn matmul_transb(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            out[i * n + j] = acc;
        }
    }
}

/// out = aᵀ (k×m)ᵀ · b (k×n), i.e. a is stored (k×m).
pub fn matmul_transa(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
///
/// Returns the factor L (row-major d×d, strictly upper part zeroed) or the
/// offending minimum pivot when the matrix is not numerically SPD.
pub fn cholesky(c: &[f64], d: usize) -> std::result::Result<Vec<f64>, f64> {
    debug_assert_eq!(c.len(), d * d);
    let mut l = vec![0.0; d * d];
    let mut min_pivot = f64::INFINITY;
    for i in 0..d {
        for j in 0..=i {
            let mut acc = c[i * d + j];
            for p in 0..j {
                acc -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                min_pivot = min_pivot.min(acc);
                if acc <= 0.0 || !acc.is_finite() {
                    return Err(min_pivot);
                }
                l[i * d + i] = acc.sqrt();
            } else {
                l[i * d + j] = acc / l[j * d + j];
            }
        }
    }
    Ok(l)
}

/// log det(C) from a Cholesky factor: 2·Σ log L_ii.
pub fn logdet_from_cholesky(l: &[f64], d: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..d {
        acc += l[i * d + i].ln();
    }
    2.0 * acc
}

/// Inverse of the SPD matrix whose Cholesky factor is `l`.
///
/// Solves L·Lᵀ·X = I column by column with forward/back substitution.
pub fn spd_inverse_from_cholesky(l: &[f64], d: usize) -> Vec<f64> {
    let mut inv = vec![0.0; d * d];
    let mut y = vec![0.0; d];
    for col in 0..d {
        // forward: L y = e_col
        for i in 0..d {
            let mut acc = if i == col { 1.0 } else { 0.0 };
            for p in 0..i {
                acc -= l[i * d + p] * y[p];
            }
            y[i] = acc / l[i * d + i];
        }
        // backward: Lᵀ x = y
        for i in (0..d).rev() {
            let mut acc = y[i];
            for p in (i + 1)..d {
                acc -= l[p * d + i] * inv[p * d + col];
            }
            inv[i * d + col] = acc / l[i * d + i];
        }
    }
    inv
}

/// Numerically stable log(Σ exp(z)).
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Softmax of a slice into `out` (same length).
pub fn softmax_into(z: &[f64], out: &mut [f64]) {
    let lse = logsumexp(z);
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - lse).exp();
    }
}

/// Validates that every entry is finite; `what` names the tensor in the error.
pub fn ensure_finite(data: &[f64], what: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CorvusError::input(format!("{what} contains non-finite entries")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn transb_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0]; // 2x2
        let b = [5.0, 6.0, 7.0, 8.0]; // 2x2, used as bᵀ
        let mut out = [0.0; 4];
        matmul_transb(&a, &b, &mut out, 2, 2, 2);
        // a · bᵀ = [[1*5+2*6, 1*7+2*8], [3*5+4*6, 3*7+4*8]]
        assert_eq!(out, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn transa_matches_explicit_transpose() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // stored 3x2, used as aᵀ (2x3)
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut out = [0.0; 4];
        matmul_transa(&a, &b, &mut out, 2, 3, 2);
        // aᵀ = [[1,3,5],[2,4,6]]; aᵀ·b = [[1+5, 3+5],[2+6, 4+6]]
        assert_eq!(out, [6.0, 8.0, 8.0, 10.0]);
    }

    #[test]
    fn cholesky_identity_scaled() {
        let d = 3;
        let mut c = vec![0.0; 9];
        for i in 0..d {
            c[i * d + i] = 4.0;
        }
        let l = cholesky(&c, d).unwrap();
        for i in 0..d {
            assert!((l[i * d + i] - 2.0).abs() < 1e-15);
        }
        assert!((logdet_from_cholesky(&l, d) - 3.0 * 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn spd_inverse_roundtrip() {
        // C = A·Aᵀ + I is SPD.
        let d = 4;
        let a: Vec<f64> = (0..d * d).map(|i| ((i * 37 + 11) % 17) as f64 / 17.0).collect();
        let mut c = vec![0.0; d * d];
        matmul_transb(&a, &a, &mut c, d, d, d);
        for i in 0..d {
            c[i * d + i] += 1.0;
        }
        let l = cholesky(&c, d).unwrap();
        let inv = spd_inverse_from_cholesky(&l, d);
        let mut prod = vec![0.0; d * d];
        matmul(&c, &inv, &mut prod, d, d, d);
        for i in 0..d {
            for j in 0..d {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((prod[i * d + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let c = [1.0, 0.0, 0.0, -1.0];
        assert!(cholesky(&c, 2).is_err());
    }

    #[test]
    fn logsumexp_handles_large_values() {
        let z = [1000.0, 1000.0];
        assert!((logsumexp(&z) - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }
}
