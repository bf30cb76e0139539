//! Dense linear algebra for the mixture modes: packed symmetric storage,
//! Cholesky factorization with a jitter ladder, and Gaussian log-densities.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::scalar::Real;

/// Jitter used on the first retry when the caller passed zero.
pub const JITTER_START: f64 = 1e-6;
/// Number of doubling retries before giving up.
pub const JITTER_RETRIES: usize = 8;

#[inline]
fn packed_index(i: usize, j: usize) -> usize {
    debug_assert!(j <= i);
    i * (i + 1) / 2 + j
}

/// Number of stored values for a `dim x dim` symmetric matrix.
pub const fn packed_len(dim: usize) -> usize {
    dim * (dim + 1) / 2
}

/// Symmetric matrix stored as its lower triangle, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMat<T> {
    dim: usize,
    packed: Vec<T>,
}

impl<T: Real> SymMat<T> {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, packed: vec![T::zero(); packed_len(dim)] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.packed[packed_index(i, i)] = T::one();
        }
        m
    }

    /// Builds from packed lower-triangular entries.
    pub fn from_packed(dim: usize, packed: Vec<T>) -> Result<Self> {
        check_len(packed_len(dim), packed.len())?;
        Ok(Self { dim, packed })
    }

    /// Builds from a dense row-major matrix, reading the lower triangle only.
    pub fn from_dense(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.len();
        let mut m = Self::zeros(dim);
        for (i, row) in rows.iter().enumerate() {
            check_len(dim, row.len())?;
            for j in 0..=i {
                m.packed[packed_index(i, j)] = row[j];
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn packed(&self) -> &[T] {
        &self.packed
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        if j <= i {
            self.packed[packed_index(i, j)]
        } else {
            self.packed[packed_index(j, i)]
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        (0..self.dim).map(|i| (0..self.dim).map(|j| self.get(i, j)).collect()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.packed.iter().all(|x| x.is_finite())
    }

    pub fn scale(&mut self, s: T) {
        for v in &mut self.packed {
            *v *= s;
        }
    }

    /// In-place `self += w * d * d^T`.
    pub fn add_outer(&mut self, d: &[T], w: T) -> Result<()> {
        check_len(self.dim, d.len())?;
        if w == T::zero() {
            return Ok(());
        }
        let mut k = 0;
        for i in 0..self.dim {
            let wi = w * d[i];
            for dj in &d[..=i] {
                self.packed[k] += wi * *dj;
                k += 1;
            }
        }
        Ok(())
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.packed
            .iter()
            .zip(&other.packed)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }
}

/// Returns `acc + w * d * d^T`.
pub fn weighted_outer_accumulate<T: Real>(acc: &SymMat<T>, d: &[T], w: T) -> Result<SymMat<T>> {
    let mut out = acc.clone();
    out.add_outer(d, w)?;
    Ok(out)
}

/// Lower-triangular Cholesky factor in packed storage, together with the
/// diagonal jitter that was actually added to make the factorization succeed.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular<T> {
    factor: SymMat<T>,
    jitter: T,
}

impl<T: Real> LowerTriangular<T> {
    pub fn dim(&self) -> usize {
        self.factor.dim
    }

    /// Jitter added to the diagonal before factorizing.
    pub fn jitter(&self) -> T {
        self.jitter
    }

    /// Entry `(i, j)`; zero above the diagonal.
    pub fn get(&self, i: usize, j: usize) -> T {
        if j <= i {
            self.factor.packed[packed_index(i, j)]
        } else {
            T::zero()
        }
    }

    pub fn to_dense(&self) -> Vec<Vec<T>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.get(i, j)).collect()).collect()
    }

    /// `L * L^T` as a symmetric matrix.
    pub fn reconstruct(&self) -> SymMat<T> {
        let n = self.dim();
        let mut out = SymMat::zeros(n);
        for i in 0..n {
            for j in 0..=i {
                let s: T = (0..=j).map(|k| self.get(i, k) * self.get(j, k)).sum();
                out.packed[packed_index(i, j)] = s;
            }
        }
        out
    }

    /// Solves `L y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.dim();
        check_len(n, b.len())?;
        let p = &self.factor.packed;
        let mut y = vec![T::zero(); n];
        for i in 0..n {
            let row = &p[packed_index(i, 0)..=packed_index(i, i)];
            let mut s = b[i];
            for k in 0..i {
                s -= row[k] * y[k];
            }
            y[i] = s / row[i];
        }
        Ok(y)
    }

    /// `b^T (L L^T)^{-1} b` via one triangular solve.
    pub fn quad_form(&self, b: &[T]) -> Result<T> {
        let y = self.solve_lower(b)?;
        Ok(y.iter().map(|&v| v * v).sum())
    }

    /// `log det(L L^T)`.
    pub fn log_det(&self) -> T {
        let two = T::lit(2.0);
        (0..self.dim()).map(|i| two * self.get(i, i).ln()).sum()
    }
}

fn try_cholesky<T: Real>(m: &SymMat<T>, jitter: T) -> Option<SymMat<T>> {
    let n = m.dim;
    let mut l = SymMat::zeros(n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.packed[packed_index(i, j)];
            let (ri, rj) = (packed_index(i, 0), packed_index(j, 0));
            for k in 0..j {
                s -= l.packed[ri + k] * l.packed[rj + k];
            }
            if i == j {
                let d = s + jitter;
                if !(d > T::zero()) || !d.is_finite() {
                    return None;
                }
                l.packed[ri + i] = d.sqrt();
            } else {
                l.packed[ri + j] = s / l.packed[rj + j];
            }
        }
    }
    Some(l)
}

/// Factorizes `m + jitter * I`. On failure the jitter is doubled (starting
/// from [`JITTER_START`] when zero) for up to [`JITTER_RETRIES`] retries.
pub fn cholesky<T: Real>(m: &SymMat<T>, jitter: T) -> Result<LowerTriangular<T>> {
    if !m.is_finite() || !jitter.is_finite() {
        return Err(Error::NonFiniteInput);
    }
    let mut jitter = jitter.max(T::zero());
    if let Some(factor) = try_cholesky(m, jitter) {
        return Ok(LowerTriangular { factor, jitter });
    }
    for _ in 0..JITTER_RETRIES {
        jitter = if jitter > T::zero() { jitter + jitter } else { T::lit(JITTER_START) };
        if let Some(factor) = try_cholesky(m, jitter) {
            return Ok(LowerTriangular { factor, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { retries: JITTER_RETRIES })
}

/// `log N(x; mean, L L^T)` without forming the inverse covariance.
pub fn log_gauss_density<T: Real>(x: &[T], mean: &[T], chol: &LowerTriangular<T>) -> Result<T> {
    let n = chol.dim();
    check_len(n, x.len())?;
    check_len(n, mean.len())?;
    let diff: Vec<T> = x.iter().zip(mean).map(|(&a, &b)| a - b).collect();
    let quad = chol.quad_form(&diff)?;
    let log_two_pi = (T::lit(2.0) * T::lit(std::f64::consts::PI)).ln();
    Ok(-T::lit(0.5) * (T::from_count(n) * log_two_pi + chol.log_det() + quad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> SymMat<f64> {
        let a: Vec<Vec<f64>> =
            (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut m = SymMat::zeros(n);
        for row in &a {
            m.add_outer(row, 1.0).unwrap();
        }
        for i in 0..n {
            m.packed[packed_index(i, i)] += 0.1;
        }
        m
    }

    // Gauss-Jordan inverse, used only as an independent oracle.
    fn dense_inverse(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = a.len();
        let mut m: Vec<Vec<f64>> = a
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let mut row = r.clone();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..n {
            let p = (c..n).max_by(|&x, &y| m[x][c].abs().total_cmp(&m[y][c].abs())).unwrap();
            m.swap(c, p);
            let piv = m[c][c];
            for v in &mut m[c] {
                *v /= piv;
            }
            for r in 0..n {
                if r != c {
                    let f = m[r][c];
                    let pivot_row = m[c].clone();
                    for (v, pv) in m[r].iter_mut().zip(pivot_row) {
                        *v -= f * pv;
                    }
                }
            }
        }
        m.into_iter().map(|r| r[n..].to_vec()).collect()
    }

    #[test]
    fn identity_factors_to_identity() {
        let l = cholesky(&SymMat::<f64>::identity(2), 0.0).unwrap();
        assert_eq!(l.to_dense(), vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn hand_factorization_two_by_two() {
        let m = SymMat::from_dense(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&m, 0.0).unwrap();
        let expect = [[2.0, 0.0], [1.0, 2f64.sqrt()]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((l.get(i, j) - expect[i][j]).abs() < 1e-15);
            }
        }
        assert!(l.reconstruct().max_abs_diff(&m) < 1e-14);
    }

    #[test]
    fn zero_matrix_is_carried_by_jitter() {
        let l = cholesky(&SymMat::<f64>::zeros(2), 1e-6).unwrap();
        let s = 1e-6f64.sqrt();
        assert!((l.get(0, 0) - s).abs() < 1e-18 && (l.get(1, 1) - s).abs() < 1e-18);
        assert_eq!(l.get(1, 0), 0.0);
        assert_eq!(l.jitter(), 1e-6);
    }

    #[test]
    fn jitter_ladder_rescues_singular_input() {
        let l = cholesky(&SymMat::<f64>::zeros(3), 0.0).unwrap();
        assert_eq!(l.jitter(), JITTER_START);
    }

    #[test]
    fn indefinite_matrix_exhausts_retries() {
        let m = SymMat::from_dense(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(matches!(cholesky(&m, 0.0), Err(Error::NotPositiveDefinite { retries: 8 })));
    }

    #[test]
    fn log_density_standard_cases() {
        let l = cholesky(&SymMat::<f64>::identity(2), 0.0).unwrap();
        let at_mode = log_gauss_density(&[0.3, -0.2], &[0.3, -0.2], &l).unwrap();
        assert!((at_mode + (2.0 * PI).ln()).abs() < 1e-14);
        let off = log_gauss_density(&[1.0, 0.0], &[0.0, 0.0], &l).unwrap();
        assert!((off - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-14);
        let l1 = cholesky(&SymMat::<f64>::identity(1), 0.0).unwrap();
        let one_d = log_gauss_density(&[2.0], &[2.0], &l1).unwrap();
        assert!((one_d + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn log_density_rejects_mismatched_dims() {
        let l = cholesky(&SymMat::<f64>::identity(2), 0.0).unwrap();
        assert!(matches!(
            log_gauss_density(&[0.0, 0.0, 0.0], &[0.0, 0.0], &l),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn outer_accumulate_examples() {
        let m = weighted_outer_accumulate(&SymMat::zeros(2), &[1.0, 2.0], 1.0).unwrap();
        assert_eq!(m.to_dense(), vec![vec![1.0, 2.0], vec![2.0, 4.0]]);
        let i = SymMat::<f64>::identity(2);
        assert_eq!(weighted_outer_accumulate(&i, &[7.0, -3.0], 0.0).unwrap(), i);
        let h = weighted_outer_accumulate(&SymMat::zeros(2), &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(h.to_dense(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        assert!(weighted_outer_accumulate(&i, &[1.0], 1.0).is_err());
    }

    #[test]
    fn quad_form_matches_dense_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 2..=8 {
            for _ in 0..10 {
                let m = random_spd(&mut rng, n);
                let jitter = rng.random_range(0.0..0.01);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let l = cholesky(&m, jitter).unwrap();
                let mut dense = m.to_dense();
                for (i, row) in dense.iter_mut().enumerate() {
                    row[i] += jitter;
                }
                let inv = dense_inverse(&dense);
                let oracle: f64 = (0..n)
                    .map(|i| (0..n).map(|j| x[i] * inv[i][j] * x[j]).sum::<f64>())
                    .sum();
                let got = l.quad_form(&x).unwrap();
                assert!(((got - oracle) / oracle).abs() < 1e-8, "n={n}: {got} vs {oracle}");
            }
        }
    }

    #[test]
    fn reconstruction_error_up_to_dim_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1, 2, 5, 16, 33, 64] {
            let m = random_spd(&mut rng, n);
            let jitter = 1e-6;
            let l = cholesky(&m, jitter).unwrap();
            let mut target = m.clone();
            for i in 0..n {
                target.packed[packed_index(i, i)] += jitter;
            }
            assert!(l.reconstruct().max_abs_diff(&target) < 1e-10, "dim {n}");
        }
    }

    #[test]
    fn density_integrates_to_one_in_2d() {
        // Importance sampling from a wide uniform box.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let m = SymMat::<f64>::from_dense(&[vec![1.5, 0.4], vec![0.4, 0.7]]).unwrap();
        let mean = [0.5, -1.0];
        let l = cholesky(&m, 0.0).unwrap();
        let half: f64 = 8.0;
        let n = 1_000_000;
        let mut acc = 0.0_f64;
        for _ in 0..n {
            let x = [
                mean[0] + rng.random_range(-half..half),
                mean[1] + rng.random_range(-half..half),
            ];
            acc += log_gauss_density(&x, &mean, &l).unwrap().exp();
        }
        let integral = acc / n as f64 * (2.0 * half).powi(2);
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
    }

    #[test]
    fn f32_factorization_works() {
        let m = SymMat::from_dense(&[vec![4.0_f32, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&m, 0.0).unwrap();
        assert!((l.get(1, 1) - 2f32.sqrt()).abs() < 1e-6);
    }
}
