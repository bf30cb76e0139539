//! Streaming per-class Gaussian mixture over the reduced feature space.
//!
//! Each known source class owns one Gaussian mode. Modes are updated once per
//! target batch from the model's softmax outputs: the soft class mass of the
//! batch is added to the mode weight, and mean and covariance are recomputed
//! as weight-blended recursions. The covariance recursion scatters the batch
//! around the *new* mean and blends in the previous covariance, so it is exact
//! for the first batch of a mode and approximate afterwards. Nothing but the
//! modes survives between batches.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::{cholesky, log_gauss_density, packed_len, LowerTriangular, SymMat};
use crate::scalar::Real;

/// Default diagonal jitter added to every covariance before factorizing.
pub const DEFAULT_JITTER: f64 = 1e-6;

/// One Gaussian mode.
#[derive(Debug, Clone)]
pub struct ModeState<T> {
    pub mean: Vec<T>,
    pub cov: SymMat<T>,
    /// Cumulative soft mass. Zero means the mode never received mass.
    pub weight: T,
    chol: Option<LowerTriangular<T>>,
}

impl<T: Real> ModeState<T> {
    fn empty(dim: usize) -> Self {
        Self { mean: vec![T::zero(); dim], cov: SymMat::zeros(dim), weight: T::zero(), chol: None }
    }

    pub fn is_initialized(&self) -> bool {
        self.weight > T::zero()
    }

    /// Cached factor of `cov + jitter * I`, present after the mode's last update.
    pub fn cached_factor(&self) -> Option<&LowerTriangular<T>> {
        self.chol.as_ref()
    }
}

/// The whole cross-batch memory: one mode per known class.
#[derive(Debug, Clone)]
pub struct GmmState<T> {
    modes: Vec<ModeState<T>>,
    dim: usize,
    jitter: T,
    batch_counter: u64,
}

impl<T: Real> GmmState<T> {
    /// Fresh state with every mode weight at zero.
    pub fn new(n_classes: usize, dim: usize, jitter: T) -> Self {
        Self { modes: (0..n_classes).map(|_| ModeState::empty(dim)).collect(), dim, jitter, batch_counter: 0 }
    }

    /// State seeded with prior means, covariances, and weights.
    pub fn with_prior(means: Vec<Vec<T>>, covs: Vec<SymMat<T>>, weights: Vec<T>, jitter: T) -> Result<Self> {
        check_len(means.len(), covs.len())?;
        check_len(means.len(), weights.len())?;
        let dim = means.first().map_or(0, Vec::len);
        let mut modes = Vec::with_capacity(means.len());
        for ((mean, cov), weight) in means.into_iter().zip(covs).zip(weights) {
            check_len(dim, mean.len())?;
            check_len(dim, cov.dim())?;
            if !(weight >= T::zero()) || !weight.is_finite() || !cov.is_finite() || mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteInput);
            }
            let chol = if weight > T::zero() { Some(cholesky(&cov, jitter)?) } else { None };
            modes.push(ModeState { mean, cov, weight, chol });
        }
        Ok(Self { modes, dim, jitter, batch_counter: 0 })
    }

    pub fn n_classes(&self) -> usize {
        self.modes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn batch_counter(&self) -> u64 {
        self.batch_counter
    }

    pub fn modes(&self) -> &[ModeState<T>] {
        &self.modes
    }

    /// Current means, used as contrastive prototypes.
    pub fn means(&self) -> Vec<Vec<T>> {
        self.modes.iter().map(|m| m.mean.clone()).collect()
    }

    pub fn initialized(&self) -> Vec<bool> {
        self.modes.iter().map(ModeState::is_initialized).collect()
    }

    /// Folds one batch of reduced features into the modes, weighting sample
    /// `i` by `weights[i][c]` for mode `c`. The state is left untouched on error.
    pub fn update(&mut self, feats: &[Vec<T>], weights: &[Vec<T>]) -> Result<()> {
        if feats.is_empty() {
            return Err(Error::LengthMismatch { left: 0, right: weights.len() });
        }
        if feats.len() != weights.len() {
            return Err(Error::LengthMismatch { left: feats.len(), right: weights.len() });
        }
        for (r, w) in feats.iter().zip(weights) {
            check_len(self.dim, r.len())?;
            check_len(self.modes.len(), w.len())?;
            if r.iter().any(|v| !v.is_finite()) || w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
                return Err(Error::NonFiniteInput);
            }
        }

        let mut updated = Vec::new();
        for (c, mode) in self.modes.iter().enumerate() {
            let batch_mass: T = weights.iter().map(|w| w[c]).sum();
            if batch_mass == T::zero() {
                continue;
            }
            let prev = mode.weight;
            let total = prev + batch_mass;

            let mut mean: Vec<T> = mode.mean.iter().map(|&m| m * prev).collect();
            for (r, w) in feats.iter().zip(weights) {
                let wc = w[c];
                if wc != T::zero() {
                    for (m, &x) in mean.iter_mut().zip(r) {
                        *m += wc * x;
                    }
                }
            }
            for m in &mut mean {
                *m /= total;
            }

            let mut cov = mode.cov.clone();
            cov.scale(prev);
            let mut diff = vec![T::zero(); self.dim];
            for (r, w) in feats.iter().zip(weights) {
                let wc = w[c];
                if wc != T::zero() {
                    for ((d, &x), &m) in diff.iter_mut().zip(r).zip(&mean) {
                        *d = x - m;
                    }
                    cov.add_outer(&diff, wc)?;
                }
            }
            cov.scale(T::one() / total);

            let chol = cholesky(&cov, self.jitter)?;
            updated.push((c, ModeState { mean, cov, weight: total, chol: Some(chol) }));
        }

        for (c, mode) in updated {
            self.modes[c] = mode;
        }
        self.batch_counter += 1;
        Ok(())
    }

    /// `log p(feat | c)` per class; `-inf` for modes that never received mass.
    pub fn class_log_likelihoods(&self, feat: &[T]) -> Result<Vec<T>> {
        check_len(self.dim, feat.len())?;
        if !self.modes.iter().any(ModeState::is_initialized) {
            return Err(Error::NoInitializedMode);
        }
        self.modes
            .iter()
            .map(|mode| {
                if !mode.is_initialized() {
                    return Ok(T::neg_infinity());
                }
                match &mode.chol {
                    Some(l) => log_gauss_density(feat, &mode.mean, l),
                    None => log_gauss_density(feat, &mode.mean, &cholesky(&mode.cov, self.jitter)?),
                }
            })
            .collect()
    }

    /// Number of stored reals: mean, packed covariance, and weight per mode.
    pub fn memory_footprint(&self) -> usize {
        gmm_value_count(self.dim, self.modes.len())
    }

    pub fn to_snapshot(&self) -> GmmSnapshot<T> {
        GmmSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            dim: self.dim,
            jitter: self.jitter,
            batch_counter: self.batch_counter,
            modes: self
                .modes
                .iter()
                .map(|m| ModeSnapshot { weight: m.weight, mean: m.mean.clone(), cov_packed: m.cov.packed().to_vec() })
                .collect(),
        }
    }

    /// Rebuilds a state from a snapshot; factors are recomputed.
    pub fn from_snapshot(snap: GmmSnapshot<T>) -> Result<Self> {
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::Checkpoint(format!("{} v{}", snap.format, snap.version)));
        }
        let dim = snap.dim;
        let mut modes = Vec::with_capacity(snap.modes.len());
        for m in snap.modes {
            check_len(dim, m.mean.len())?;
            let cov = SymMat::from_packed(dim, m.cov_packed)?;
            let chol = if m.weight > T::zero() { Some(cholesky(&cov, snap.jitter)?) } else { None };
            modes.push(ModeState { mean: m.mean, cov, weight: m.weight, chol });
        }
        Ok(Self { modes, dim, jitter: snap.jitter, batch_counter: snap.batch_counter })
    }
}

/// `(FD_r + FD_r (FD_r + 1) / 2 + 1) * n_classes`.
pub const fn gmm_value_count(dim: usize, n_classes: usize) -> usize {
    (dim + packed_len(dim) + 1) * n_classes
}

pub const SNAPSHOT_FORMAT: &str = "gmm-state";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Serialized form of [`GmmState`]. Field order is fixed:
/// `format, version, dim, jitter, batch_counter, modes[{weight, mean, cov_packed}]`,
/// with `cov_packed` holding the lower triangle row by row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSnapshot<T> {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub jitter: T,
    pub batch_counter: u64,
    pub modes: Vec<ModeSnapshot<T>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSnapshot<T> {
    pub weight: T,
    pub mean: Vec<T>,
    pub cov_packed: Vec<T>,
}
