//! Entropy gate: normalized Shannon entropy of the mixture posterior,
//! self-calibrating dual thresholds, three-way pseudo-labels, and the
//! single-threshold inference rule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{argmax, log_sum_exp, Real};

/// Offset applied on each side when a calibration window collapses both
/// thresholds onto one value.
pub const SEPARATION_EPS: f64 = 1e-6;

/// Normalized class probabilities derived from per-class log-likelihoods
/// under uniform priors.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodVec<T> {
    p: Vec<T>,
}

impl<T: Real> LikelihoodVec<T> {
    /// Normalizes log-likelihoods with log-sum-exp; `-inf` entries get zero mass.
    pub fn from_log_likelihoods(ll: &[T]) -> Result<Self> {
        let lse = log_sum_exp(ll);
        if !lse.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { p: ll.iter().map(|&l| (l - lse).exp()).collect() })
    }

    /// Wraps an explicit probability vector. Entries must lie in `[0, 1]` and
    /// sum to one within `1e-9`.
    pub fn new(p: Vec<T>) -> Result<Self> {
        let total: T = p.iter().copied().sum();
        if p.is_empty() || p.iter().any(|&v| !(v >= T::zero() && v <= T::one())) || (total - T::one()).abs() > T::lit(1e-9) {
            return Err(Error::NonFiniteInput);
        }
        Ok(Self { p })
    }

    pub fn probs(&self) -> &[T] {
        &self.p
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.p)
    }

    pub fn entropy(&self) -> T {
        normalized_entropy(&self.p)
    }
}

/// Shannon entropy divided by `log K`, in `[0, 1]`, with `0 log 0 = 0`.
/// Returns 0 for `K < 2`.
///
/// Near zero the direct sum `-sum p log p` keeps full relative precision, so
/// very confident samples still order correctly. In the upper half the value
/// is taken as `1 - KL(p || u) / log K`, which puts the uniform vector exactly
/// on 1.
pub fn normalized_entropy<T: Real>(p: &[T]) -> T {
    let k = p.len();
    if k < 2 {
        return T::zero();
    }
    let kt = T::from_count(k);
    let log_k = kt.ln();
    let positive = || p.iter().filter(|&&v| v > T::zero());
    let direct = -positive().map(|&v| v * v.ln()).sum::<T>() / log_k;
    let h = if direct < T::lit(0.5) {
        direct
    } else {
        let kl: T = positive().map(|&v| v * (kt * v).ln()).sum();
        T::one() - kl / log_k
    };
    h.max(T::zero()).min(T::one())
}

/// A known-class index or the extra "unknown" class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClassDecision {
    Known(usize),
    Unknown,
}

/// Pseudo-label for one target sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoLabel {
    Known(usize),
    Unknown,
    Discarded,
}

impl PseudoLabel {
    pub fn is_discarded(self) -> bool {
        matches!(self, PseudoLabel::Discarded)
    }
}

/// Dual entropy thresholds with their calibration accumulators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdState<T> {
    pub tau_k: T,
    pub tau_u: T,
    sum_low: T,
    sum_high: T,
    batches_seen: usize,
    n_init: usize,
    p_reject: f64,
    frozen: bool,
}

impl<T: Real> ThresholdState<T> {
    /// `p_reject` is the percentage of samples per calibration batch left
    /// without a pseudo-label; `n_init` the number of calibration batches.
    pub fn new(p_reject: f64, n_init: usize) -> Result<Self> {
        if !(p_reject > 0.0 && p_reject < 100.0) {
            return Err(Error::Config(format!("p_reject must be in (0, 100), got {p_reject}")));
        }
        if n_init == 0 {
            return Err(Error::Config("n_init must be positive".into()));
        }
        Ok(Self {
            tau_k: T::zero(),
            tau_u: T::one(),
            sum_low: T::zero(),
            sum_high: T::zero(),
            batches_seen: 0,
            n_init,
            p_reject,
            frozen: false,
        })
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    pub fn n_init(&self) -> usize {
        self.n_init
    }

    pub fn p_reject(&self) -> f64 {
        self.p_reject
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_calibrated(&self) -> bool {
        self.batches_seen >= 1
    }

    /// Order-statistic rank used for the batch cutoffs.
    pub fn cutoff_rank(&self, batch_size: usize) -> usize {
        let m = (batch_size as f64 * (100.0 - self.p_reject) / 200.0).round() as usize;
        m.max(1)
    }

    /// Folds one batch of entropies into the running threshold averages.
    pub fn calibrate(&mut self, entropies: &[T]) -> Result<()> {
        if self.frozen {
            return Err(Error::AlreadyFrozen);
        }
        let n = entropies.len();
        if n < 4 {
            return Err(Error::BatchTooSmall(n));
        }
        if entropies.iter().any(|e| !e.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let mut sorted = entropies.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
        let m = self.cutoff_rank(n);
        self.sum_low += sorted[m - 1];
        self.sum_high += sorted[n - m];
        self.batches_seen += 1;

        let seen = T::from_count(self.batches_seen);
        let (mut lo, mut hi) = (self.sum_low / seen, self.sum_high / seen);
        if lo >= hi {
            let mid = (lo + hi) / T::lit(2.0);
            let eps = T::lit(SEPARATION_EPS);
            lo = mid - eps;
            hi = mid + eps;
        }
        self.tau_k = lo;
        self.tau_u = hi;
        self.frozen = self.batches_seen >= self.n_init;
        Ok(())
    }

    /// Inference threshold, the midpoint of the two calibration thresholds.
    pub fn tau(&self) -> T {
        (self.tau_k + self.tau_u) / T::lit(2.0)
    }

    /// Three-way decision for a given entropy and posterior argmax.
    pub fn gate(&self, entropy: T, best_class: usize) -> Result<PseudoLabel> {
        if !self.is_calibrated() {
            return Err(Error::Uncalibrated);
        }
        Ok(if entropy <= self.tau_k {
            PseudoLabel::Known(best_class)
        } else if entropy >= self.tau_u {
            PseudoLabel::Unknown
        } else {
            PseudoLabel::Discarded
        })
    }

    pub fn pseudo_label(&self, p: &LikelihoodVec<T>) -> Result<PseudoLabel> {
        self.gate(p.entropy(), p.argmax())
    }

    /// Final prediction: the gate reads the mixture entropy, the class comes
    /// from the classifier output.
    pub fn predict(&self, softmax_out: &[T], p: &LikelihoodVec<T>) -> Result<ClassDecision> {
        self.predict_with_entropy(softmax_out, p.entropy())
    }

    pub fn predict_with_entropy(&self, softmax_out: &[T], entropy: T) -> Result<ClassDecision> {
        if !self.is_calibrated() {
            return Err(Error::Uncalibrated);
        }
        Ok(if entropy <= self.tau() { ClassDecision::Known(argmax(softmax_out)) } else { ClassDecision::Unknown })
    }
}
