//! Adaptation objectives and their gradients with respect to model outputs.
//!
//! * [`contrastive_loss`]: supervised contrastive loss on cosine similarities
//!   of reduced features, with the mixture means as class prototypes.
//! * [`kld_loss`]: pushes the classifier output away from uniform for
//!   samples pseudo-labeled known and toward uniform for unknown ones.
//! * [`combine`]: `L_C + lambda * L_KLD`, routed into per-sample
//!   [`OutputGrads`] for the backward pass.
//! * [`cross_entropy_loss`]: plain source-training objective.

use crate::error::{Error, Result};
use crate::model::OutputGrads;
use crate::ood::PseudoLabel;
use crate::scalar::{dot, log_sum_exp, Real};

/// Floor applied to probabilities inside the KL logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Inputs of the contrastive objective. The first half of `reduced` holds
/// the original samples, the second half their augmented views in the same
/// order; labels are aligned with `reduced`.
#[derive(Debug, Clone, Copy)]
pub struct ContrastiveBatch<'a, T> {
    pub reduced: &'a [Vec<T>],
    pub labels: &'a [PseudoLabel],
    pub prototypes: &'a [Vec<T>],
    pub temperature: T,
    /// Treat pairs of unknown-labeled samples as positives.
    pub unknown_positives: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveResult<T> {
    pub loss: T,
    /// Gradient with respect to each raw reduced feature.
    pub d_reduced: Vec<Vec<T>>,
    /// Number of numerator terms the loss was averaged over.
    pub n_terms: usize,
}

fn unit<T: Real>(v: &[T]) -> (Vec<T>, T) {
    let norm = dot(v, v).sqrt();
    if norm > T::zero() {
        (v.iter().map(|&x| x / norm).collect(), norm)
    } else {
        (vec![T::zero(); v.len()], T::zero())
    }
}

/// Prototype-anchored supervised contrastive loss.
///
/// Discarded samples are excluded entirely. Unknown samples only appear in
/// denominators unless `unknown_positives` is set. Self-pairs are excluded
/// from both numerators and denominators of the pair term. The prototypes
/// are constants.
pub fn contrastive_loss<T: Real>(b: &ContrastiveBatch<'_, T>) -> Result<ContrastiveResult<T>> {
    let n = b.reduced.len();
    if b.labels.len() != n {
        return Err(Error::LengthMismatch { left: n, right: b.labels.len() });
    }
    if !(b.temperature > T::zero()) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let dim = b.reduced.first().map_or(0, Vec::len);
    let inv_t = T::one() / b.temperature;

    let (units, norms): (Vec<Vec<T>>, Vec<T>) = b.reduced.iter().map(|v| unit(v)).unzip();
    let active: Vec<usize> = (0..n).filter(|&i| !b.labels[i].is_discarded()).collect();
    let positive = |a: PseudoLabel, c: PseudoLabel| match (a, c) {
        (PseudoLabel::Known(x), PseudoLabel::Known(y)) => x == y,
        (PseudoLabel::Unknown, PseudoLabel::Unknown) => b.unknown_positives,
        _ => false,
    };

    let mut loss = T::zero();
    let mut n_terms = 0usize;
    let mut d_unit = vec![vec![T::zero(); dim]; n];

    // Pair term.
    for &i in &active {
        let pos: Vec<usize> = active.iter().copied().filter(|&j| j != i && positive(b.labels[i], b.labels[j])).collect();
        if pos.is_empty() {
            continue;
        }
        let others: Vec<usize> = active.iter().copied().filter(|&l| l != i).collect();
        let logits: Vec<T> = others.iter().map(|&l| dot(&units[i], &units[l]) * inv_t).collect();
        let lse = log_sum_exp(&logits);
        let n_pos = T::from_count(pos.len());
        for &j in &pos {
            loss += lse - dot(&units[i], &units[j]) * inv_t;
            // d(-s_ij / t)
            for k in 0..dim {
                d_unit[i][k] -= inv_t * units[j][k];
                d_unit[j][k] -= inv_t * units[i][k];
            }
        }
        n_terms += pos.len();
        for (&l, &z) in others.iter().zip(&logits) {
            let w = n_pos * inv_t * (z - lse).exp();
            for k in 0..dim {
                d_unit[i][k] += w * units[l][k];
                d_unit[l][k] += w * units[i][k];
            }
        }
    }

    // Prototype term.
    for &i in &active {
        let PseudoLabel::Known(c) = b.labels[i] else { continue };
        let proto = b.prototypes.get(c).ok_or(Error::DimensionMismatch { expected: b.prototypes.len(), got: c + 1 })?;
        let (v, _) = unit(proto);
        let logits: Vec<T> = active.iter().map(|&l| dot(&v, &units[l]) * inv_t).collect();
        let lse = log_sum_exp(&logits);
        loss += lse - dot(&v, &units[i]) * inv_t;
        n_terms += 1;
        for k in 0..dim {
            d_unit[i][k] -= inv_t * v[k];
        }
        for (&l, &z) in active.iter().zip(&logits) {
            let w = inv_t * (z - lse).exp();
            for k in 0..dim {
                d_unit[l][k] += w * v[k];
            }
        }
    }

    if n_terms == 0 {
        return Ok(ContrastiveResult { loss: T::zero(), d_reduced: vec![vec![T::zero(); dim]; n], n_terms });
    }
    let scale = T::one() / T::from_count(n_terms);
    let d_reduced = d_unit
        .into_iter()
        .zip(units.iter().zip(&norms))
        .map(|(du, (u, &norm))| {
            if norm == T::zero() {
                return vec![T::zero(); dim];
            }
            let radial = dot(u, &du);
            du.iter().zip(u).map(|(&g, &x)| scale * (g - x * radial) / norm).collect()
        })
        .collect();
    Ok(ContrastiveResult { loss: loss * scale, d_reduced, n_terms })
}

#[derive(Debug, Clone, PartialEq)]
pub struct KldResult<T> {
    pub loss: T,
    /// Gradient with respect to each sample's logits; zero for discarded samples.
    pub d_logits: Vec<Vec<T>>,
}

/// `KL(u || q)` with `q` floored at [`PROB_FLOOR`].
pub fn kl_from_uniform<T: Real>(q: &[T]) -> T {
    let k = T::from_count(q.len());
    let floor = T::lit(PROB_FLOOR);
    let mean_log_q: T = q.iter().map(|&p| p.max(floor).ln()).sum::<T>() / k;
    -k.ln() - mean_log_q
}

/// `-sum_known KL(u || f(x)) + sum_unknown KL(u || f(x))`, summed over the batch.
pub fn kld_loss<T: Real>(softmax_outs: &[Vec<T>], labels: &[PseudoLabel]) -> Result<KldResult<T>> {
    if softmax_outs.len() != labels.len() {
        return Err(Error::LengthMismatch { left: softmax_outs.len(), right: labels.len() });
    }
    let floor = T::lit(PROB_FLOOR);
    let mut loss = T::zero();
    let mut d_logits = Vec::with_capacity(labels.len());
    for (q, &label) in softmax_outs.iter().zip(labels) {
        let sign = match label {
            PseudoLabel::Known(_) => -T::one(),
            PseudoLabel::Unknown => T::one(),
            PseudoLabel::Discarded => {
                d_logits.push(vec![T::zero(); q.len()]);
                continue;
            }
        };
        loss += sign * kl_from_uniform(q);
        // d/dz_j of -(1/K) sum_{c: q_c > floor} log q_c
        let k = T::from_count(q.len());
        let n_active = T::from_count(q.iter().filter(|&&p| p > floor).count());
        d_logits.push(
            q.iter()
                .map(|&p| {
                    let own = if p > floor { T::one() } else { T::zero() };
                    sign * (n_active * p - own) / k
                })
                .collect(),
        );
    }
    Ok(KldResult { loss, d_logits })
}

/// Combined objective with per-sample upstream gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss<T> {
    pub loss: T,
    pub contrastive: T,
    pub kld: T,
    pub grads: Vec<OutputGrads<T>>,
}

/// `L_C + lambda * L_KLD`. `contrastive` covers `2N` samples (originals then
/// augmented views), `kld` the `N` originals; either may be absent.
pub fn combine<T: Real>(
    contrastive: Option<&ContrastiveResult<T>>,
    kld: Option<&KldResult<T>>,
    lambda: T,
    n_originals: usize,
) -> Result<CombinedLoss<T>> {
    let n_total = contrastive.map_or(n_originals, |c| c.d_reduced.len());
    if let Some(k) = kld {
        if k.d_logits.len() != n_originals {
            return Err(Error::LengthMismatch { left: k.d_logits.len(), right: n_originals });
        }
    }
    let mut grads = vec![OutputGrads::default(); n_total];
    if let Some(c) = contrastive {
        for (g, d) in grads.iter_mut().zip(&c.d_reduced) {
            g.d_reduced = Some(d.clone());
        }
    }
    if let Some(k) = kld {
        for (g, d) in grads.iter_mut().zip(&k.d_logits) {
            g.d_logits = Some(d.iter().map(|&v| lambda * v).collect());
        }
    }
    let lc = contrastive.map_or(T::zero(), |c| c.loss);
    let lk = kld.map_or(T::zero(), |k| k.loss);
    Ok(CombinedLoss { loss: combined_loss(lc, lk, lambda), contrastive: lc, kld: lk, grads })
}

pub fn combined_loss<T: Real>(contrastive: T, kld: T, lambda: T) -> T {
    contrastive + lambda * kld
}

/// Mean cross-entropy from logits, with gradients `(softmax - onehot) / N`.
pub fn cross_entropy_loss<T: Real>(logits: &[Vec<T>], labels: &[usize]) -> Result<(T, Vec<Vec<T>>)> {
    if logits.len() != labels.len() {
        return Err(Error::LengthMismatch { left: logits.len(), right: labels.len() });
    }
    if logits.is_empty() {
        return Ok((T::zero(), Vec::new()));
    }
    let inv_n = T::one() / T::from_count(logits.len());
    let mut loss = T::zero();
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        if y >= z.len() {
            return Err(Error::DimensionMismatch { expected: z.len(), got: y + 1 });
        }
        let lse = log_sum_exp(z);
        loss += lse - z[y];
        grads.push(
            z.iter()
                .enumerate()
                .map(|(c, &v)| inv_n * ((v - lse).exp() - if c == y { T::one() } else { T::zero() }))
                .collect(),
        );
    }
    Ok((loss * inv_n, grads))
}
