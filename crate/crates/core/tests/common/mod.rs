#![allow(dead_code)]

use gmm_adapt::gmm::GmmState;
use gmm_adapt::model::{ModelDims, OutputGrads, ToyModel};
use gmm_adapt::objectives::{combine, contrastive_loss, cross_entropy_loss, kld_loss, ContrastiveBatch};
use gmm_adapt::ood::{normalized_entropy, PseudoLabel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub const SMALL_DIMS: ModelDims = ModelDims { d_in: 5, fd: 8, fd_r: 4, n_classes: 3 };
pub const SMALL_BATCH: usize = 6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Contrastive,
    Kld,
    Combined,
    CrossEntropy,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Contrastive, LossKind::Kld, LossKind::Combined, LossKind::CrossEntropy];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Contrastive => "contrastive",
            LossKind::Kld => "kld",
            LossKind::Combined => "combined",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

/// One random gradient-check problem on the small model.
pub struct GradInstance {
    pub model: ToyModel<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub augmented: Vec<Vec<f64>>,
    pub labels: Vec<PseudoLabel>,
    pub classes: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub temperature: f64,
    pub lambda: f64,
}

impl GradInstance {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = SMALL_DIMS;
        let model = ToyModel::new(d, seed.wrapping_mul(31).wrapping_add(1));
        let inputs: Vec<Vec<f64>> = (0..SMALL_BATCH).map(|_| normal_vec(&mut rng, d.d_in)).collect();
        let augmented = inputs.iter().map(|x| x.iter().map(|v| v + 0.1 * rng.random::<f64>()).collect()).collect();
        let mut labels: Vec<PseudoLabel> = (0..SMALL_BATCH)
            .map(|_| match rng.random_range(0..5) {
                0 => PseudoLabel::Unknown,
                1 => PseudoLabel::Discarded,
                _ => PseudoLabel::Known(rng.random_range(0..d.n_classes)),
            })
            .collect();
        labels[0] = PseudoLabel::Known(1);
        labels[1] = PseudoLabel::Unknown;
        let classes = (0..SMALL_BATCH).map(|_| rng.random_range(0..d.n_classes)).collect();
        let prototypes = (0..d.n_classes).map(|_| normal_vec(&mut rng, d.fd_r)).collect();
        Self {
            model,
            inputs,
            augmented,
            labels,
            classes,
            prototypes,
            temperature: rng.random_range(0.2..1.0),
            lambda: rng.random_range(0.5..2.0),
        }
    }

    /// Loss value and per-parameter analytic gradient for the given model.
    pub fn evaluate(&self, kind: LossKind, model: &ToyModel<f64>) -> (f64, Vec<f64>) {
        let orig = model.forward_batch(&self.inputs).unwrap();
        let soft: Vec<Vec<f64>> = orig.iter().map(|c| c.softmax.clone()).collect();
        let (loss, caches, grads) = match kind {
            LossKind::CrossEntropy => {
                let logits: Vec<Vec<f64>> = orig.iter().map(|c| c.logits.clone()).collect();
                let (loss, g) = cross_entropy_loss(&logits, &self.classes).unwrap();
                let grads = g.into_iter().map(|d| OutputGrads { d_reduced: None, d_logits: Some(d) }).collect();
                (loss, orig, grads)
            }
            LossKind::Kld => {
                let k = kld_loss(&soft, &self.labels).unwrap();
                let c = combine(None, Some(&k), 1.0, self.inputs.len()).unwrap();
                (c.loss, orig, c.grads)
            }
            LossKind::Contrastive | LossKind::Combined => {
                let aug = model.forward_batch(&self.augmented).unwrap();
                let mut reduced: Vec<Vec<f64>> = orig.iter().map(|c| c.reduced.clone()).collect();
                reduced.extend(aug.iter().map(|c| c.reduced.clone()));
                let mut labels = self.labels.clone();
                labels.extend_from_slice(&self.labels);
                let c = contrastive_loss(&ContrastiveBatch {
                    reduced: &reduced,
                    labels: &labels,
                    prototypes: &self.prototypes,
                    temperature: self.temperature,
                    unknown_positives: false,
                })
                .unwrap();
                let k = (kind == LossKind::Combined).then(|| kld_loss(&soft, &self.labels).unwrap());
                let comb = combine(Some(&c), k.as_ref(), self.lambda, self.inputs.len()).unwrap();
                let mut all = orig;
                all.extend(aug);
                (comb.loss, all, comb.grads)
            }
        };
        let g = model.backward(&caches, &grads).unwrap();
        (loss, g.values().copied().collect())
    }

    /// Worst relative error between the analytic gradient and central differences.
    pub fn worst_rel_err(&self, kind: LossKind) -> f64 {
        let (_, analytic) = self.evaluate(kind, &self.model);
        let mut probe = self.model.clone();
        let mut worst = 0.0f64;
        for (i, &a) in analytic.iter().enumerate() {
            let base = *probe.params.values().nth(i).unwrap();
            *probe.params.values_mut().nth(i).unwrap() = base + FD_STEP;
            let up = self.evaluate(kind, &probe).0;
            *probe.params.values_mut().nth(i).unwrap() = base - FD_STEP;
            let down = self.evaluate(kind, &probe).0;
            *probe.params.values_mut().nth(i).unwrap() = base;
            worst = worst.max(rel_err(a, (up - down) / (2.0 * FD_STEP)));
        }
        worst
    }
}

/// Worst error per loss over `instances` random problems.
pub fn gradient_suite(instances: u64) -> Vec<(LossKind, f64)> {
    LossKind::ALL
        .iter()
        .map(|&kind| {
            let worst = (0..instances).map(|s| GradInstance::random(1000 + s).worst_rel_err(kind)).fold(0.0, f64::max);
            (kind, worst)
        })
        .collect()
}

/// Streams random weighted batches through a fresh mixture and compares the
/// final means against a one-pass weighted mean, and the first-batch
/// covariance against the direct weighted scatter. Returns the worst relative
/// mean error and the worst absolute covariance error.
pub fn streaming_oracle(streams: u64, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_mean, mut worst_cov) = (0.0f64, 0.0f64);
    for _ in 0..streams {
        let dim = rng.random_range(2..=16);
        let k = rng.random_range(1..=4);
        let n_batches = rng.random_range(1..=20);
        let mut gmm = GmmState::<f64>::new(k, dim, 1e-6);
        let mut sum_w = vec![0.0; k];
        let mut sum_wx = vec![vec![0.0; dim]; k];
        for b in 0..n_batches {
            let n = rng.random_range(1..=12);
            let feats: Vec<Vec<f64>> =
                (0..n).map(|_| normal_vec(&mut rng, dim).into_iter().map(|v| 3.0 * v + 1.0).collect()).collect();
            let weights: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            gmm.update(&feats, &weights).unwrap();
            for (x, w) in feats.iter().zip(&weights) {
                for c in 0..k {
                    sum_w[c] += w[c];
                    for j in 0..dim {
                        sum_wx[c][j] += w[c] * x[j];
                    }
                }
            }
            if b == 0 {
                for c in 0..k {
                    let mean: Vec<f64> = sum_wx[c].iter().map(|v| v / sum_w[c]).collect();
                    for i in 0..dim {
                        for j in 0..=i {
                            let direct: f64 = feats
                                .iter()
                                .zip(&weights)
                                .map(|(x, w)| w[c] * (x[i] - mean[i]) * (x[j] - mean[j]))
                                .sum::<f64>()
                                / sum_w[c];
                            worst_cov = worst_cov.max((gmm.modes()[c].cov.get(i, j) - direct).abs());
                        }
                    }
                }
            }
        }
        for c in 0..k {
            for j in 0..dim {
                let oracle = sum_wx[c][j] / sum_w[c];
                let got = gmm.modes()[c].mean[j];
                worst_mean = worst_mean.max((got - oracle).abs() / oracle.abs().max(1e-12));
            }
        }
    }
    (worst_mean, worst_cov)
}

/// Random probability vectors: Dirichlet-like draws, sparse ones and peaked ones.
pub fn random_prob(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let k = rng.random_range(2..=32);
    let style = rng.random_range(0..3);
    let mut p: Vec<f64> = (0..k)
        .map(|_| {
            let u: f64 = rng.random::<f64>();
            match style {
                0 => -u.max(1e-300).ln(),
                1 => if rng.random_bool(0.5) { 0.0 } else { u },
                _ => (40.0 * u).exp(),
            }
        })
        .collect();
    if p.iter().all(|&v| v == 0.0) {
        p[0] = 1.0;
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Smallest and largest normalized entropy over `n` random vectors.
pub fn entropy_range(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| normalized_entropy(&random_prob(&mut rng))).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| {
        (lo.min(e), hi.max(e))
    })
}
