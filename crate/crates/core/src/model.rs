//! Small differentiable model: a tanh feature extractor `g`, a linear
//! reduction `r` feeding the mixture, and a linear softmax classifier `h`.
//! The classifier reads `g(x)` directly; `r(g(x))` is only consumed by the
//! mixture and the contrastive objective.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::objectives::cross_entropy_loss;
use crate::scalar::{softmax, Real};

/// Fully connected layer, weights stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self { in_dim, out_dim, w: vec![T::zero(); in_dim * out_dim], b: vec![T::zero(); out_dim] }
    }

    fn uniform(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut draw = || T::lit(rng.random_range(-bound..=bound));
        let w = (0..in_dim * out_dim).map(|_| draw()).collect();
        let b = (0..out_dim).map(|_| draw()).collect();
        Self { in_dim, out_dim, w, b }
    }

    pub fn apply(&self, x: &[T]) -> Vec<T> {
        self.w
            .chunks_exact(self.in_dim)
            .zip(&self.b)
            .map(|(row, &b)| b + row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>())
            .collect()
    }

    /// Accumulates `dW += dy x^T`, `db += dy` into `grad` and adds `W^T dy` to `dx`.
    fn backprop(&self, x: &[T], dy: &[T], grad: &mut Dense<T>, dx: Option<&mut [T]>) {
        for ((row, gb), &d) in grad.w.chunks_exact_mut(self.in_dim).zip(&mut grad.b).zip(dy) {
            if d == T::zero() {
                continue;
            }
            *gb += d;
            for (g, &v) in row.iter_mut().zip(x) {
                *g += d * v;
            }
        }
        if let Some(dx) = dx {
            for (row, &d) in self.w.chunks_exact(self.in_dim).zip(dy) {
                if d == T::zero() {
                    continue;
                }
                for (acc, &w) in dx.iter_mut().zip(row) {
                    *acc += d * w;
                }
            }
        }
    }

    fn values(&self) -> impl Iterator<Item = &T> {
        self.w.iter().chain(&self.b)
    }

    fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.w.iter_mut().chain(self.b.iter_mut())
    }
}

/// Parameters of all three layers. Also used for gradients and momentum buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    pub extractor: Dense<T>,
    pub reduction: Dense<T>,
    pub classifier: Dense<T>,
}

pub type Gradients<T> = Params<T>;

impl<T: Real> Params<T> {
    pub fn zeros_like(other: &Self) -> Self {
        let z = |d: &Dense<T>| Dense::zeros(d.in_dim, d.out_dim);
        Self { extractor: z(&other.extractor), reduction: z(&other.reduction), classifier: z(&other.classifier) }
    }

    /// Every scalar in a fixed order: extractor, reduction, classifier; weights before biases.
    pub fn values(&self) -> impl Iterator<Item = &T> {
        self.extractor.values().chain(self.reduction.values()).chain(self.classifier.values())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut T> {
        self.extractor.values_mut().chain(self.reduction.values_mut()).chain(self.classifier.values_mut())
    }

    pub fn len(&self) -> usize {
        self.values().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(|v| v.is_finite())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: T) {
        for (a, &b) in self.values_mut().zip(other.values()) {
            *a += s * b;
        }
    }
}

/// Layer sizes of a [`ToyModel`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub fd: usize,
    pub fd_r: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    pub input: Vec<T>,
    /// `g(x)`.
    pub features: Vec<T>,
    /// `r(g(x))`.
    pub reduced: Vec<T>,
    pub logits: Vec<T>,
    pub softmax: Vec<T>,
}

/// Upstream gradients for one cached sample. Either side may be absent.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads<T> {
    pub d_reduced: Option<Vec<T>>,
    pub d_logits: Option<Vec<T>>,
}

impl<T> Default for OutputGrads<T> {
    fn default() -> Self {
        Self { d_reduced: None, d_logits: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel<T> {
    pub params: Params<T>,
    pub velocity: Params<T>,
    pub seed: u64,
}

impl<T: Real> ToyModel<T> {
    /// Seeded initialization, uniform in `±1/sqrt(fan_in)`.
    pub fn new(dims: ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params {
            extractor: Dense::uniform(dims.d_in, dims.fd, &mut rng),
            reduction: Dense::uniform(dims.fd, dims.fd_r, &mut rng),
            classifier: Dense::uniform(dims.fd, dims.n_classes, &mut rng),
        };
        let velocity = Params::zeros_like(&params);
        Self { params, velocity, seed }
    }

    /// All-zero parameters.
    pub fn zeros(dims: ModelDims) -> Self {
        let params = Params {
            extractor: Dense::zeros(dims.d_in, dims.fd),
            reduction: Dense::zeros(dims.fd, dims.fd_r),
            classifier: Dense::zeros(dims.fd, dims.n_classes),
        };
        let velocity = Params::zeros_like(&params);
        Self { params, velocity, seed: 0 }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.params.extractor.in_dim,
            fd: self.params.extractor.out_dim,
            fd_r: self.params.reduction.out_dim,
            n_classes: self.params.classifier.out_dim,
        }
    }

    pub fn forward(&self, x: &[T]) -> Result<ForwardCache<T>> {
        check_len(self.params.extractor.in_dim, x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteInput);
        }
        let features: Vec<T> = self.params.extractor.apply(x).into_iter().map(T::tanh).collect();
        let reduced = self.params.reduction.apply(&features);
        let logits = self.params.classifier.apply(&features);
        let softmax = softmax(&logits);
        Ok(ForwardCache { input: x.to_vec(), features, reduced, logits, softmax })
    }

    pub fn forward_batch(&self, xs: &[Vec<T>]) -> Result<Vec<ForwardCache<T>>> {
        xs.iter().map(|x| self.forward(x)).collect()
    }

    /// Exact gradients of `sum_i <d_reduced_i, r_i> + <d_logits_i, z_i>` over the batch.
    pub fn backward(&self, caches: &[ForwardCache<T>], grads: &[OutputGrads<T>]) -> Result<Gradients<T>> {
        if caches.len() != grads.len() {
            return Err(Error::LengthMismatch { left: caches.len(), right: grads.len() });
        }
        let p = &self.params;
        let mut out = Params::zeros_like(p);
        let mut d_feat = vec![T::zero(); p.extractor.out_dim];
        for (cache, g) in caches.iter().zip(grads) {
            if g.d_reduced.is_none() && g.d_logits.is_none() {
                continue;
            }
            d_feat.iter_mut().for_each(|v| *v = T::zero());
            if let Some(dr) = &g.d_reduced {
                check_len(p.reduction.out_dim, dr.len())?;
                p.reduction.backprop(&cache.features, dr, &mut out.reduction, Some(&mut d_feat));
            }
            if let Some(dz) = &g.d_logits {
                check_len(p.classifier.out_dim, dz.len())?;
                p.classifier.backprop(&cache.features, dz, &mut out.classifier, Some(&mut d_feat));
            }
            let d_pre: Vec<T> =
                d_feat.iter().zip(&cache.features).map(|(&d, &f)| d * (T::one() - f * f)).collect();
            p.extractor.backprop(&cache.input, &d_pre, &mut out.extractor, None);
        }
        Ok(out)
    }

    /// Heavy-ball momentum: `v <- m v + grad`, `theta <- theta - lr v`.
    pub fn sgd_step(&mut self, grads: &Gradients<T>, cfg: &OptimizerConfig) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        let (lr, mom) = (T::lit(cfg.learning_rate), T::lit(cfg.momentum));
        for (v, &g) in self.velocity.values_mut().zip(grads.values()) {
            *v = mom * *v + g;
        }
        for (theta, &v) in self.params.values_mut().zip(self.velocity.values()) {
            *theta -= lr * v;
        }
        if !self.params.is_finite() {
            return Err(Error::NonFiniteGradient);
        }
        Ok(())
    }

    /// Mean cross-entropy of the model on a labeled set.
    pub fn mean_cross_entropy(&self, inputs: &[Vec<T>], labels: &[usize]) -> Result<T> {
        let caches = self.forward_batch(inputs)?;
        let logits: Vec<Vec<T>> = caches.into_iter().map(|c| c.logits).collect();
        Ok(cross_entropy_loss(&logits, labels)?.0)
    }

    pub fn accuracy(&self, inputs: &[Vec<T>], labels: &[usize]) -> Result<f64> {
        if inputs.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for (x, &y) in inputs.iter().zip(labels) {
            if crate::scalar::argmax(&self.forward(x)?.logits) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / inputs.len() as f64)
    }

    /// Mini-batch cross-entropy training on labeled source data. Returns the
    /// full-set mean loss after each epoch.
    pub fn train_source(
        &mut self,
        inputs: &[Vec<T>],
        labels: &[usize],
        epochs: usize,
        batch_size: usize,
        cfg: &OptimizerConfig,
        seed: u64,
    ) -> Result<Vec<T>> {
        cfg.validate()?;
        if inputs.len() != labels.len() {
            return Err(Error::LengthMismatch { left: inputs.len(), right: labels.len() });
        }
        let k = self.params.classifier.out_dim;
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::Config(format!("source label {bad} outside 0..{k}")));
        }
        let batch_size = batch_size.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut history = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch_size) {
                let xs: Vec<Vec<T>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
                let ys: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                let caches = self.forward_batch(&xs)?;
                let logits: Vec<Vec<T>> = caches.iter().map(|c| c.logits.clone()).collect();
                let (_, d_logits) = cross_entropy_loss(&logits, &ys)?;
                let ograds: Vec<OutputGrads<T>> =
                    d_logits.into_iter().map(|d| OutputGrads { d_reduced: None, d_logits: Some(d) }).collect();
                let grads = self.backward(&caches, &ograds)?;
                self.sgd_step(&grads, cfg)?;
            }
            history.push(self.mean_cross_entropy(inputs, labels)?);
        }
        Ok(history)
    }

    /// Clears momentum buffers, e.g. between source training and adaptation.
    pub fn reset_velocity(&mut self) {
        self.velocity = Params::zeros_like(&self.params);
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint<T> {
        ModelCheckpoint {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            seed: self.seed,
            dims: self.dims(),
            params: self.params.clone(),
            velocity: self.velocity.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: ModelCheckpoint<T>) -> Result<Self> {
        if ckpt.format != MODEL_FORMAT || ckpt.version != MODEL_VERSION {
            return Err(Error::Checkpoint(format!("{} v{}", ckpt.format, ckpt.version)));
        }
        let model = Self { params: ckpt.params, velocity: ckpt.velocity, seed: ckpt.seed };
        if model.dims() != ckpt.dims || model.params.len() != model.velocity.len() {
            return Err(Error::Checkpoint("dimension mismatch".into()));
        }
        Ok(model)
    }
}

pub const MODEL_FORMAT: &str = "toy-model";
pub const MODEL_VERSION: u32 = 1;

/// Serialized model: parameters, momentum buffers, and the init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint<T> {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub dims: ModelDims,
    pub params: Params<T>,
    pub velocity: Params<T>,
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: ModelDims = ModelDims { d_in: 5, fd: 8, fd_r: 4, n_classes: 3 };

    #[test]
    fn zero_model_outputs_uniform_softmax() {
        let m = ToyModel::<f64>::zeros(SMALL);
        let c = m.forward(&[1.0, -2.0, 0.5, 3.0, 0.0]).unwrap();
        for p in &c.softmax {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logit_gives_one_hot() {
        let mut m = ToyModel::<f64>::zeros(SMALL);
        m.params.classifier.b[1] = 800.0;
        let c = m.forward(&[0.0; 5]).unwrap();
        assert!((c.softmax[1] - 1.0).abs() < 1e-15);
        assert!(c.softmax.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn forward_rejects_wrong_dimension() {
        let m = ToyModel::<f64>::new(SMALL, 1);
        assert!(matches!(m.forward(&[0.0; 4]), Err(Error::DimensionMismatch { expected: 5, got: 4 })));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradient() {
        let m = ToyModel::<f64>::new(SMALL, 3);
        let c = m.forward(&[0.3, 0.1, -0.2, 0.0, 1.0]).unwrap();
        let g = m
            .backward(&[c], &[OutputGrads { d_reduced: Some(vec![0.0; 4]), d_logits: Some(vec![0.0; 3]) }])
            .unwrap();
        assert!(g.values().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicated_sample_doubles_gradient() {
        let m = ToyModel::<f64>::new(SMALL, 4);
        let c = m.forward(&[0.3, 0.1, -0.2, 0.0, 1.0]).unwrap();
        let og = OutputGrads { d_reduced: Some(vec![0.1, -0.2, 0.3, 0.4]), d_logits: Some(vec![0.5, -0.25, -0.25]) };
        let one = m.backward(&[c.clone()], &[og.clone()]).unwrap();
        let two = m.backward(&[c.clone(), c], &[og.clone(), og]).unwrap();
        for (a, b) in one.values().zip(two.values()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    fn scalar_model(p0: f64) -> ToyModel<f64> {
        let dims = ModelDims { d_in: 1, fd: 1, fd_r: 1, n_classes: 1 };
        let mut m = ToyModel::zeros(dims);
        m.params.classifier.b[0] = p0;
        m
    }

    fn unit_grad(m: &ToyModel<f64>) -> Gradients<f64> {
        let mut g = Params::zeros_like(&m.params);
        g.classifier.b[0] = 1.0;
        g
    }

    #[test]
    fn sgd_examples() {
        let mut m = scalar_model(0.0);
        let g = unit_grad(&m);
        m.sgd_step(&g, &OptimizerConfig { learning_rate: 0.1, momentum: 0.0 }).unwrap();
        assert!((m.params.classifier.b[0] + 0.1).abs() < 1e-15);

        let mut m = scalar_model(0.0);
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.9 };
        m.sgd_step(&g, &cfg).unwrap();
        m.sgd_step(&g, &cfg).unwrap();
        assert!((m.params.classifier.b[0] + 0.29).abs() < 1e-15);

        let before = m.params.clone();
        let v = m.velocity.classifier.b[0];
        m.sgd_step(&Params::zeros_like(&m.params), &OptimizerConfig { learning_rate: 0.1, momentum: 0.9 }).unwrap();
        assert!((m.velocity.classifier.b[0] - 0.9 * v).abs() < 1e-15);
        // zero gradient still moves parameters through the decayed buffer
        assert_ne!(m.params, before);

        let mut fresh = scalar_model(1.0);
        let snapshot = fresh.params.clone();
        fresh.sgd_step(&Params::zeros_like(&snapshot), &cfg).unwrap();
        assert_eq!(fresh.params, snapshot);
    }

    #[test]
    fn sgd_rejects_non_finite_gradients() {
        let mut m = scalar_model(0.0);
        let mut g = unit_grad(&m);
        g.classifier.b[0] = f64::NAN;
        assert!(matches!(
            m.sgd_step(&g, &OptimizerConfig { learning_rate: 0.1, momentum: 0.9 }),
            Err(Error::NonFiniteGradient)
        ));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut m = ToyModel::<f64>::new(SMALL, 9);
        let before = m.clone();
        let cfg = OptimizerConfig { learning_rate: 0.1, momentum: 0.9 };
        let hist = m.train_source(&[vec![0.0; 5]], &[1], 0, 8, &cfg, 0).unwrap();
        assert!(hist.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = ToyModel::<f64>::new(SMALL, 12);
        let text = serde_json::to_string(&m.to_checkpoint()).unwrap();
        let back = ToyModel::from_checkpoint(serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
