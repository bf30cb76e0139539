//! Synthetic source/target task: Gaussian class blobs in input space, a
//! rotation + translation + extra-noise domain shift, and class splits for
//! partial-set, open-set, and open-partial-set category shift.
//!
//! Class indices are 0-based. Source classes are `0..n_shared + n_source_private`;
//! the target draws from `0..n_shared` plus the block of target-private
//! classes placed after all source classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ood::ClassDecision;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum ShiftKind {
    Pda,
    Oda,
    Opda,
}

/// Category-shift split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    pub n_shared: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
}

impl ShiftSpec {
    pub fn opda(n_shared: usize, n_source_private: usize, n_target_private: usize) -> Self {
        Self { kind: ShiftKind::Opda, n_shared, n_source_private, n_target_private }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.n_shared > 0
            && match self.kind {
                ShiftKind::Pda => self.n_target_private == 0 && self.n_source_private > 0,
                ShiftKind::Oda => self.n_source_private == 0 && self.n_target_private > 0,
                ShiftKind::Opda => self.n_source_private > 0 && self.n_target_private > 0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidSplit(format!("{self:?}")))
        }
    }

    /// `|Y_s|`.
    pub fn n_source_classes(&self) -> usize {
        self.n_shared + self.n_source_private
    }

    pub fn n_total_classes(&self) -> usize {
        self.n_source_classes() + self.n_target_private
    }

    /// Global class indices present in the target domain.
    pub fn target_classes(&self) -> Vec<usize> {
        (0..self.n_shared).chain(self.n_source_classes()..self.n_total_classes()).collect()
    }
}

/// Input-space geometry of the two domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub d_in: usize,
    /// Distance of every class center from the origin.
    pub class_sep: f64,
    pub rotation_seed: u64,
    /// Angle of the planar rotations composing the target rotation, in radians.
    pub rotation_angle: f64,
    /// Target translation; empty means no translation.
    pub shift_translation: Vec<f64>,
    pub noise_sigma_source: f64,
    pub noise_sigma_target: f64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 {
            return Err(Error::Config("d_in must be positive".into()));
        }
        if !(self.class_sep > 0.0) {
            return Err(Error::Config("class_sep must be positive".into()));
        }
        if !(self.noise_sigma_source > 0.0 && self.noise_sigma_target > 0.0) {
            return Err(Error::Config("noise sigmas must be positive".into()));
        }
        if !self.shift_translation.is_empty() && self.shift_translation.len() != self.d_in {
            return Err(Error::Config(format!(
                "shift_translation has {} entries, expected {}",
                self.shift_translation.len(),
                self.d_in
            )));
        }
        if !self.rotation_angle.is_finite() || self.shift_translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("domain shift must be finite".into()));
        }
        Ok(())
    }

    /// Same geometry with no domain shift.
    pub fn null_shift(&self) -> Self {
        Self {
            rotation_angle: 0.0,
            shift_translation: Vec::new(),
            noise_sigma_target: self.noise_sigma_source,
            ..self.clone()
        }
    }
}

/// Sizes of the generated sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSizes {
    pub source_per_class: usize,
    pub holdout_per_class: usize,
    pub target_samples: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet<T> {
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T> LabeledSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// One target batch. `true_labels` are for scoring only.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch<T> {
    pub batch_index: usize,
    pub inputs: Vec<Vec<T>>,
    pub true_labels: Vec<ClassDecision>,
}

impl<T> StreamBatch<T> {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Single-pass iterator over fixed-size target batches. A trailing partial
/// batch is dropped.
#[derive(Debug, Clone)]
pub struct TargetStream<T> {
    inputs: Vec<Vec<T>>,
    labels: Vec<ClassDecision>,
    batch_size: usize,
    next: usize,
}

impl<T: Clone> TargetStream<T> {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Number of full batches.
    pub fn n_batches(&self) -> usize {
        self.labels.len() / self.batch_size
    }

    pub fn next_batch(&mut self) -> Option<StreamBatch<T>> {
        if self.next >= self.n_batches() {
            return None;
        }
        let k = self.next;
        let range = k * self.batch_size..(k + 1) * self.batch_size;
        self.next += 1;
        Some(StreamBatch {
            batch_index: k,
            inputs: self.inputs[range.clone()].to_vec(),
            true_labels: self.labels[range].to_vec(),
        })
    }
}

impl<T: Clone> Iterator for TargetStream<T> {
    type Item = StreamBatch<T>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }
}

/// Everything a run needs from the simulator.
#[derive(Debug, Clone)]
pub struct Task<T> {
    pub shift: ShiftSpec,
    pub source_train: LabeledSet<T>,
    pub source_holdout: LabeledSet<T>,
    pub target: TargetStream<T>,
}

/// Deterministic geometry shared by both domains.
struct Geometry {
    centers: Vec<Vec<f64>>,
    rotation: Vec<Vec<f64>>,
    translation: Vec<f64>,
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Random orthonormal basis by Gram-Schmidt on Gaussian vectors.
fn random_basis(d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-10 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Orthogonal matrix rotating consecutive pairs of a random basis by `angle`.
pub fn planar_rotation(d: usize, angle: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> = (0..d).map(|i| (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    if angle == 0.0 {
        return r;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = random_basis(d, &mut rng);
    let (c, s) = (angle.cos(), angle.sin());
    for pair in q.chunks_exact(2) {
        let (a, b) = (&pair[0], &pair[1]);
        for i in 0..d {
            for j in 0..d {
                r[i][j] += (c - 1.0) * (a[i] * a[j] + b[i] * b[j]) + s * (b[i] * a[j] - a[i] * b[j]);
            }
        }
    }
    r
}

impl Geometry {
    fn new(shift: &ShiftSpec, dom: &DomainSpec) -> Self {
        let n = shift.n_total_classes();
        let centers = if n <= dom.d_in {
            (0..n).map(|c| (0..dom.d_in).map(|j| if j == c { dom.class_sep } else { 0.0 }).collect()).collect()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(dom.rotation_seed ^ 0x5eed_c3a7);
            (0..n)
                .map(|_| {
                    let mut v: Vec<f64> = (0..dom.d_in).map(|_| gaussian(&mut rng)).collect();
                    normalize(&mut v);
                    v.iter().map(|x| x * dom.class_sep).collect()
                })
                .collect()
        };
        let translation =
            if dom.shift_translation.is_empty() { vec![0.0; dom.d_in] } else { dom.shift_translation.clone() };
        Self { centers, rotation: planar_rotation(dom.d_in, dom.rotation_angle, dom.rotation_seed), translation }
    }

    fn source_sample(&self, c: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.centers[c].iter().map(|&m| m + sigma * gaussian(rng)).collect()
    }

    fn target_sample(&self, c: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let center = &self.centers[c];
        self.rotation
            .iter()
            .zip(&self.translation)
            .map(|(row, &t)| row.iter().zip(center).map(|(r, m)| r * m).sum::<f64>() + t + sigma * gaussian(rng))
            .collect()
    }
}

fn cast<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::lit).collect()
}

fn labeled_source<T: Real>(geo: &Geometry, n_classes: usize, per_class: usize, sigma: f64, rng: &mut ChaCha8Rng) -> LabeledSet<T> {
    let mut inputs = Vec::with_capacity(n_classes * per_class);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for _ in 0..per_class {
        for c in 0..n_classes {
            inputs.push(cast(geo.source_sample(c, sigma, rng)));
            labels.push(c);
        }
    }
    LabeledSet { inputs, labels }
}

/// Builds source training/holdout sets and the target stream.
pub fn make_task<T: Real>(shift: &ShiftSpec, dom: &DomainSpec, sizes: &TaskSizes, seed: u64) -> Result<Task<T>> {
    shift.validate()?;
    dom.validate()?;
    if sizes.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let geo = Geometry::new(shift, dom);
    let n_src = shift.n_source_classes();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let source_train = labeled_source(&geo, n_src, sizes.source_per_class, dom.noise_sigma_source, &mut rng);
    rng.set_stream(2);
    let source_holdout = labeled_source(&geo, n_src, sizes.holdout_per_class, dom.noise_sigma_source, &mut rng);

    rng.set_stream(3);
    let classes = shift.target_classes();
    let mut inputs = Vec::with_capacity(sizes.target_samples);
    let mut labels = Vec::with_capacity(sizes.target_samples);
    for _ in 0..sizes.target_samples {
        let c = classes[rng.random_range(0..classes.len())];
        inputs.push(cast(geo.target_sample(c, dom.noise_sigma_target, &mut rng)));
        labels.push(if c < n_src { ClassDecision::Known(c) } else { ClassDecision::Unknown });
    }
    let target = TargetStream { inputs, labels, batch_size: sizes.batch_size, next: 0 };
    Ok(Task { shift: *shift, source_train, source_holdout, target })
}

/// Input-space perturbation standing in for image augmentation.
pub fn augment<T: Real>(x: &[T], sigma: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    x.iter().map(|&v| v + T::lit(sigma * gaussian(rng))).collect()
}
