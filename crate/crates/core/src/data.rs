//! Seeded synthetic multimodal datasets and their on-disk form.
//!
//! Raw inputs are i.i.d. standard normal `l_m x d_m` sequences. The label
//! comes from a hidden score built from unit-norm vectors `u_m` (features)
//! and `v_m` (tokens):
//!
//! - multiplicative-interaction: `s = prod_m v_m^T x_m u_m`
//! - first-token-only: `s = prod_m x_m[0, :] . u_m`
//! - separable-unimodal: `s = v_0^T x_0 u_0`

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dtf::Container;
use crate::error::{invalid, Error, Result};
use crate::fusion::ModalityBatch;
use crate::tensor::DenseTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    MultiplicativeInteraction,
    FirstTokenOnly,
    SeparableUnimodal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelType {
    /// Median split, classes `{0, 1}`.
    Binary,
    /// Quantile bins, classes `0..k`.
    KClass(usize),
    /// The noisy score itself.
    Scalar,
}

impl LabelType {
    pub fn n_classes(self) -> Option<usize> {
        match self {
            Self::Binary => Some(2),
            Self::KClass(k) => Some(k),
            Self::Scalar => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub lengths: Vec<usize>,
    pub dims: Vec<usize>,
    pub n_samples: usize,
    pub task: Task,
    pub label_type: LabelType,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn modalities(&self) -> usize {
        self.lengths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfiguration(msg));
        if self.lengths.is_empty() || self.lengths.len() != self.dims.len() {
            return bad(format!(
                "need one length and one dim per modality, got {} and {}",
                self.lengths.len(),
                self.dims.len()
            ));
        }
        if self.lengths.iter().chain(&self.dims).any(|&x| x == 0) {
            return bad("lengths and dims must be positive".into());
        }
        if self.n_samples < 2 {
            return bad(format!("n_samples must be at least 2, got {}", self.n_samples));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std must be finite and >= 0, got {}", self.noise_std));
        }
        if let LabelType::KClass(k) = self.label_type {
            if k < 2 || k > self.n_samples {
                return bad(format!("k-class needs 2 <= k <= n_samples, got k = {k}"));
            }
        }
        Ok(())
    }
}

/// Raw samples and labels. Class labels are stored as integral `f64`s.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub samples: Vec<ModalityBatch>,
    pub labels: Vec<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.spec.label_type.n_classes()
    }

    /// The samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            spec: SynthSpec {
                n_samples: idx.len(),
                ..self.spec.clone()
            },
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn unit_vector(n: usize, rng: &mut impl Rng) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = v.dot(&v).sqrt();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Hidden score directions, drawn before any sample.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStructure {
    pub u: Vec<Array1<f64>>,
    pub v: Vec<Array1<f64>>,
}

impl HiddenStructure {
    pub fn draw(spec: &SynthSpec, rng: &mut impl Rng) -> Self {
        let mut u = Vec::new();
        let mut v = Vec::new();
        for (&l, &d) in spec.lengths.iter().zip(&spec.dims) {
            u.push(unit_vector(d, rng));
            v.push(unit_vector(l, rng));
        }
        Self { u, v }
    }

    /// Noise-free score of one raw sample.
    pub fn score(&self, task: Task, x: &ModalityBatch) -> f64 {
        match task {
            Task::MultiplicativeInteraction => (0..x.modalities())
                .map(|m| self.v[m].dot(&x.sequence(m).dot(&self.u[m])))
                .product(),
            Task::FirstTokenOnly => (0..x.modalities())
                .map(|m| x.sequence(m).row(0).dot(&self.u[m]))
                .product(),
            Task::SeparableUnimodal => self.v[0].dot(&x.sequence(0).dot(&self.u[0])),
        }
    }
}

/// Rank-based class assignment: the `i`-th smallest of `n` scores gets class
/// `floor(i * k / n)`. Ties are broken by sample index.
fn quantile_labels(scores: &[f64], k: usize) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut labels = vec![0.0; n];
    for (rank, &i) in order.iter().enumerate() {
        labels[i] = (rank * k / n) as f64;
    }
    labels
}

pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    generate_with_structure(spec).map(|(d, _)| d)
}

/// As [`generate`], also returning the hidden directions.
pub fn generate_with_structure(spec: &SynthSpec) -> Result<(Dataset, HiddenStructure)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let hidden = HiddenStructure::draw(spec, &mut rng);
    let mut samples = Vec::with_capacity(spec.n_samples);
    let mut scores = Vec::with_capacity(spec.n_samples);
    for _ in 0..spec.n_samples {
        let seqs = spec
            .lengths
            .iter()
            .zip(&spec.dims)
            .map(|(&l, &d)| Array2::from_shape_fn((l, d), |_| rng.sample(StandardNormal)))
            .collect();
        let x = ModalityBatch::new(seqs)?;
        let noise: f64 = if spec.noise_std > 0.0 {
            spec.noise_std * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        };
        scores.push(hidden.score(spec.task, &x) + noise);
        samples.push(x);
    }
    let labels = match spec.label_type {
        LabelType::Binary => quantile_labels(&scores, 2),
        LabelType::KClass(k) => quantile_labels(&scores, k),
        LabelType::Scalar => scores,
    };
    Ok((
        Dataset {
            spec: spec.clone(),
            samples,
            labels,
        },
        hidden,
    ))
}

pub const DATASET_KIND: &str = "dataset";

pub fn to_container(ds: &Dataset) -> Result<Container> {
    if ds.is_empty() {
        return Err(invalid("refusing to save an empty dataset"));
    }
    if ds.labels.len() != ds.samples.len() {
        return Err(invalid(format!(
            "{} samples but {} labels",
            ds.samples.len(),
            ds.labels.len()
        )));
    }
    let mut c = Container::new(DATASET_KIND, serde_json::to_value(&ds.spec)?);
    for (i, x) in ds.samples.iter().enumerate() {
        for (m, seq) in x.sequences().iter().enumerate() {
            c.push(format!("x.{i}.m{m}"), DenseTensor::from_matrix(seq));
        }
    }
    c.push("y", DenseTensor::from_vector(&ds.labels)?);
    Ok(c)
}

pub fn from_container(c: &Container) -> Result<Dataset> {
    if c.kind != DATASET_KIND {
        return Err(invalid(format!("container kind {:?} is not a dataset", c.kind)));
    }
    let spec: SynthSpec = serde_json::from_value(c.config.clone())?;
    let labels = c.get("y")?.data().to_vec();
    let mut samples = Vec::with_capacity(labels.len());
    for i in 0..labels.len() {
        let seqs = (0..spec.modalities())
            .map(|m| c.get(&format!("x.{i}.m{m}"))?.to_matrix())
            .collect::<Result<Vec<_>>>()?;
        samples.push(ModalityBatch::new(seqs)?);
    }
    if samples.is_empty() {
        return Err(invalid("dataset has no samples"));
    }
    Ok(Dataset {
        spec,
        samples,
        labels,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<std::path::Path>) -> Result<()> {
    to_container(ds)?.write(path)
}

pub fn load_dataset(path: impl AsRef<std::path::Path>) -> Result<Dataset> {
    from_container(&Container::read(path)?)
}
