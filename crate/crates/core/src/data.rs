//! Seeded synthetic datasets. Columns of `x0` are samples.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::deepnet::{DeepOptEqModel, Extractor};
use crate::error::{Error, Result};
use crate::tensors::{svd, Matrix, Vector};
use crate::unitlayer::LayerParams;

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `outputs × N`
    Regression(Matrix),
    Classes(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Regression(y) => y.cols(),
            Targets::Classes(c) => c.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Regression(y) => Targets::Regression(Matrix::from_columns(
                &idx.iter().map(|&j| y.column(j)).collect::<Vec<_>>(),
            )),
            Targets::Classes(c) => Targets::Classes(idx.iter().map(|&j| c[j]).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x0: Matrix,
    pub targets: Targets,
}

impl Dataset {
    pub fn new(x0: Matrix, targets: Targets) -> Result<Self> {
        if x0.cols() != targets.len() {
            return Err(Error::dim("targets", x0.cols(), targets.len()));
        }
        if x0.cols() == 0 {
            return Err(Error::invalid("dataset", "must contain at least one sample"));
        }
        Ok(Self { x0, targets })
    }

    pub fn len(&self) -> usize {
        self.x0.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.x0.rows()
    }

    /// The samples at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let cols: Vec<Vector> = idx.iter().map(|&j| self.x0.column(j)).collect();
        Dataset {
            x0: Matrix::from_columns(&cols),
            targets: self.targets.select(idx),
        }
    }

    /// Splits off `holdout` samples chosen by a seeded shuffle; the rest keep
    /// their original order.
    pub fn split_holdout(&self, holdout: usize, seed: u64) -> Result<(Dataset, Option<Dataset>)> {
        let n = self.len();
        if holdout == 0 {
            return Ok((self.clone(), None));
        }
        if holdout >= n {
            return Err(Error::invalid("holdout", format!("{holdout} leaves no training samples out of {n}")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut held = order.split_off(n - holdout);
        order.sort_unstable();
        held.sort_unstable();
        Ok((self.subset(&order), Some(self.subset(&held))))
    }

    /// Minibatches of at most `batch_size` samples (`0` = one full batch),
    /// in a seeded shuffled order.
    pub fn minibatches(&self, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Dataset> {
        let n = self.len();
        if batch_size == 0 || batch_size >= n {
            return vec![self.clone()];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.chunks(batch_size).map(|c| self.subset(c)).collect()
    }
}

fn one() -> f64 {
    1.0
}

fn one_layer() -> usize {
    1
}

fn default_steps() -> usize {
    20
}

fn default_teacher_norm() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "generator", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic clusters around random centers; labels cycle `i mod classes`.
    GaussianBlobs {
        n: usize,
        classes: usize,
        dim: usize,
        #[serde(default = "one")]
        spread: f64,
    },
    /// Two interleaved half circles in the plane, `n/2` per class.
    TwoMoons {
        n: usize,
        #[serde(default)]
        noise: f64,
    },
    /// Targets produced by a hidden teacher model, so zero loss is reachable.
    PlantedRegression {
        n: usize,
        input_dim: usize,
        hidden: usize,
        outputs: usize,
        #[serde(default = "one_layer")]
        layers: usize,
        activation: Activation,
        #[serde(default = "default_teacher_norm")]
        teacher_norm: f64,
        #[serde(default = "one")]
        alpha: f64,
        /// Solver steps (Picard from zero) used to produce teacher outputs.
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default)]
        noise: f64,
    },
}

impl DatasetSpec {
    pub fn samples(&self) -> usize {
        match *self {
            DatasetSpec::GaussianBlobs { n, .. } | DatasetSpec::TwoMoons { n, .. } | DatasetSpec::PlantedRegression { n, .. } => n,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DatasetSpec::GaussianBlobs { .. } => "gaussian_blobs",
            DatasetSpec::TwoMoons { .. } => "two_moons",
            DatasetSpec::PlantedRegression { .. } => "planted_regression",
        }
    }
}

/// Builds the dataset; for `planted_regression` the teacher is discarded.
pub fn make_dataset(spec: &DatasetSpec, seed: u64) -> Result<Dataset> {
    match *spec {
        DatasetSpec::GaussianBlobs { n, classes, dim, spread } => gaussian_blobs(n, classes, dim, spread, seed),
        DatasetSpec::TwoMoons { n, noise } => two_moons(n, noise, seed),
        DatasetSpec::PlantedRegression { .. } => planted_regression(spec, seed).map(|(d, _)| d),
    }
}

pub fn gaussian_blobs(n: usize, classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || n < classes || dim == 0 {
        return Err(Error::invalid("gaussian_blobs", "need classes >= 2, n >= classes, dim >= 1"));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(Error::invalid("spread", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vector> = (0..classes).map(|_| Vector::random_normal(dim, &mut rng).scale(3.0)).collect();
    let noise = Normal::new(0.0, spread).map_err(|e| Error::invalid("spread", e.to_string()))?;
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut x0 = Matrix::zeros(dim, n);
    for (j, &c) in labels.iter().enumerate() {
        let col = Vector::from_fn(dim, |i| centers[c][i] + noise.sample(&mut rng));
        x0.set_column(j, &col);
    }
    Dataset::new(x0, Targets::Classes(labels))
}

pub fn two_moons(n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::invalid("two_moons", "n must be even and at least 2"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise", "must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = n / 2;
    let mut x0 = Matrix::zeros(2, n);
    let mut labels = Vec::with_capacity(n);
    for j in 0..n {
        let class = usize::from(j >= half);
        let t = std::f64::consts::PI * (j % half) as f64 / (half.max(2) - 1) as f64;
        let (x, y) = if class == 0 {
            (t.cos(), t.sin())
        } else {
            (1.0 - t.cos(), 0.5 - t.sin())
        };
        let jitter = |rng: &mut ChaCha8Rng| if noise > 0.0 { noise * rng.sample::<f64, _>(rand_distr::StandardNormal) } else { 0.0 };
        x0[(0, j)] = x + jitter(&mut rng);
        x0[(1, j)] = y + jitter(&mut rng);
        labels.push(class);
    }
    Dataset::new(x0, Targets::Classes(labels))
}

/// Dataset and the teacher that generated it. Targets are
/// `W_{L+1} z_K(x) + noise` where `z_K` is `steps` Picard steps from zero,
/// so with `noise = 0` the teacher's unrolled loss at the same `K` is zero.
pub fn planted_regression(spec: &DatasetSpec, seed: u64) -> Result<(Dataset, DeepOptEqModel)> {
    let DatasetSpec::PlantedRegression {
        n,
        input_dim,
        hidden,
        outputs,
        layers,
        activation,
        teacher_norm,
        alpha,
        steps,
        noise,
    } = *spec
    else {
        return Err(Error::invalid("generator", "expected planted_regression"));
    };
    if n == 0 || input_dim == 0 || hidden == 0 || outputs == 0 || layers == 0 || steps == 0 {
        return Err(Error::invalid("planted_regression", "sizes and steps must be positive"));
    }
    if !(teacher_norm > 0.0 && teacher_norm < 1.0) {
        return Err(Error::invalid("teacher_norm", "must lie in (0, 1)"));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid("noise", "must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (input_dim as f64).sqrt();
    let params = (0..layers)
        .map(|_| {
            let w = Matrix::random_normal(hidden, hidden, &mut rng);
            let w = w.scale(teacher_norm / svd(&w)?.s[0]);
            let u = Matrix::random_normal(hidden, input_dim, &mut rng).scale(scale);
            let b = Vector::random_normal(hidden, &mut rng).scale(0.1);
            LayerParams::new(w, u, b)
        })
        .collect::<Result<Vec<_>>>()?;
    let readout = Matrix::random_normal(outputs, hidden, &mut rng).scale(1.0 / (hidden as f64).sqrt());
    let teacher = DeepOptEqModel::new(
        Extractor::identity(input_dim),
        params,
        alpha,
        activation.lipschitz().max(1.0),
        activation,
        readout,
    )?;
    let x0 = Matrix::random_normal(input_dim, n, &mut rng);
    let x = teacher.extractor().apply_batch(&x0)?;
    let mut z = Matrix::zeros(hidden, n);
    for _ in 0..steps {
        z = teacher.forward_map_batch(&z, &x)?;
    }
    let mut y = teacher.readout().matmul(&z);
    if noise > 0.0 {
        let dist = Normal::new(0.0, noise).map_err(|e| Error::invalid("noise", e.to_string()))?;
        for v in y.as_mut_slice() {
            *v += dist.sample(&mut rng);
        }
    }
    Ok((Dataset::new(x0, Targets::Regression(y))?, teacher))
}
