//! Seeded fixtures shared by the criterion benches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use opteq_core::activations::Activation;
use opteq_core::config::{ExtractorKind, ModelSpec};
use opteq_core::data::{Dataset, Targets};
use opteq_core::deepnet::DeepOptEqModel;
use opteq_core::{Matrix, Vector};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::random_normal(rows, cols, &mut rng(seed))
}

pub fn vector(dim: usize, seed: u64) -> Vector {
    Vector::random_normal(dim, &mut rng(seed))
}

/// A contraction model with `layers` square `hidden × hidden` layers.
pub fn model(input_dim: usize, hidden: usize, layers: usize, act: Activation) -> DeepOptEqModel {
    ModelSpec {
        input_dim,
        feature_dim: None,
        hidden,
        outputs: 2,
        layers,
        alpha: 0.8,
        mu: 1.0,
        activation: act,
        extractor: ExtractorKind::Identity,
        init_norm: 0.9,
    }
    .init(1)
    .expect("valid bench model")
}

/// Random regression batch matching `model`.
pub fn batch(model: &DeepOptEqModel, n: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let x0 = Matrix::random_normal(model.input_dim(), n, &mut r);
    let y = Matrix::random_normal(model.output_dim(), n, &mut r);
    Dataset::new(x0, Targets::Regression(y)).expect("nonempty batch")
}
