//! Seeded models shared by unit tests and the verification suites.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::deepnet::{DeepOptEqModel, Extractor};
use crate::tensors::{svd, Matrix, Vector};
use crate::unitlayer::LayerParams;

/// Seeded model with square `m × m` layers whose norms are `norms[l]`.
pub(crate) fn seeded_model(norms: &[f64], m: usize, d: usize, alpha: f64, act: Activation, seed: u64) -> DeepOptEqModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = norms
        .iter()
        .map(|&n| {
            let w = Matrix::random_normal(m, m, &mut rng);
            let s = svd(&w).unwrap().s[0];
            let u = Matrix::random_normal(m, d, &mut rng).scale(0.5);
            let b = Vector::random_normal(m, &mut rng).scale(0.2);
            LayerParams::new(w.scale(n / s), u, b).unwrap()
        })
        .collect();
    let ext = Extractor::linear(Matrix::random_normal(d, d, &mut rng).scale(0.5));
    let readout = Matrix::random_normal(2, m, &mut rng);
    DeepOptEqModel::new(ext, layers, alpha, 1.0, act, readout).unwrap()
}
