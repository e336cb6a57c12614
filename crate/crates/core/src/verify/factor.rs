//! Feedforward networks rewritten through common-width factors, and deep
//! equilibrium models that contain a feedforward network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::deepnet::{dnn_forward, reformulated_forward, universal_factorize, DeepOptEqModel, Extractor};
use crate::error::Result;
use crate::tensors::{Matrix, Vector};
use crate::unitlayer::LayerParams;

use super::Recorder;

fn chain(r: &mut Recorder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = [3usize, 5, 4, 2];
    let ws: Vec<Matrix> = (0..3).map(|k| Matrix::random_normal(dims[k + 1], dims[k], &mut rng)).collect();
    let us: Vec<Matrix> = (0..2).map(|k| Matrix::random_normal(dims[k + 1], 2, &mut rng)).collect();
    let bs: Vec<Vector> = (0..2).map(|k| Vector::random_normal(dims[k + 1], &mut rng)).collect();
    let bars = match universal_factorize(&ws, 10, seed) {
        Ok(b) => b,
        Err(e) => return r.at_most("factor-residual", format!("seed={seed}"), Err(e), 1e-8),
    };
    for (k, w) in ws.iter().enumerate() {
        let res = w.sub(&bars[k + 1].matmul_nt(&bars[k])).frobenius_norm() / w.frobenius_norm();
        r.at_most::<String>("factor-residual", format!("seed={seed} W_{}", k + 1), Ok(res), 1e-8);
    }
    for act in [Activation::Relu, Activation::Tanh] {
        let worst = (0..10)
            .map(|_| {
                let z0 = Vector::random_normal(dims[0], &mut rng);
                let x = Vector::random_normal(2, &mut rng);
                let a = dnn_forward(&ws, &us, &bs, act, &z0, &x)?;
                let b = reformulated_forward(&bars, &us, &bs, act, &z0, &x)?;
                Ok(a.distance(&b))
            })
            .collect::<Result<Vec<f64>>>()
            .map(|d| d.into_iter().fold(0.0, f64::max));
        r.at_most("forward-agreement", format!("seed={seed} {act} max over 10 inputs"), worst, 1e-7);
    }
}

/// `α = 1`, a zero first layer and inputs entering only at the second layer
/// make the deep map constant in `z`; one step then computes
/// `A_3 σ(A_2 σ(A_1 x))` with `A_1 = U_2` and `A_2, A_3` factored.
fn contains_feedforward(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let act = Activation::Relu;
    let (d, h, out, m) = (3, 4, 2, 8);
    let a1 = Matrix::random_normal(h, d, &mut rng);
    let a2 = Matrix::random_normal(h, h, &mut rng);
    let a3 = Matrix::random_normal(out, h, &mut rng);
    let bars = universal_factorize(&[a2.clone(), a3.clone()], m, seed)?;
    let layers = vec![
        LayerParams::new(Matrix::zeros(1, m), Matrix::zeros(1, d), Vector::zeros(1))?,
        LayerParams::new(bars[0].clone(), a1.clone(), Vector::zeros(h))?,
        LayerParams::new(bars[1].clone(), Matrix::zeros(h, d), Vector::zeros(h))?,
    ];
    let model = DeepOptEqModel::new(Extractor::identity(d), layers, 1.0, 1.0, act, bars[2].clone())?;
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x = Vector::random_normal(d, &mut rng);
        let z = model.equilibrium(&x, 1e-12, 10)?.z_star;
        let expected = a3.matvec(&a2.matvec(&a1.matvec(&x).map(|a| act.apply(a))).map(|a| act.apply(a)));
        worst = worst.max(model.predict(&z).distance(&expected));
    }
    Ok(worst)
}

pub(crate) fn run(r: &mut Recorder) {
    for seed in [71, 72, 73] {
        chain(r, seed);
    }
    r.at_most("deep-contains-feedforward", "max output distance over 10 inputs", contains_feedforward(74), 1e-9);
}
