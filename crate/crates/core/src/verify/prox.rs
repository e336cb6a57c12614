//! Unit layers are proximal operators: agreement with an independently
//! solved prox problem, and the symmetric-Jacobian / nonexpansive
//! characterization with a negative control.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::error::Result;
use crate::tensors::{condition_number, svd, Matrix, Vector};
use crate::unitlayer::{phi_closed_form, prox_characterization_check, unit_forward, LayerParams, UnitLayerConfig};

use super::oracle::{relu_phi, relu_prox};
use super::Recorder;

fn layer(n: usize, m: usize, d: usize, norm: f64, rng: &mut ChaCha8Rng) -> Result<LayerParams> {
    loop {
        let w = Matrix::random_normal(n, m, rng);
        let w = w.scale(norm / svd(&w)?.s[0]);
        if n == m && condition_number(&w)? > 1e4 {
            continue;
        }
        let u = Matrix::random_normal(n, d, rng).scale(0.7);
        let b = Vector::random_normal(n, rng).scale(0.3);
        return LayerParams::new(w, u, b);
    }
}

fn identity_instance(seed: u64, m: usize, norm: f64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = layer(m, m, 3, norm, &mut rng)?;
    let cfg = UnitLayerConfig::new(Activation::Relu);
    let x = Vector::random_normal(3, &mut rng);
    let z = Vector::random_normal(m, &mut rng).scale(1.5);
    let c = p.offset(&x)?;
    let forward = unit_forward(&p, &cfg, &z, &x)?;
    let oracle = relu_prox(p.w(), &c, &z)?;
    // φ from its definition against the library's closed form, at the prox point
    let closed = phi_closed_form(&p, &cfg, &forward, &x)?;
    let direct = relu_phi(p.w(), &c, &forward)?;
    Ok((forward.distance(&oracle), (closed - direct).abs() / direct.abs().max(1.0)))
}

pub(crate) fn run(r: &mut Recorder) {
    let sizes = [2, 2, 2, 4, 4, 4, 4, 8, 8, 8];
    for (i, &m) in sizes.iter().enumerate() {
        let seed = 100 + i as u64;
        let norm = if i % 3 == 0 { 1.0 } else { 0.5 + 0.05 * i as f64 };
        let outcome = identity_instance(seed, m, norm);
        let name = format!("seed={seed} m={m} norm={norm:.2}");
        r.at_most("prox-identity", name.clone(), outcome.as_ref().map(|o| o.0), 1e-5);
        r.at_most("phi-closed-form", name, outcome.map(|o| o.1), 1e-8);
    }

    let cases: [(Activation, usize, usize, f64); 6] = [
        (Activation::Relu, 4, 4, 1.0),
        (Activation::Relu, 6, 3, 0.8),
        (Activation::LeakyRelu(0.1), 3, 5, 1.0),
        (Activation::Tanh, 4, 4, 0.9),
        (Activation::SigmoidShifted, 5, 5, 1.0),
        (Activation::Tanh, 2, 6, 0.6),
    ];
    for (i, &(act, n, m, norm)) in cases.iter().enumerate() {
        let seed = 200 + i as u64;
        let report = (|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = layer(n, m, 2, norm, &mut rng)?;
            let cfg = UnitLayerConfig::new(act).with_mu(act.lipschitz().max(1.0));
            let x = Vector::random_normal(2, &mut rng);
            prox_characterization_check(&p, &cfg, &x, 20, seed)
        })();
        let name = format!("{act} {n}x{m} norm={norm}");
        r.at_most(
            "jacobian-symmetry",
            name.clone(),
            report.as_ref().map(|c| c.max_jacobian_asymmetry),
            1e-6,
        );
        r.at_most(
            "nonexpansive",
            name,
            report.map(|c| c.max_expansion - 1.0),
            1e-9,
        );
    }

    // ‖W‖₂ = 1.5 with μ = 1 breaks L̃_σ‖W‖² ≤ μ and must expand
    let control = (|| {
        let mut rng = ChaCha8Rng::seed_from_u64(300);
        let p = layer(3, 3, 2, 1.5, &mut rng)?;
        let cfg = UnitLayerConfig::new(Activation::Relu);
        let x = Vector::random_normal(2, &mut rng);
        prox_characterization_check(&p, &cfg, &x, 20, 300)
    })();
    r.above("negative-control", "norm=1.5 mu=1 expansion", control.map(|c| c.max_expansion), 1.0);
}
