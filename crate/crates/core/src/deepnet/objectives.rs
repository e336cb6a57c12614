//! Convex objectives whose minimizers are deep OptEq equilibria.

use crate::error::{Error, Result};
use crate::tensors::Vector;
use crate::unitlayer::{moreau_envelope, ConvexPotential, InnerOptions, PhiClosedForm};

use super::DeepOptEqModel;

fn potentials(model: &DeepOptEqModel, x: &Vector) -> Result<Vec<PhiClosedForm>> {
    if model.structural().is_some() {
        return Err(Error::Unsupported("objective of a model with an appended regularizer".into()));
    }
    let cfg = model.unit_config();
    model
        .layers()
        .iter()
        .map(|l| PhiClosedForm::from_layer(l, &cfg, x))
        .collect()
}

/// `α M^{1−α}_{φ₁}(z₁) + α M^{1−α}_{φ₂}(z₀) + ½‖z₁ − z₀‖²` for a two-layer
/// model; the blocks `(z₁, z₀)` of its equilibrium minimize it.
pub fn two_block_objective(
    model: &DeepOptEqModel,
    z1: &Vector,
    z0: &Vector,
    x: &Vector,
    opts: &InnerOptions,
) -> Result<f64> {
    if model.depth() != 2 {
        return Err(Error::Unsupported(format!(
            "two-block objective needs exactly 2 layers, model has {}",
            model.depth()
        )));
    }
    let alpha = model.alpha();
    if alpha >= 1.0 {
        return Err(Error::invalid("alpha", "two-block objective needs alpha < 1"));
    }
    let phis = potentials(model, x)?;
    let mu = 1.0 - alpha;
    let m1 = moreau_envelope(&phis[0], mu, z1, opts)?.value;
    let m2 = moreau_envelope(&phis[1], mu, z0, opts)?.value;
    Ok(alpha * m1 + alpha * m2 + 0.5 * z1.distance(z0).powi(2))
}

/// `Σ_l φ_l(x_l) + ½‖x_l − y‖²`; minimizing over `(x_1..x_L, y)` gives the
/// wide-limit equilibrium in `y`.
pub fn wide_joint_objective(model: &DeepOptEqModel, xs: &[Vector], y: &Vector, x: &Vector) -> Result<f64> {
    if xs.len() != model.depth() {
        return Err(Error::dim("xs", model.depth(), xs.len()));
    }
    let phis = potentials(model, x)?;
    let mut total = 0.0;
    for (phi, xl) in phis.iter().zip(xs) {
        if xl.dim() != y.dim() {
            return Err(Error::dim("x_l", y.dim(), xl.dim()));
        }
        total += phi.value(xl) + 0.5 * xl.distance(y).powi(2);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::deepnet::tests::seeded_model;
    use crate::deepnet::{block_lift, Extractor};
    use crate::tensors::Matrix;
    use crate::unitlayer::LayerParams;

    #[test]
    fn coupling_vanishes_on_equal_blocks() {
        let model = seeded_model(&[0.9, 0.8], 3, 2, 0.5, Activation::Relu, 3);
        let x = Vector::from_vec(vec![0.1, 0.2]);
        let z = Vector::from_vec(vec![0.5, 0.1, 0.3]);
        let opts = InnerOptions::default();
        let total = two_block_objective(&model, &z, &z, &x, &opts).unwrap();
        let phis = potentials(&model, &x).unwrap();
        let m1 = moreau_envelope(&phis[0], 0.5, &z, &opts).unwrap().value;
        let m2 = moreau_envelope(&phis[1], 0.5, &z, &opts).unwrap().value;
        assert!((total - 0.5 * (m1 + m2)).abs() < 1e-14);
    }

    #[test]
    fn equilibrium_is_stationary_for_two_block_objective() {
        let model = seeded_model(&[0.9, 0.8], 3, 2, 0.5, Activation::Relu, 4);
        let x = Vector::from_vec(vec![0.6, -0.3]);
        let z = model.equilibrium(&x, 1e-13, 100_000).unwrap().z_star;
        let lift = block_lift(&model, &z, &x).unwrap();
        let (z1, z0) = (&lift.blocks[0], &lift.blocks[1]);
        let opts = InnerOptions::default();
        let f = |a: &Vector, b: &Vector| two_block_objective(&model, a, b, &x, &opts).unwrap();
        let base = f(z1, z0);
        let h = 1e-5;
        for j in 0..3 {
            let e = Vector::basis(3, j).scale(h);
            let g1 = (f(&z1.add(&e), z0) - f(&z1.sub(&e), z0)) / (2.0 * h);
            let g0 = (f(z1, &z0.add(&e)) - f(z1, &z0.sub(&e))) / (2.0 * h);
            assert!(g1.abs() < 1e-6 && g0.abs() < 1e-6, "{g1} {g0}");
        }
        assert!(base.is_finite());
    }

    #[test]
    fn wide_objective_trivial_cases() {
        // W = I, c = 0: φ is the orthant indicator, zero on y ≥ 0
        let layers = (0..2)
            .map(|_| LayerParams::new(Matrix::identity(2), Matrix::zeros(2, 1), Vector::zeros(2)).unwrap())
            .collect();
        let model = DeepOptEqModel::new(Extractor::identity(1), layers, 1.0, 1.0, Activation::Relu, Matrix::identity(2)).unwrap();
        let y = Vector::from_vec(vec![1.0, 2.0]);
        let v = wide_joint_objective(&model, &[y.clone(), y.clone()], &y, &Vector::zeros(1)).unwrap();
        assert!(v.abs() < 1e-14);

        let one = seeded_model(&[0.7], 3, 2, 1.0, Activation::Relu, 5);
        let x = Vector::from_vec(vec![0.2, 0.4]);
        let y = Vector::from_vec(vec![0.3, -0.2, 0.8]);
        let phi = PhiClosedForm::from_layer(&one.layers()[0], &one.unit_config(), &x).unwrap();
        let u = phi.prox_point(&y, 1.0, &InnerOptions::default()).unwrap();
        let v = wide_joint_objective(&one, &[u.clone()], &y, &x).unwrap();
        assert!((v - (phi.value(&u) + 0.5 * u.distance(&y).powi(2))).abs() < 1e-15);
        assert!(two_block_objective(&one, &y, &y, &x, &InnerOptions::default()).is_err());
    }
}
