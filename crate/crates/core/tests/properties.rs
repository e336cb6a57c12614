use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use opteq_core::activations::Activation;
use opteq_core::deepnet::{DeepOptEqModel, Extractor};
use opteq_core::regularizers::Regularizer;
use opteq_core::solvers::{picard_solve, relative_residual, sam_solve, SamSchedule};
use opteq_core::tensors::{block_permutation, spectral_norm, spectral_project, svd};
use opteq_core::unitlayer::{averaged_forward, psi_value, unit_forward, LayerParams, UnitLayerConfig};
use opteq_core::{Matrix, Vector};

fn activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Relu),
        (0.0f64..1.0).prop_map(Activation::LeakyRelu),
        Just(Activation::Tanh),
        Just(Activation::SigmoidShifted),
    ]
}

fn scaled(rows: usize, cols: usize, norm: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let w = Matrix::random_normal(rows, cols, rng);
    let s = svd(&w).unwrap().s[0];
    w.scale(norm / s)
}

fn layer(n: usize, m: usize, d: usize, norm: f64, seed: u64) -> LayerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = scaled(n, m, norm, &mut rng);
    let u = Matrix::random_normal(n, d, &mut rng);
    let b = Vector::random_normal(n, &mut rng);
    LayerParams::new(w, u, b).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_is_idempotent(seed in 0u64..1000, rows in 1usize..6, cols in 1usize..6, bound in 0.1f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Matrix::random_normal(rows, cols, &mut rng);
        let once = spectral_project(&w, bound);
        let twice = spectral_project(&once, bound);
        prop_assert!(once.max_abs_diff(&twice) <= 1e-12);
        prop_assert!(spectral_norm(&once, 1e-12, 10_000).unwrap() <= bound * (1.0 + 1e-8));
    }

    #[test]
    fn block_permutation_is_orthogonal(blocks in 1usize..6, m in 1usize..5) {
        let p = block_permutation(blocks, m);
        let eye = Matrix::identity(blocks * m);
        prop_assert!(p.matmul_nt(&p).sub(&eye).frobenius_norm() < 1e-12);
    }

    #[test]
    fn fenchel_young(slope in 0.01f64..1.0, a in -5.0f64..5.0, x in -5.0f64..5.0, relu in any::<bool>()) {
        let act = if relu { Activation::Relu } else { Activation::LeakyRelu(slope) };
        let conj = act.conjugate_antiderivative(x).unwrap();
        prop_assert!(act.antiderivative(a) + conj >= a * x - 1e-12);
        let y = act.apply(a);
        let gap = act.antiderivative(a) + act.conjugate_antiderivative(y).unwrap() - a * y;
        prop_assert!(gap.abs() <= 1e-9);
    }

    #[test]
    fn derivative_matches_differences(act in activation(), a in -5.0f64..5.0) {
        prop_assume!(!act.has_kink() || a.abs() > 1e-3);
        let h = 1e-6;
        let fd = (act.apply(a + h) - act.apply(a - h)) / (2.0 * h);
        prop_assert!((fd - act.derivative(a)).abs() < 1e-6);
    }

    /// With `L̃_σ‖W‖² ≤ μ` the unit layer never expands distances.
    #[test]
    fn unit_layer_is_nonexpansive(act in activation(), seed in 0u64..1000, n in 1usize..6, m in 1usize..6, norm in 0.1f64..1.0) {
        let p = layer(n, m, 2, norm, seed);
        let cfg = UnitLayerConfig::new(act);
        prop_assume!(cfg.satisfies_prox_condition(&p));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Vector::random_normal(2, &mut rng);
        let z1 = Vector::random_normal(m, &mut rng).scale(3.0);
        let z2 = Vector::random_normal(m, &mut rng).scale(3.0);
        let d_out = unit_forward(&p, &cfg, &z1, &x).unwrap().distance(&unit_forward(&p, &cfg, &z2, &x).unwrap());
        prop_assert!(d_out <= z1.distance(&z2) * (1.0 + 1e-9));
    }

    /// `∇ψ = f` at `μ = 1`.
    #[test]
    fn psi_gradient_is_the_layer(act in activation(), seed in 0u64..1000, m in 1usize..5) {
        let p = layer(m + 1, m, 2, 0.9, seed);
        let cfg = UnitLayerConfig::new(act);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 7);
        let x = Vector::random_normal(2, &mut rng);
        let z = Vector::random_normal(m, &mut rng);
        if act.has_kink() {
            let pre = p.pre_activation(&z, &x).unwrap();
            prop_assume!(pre.iter().all(|a| a.abs() > 1e-3));
        }
        let f = unit_forward(&p, &cfg, &z, &x).unwrap();
        let h = 1e-6;
        for i in 0..m {
            let e = Vector::basis(m, i).scale(h);
            let fd = (psi_value(&p, &cfg, &z.add(&e), &x).unwrap() - psi_value(&p, &cfg, &z.sub(&e), &x).unwrap()) / (2.0 * h);
            prop_assert!((fd - f[i]).abs() < 1e-6, "coordinate {}: {} vs {}", i, fd, f[i]);
        }
    }

    /// Averaging with the identity keeps the fixed points.
    #[test]
    fn averaging_preserves_fixed_points(seed in 0u64..1000, alpha in prop_oneof![Just(0.1), Just(0.5), Just(1.0)]) {
        let p = layer(4, 4, 2, 0.8, seed);
        let cfg = UnitLayerConfig::new(Activation::Tanh);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 3);
        let x = Vector::random_normal(2, &mut rng);
        let z = picard_solve(|z: &Vector| unit_forward(&p, &cfg, z, &x), &Vector::zeros(4), 1e-13, 100_000, false).unwrap().z_star;
        prop_assume!(z.distance(&unit_forward(&p, &cfg, &z, &x).unwrap()) < 1e-10);
        let avg = averaged_forward(&p, &cfg.with_alpha(alpha), &z, &x).unwrap();
        prop_assert!(z.distance(&avg) < 1e-9);
    }

    /// On a linear `ζ`-contraction every Picard step shrinks the residual by
    /// `ζ`. With `‖c‖ ≤ 1 − ζ` the iterates stay in the unit ball, where the
    /// relative residual is the absolute one.
    #[test]
    fn picard_residuals_contract(seed in 0u64..1000, zeta in 0.1f64..0.95) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = scaled(4, 4, zeta, &mut rng);
        let c = Vector::random_normal(4, &mut rng);
        let c = c.scale((1.0 - zeta) / c.norm());
        let t = |z: &Vector| Ok(a.matvec(z).add(&c));
        let r = picard_solve(t, &Vector::zeros(4), 1e-300, 40, true).unwrap();
        let tr = r.trajectory.unwrap();
        for k in 1..tr.len() {
            prop_assert!(tr[k] <= zeta * tr[k - 1] + 1e-12,
                "step {}: {} > {} * {}", k, tr[k], zeta, tr[k - 1]);
        }
    }

    #[test]
    fn sam_with_zero_eta_is_picard(seed in 0u64..1000, steps in 1usize..60) {
        let p = layer(3, 3, 2, 0.9, seed);
        let cfg = UnitLayerConfig::new(Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 5);
        let x = Vector::random_normal(2, &mut rng);
        let z0 = Vector::random_normal(3, &mut rng);
        let t = |z: &Vector| unit_forward(&p, &cfg, z, &x);
        let sam = sam_solve(t, &Regularizer::SquaredL2 { lambda: 1.0 }, &SamSchedule::disabled(), &z0, steps, true).unwrap();
        let picard = picard_solve(t, &z0, 1e-300, steps, true).unwrap();
        // Picard stops early on an exact fixed point; SAM then keeps repeating it.
        prop_assert_eq!(sam.z_star, picard.z_star);
        let (s, p) = (sam.trajectory.unwrap(), picard.trajectory.unwrap());
        prop_assert_eq!(&s[..p.len()], &p[..]);
        prop_assert!(s[p.len()..].iter().all(|&r| r == 0.0));
    }

    /// The prox beats every point of a 1-D grid on its own objective.
    #[test]
    fn prox_is_optimal_on_a_grid(z in -3.0f64..3.0, step in 0.05f64..2.0, lambda in 0.1f64..2.0, l1 in any::<bool>()) {
        let reg = if l1 { Regularizer::L1 { lambda } } else { Regularizer::SquaredL2 { lambda } };
        let zv = Vector::from_vec(vec![z]);
        let u = reg.prox_vec(&zv, step).unwrap()[0];
        let obj = |v: f64| 0.5 * (v - z).powi(2) + step * reg.value_vec(&Vector::from_vec(vec![v])).unwrap();
        let best = (0..=6000).map(|i| -3.0 + i as f64 * 1e-3).map(obj).fold(f64::INFINITY, f64::min);
        prop_assert!(obj(u) <= best + 1e-12);
    }

    /// A deep model with one layer at norm 0.9 and the rest at 1 contracts.
    #[test]
    fn deep_map_contracts(seed in 0u64..500, depth in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers: Vec<LayerParams> = (0..depth)
            .map(|l| {
                let norm = if l == 0 { 0.9 } else { 1.0 };
                LayerParams::new(scaled(4, 4, norm, &mut rng), Matrix::random_normal(4, 2, &mut rng), Vector::random_normal(4, &mut rng)).unwrap()
            })
            .collect();
        let model = DeepOptEqModel::new(Extractor::identity(2), layers, 1.0, 1.0, Activation::Tanh, Matrix::identity(4)).unwrap();
        let x = Vector::random_normal(2, &mut rng);
        let z1 = Vector::random_normal(4, &mut rng);
        let z2 = Vector::random_normal(4, &mut rng);
        let ratio = model.forward_map(&z1, &x).unwrap().distance(&model.forward_map(&z2, &x).unwrap()) / z1.distance(&z2);
        prop_assert!(ratio < 1.0);
    }
}

#[test]
fn residual_is_scale_aware() {
    let z = Vector::from_vec(vec![100.0, 0.0]);
    let tz = Vector::from_vec(vec![101.0, 0.0]);
    assert!((relative_residual(&z, &tz) - 0.01).abs() < 1e-15);
    let small = Vector::from_vec(vec![1e-3, 0.0]);
    assert!((relative_residual(&small, &Vector::zeros(2)) - 1e-3).abs() < 1e-15);
}
