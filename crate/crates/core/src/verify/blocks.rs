//! Deep equilibria as fixed points of the lifted block system, as
//! minimizers of the two-block convex objective, and their small-`α`
//! limit against the wide one-layer system.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::deepnet::{block_lift, block_system_residual, two_block_objective, wide_system_solve, DeepOptEqModel};
use crate::error::Result;
use crate::fixtures::seeded_model;
use crate::tensors::{Matrix, Vector};
use crate::unitlayer::InnerOptions;

use super::oracle::{two_block_minimum, wide_minimizer};
use super::Recorder;

fn input(model: &DeepOptEqModel, seed: u64) -> Result<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model.features(&Vector::random_normal(model.input_dim(), &mut rng))
}

pub(crate) fn run_block_lift(r: &mut Recorder) {
    let norms = [0.9, 0.8, 0.95, 0.7];
    let acts = [Activation::Relu, Activation::Tanh, Activation::LeakyRelu(0.2)];
    for depth in 2..=4 {
        for (k, &act) in acts.iter().enumerate() {
            let seed = 10 * depth as u64 + k as u64;
            let model = seeded_model(&norms[..depth], 4, 3, 0.5, act, seed);
            let outcome = (|| {
                let x = input(&model, seed + 1000)?;
                let report = model.equilibrium(&x, 1e-12, 100_000)?;
                let lift = block_lift(&model, &report.z_star, &x)?;
                let res = block_system_residual(&model, &lift, &x)?;
                Ok::<_, crate::error::Error>(res / (10.0 * report.residual).max(1e-8))
            })();
            r.at_most(
                "block-lift",
                format!("L={depth} {act} residual / max(10 x picard, 1e-8)"),
                outcome,
                1.0,
            );
        }
    }

    let opts = InnerOptions { tol: 1e-12, max_iter: 200_000 };
    let alphas = [0.5, 0.3, 0.7, 0.5, 0.4];
    for (i, &alpha) in alphas.iter().enumerate() {
        let seed = 500 + i as u64;
        let model = seeded_model(&[0.9, 0.8], 3, 2, alpha, Activation::Relu, seed);
        let outcome = (|| {
            let x = input(&model, seed + 1000)?;
            let z = model.equilibrium(&x, 1e-14, 1_000_000)?.z_star;
            let lift = block_lift(&model, &z, &x)?;
            let (z1, z0) = (&lift.blocks[0], &lift.blocks[1]);
            let value = two_block_objective(&model, z1, z0, &x, &opts)?;
            let (l1, l2) = (&model.layers()[0], &model.layers()[1]);
            let (min, o1, o0) = two_block_minimum(l1.w(), &l1.offset(&x)?, l2.w(), &l2.offset(&x)?, alpha)?;
            Ok::<_, crate::error::Error>(((value - min).abs(), o1.distance(z1).max(o0.distance(z0))))
        })();
        let name = format!("seed={seed} alpha={alpha}");
        r.at_most("two-block-value", name.clone(), outcome.as_ref().map(|o| o.0), 1e-4);
        r.at_most("two-block-argmin", name, outcome.map(|o| o.1), 1e-3);
    }
}

pub(crate) fn run_wide_limit(r: &mut Recorder) {
    let alphas = [0.3, 0.1, 0.03, 0.01, 0.003];
    for seed in [41u64, 42] {
        let base = seeded_model(&[0.6, 0.5, 0.7], 4, 3, 1.0, Activation::Relu, seed);
        let outcome = (|| {
            let x = input(&base, seed + 1000)?;
            let mut spreads = Vec::with_capacity(alphas.len());
            let mut limit = Vector::zeros(base.hidden_dim());
            for &alpha in &alphas {
                let model = base.with_alpha(alpha)?;
                let z = model.equilibrium(&x, 1e-13, 5_000_000)?.z_star;
                let lift = block_lift(&model, &z, &x)?;
                spreads.push(lift.max_spread());
                let n = lift.len() as f64;
                limit = lift.blocks.iter().fold(Vector::zeros(z.dim()), |acc, b| acc.add(b)).scale(1.0 / n);
            }
            let wide = wide_system_solve(&base, &x, 1e-13, 1_000_000)?;
            let ws: Vec<Matrix> = base.layers().iter().map(|l| l.w().clone()).collect();
            let cs = base.layers().iter().map(|l| l.offset(&x)).collect::<Result<Vec<_>>>()?;
            let oracle = wide_minimizer(&ws, &cs)?;
            Ok::<_, crate::error::Error>((spreads, limit.distance(&wide), limit.distance(&oracle), wide.distance(&oracle)))
        })();
        match outcome {
            Ok((spreads, to_wide, to_oracle, wide_vs_oracle)) => {
                let violations = spreads.windows(2).filter(|w| w[1] >= w[0]).count();
                r.at_most::<String>("wide-spread", format!("seed={seed} spread at alpha=0.003"), Ok(spreads[4]), 1e-2);
                r.at_most::<String>(
                    "wide-monotone",
                    format!("seed={seed} non-decreasing steps in [{}]", super::series(&spreads)),
                    Ok(violations as f64),
                    0.0,
                );
                r.at_most::<String>("wide-solve", format!("seed={seed} limit vs wide system"), Ok(to_wide), 1e-2);
                r.at_most::<String>("wide-oracle", format!("seed={seed} limit vs joint minimizer"), Ok(to_oracle), 1e-2);
                r.at_most::<String>("wide-oracle", format!("seed={seed} wide system vs joint minimizer"), Ok(wide_vs_oracle), 1e-6);
            }
            Err(e) => r.at_most("wide-spread", format!("seed={seed}"), Err(e), 1e-2),
        }
    }
}
