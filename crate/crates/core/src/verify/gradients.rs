//! Unrolled gradients against central differences, and implicit gradients
//! against long unrolls.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::data::{Dataset, Targets};
use crate::deepnet::DeepOptEqModel;
use crate::error::Result;
use crate::fixtures::seeded_model;
use crate::tensors::{svd, Matrix};
use crate::training::{
    equilibrium_loss, finite_diff_grad, ift_loss_and_grad, unrolled_loss, unrolled_loss_and_grad, GradientBundle,
    IftSpec, LossSpec, UnrolledSpec,
};

use super::Recorder;

const FD_STEP: f64 = 1e-5;
/// Coordinates smaller than this are compared in absolute terms only.
const MAGNITUDE_FLOOR: f64 = 1e-8;

struct Case {
    depth: usize,
    alpha: f64,
    act: Activation,
    seed: u64,
}

const CASES: [Case; 5] = [
    Case { depth: 1, alpha: 0.4, act: Activation::Relu, seed: 61 },
    Case { depth: 1, alpha: 1.0, act: Activation::Tanh, seed: 62 },
    Case { depth: 3, alpha: 0.4, act: Activation::Tanh, seed: 63 },
    Case { depth: 3, alpha: 1.0, act: Activation::Relu, seed: 64 },
    Case { depth: 3, alpha: 1.0, act: Activation::Tanh, seed: 65 },
];

fn batch(model: &DeepOptEqModel, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Matrix::random_normal(model.input_dim(), n, &mut rng);
    let y = Matrix::random_normal(model.output_dim(), n, &mut rng);
    Dataset::new(x0, Targets::Regression(y))
}

fn model_for(case: &Case) -> DeepOptEqModel {
    let norms = [0.9, 0.8, 0.85];
    seeded_model(&norms[..case.depth], 4, 3, case.alpha, case.act, case.seed)
}

/// Scaled orthogonal weights close to norm 1, so every direction contracts
/// slowly and the unroll gap keeps shrinking up to `K = 200`. Small offsets
/// keep `tanh` away from saturation.
fn slow_model(case: &Case) -> Result<DeepOptEqModel> {
    let scale = match (case.depth, case.alpha == 1.0) {
        (1, _) => 0.96,
        (_, true) => 0.985,
        (_, false) => 0.95,
    };
    let base = model_for(case);
    let layers = base
        .layers()
        .iter()
        .map(|l| {
            let mut l = l.clone();
            l.set_w(svd(l.w())?.u.scale(scale))?;
            l.set_u(l.u().scale(0.2))?;
            l.set_b(l.b().scale(0.2))?;
            Ok(l)
        })
        .collect::<Result<Vec<_>>>()?;
    DeepOptEqModel::new(
        base.extractor().clone(),
        layers,
        base.alpha(),
        base.mu(),
        base.activation(),
        base.readout().clone(),
    )
}

/// Largest `|a − b| / |b|` over coordinates where `|b| > MAGNITUDE_FLOOR`,
/// and largest `|a − b|` elsewhere.
fn coordinate_error(a: &GradientBundle, b: &GradientBundle) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(x, y)| {
            if y.abs() > MAGNITUDE_FLOOR {
                (x - y).abs() / y.abs()
            } else {
                (x - y).abs()
            }
        })
        .fold(0.0, f64::max)
}

pub(crate) fn run(r: &mut Recorder) {
    let loss = LossSpec::squared().with_weight_decay(3e-4);
    let unroll = UnrolledSpec::picard(5);
    for case in &CASES {
        let model = model_for(case);
        let name = format!("L={} alpha={} {} K=5", case.depth, case.alpha, case.act);
        let outcome = (|| {
            let data = batch(&model, 4, case.seed + 100)?;
            let (_, g) = unrolled_loss_and_grad(&model, &data, &unroll, &loss)?;
            let fd = finite_diff_grad(&model, |m| unrolled_loss(m, &data, &unroll, &loss), FD_STEP)?;
            Ok::<_, crate::error::Error>(coordinate_error(&g, &fd))
        })();
        r.at_most("unrolled-vs-fd", name, outcome, 1e-4);
    }

    let ift = IftSpec::new(1e-13, 1e-13);
    for case in CASES.iter().filter(|c| c.act == Activation::Tanh) {
        let label = format!("L={} alpha={} {}", case.depth, case.alpha, case.act);
        let outcome = (|| {
            let model = slow_model(case)?;
            let data = batch(&model, 4, case.seed + 100)?;
            let (_, g_ift, _) = ift_loss_and_grad(&model, &data, &ift, &loss)?;
            let diffs = [10, 50, 200]
                .iter()
                .map(|&k| Ok(unrolled_loss_and_grad(&model, &data, &UnrolledSpec::picard(k), &loss)?.1.relative_difference(&g_ift)))
                .collect::<Result<Vec<f64>>>()?;
            let fd = finite_diff_grad(&model, |m| equilibrium_loss(m, &data, &ift, &loss), FD_STEP)?;
            Ok::<_, crate::error::Error>((diffs, g_ift.relative_difference(&fd)))
        })();
        match outcome {
            Ok((diffs, to_fd)) => {
                r.at_most::<String>("ift-vs-unrolled", format!("{label} K=200"), Ok(diffs[2]), 1e-3);
                let violations = diffs.windows(2).filter(|w| w[1] >= w[0]).count();
                r.at_most::<String>(
                    "ift-vs-unrolled",
                    format!("{label} non-decreasing steps over K=10,50,200 in [{}]", super::series(&diffs)),
                    Ok(violations as f64),
                    0.0,
                );
                r.at_most::<String>("ift-vs-fd", label, Ok(to_fd), 1e-6);
            }
            Err(e) => r.at_most("ift-vs-unrolled", label, Err(e), 1e-3),
        }
    }

    let case = &CASES[1];
    let model = model_for(case);
    let outcome = (|| {
        let data = batch(&model, 4, case.seed + 100)?;
        let f = |m: &DeepOptEqModel| unrolled_loss(m, &data, &unroll, &loss);
        let coarse = finite_diff_grad(&model, f, 1e-4)?.flatten();
        let fine = finite_diff_grad(&model, f, 1e-5)?.flatten();
        Ok::<_, crate::error::Error>(coarse.iter().zip(&fine).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    })();
    r.at_most("fd-step-halving", "max change from step 1e-4 to 1e-5", outcome, 1e-5);
}
