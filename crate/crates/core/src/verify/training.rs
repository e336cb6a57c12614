//! Training behaviour: linear loss decay on a realizable regression task,
//! agreement of the two gradient modes, and residuals of unrolled versus
//! implicit forward passes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::config::{ExtractorKind, ModelSpec};
use crate::data::{planted_regression, DatasetSpec};
use crate::error::{Error, Result};
use crate::tensors::Matrix;
use crate::training::{
    ift_loss_and_grad, sgd_train, unrolled_forward, GradientMode, IftSpec, LossSpec, LrSchedule, TrainSpec,
    UnrolledSpec,
};

use super::Recorder;

const EPOCHS: usize = 500;
const FIT_WINDOW: usize = 200;

/// Coefficient of determination of the least-squares line through
/// `(i, ys[i])`.
pub(crate) fn affine_r2(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
        syy += (y - my) * (y - my);
    }
    if syy == 0.0 {
        return 1.0;
    }
    sxy * sxy / (sxx * syy)
}

fn student(hidden: usize) -> ModelSpec {
    ModelSpec {
        input_dim: 4,
        feature_dim: None,
        hidden,
        outputs: 1,
        layers: 1,
        alpha: 1.0,
        mu: 1.0,
        activation: Activation::LeakyRelu(0.1),
        extractor: ExtractorKind::Identity,
        init_norm: 0.5,
    }
}

/// Final loss and the per-epoch training losses.
fn train(gradient: GradientMode) -> Result<(f64, Vec<f64>)> {
    let data_spec = DatasetSpec::PlantedRegression {
        n: 64,
        input_dim: 4,
        hidden: 32,
        outputs: 1,
        layers: 1,
        activation: Activation::LeakyRelu(0.1),
        teacher_norm: 0.5,
        alpha: 1.0,
        steps: 20,
        noise: 0.0,
    };
    let (data, _) = planted_regression(&data_spec, 1)?;
    let mut model = student(32).init(2)?;
    let spec = TrainSpec {
        epochs: EPOCHS,
        batch_size: 0,
        lr: LrSchedule::constant(0.3),
        loss: LossSpec::squared(),
        gradient,
        seed: 3,
        spectral_bound: None,
        record_wallclock: false,
    };
    let log = sgd_train(&mut model, &data, None, &spec, |_| Ok(()))?;
    let losses = log.losses("train");
    let last = *losses.last().ok_or_else(|| Error::invalid("log", "no records"))?;
    Ok((last, losses))
}

fn linear_rate(r: &mut Recorder) {
    let unrolled = train(GradientMode::Unrolled(UnrolledSpec::picard(20)));
    let ift = train(GradientMode::Ift(IftSpec::new(1e-12, 1e-12)));
    r.at_most(
        "linear-rate",
        "final loss after 500 epochs (unrolled)",
        unrolled.as_ref().map(|u| u.0),
        1e-3,
    );
    let r2 = unrolled.as_ref().map(|(_, l)| {
        let logs: Vec<f64> = l[l.len() - FIT_WINDOW..].iter().map(|v| v.ln()).collect();
        affine_r2(&logs)
    });
    r.above("linear-rate", "R^2 of log-loss over the final 200 epochs", r2, 0.95);
    let gap = match (&unrolled, &ift) {
        (Ok(u), Ok(i)) => Ok((u.0 - i.0).abs() / u.0.max(i.0)),
        (Err(e), _) | (_, Err(e)) => Err(e.to_string()),
    };
    r.at_most("mode-agreement", "relative gap of final losses, unrolled vs IFT", gap, 0.1);
}

fn residual_ordering(r: &mut Recorder) {
    let outcome = (|| {
        let mut spec = student(16);
        spec.alpha = 0.5;
        spec.init_norm = 0.9;
        spec.activation = Activation::Tanh;
        let model = spec.init(5)?;
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x0 = Matrix::random_normal(spec.input_dim, 32, &mut rng);
        let residuals = [5, 10, 20, 40]
            .iter()
            .map(|&k| Ok(unrolled_forward(&model, &x0, &UnrolledSpec::picard(k))?.residual))
            .collect::<Result<Vec<f64>>>()?;
        let targets = crate::data::Targets::Regression(Matrix::zeros(1, 32));
        let data = crate::data::Dataset::new(x0, targets)?;
        let (_, _, report) = ift_loss_and_grad(&model, &data, &IftSpec::new(1e-3, 1e-3), &LossSpec::squared())?;
        Ok::<_, Error>((residuals, report.residual))
    })();
    match outcome {
        Ok((residuals, ift)) => {
            let violations = residuals.windows(2).filter(|w| w[1] >= w[0]).count();
            r.at_most::<String>(
                "residual-ordering",
                format!("non-decreasing steps over K=5,10,20,40 in [{}]", super::series(&residuals)),
                Ok(violations as f64),
                0.0,
            );
            r.at_most::<String>("residual-ordering", "IFT forward residual at threshold 1e-3", Ok(ift), 1e-3);
        }
        Err(e) => r.at_most("residual-ordering", "unrolled and IFT residuals", Err(e), 0.0),
    }
}

pub(crate) fn run(r: &mut Recorder) {
    linear_rate(r);
    residual_ordering(r);
}
