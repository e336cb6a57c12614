//! Minibatch SGD with weight decay over either gradient route.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deepnet::DeepOptEqModel;
use crate::error::{Error, Result};
use crate::regularizers::Regularizer;
use crate::tensors::{spectral_project, Matrix};

use super::ift::{ift_evaluate, IftSpec};
use super::unrolled::{unrolled_evaluate, UnrolledSpec};
use super::{flatten_parameters, with_parameters, LossSpec};

/// Losses above this abort training.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum GradientMode {
    Unrolled(UnrolledSpec),
    Ift(IftSpec),
}

/// `lr(epoch) = initial · factor^⌊epoch / every⌋`; `every = 0` keeps it constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "half")]
    pub factor: f64,
    #[serde(default)]
    pub every: usize,
}

fn half() -> f64 {
    0.5
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            factor: 1.0,
            every: 0,
        }
    }

    /// Multiply by `factor` every `every` epochs.
    pub fn step(initial: f64, factor: f64, every: usize) -> Self {
        Self { initial, factor, every }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        if self.every == 0 {
            self.initial
        } else {
            self.initial * self.factor.powi((epoch / self.every) as i32)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0 && self.initial.is_finite()) {
            return Err(Error::invalid("lr", "initial rate must be finite and >= 0"));
        }
        if !(self.factor > 0.0 && self.factor.is_finite()) {
            return Err(Error::invalid("lr", "decay factor must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub epochs: usize,
    /// `0` trains on the full dataset each step.
    #[serde(default)]
    pub batch_size: usize,
    pub lr: LrSchedule,
    pub loss: LossSpec,
    pub gradient: GradientMode,
    pub seed: u64,
    /// Rescale every `W_l` to this spectral norm after each step.
    #[serde(default)]
    pub spectral_bound: Option<f64>,
    /// Fill `wallclock_ms`; off by default so logs are reproducible.
    #[serde(default)]
    pub record_wallclock: bool,
}

impl TrainSpec {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.loss.validate()?;
        match &self.gradient {
            GradientMode::Unrolled(u) => u.validate()?,
            GradientMode::Ift(i) => i.validate()?,
        }
        if let Some(b) = self.spectral_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::invalid("spectral_bound", "must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub residual_mean: f64,
    pub reg_value: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn losses(&self, split: &str) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == split).map(|r| r.loss).collect()
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.records.iter().rev().find(|r| r.split == split)
    }
}

struct BatchEval {
    loss: f64,
    grad: Option<Vec<f64>>,
    residual_mean: f64,
    reg_value: f64,
}

fn evaluate(model: &DeepOptEqModel, batch: &Dataset, spec: &TrainSpec, with_grad: bool) -> Result<BatchEval> {
    match &spec.gradient {
        GradientMode::Unrolled(u) => {
            let out = unrolled_evaluate(model, batch, u, &spec.loss, true)?;
            let reg = u.sam.map(|s| s.reg).or(model.structural().map(|s| s.reg));
            Ok(BatchEval {
                loss: out.loss,
                grad: with_grad.then(|| out.grad.flatten()),
                residual_mean: out.residual_mean.unwrap_or(0.0),
                reg_value: regularizer_value(reg, &out.z)?,
            })
        }
        GradientMode::Ift(i) => {
            let out = ift_evaluate(model, batch, i, &spec.loss, with_grad)?;
            Ok(BatchEval {
                loss: out.loss,
                grad: out.grad.map(|g| g.flatten()),
                residual_mean: out.residual_mean,
                reg_value: regularizer_value(model.structural().map(|s| s.reg), &out.report.z_star)?,
            })
        }
    }
}

fn regularizer_value(reg: Option<Regularizer>, z: &Matrix) -> Result<f64> {
    match reg {
        Some(r) if z.cols() >= 2 || !r.is_batch_coupled() => r.value(z),
        _ => Ok(0.0),
    }
}

fn diverged(loss: f64) -> bool {
    !loss.is_finite() || loss > DIVERGENCE_LOSS
}

/// Trains `model` in place. Every record is passed to `on_record` as soon as
/// it exists, so a sink sees the log up to a divergence.
pub fn sgd_train<F>(
    model: &mut DeepOptEqModel,
    train: &Dataset,
    eval: Option<&Dataset>,
    spec: &TrainSpec,
    mut on_record: F,
) -> Result<TrainingLog>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    spec.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("dataset", "must be nonempty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let start = Instant::now();
    let mut log = TrainingLog::default();
    let elapsed = |spec: &TrainSpec| {
        if spec.record_wallclock {
            start.elapsed().as_millis() as u64
        } else {
            0
        }
    };
    let as_divergence = |epoch: usize, e: Error| match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    };
    for epoch in 0..spec.epochs {
        let lr = spec.lr.at(epoch);
        let (mut loss, mut residual, mut reg, mut seen) = (0.0, 0.0, 0.0, 0usize);
        for batch in train.minibatches(spec.batch_size, &mut rng) {
            let r = evaluate(model, &batch, spec, true).map_err(|e| as_divergence(epoch, e))?;
            let n = batch.len();
            if diverged(r.loss) {
                let rec = EpochRecord {
                    epoch,
                    split: "train".into(),
                    loss: r.loss,
                    residual_mean: r.residual_mean,
                    reg_value: r.reg_value,
                    lr,
                    wallclock_ms: elapsed(spec),
                };
                on_record(&rec)?;
                log.records.push(rec);
                return Err(Error::Diverged { epoch, loss: r.loss });
            }
            loss += r.loss * n as f64;
            residual += r.residual_mean * n as f64;
            reg += r.reg_value * n as f64;
            seen += n;
            let g = r.grad.expect("gradient requested");
            let theta: Vec<f64> = flatten_parameters(model)
                .iter()
                .zip(&g)
                .map(|(t, gi)| t - lr * gi)
                .collect();
            let mut next = with_parameters(model, &theta)?;
            if let Some(bound) = spec.spectral_bound {
                for layer in next.layers_mut() {
                    let w = spectral_project(layer.w(), bound);
                    layer.set_w(w)?;
                }
            }
            *model = next;
        }
        let nf = seen as f64;
        let rec = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss / nf,
            residual_mean: residual / nf,
            reg_value: reg / nf,
            lr,
            wallclock_ms: elapsed(spec),
        };
        on_record(&rec)?;
        log.records.push(rec);
        if let Some(ev) = eval {
            let r = evaluate(model, ev, spec, false).map_err(|e| as_divergence(epoch, e))?;
            let rec = EpochRecord {
                epoch,
                split: "eval".into(),
                loss: r.loss,
                residual_mean: r.residual_mean,
                reg_value: r.reg_value,
                lr,
                wallclock_ms: elapsed(spec),
            };
            on_record(&rec)?;
            log.records.push(rec);
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::data::Targets;
    use crate::deepnet::tests::seeded_model;
    use crate::solvers::SamSchedule;

    fn data(model: &DeepOptEqModel, n: usize) -> Dataset {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x0 = Matrix::random_normal(model.input_dim(), n, &mut rng);
        let y = Matrix::random_normal(model.output_dim(), n, &mut rng).scale(0.3);
        Dataset::new(x0, Targets::Regression(y)).unwrap()
    }

    fn spec(lr: f64, gradient: GradientMode) -> TrainSpec {
        TrainSpec {
            epochs: 5,
            batch_size: 4,
            lr: LrSchedule::constant(lr),
            loss: LossSpec::squared().with_weight_decay(3e-4),
            gradient,
            seed: 1,
            spectral_bound: Some(0.95),
            record_wallclock: false,
        }
    }

    #[test]
    fn zero_rate_changes_nothing() {
        let model = seeded_model(&[0.8], 4, 3, 0.5, Activation::Tanh, 1);
        let d = data(&model, 10);
        let mut m = model.clone();
        let log = sgd_train(&mut m, &d, None, &spec(0.0, GradientMode::Unrolled(UnrolledSpec::picard(5))), |_| Ok(())).unwrap();
        assert_eq!(m, model);
        let full = TrainSpec {
            batch_size: 0,
            ..spec(0.0, GradientMode::Unrolled(UnrolledSpec::picard(5)))
        };
        let log_full = sgd_train(&mut m, &d, None, &full, |_| Ok(())).unwrap();
        let l = log_full.losses("train");
        assert!(l.iter().all(|v| *v == l[0]));
        assert_eq!(log.records.len(), 5);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let model = seeded_model(&[0.8], 4, 3, 0.5, Activation::Tanh, 2);
        let d = data(&model, 12);
        let reg = Regularizer::SquaredL2 { lambda: 1.0 };
        let sched = SamSchedule::for_regularizer(&reg).unwrap().with_eta(0.1);
        for mode in [
            GradientMode::Unrolled(UnrolledSpec::sam(10, reg, sched)),
            GradientMode::Ift(IftSpec::new(1e-10, 1e-10)),
        ] {
            let s = TrainSpec {
                epochs: 30,
                batch_size: 0,
                ..spec(0.2, mode)
            };
            let mut a = model.clone();
            let mut seen = 0;
            let la = sgd_train(&mut a, &d, Some(&d), &s, |_| {
                seen += 1;
                Ok(())
            })
            .unwrap();
            assert_eq!(seen, 60);
            let mut b = model.clone();
            let lb = sgd_train(&mut b, &d, Some(&d), &s, |_| Ok(())).unwrap();
            assert_eq!(la, lb);
            let losses = la.losses("eval");
            assert!(losses[29] < 0.9 * losses[0], "{losses:?}");
            assert!(a.layers().iter().all(|l| l.certified_norm() <= 0.95 + 1e-9));
        }
    }

    #[test]
    fn divergence_aborts_with_log() {
        let model = seeded_model(&[0.8], 4, 3, 1.0, Activation::LeakyRelu(0.1), 3);
        let d = data(&model, 8);
        let s = TrainSpec {
            spectral_bound: None,
            epochs: 50,
            ..spec(1e4, GradientMode::Unrolled(UnrolledSpec::picard(5)))
        };
        let mut m = model.clone();
        let mut last = None;
        let err = sgd_train(&mut m, &d, None, &s, |r| {
            last = Some(r.clone());
            Ok(())
        })
        .unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err}");
        assert!(last.is_some());
    }

    #[test]
    fn lr_schedule_halves() {
        let s = LrSchedule::step(0.1, 0.5, 30);
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(29), 0.1);
        assert_eq!(s.at(30), 0.05);
        assert_eq!(s.at(65), 0.025);
    }
}
