//! Reverse mode through `K` recorded solver steps.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deepnet::DeepOptEqModel;
use crate::error::{Error, Result};
use crate::regularizers::Regularizer;
use crate::solvers::SamSchedule;
use crate::tensors::Matrix;

use super::tape::{NodeId, Tape};
use super::{data_loss, weight_decay, GradientBundle, LayerGrad, LossSpec};

/// `K` steps from `z = 0`. With a SAM regularizer and a schedule with
/// `η > 0` each step is `β_k S_{λ_k}(z) + (1 − β_k) T(z)`; otherwise it is
/// a Picard step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnrolledSpec {
    pub steps: usize,
    #[serde(default)]
    pub sam: Option<SamSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamSpec {
    pub reg: Regularizer,
    pub schedule: SamSchedule,
}

impl UnrolledSpec {
    pub fn picard(steps: usize) -> Self {
        Self { steps, sam: None }
    }

    pub fn sam(steps: usize, reg: Regularizer, schedule: SamSchedule) -> Self {
        Self {
            steps,
            sam: Some(SamSpec { reg, schedule }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("K", "must be at least 1"));
        }
        if let Some(s) = &self.sam {
            s.reg.validate()?;
            s.schedule.validate()?;
        }
        Ok(())
    }
}

/// The final iterate of an unrolled forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct UnrolledForward {
    /// `m × B`
    pub z: Matrix,
    /// `W_{L+1} z`
    pub y: Matrix,
    /// Mean over samples of `‖z − T(z)‖ / max(‖z‖, 1)`.
    pub residual: f64,
}

/// Mean per-column relative residual `‖z − T(z)‖ / max(‖z‖, 1)`.
pub(crate) fn mean_column_residual(z: &Matrix, tz: &Matrix) -> f64 {
    column_residuals(z, tz).iter().sum::<f64>() / z.cols().max(1) as f64
}

pub(crate) fn column_residuals(z: &Matrix, tz: &Matrix) -> Vec<f64> {
    (0..z.cols())
        .map(|j| {
            let a = z.column(j);
            a.distance(&tz.column(j)) / a.norm().max(1.0)
        })
        .collect()
}

struct Recorded {
    tape: Tape,
    extractor: NodeId,
    layers: Vec<(NodeId, NodeId, NodeId)>,
    readout: NodeId,
    z: NodeId,
    y: NodeId,
}

fn record(model: &DeepOptEqModel, x0: &Matrix, spec: &UnrolledSpec) -> Result<Recorded> {
    spec.validate()?;
    if x0.rows() != model.input_dim() {
        return Err(Error::dim("X0 rows", model.input_dim(), x0.rows()));
    }
    let mut t = Tape::new();
    let extractor = t.leaf(model.extractor().weight.clone());
    let x0n = t.leaf(x0.clone());
    let mut x = t.matmul(extractor, x0n);
    if model.extractor().tanh {
        x = t.tanh(x);
    }
    let layers: Vec<(NodeId, NodeId, NodeId)> = model
        .layers()
        .iter()
        .map(|l| (t.leaf(l.w().clone()), t.leaf(l.u().clone()), t.leaf(l.b().to_column())))
        .collect();
    let readout = t.leaf(model.readout().clone());
    let ux: Vec<NodeId> = layers.iter().map(|&(_, u, _)| t.matmul(u, x)).collect();
    let (alpha, mu, act) = (model.alpha(), model.mu(), model.activation());
    let mut z = t.leaf(Matrix::zeros(model.hidden_dim(), x0.cols()));
    for k in 1..=spec.steps {
        let mut tz = z;
        for (&(w, _, b), &uxl) in layers.iter().zip(&ux) {
            let p = t.matmul(w, tz);
            let q = t.add(p, uxl);
            let a = t.add_bias(q, b);
            let h = t.act(a, act);
            let r = t.matmul_tn(w, h);
            tz = t.lincomb(alpha / mu, r, 1.0 - alpha, tz);
        }
        if let Some(s) = model.structural() {
            tz = if s.reg.has_prox() {
                t.reg_prox(tz, s.reg, s.gamma)?
            } else {
                t.reg_step(tz, s.reg, s.gamma, 0.0)?
            };
        }
        z = match &spec.sam {
            Some(sam) if sam.schedule.beta(k) != 0.0 => {
                let beta = sam.schedule.beta(k);
                let s = t.reg_step(z, sam.reg, sam.schedule.gamma, sam.schedule.lambda(k))?;
                t.lincomb(beta, s, 1.0 - beta, tz)
            }
            _ => tz,
        };
    }
    let y = t.matmul(readout, z);
    Ok(Recorded {
        tape: t,
        extractor,
        layers,
        readout,
        z,
        y,
    })
}

pub fn unrolled_forward(model: &DeepOptEqModel, x0: &Matrix, spec: &UnrolledSpec) -> Result<UnrolledForward> {
    let rec = record(model, x0, spec)?;
    let z = rec.tape.value(rec.z).clone();
    let x = model.extractor().apply_batch(x0)?;
    let residual = mean_column_residual(&z, &model.forward_map_batch(&z, &x)?);
    Ok(UnrolledForward {
        y: rec.tape.value(rec.y).clone(),
        z,
        residual,
    })
}

/// Data loss plus weight decay of the unrolled pipeline.
pub fn unrolled_loss(model: &DeepOptEqModel, batch: &Dataset, spec: &UnrolledSpec, loss: &LossSpec) -> Result<f64> {
    loss.validate()?;
    let rec = record(model, &batch.x0, spec)?;
    let (l, _) = data_loss(rec.tape.value(rec.y), &batch.targets, loss.kind)?;
    Ok(l + weight_decay(model, loss.weight_decay).0)
}

/// Loss and exact gradient of [`unrolled_loss`].
pub fn unrolled_loss_and_grad(
    model: &DeepOptEqModel,
    batch: &Dataset,
    spec: &UnrolledSpec,
    loss: &LossSpec,
) -> Result<(f64, GradientBundle)> {
    let out = unrolled_evaluate(model, batch, spec, loss, false)?;
    Ok((out.loss, out.grad))
}

pub(crate) struct UnrolledOutcome {
    pub loss: f64,
    pub grad: GradientBundle,
    pub z: Matrix,
    /// Only filled when requested; costs one more application of `T`.
    pub residual_mean: Option<f64>,
}

pub(crate) fn unrolled_evaluate(
    model: &DeepOptEqModel,
    batch: &Dataset,
    spec: &UnrolledSpec,
    loss: &LossSpec,
    with_residual: bool,
) -> Result<UnrolledOutcome> {
    loss.validate()?;
    let rec = record(model, &batch.x0, spec)?;
    let (l, dy) = data_loss(rec.tape.value(rec.y), &batch.targets, loss.kind)?;
    let grads = rec.tape.backward(rec.y, dy)?;
    let take = |id: NodeId| {
        let v = rec.tape.value(id);
        grads[id].clone().unwrap_or_else(|| Matrix::zeros(v.rows(), v.cols()))
    };
    let mut g = GradientBundle {
        extractor: take(rec.extractor),
        layers: rec
            .layers
            .iter()
            .map(|&(w, u, b)| LayerGrad {
                w: take(w),
                u: take(u),
                b: take(b).column(0),
            })
            .collect(),
        readout: take(rec.readout),
    };
    let (wd, wd_grad) = weight_decay(model, loss.weight_decay);
    if let Some(wg) = wd_grad {
        g.add_scaled(1.0, &wg);
    }
    let z = rec.tape.value(rec.z).clone();
    let residual_mean = if with_residual {
        let x = model.extractor().apply_batch(&batch.x0)?;
        Some(mean_column_residual(&z, &model.forward_map_batch(&z, &x)?))
    } else {
        None
    };
    Ok(UnrolledOutcome {
        loss: l + wd,
        grad: g,
        z,
        residual_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activations::Activation;
    use crate::data::Targets;
    use crate::deepnet::tests::seeded_model;
    use crate::deepnet::Extractor;
    use crate::tensors::Vector;
    use crate::training::{finite_diff_grad, with_parameters};
    use crate::unitlayer::LayerParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(model: &DeepOptEqModel, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = Matrix::random_normal(model.input_dim(), n, &mut rng);
        let y = Matrix::random_normal(model.output_dim(), n, &mut rng);
        Dataset::new(x0, Targets::Regression(y)).unwrap()
    }

    #[test]
    fn forward_matches_batch_picard_bitwise() {
        let model = seeded_model(&[0.9, 0.6], 4, 3, 0.5, Activation::Tanh, 1);
        let d = batch(&model, 5, 2);
        let f = unrolled_forward(&model, &d.x0, &UnrolledSpec::picard(7)).unwrap();
        let x = model.extractor().apply_batch(&d.x0).unwrap();
        let mut z = Matrix::zeros(4, 5);
        for _ in 0..7 {
            z = model.forward_map_batch(&z, &x).unwrap();
        }
        assert_eq!(f.z, z);
        let structural = model.append_structural_regularizer(Regularizer::L1 { lambda: 0.01 }, 0.5).unwrap();
        let f = unrolled_forward(&structural, &d.x0, &UnrolledSpec::picard(3)).unwrap();
        let mut z = Matrix::zeros(4, 5);
        for _ in 0..3 {
            z = structural.forward_map_batch(&z, &x).unwrap();
        }
        assert_eq!(f.z, z);
    }

    #[test]
    fn sam_forward_matches_solver() {
        let model = seeded_model(&[0.8], 3, 2, 1.0, Activation::Relu, 3);
        let d = batch(&model, 1, 4);
        let reg = Regularizer::SquaredL2 { lambda: 1.0 };
        let sched = SamSchedule::for_regularizer(&reg).unwrap().with_eta(0.2);
        let f = unrolled_forward(&model, &d.x0, &UnrolledSpec::sam(12, reg, sched)).unwrap();
        let x = model.features(&d.x0.column(0)).unwrap();
        let r = crate::solvers::sam_solve(|z: &Vector| model.forward_map(z, &x), &reg, &sched, &Vector::zeros(3), 12, false).unwrap();
        assert!(f.z.column(0).distance(&r.z_star) < 1e-14);
    }

    #[test]
    fn zero_model_zero_targets() {
        let layers = vec![LayerParams::new(Matrix::zeros(3, 3), Matrix::zeros(3, 2), Vector::zeros(3)).unwrap()];
        let model = DeepOptEqModel::new(Extractor::linear(Matrix::zeros(2, 2)), layers, 1.0, 1.0, Activation::Relu, Matrix::zeros(1, 3)).unwrap();
        let d = Dataset::new(Matrix::from_fn(2, 4, |i, j| (i + j) as f64), Targets::Regression(Matrix::zeros(1, 4))).unwrap();
        let (l, g) = unrolled_loss_and_grad(&model, &d, &UnrolledSpec::picard(3), &LossSpec::squared().with_weight_decay(0.1)).unwrap();
        assert_eq!(l, 0.0);
        assert_eq!(g.norm(), 0.0);
    }

    /// `K = 1`, `α = μ = 1`, scalar everything, `z₀ = 0`:
    /// `y = r w σ(u x + b)` (the `Wz` term vanishes at zero), loss `½(y − t)²`.
    #[test]
    fn scalar_chain_rule_by_hand() {
        let (w, u, b, r, e, x0, target) = (0.7, 1.3, 0.2, 0.9, 1.1, 0.5, 0.1);
        let layers = vec![LayerParams::new(Matrix::from_rows(&[vec![w]]), Matrix::from_rows(&[vec![u]]), Vector::from_vec(vec![b])).unwrap()];
        let model = DeepOptEqModel::new(Extractor::linear(Matrix::from_rows(&[vec![e]])), layers, 1.0, 1.0, Activation::Tanh, Matrix::from_rows(&[vec![r]])).unwrap();
        let d = Dataset::new(Matrix::from_rows(&[vec![x0]]), Targets::Regression(Matrix::from_rows(&[vec![target]]))).unwrap();
        let (l, g) = unrolled_loss_and_grad(&model, &d, &UnrolledSpec::picard(1), &LossSpec::squared()).unwrap();
        let x = e * x0;
        let a = u * x + b;
        let h = a.tanh();
        let dh = 1.0 - h * h;
        let y = r * w * h;
        let res = y - target;
        assert!((l - 0.5 * res * res).abs() < 1e-15);
        let expect = [
            res * r * w * dh * u * x0, // extractor
            res * r * h,               // W (z = 0, so only the outer factor)
            res * r * w * dh * x,      // U
            res * r * w * dh,          // b
            res * w * h,               // readout
        ];
        for (got, want) in g.flatten().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    /// The tape against central differences on every coordinate, with a
    /// SAM inverse-norm step in the loop.
    #[test]
    fn matches_finite_differences_with_sam() {
        let model = seeded_model(&[0.9, 0.5], 3, 2, 0.6, Activation::Tanh, 8);
        let d = batch(&model, 3, 9);
        let reg = Regularizer::InverseNorm { epsilon: 0.5 };
        let sched = SamSchedule::for_regularizer(&reg).unwrap().with_eta(0.3);
        let spec = UnrolledSpec::sam(5, reg, sched);
        let loss = LossSpec::squared().with_weight_decay(1e-3);
        let (_, g) = unrolled_loss_and_grad(&model, &d, &spec, &loss).unwrap();
        let fd = finite_diff_grad(&model, |m| unrolled_loss(m, &d, &spec, &loss), 1e-5).unwrap();
        assert!(g.relative_difference(&fd) < 1e-7, "{}", g.relative_difference(&fd));
        let _ = with_parameters(&model, &g.flatten()).unwrap();
    }
}
