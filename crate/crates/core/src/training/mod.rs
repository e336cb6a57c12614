//! Losses and parameter gradients for deep OptEq models.
//!
//! Two gradient routes: reverse mode through `K` recorded solver steps
//! ([`unrolled_loss_and_grad`]), and implicit differentiation at the
//! equilibrium ([`ift_loss_and_grad`]), whose Jacobian products are written
//! out by hand. Central finite differences ([`finite_diff_grad`]) check both.

mod fd;
mod ift;
mod sgd;
mod tape;
mod unrolled;

use serde::{Deserialize, Serialize};

use crate::data::Targets;
use crate::deepnet::DeepOptEqModel;
use crate::error::{Error, Result};
use crate::tensors::{Matrix, Vector};

pub use fd::{finite_diff_grad, MAX_FD_PARAMETERS};
pub use ift::{equilibrium_loss, ift_loss_and_grad, IftSpec};
pub use sgd::{sgd_train, DIVERGENCE_LOSS, EpochRecord, GradientMode, LrSchedule, TrainSpec, TrainingLog};
pub use unrolled::{unrolled_forward, unrolled_loss, unrolled_loss_and_grad, SamSpec, UnrolledForward, UnrolledSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `½‖y − y₀‖²`
    Squared,
    SoftmaxCrossEntropy,
}

/// Data loss averaged over the batch, plus `ξ‖θ‖²` over all parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    pub kind: LossKind,
    #[serde(default)]
    pub weight_decay: f64,
}

impl LossSpec {
    pub fn squared() -> Self {
        Self {
            kind: LossKind::Squared,
            weight_decay: 0.0,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            kind: LossKind::SoftmaxCrossEntropy,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, xi: f64) -> Self {
        self.weight_decay = xi;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::invalid("weight_decay", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Mean data loss over the columns of `y` and its gradient with respect to `y`.
pub(crate) fn data_loss(y: &Matrix, targets: &Targets, kind: LossKind) -> Result<(f64, Matrix)> {
    let b = y.cols();
    let bf = b as f64;
    let mut grad = Matrix::zeros(y.rows(), b);
    let mut total = 0.0;
    for j in 0..b {
        let yj = y.column(j);
        let (l, g) = match (kind, targets) {
            (LossKind::Squared, Targets::Regression(t)) => {
                let diff = yj.sub(&t.column(j));
                (0.5 * diff.dot(&diff), diff)
            }
            (LossKind::Squared, Targets::Classes(c)) => {
                let onehot = Vector::basis(y.rows(), c[j]);
                let diff = yj.sub(&onehot);
                (0.5 * diff.dot(&diff), diff)
            }
            (LossKind::SoftmaxCrossEntropy, Targets::Classes(c)) => {
                let max = yj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps = yj.map(|v| (v - max).exp());
                let z = exps.sum();
                let lse = max + z.ln();
                let mut g = exps.scale(1.0 / z);
                g[c[j]] -= 1.0;
                (lse - yj[c[j]], g)
            }
            (LossKind::SoftmaxCrossEntropy, Targets::Regression(_)) => {
                return Err(Error::invalid("loss", "cross-entropy needs class targets"))
            }
        };
        if !l.is_finite() {
            return Err(Error::NonFinite {
                context: format!("loss of sample {j}"),
            });
        }
        total += l;
        grad.set_column(j, &g.scale(1.0 / bf));
    }
    Ok((total / bf, grad))
}

/// Gradient of one layer's `(W, U, b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub w: Matrix,
    pub u: Matrix,
    pub b: Vector,
}

/// Gradients for every parameter, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub extractor: Matrix,
    pub layers: Vec<LayerGrad>,
    pub readout: Matrix,
}

impl GradientBundle {
    pub fn zeros(model: &DeepOptEqModel) -> Self {
        Self {
            extractor: Matrix::zeros(model.extractor().weight.rows(), model.extractor().weight.cols()),
            layers: model
                .layers()
                .iter()
                .map(|l| LayerGrad {
                    w: Matrix::zeros(l.w().rows(), l.w().cols()),
                    u: Matrix::zeros(l.u().rows(), l.u().cols()),
                    b: Vector::zeros(l.b().dim()),
                })
                .collect(),
            readout: Matrix::zeros(model.readout().rows(), model.readout().cols()),
        }
    }

    /// Extractor, then `W, U, b` per layer, then readout; row-major within
    /// each matrix. Same order as [`flatten_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.extractor.as_slice().to_vec();
        for l in &self.layers {
            out.extend_from_slice(l.w.as_slice());
            out.extend_from_slice(l.u.as_slice());
            out.extend_from_slice(l.b.as_slice());
        }
        out.extend_from_slice(self.readout.as_slice());
        out
    }

    pub fn from_flat(model: &DeepOptEqModel, flat: &[f64]) -> Result<Self> {
        let mut g = Self::zeros(model);
        let mut it = flat.iter().copied();
        let mut fill = |dst: &mut [f64]| -> Result<()> {
            for v in dst.iter_mut() {
                *v = it.next().ok_or_else(|| Error::dim("gradient length", "more", "fewer"))?;
            }
            Ok(())
        };
        fill(g.extractor.as_mut_slice())?;
        for l in &mut g.layers {
            fill(l.w.as_mut_slice())?;
            fill(l.u.as_mut_slice())?;
            fill(l.b.as_mut_slice())?;
        }
        fill(g.readout.as_mut_slice())?;
        if flat.len() != parameter_count(model) {
            return Err(Error::dim("gradient length", parameter_count(model), flat.len()));
        }
        Ok(g)
    }

    pub fn norm(&self) -> f64 {
        self.flatten().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    /// `self + a · other`
    pub fn add_scaled(&mut self, a: f64, other: &GradientBundle) {
        self.extractor.axpy(a, &other.extractor);
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.w.axpy(a, &o.w);
            l.u.axpy(a, &o.u);
            l.b.axpy(a, &o.b);
        }
        self.readout.axpy(a, &other.readout);
    }

    /// `‖self − other‖ / max(‖other‖, 1e-300)`
    pub fn relative_difference(&self, other: &GradientBundle) -> f64 {
        let a = self.flatten();
        let b = other.flatten();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let base: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        diff / base.max(1e-300)
    }
}

pub fn parameter_count(model: &DeepOptEqModel) -> usize {
    flatten_parameters(model).len()
}

/// All parameters in the [`GradientBundle::flatten`] order.
pub fn flatten_parameters(model: &DeepOptEqModel) -> Vec<f64> {
    let mut out = model.extractor().weight.as_slice().to_vec();
    for l in model.layers() {
        out.extend_from_slice(l.w().as_slice());
        out.extend_from_slice(l.u().as_slice());
        out.extend_from_slice(l.b().as_slice());
    }
    out.extend_from_slice(model.readout().as_slice());
    out
}

/// A copy of `model` with parameters replaced from `flat`.
pub fn with_parameters(model: &DeepOptEqModel, flat: &[f64]) -> Result<DeepOptEqModel> {
    let g = GradientBundle::from_flat(model, flat)?;
    let mut out = model.clone();
    out.extractor_mut().weight = g.extractor;
    for (layer, lg) in out.layers_mut().iter_mut().zip(g.layers) {
        layer.set_w(lg.w)?;
        layer.set_u(lg.u)?;
        layer.set_b(lg.b)?;
    }
    out.set_readout(g.readout)?;
    Ok(out)
}

/// `ξ‖θ‖²` and its gradient `2ξθ`.
pub(crate) fn weight_decay(model: &DeepOptEqModel, xi: f64) -> (f64, Option<GradientBundle>) {
    if xi == 0.0 {
        return (0.0, None);
    }
    let theta = flatten_parameters(model);
    let value = xi * theta.iter().map(|v| v * v).sum::<f64>();
    let grad: Vec<f64> = theta.iter().map(|v| 2.0 * xi * v).collect();
    (value, GradientBundle::from_flat(model, &grad).ok())
}
