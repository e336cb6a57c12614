//! Implicit differentiation at the equilibrium.
//!
//! With `z* = T(z*)` and loss `ℓ(W_{L+1} z*)`, the adjoint `v` solves
//! `v = (∂T/∂z)ᵀ v + W_{L+1}ᵀ ∂ℓ/∂y` and the parameter gradient is
//! `(∂T/∂θ)ᵀ v`. Both products are written out per layer, never as
//! Jacobian matrices: for `f(z) = (α/μ) Wᵀσ(a) + (1 − α) z`,
//! `a = Wz + Ux + b` and `δ = (α/μ) σ'(a) ⊙ (W g)`,
//!
//! ```text
//! g_z = Wᵀδ + (1 − α) g      g_W = (α/μ) σ(a) gᵀ + δ zᵀ
//! g_U = δ xᵀ                 g_b = δ 1       g_x = Uᵀδ
//! ```

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::deepnet::DeepOptEqModel;
use crate::error::{Error, Result};
use crate::parallel::{chunk_ranges, map_ordered, thread_count, CHUNK};
use crate::solvers::SolveReport;
use crate::tensors::Matrix;

use super::tape::prox_vjp;
use super::unrolled::column_residuals;
use super::{data_loss, weight_decay, GradientBundle, LayerGrad, LossSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IftSpec {
    pub tol_fwd: f64,
    pub tol_adj: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

fn default_max_iter() -> usize {
    10_000
}

impl IftSpec {
    pub fn new(tol_fwd: f64, tol_adj: f64) -> Self {
        Self {
            tol_fwd,
            tol_adj,
            max_iter: default_max_iter(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tol_fwd > 0.0 && self.tol_adj > 0.0) {
            return Err(Error::invalid("tol", "forward and adjoint tolerances must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

struct Chunk {
    x0: Matrix,
    x: Matrix,
    z: Matrix,
    iterations: usize,
    converged: bool,
    residuals: Vec<f64>,
}

/// Intermediate values of one application of `T` at `z*`.
struct LayerCache {
    z_in: Matrix,
    pre: Matrix,
    h: Matrix,
}

struct Linearization {
    layers: Vec<LayerCache>,
    /// Input of the structural step, if any.
    structural_in: Option<Matrix>,
}

fn check_supported(model: &DeepOptEqModel) -> Result<()> {
    match model.structural() {
        Some(s) if s.reg.is_batch_coupled() => Err(Error::Unsupported(
            "implicit gradients through a batch-coupled structural regularizer".into(),
        )),
        _ => Ok(()),
    }
}

fn solve_chunk(model: &DeepOptEqModel, x0: Matrix, spec: &IftSpec) -> Result<Chunk> {
    let x = model.extractor().apply_batch(&x0)?;
    let mut z = Matrix::zeros(model.hidden_dim(), x.cols());
    for k in 0..spec.max_iter {
        let tz = model.forward_map_batch(&z, &x)?;
        let residuals = column_residuals(&z, &tz);
        let worst = residuals.iter().cloned().fold(0.0, f64::max);
        if !worst.is_finite() {
            return Err(Error::NonFinite {
                context: "equilibrium iterate".into(),
            });
        }
        if worst <= spec.tol_fwd {
            return Ok(Chunk {
                x0,
                x,
                z,
                iterations: k,
                converged: true,
                residuals,
            });
        }
        z = tz;
    }
    let tz = model.forward_map_batch(&z, &x)?;
    let residuals = column_residuals(&z, &tz);
    Ok(Chunk {
        x0,
        x,
        z,
        iterations: spec.max_iter,
        converged: false,
        residuals,
    })
}

fn linearize(model: &DeepOptEqModel, z: &Matrix, x: &Matrix) -> Linearization {
    let act = model.activation();
    let mut cur = z.clone();
    let mut layers = Vec::with_capacity(model.depth());
    for l in model.layers() {
        let ux = l.u().matmul(x);
        let pre = l.pre_activation_batch(&cur, &ux);
        let h = pre.map(|a| act.apply(a));
        let next = Matrix::lincomb(model.alpha() / model.mu(), &l.w().matmul_tn(&h), 1.0 - model.alpha(), &cur);
        layers.push(LayerCache { z_in: cur, pre, h });
        cur = next;
    }
    Linearization {
        layers,
        structural_in: model.structural().map(|_| cur),
    }
}

/// `(∂T/∂z)ᵀ g`; when `params` is given, also accumulates `(∂T/∂θ)ᵀ g`
/// for the layers and returns `(∂T/∂x)ᵀ g` in `gx`.
fn vjp(
    model: &DeepOptEqModel,
    lin: &Linearization,
    x: &Matrix,
    g: &Matrix,
    mut params: Option<(&mut [LayerGrad], &mut Matrix)>,
) -> Result<Matrix> {
    let mut g = g.clone();
    if let (Some(s), Some(zin)) = (model.structural(), &lin.structural_in) {
        g = if s.reg.has_prox() {
            prox_vjp(&s.reg, s.gamma, zin, &g)
        } else {
            g.sub(&s.reg.hvp(zin, &g)?.scale(s.gamma))
        };
    }
    let act = model.activation();
    let (alpha, c) = (model.alpha(), model.alpha() / model.mu());
    for (idx, (layer, cache)) in model.layers().iter().zip(&lin.layers).enumerate().rev() {
        let wg = layer.w().matmul(&g);
        let delta = cache.pre.zip_map(&wg, |a, v| c * act.derivative(a) * v);
        if let Some((grads, gx)) = params.as_mut() {
            let lg = &mut grads[idx];
            lg.w.axpy(c, &cache.h.matmul_nt(&g));
            lg.w.axpy(1.0, &delta.matmul_nt(&cache.z_in));
            lg.u.axpy(1.0, &delta.matmul_nt(x));
            lg.b.axpy(1.0, &delta.row_sums());
            gx.axpy(1.0, &layer.u().matmul_tn(&delta));
        }
        g = Matrix::lincomb(1.0, &layer.w().matmul_tn(&delta), 1.0 - alpha, &g);
    }
    Ok(g)
}

fn adjoint_chunk(model: &DeepOptEqModel, chunk: &Chunk, dy: &Matrix, spec: &IftSpec) -> Result<GradientBundle> {
    let lin = linearize(model, &chunk.z, &chunk.x);
    let rhs = model.readout().matmul_tn(dy);
    let mut v = rhs.clone();
    let mut converged = false;
    let mut change = f64::INFINITY;
    for _ in 0..spec.max_iter {
        let next = vjp(model, &lin, &chunk.x, &v, None)?.add(&rhs);
        change = next.sub(&v).frobenius_norm();
        let scale = next.frobenius_norm();
        v = next;
        if !change.is_finite() {
            return Err(Error::NonFinite {
                context: "adjoint iterate".into(),
            });
        }
        if change <= spec.tol_adj * scale || change == 0.0 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence {
            what: "adjoint fixed-point solve",
            iterations: spec.max_iter,
            last_change: change,
            last_iterate: None,
        });
    }
    let mut g = GradientBundle::zeros(model);
    let mut gx = Matrix::zeros(chunk.x.rows(), chunk.x.cols());
    vjp(model, &lin, &chunk.x, &v, Some((&mut g.layers, &mut gx)))?;
    if model.extractor().tanh {
        gx = gx.zip_map(&chunk.x, |gi, xi| gi * (1.0 - xi * xi));
    }
    g.extractor = gx.matmul_nt(&chunk.x0);
    g.readout = dy.matmul_nt(&chunk.z);
    Ok(g)
}

/// Everything one IFT evaluation produces; `residual_mean` averages the
/// per-sample relative residuals.
pub(crate) struct IftOutcome {
    pub loss: f64,
    pub grad: Option<GradientBundle>,
    pub report: SolveReport<Matrix>,
    pub residual_mean: f64,
}

fn split_batch(model: &DeepOptEqModel, batch: &Dataset, spec: &IftSpec) -> Result<(Vec<Chunk>, SolveReport<Matrix>, f64)> {
    spec.validate()?;
    check_supported(model)?;
    if batch.input_dim() != model.input_dim() {
        return Err(Error::dim("X0 rows", model.input_dim(), batch.input_dim()));
    }
    let rows = batch.input_dim();
    let pieces: Vec<Matrix> = chunk_ranges(batch.len(), CHUNK)
        .into_iter()
        .map(|(a, b)| batch.x0.block(0, a, rows, b - a))
        .collect();
    let threads = thread_count();
    let chunks = map_ordered(&pieces, threads, |x0| solve_chunk(model, x0.clone(), spec))
        .into_iter()
        .collect::<Result<Vec<Chunk>>>()?;
    let z = Matrix::from_columns(&chunks.iter().flat_map(|c| c.z.columns()).collect::<Vec<_>>());
    let residuals: Vec<f64> = chunks.iter().flat_map(|c| c.residuals.iter().copied()).collect();
    let worst = residuals.iter().cloned().fold(0.0, f64::max);
    let mean = residuals.iter().sum::<f64>() / residuals.len() as f64;
    let report = SolveReport {
        z_star: z,
        residual: worst,
        iterations: chunks.iter().map(|c| c.iterations).max().unwrap_or(0),
        converged: chunks.iter().all(|c| c.converged),
        trajectory: None,
    };
    if !report.converged {
        return Err(Error::NonConvergence {
            what: "equilibrium solve",
            iterations: report.iterations,
            last_change: report.residual,
            last_iterate: None,
        });
    }
    Ok((chunks, report, mean))
}

pub(crate) fn ift_evaluate(
    model: &DeepOptEqModel,
    batch: &Dataset,
    spec: &IftSpec,
    loss: &LossSpec,
    with_grad: bool,
) -> Result<IftOutcome> {
    loss.validate()?;
    let (chunks, report, residual_mean) = split_batch(model, batch, spec)?;
    let y = model.readout().matmul(&report.z_star);
    let (l, dy) = data_loss(&y, &batch.targets, loss.kind)?;
    let (wd, wd_grad) = weight_decay(model, loss.weight_decay);
    let grad = if with_grad {
        let ranges = chunk_ranges(batch.len(), CHUNK);
        let jobs: Vec<(&Chunk, Matrix)> = chunks
            .iter()
            .zip(&ranges)
            .map(|(c, &(a, b))| (c, dy.block(0, a, dy.rows(), b - a)))
            .collect();
        let parts = map_ordered(&jobs, thread_count(), |(c, dyc)| adjoint_chunk(model, c, dyc, spec));
        let mut total = GradientBundle::zeros(model);
        for p in parts {
            total.add_scaled(1.0, &p?);
        }
        if let Some(wg) = wd_grad {
            total.add_scaled(1.0, &wg);
        }
        Some(total)
    } else {
        None
    };
    Ok(IftOutcome {
        loss: l + wd,
        grad,
        report,
        residual_mean,
    })
}

/// Loss at the equilibrium and its implicit gradient. Fails if the forward
/// or adjoint iteration does not reach its tolerance.
pub fn ift_loss_and_grad(
    model: &DeepOptEqModel,
    batch: &Dataset,
    spec: &IftSpec,
    loss: &LossSpec,
) -> Result<(f64, GradientBundle, SolveReport<Matrix>)> {
    let out = ift_evaluate(model, batch, spec, loss, true)?;
    let grad = out.grad.expect("gradient requested");
    Ok((out.loss, grad, out.report))
}

/// Loss (with weight decay) at the equilibrium solved to `spec.tol_fwd`.
pub fn equilibrium_loss(model: &DeepOptEqModel, batch: &Dataset, spec: &IftSpec, loss: &LossSpec) -> Result<f64> {
    ift_evaluate(model, batch, spec, loss, false).map(|o| o.loss)
}
