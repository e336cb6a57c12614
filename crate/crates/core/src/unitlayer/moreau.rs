//! Convex potentials, their proximal points and Moreau envelopes
//! `M^μ_φ(x) = min_u φ(u) + ‖u − x‖²/(2μ)`.

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::tensors::{svd, Matrix, Vector};

use super::{LayerParams, UnitLayerConfig, MAX_CONDITION};

/// Stopping rule for the inner minimization behind a prox point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    /// Tolerance on the gradient-mapping norm.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

/// A proper convex function split as `smooth + nonsmooth`, where the
/// nonsmooth part has a cheap prox (often an indicator).
pub trait ConvexPotential {
    fn dim(&self) -> usize;

    fn smooth_value(&self, u: &Vector) -> f64;

    fn smooth_grad(&self, u: &Vector) -> Vector;

    fn nonsmooth_value(&self, _u: &Vector) -> f64 {
        0.0
    }

    /// `prox_{step·g}(u)` for the nonsmooth part `g`.
    fn prox_nonsmooth(&self, u: &Vector, _step: f64) -> Vector {
        u.clone()
    }

    fn value(&self, u: &Vector) -> f64 {
        let ns = self.nonsmooth_value(u);
        if ns == f64::INFINITY {
            return f64::INFINITY;
        }
        self.smooth_value(u) + ns
    }

    /// `prox_{μφ}(x)`. The default runs [`proximal_gradient`]; potentials
    /// with exploitable structure override it.
    fn prox_point(&self, x: &Vector, mu: f64, opts: &InnerOptions) -> Result<Vector> {
        proximal_gradient(self, x, mu, opts)
    }
}

/// Minimizes `φ(u) + ‖u − x‖²/(2μ)` by proximal gradient with backtracking.
pub fn proximal_gradient<P: ConvexPotential + ?Sized>(
    phi: &P,
    x: &Vector,
    mu: f64,
    opts: &InnerOptions,
) -> Result<Vector> {
    if !(mu > 0.0) {
        return Err(Error::invalid("mu", "must be positive"));
    }
    if x.dim() != phi.dim() {
        return Err(Error::dim("x", phi.dim(), x.dim()));
    }
    let objective = |u: &Vector| phi.smooth_value(u) + u.distance(x).powi(2) / (2.0 * mu);
    let gradient = |u: &Vector| phi.smooth_grad(u).add(&u.sub(x).scale(1.0 / mu));

    let mut u = phi.prox_nonsmooth(x, mu);
    let mut t = mu;
    let mut best = (f64::INFINITY, u.clone());
    for _ in 0..opts.max_iter {
        let g = gradient(&u);
        let fu = objective(&u);
        let slack = 1e-13 * (1.0 + fu.abs());
        let (cand, d) = loop {
            let cand = phi.prox_nonsmooth(&u.sub(&g.scale(t)), t);
            let d = cand.sub(&u);
            let bound = fu + g.dot(&d) + d.dot(&d) / (2.0 * t) + slack;
            if objective(&cand) <= bound || t < 1e-18 {
                break (cand, d);
            }
            t *= 0.5;
        };
        let mapping = d.norm() / t;
        if mapping < best.0 {
            best = (mapping, cand.clone());
        }
        if mapping <= opts.tol {
            return Ok(cand);
        }
        u = cand;
        t *= 1.5;
    }
    Err(Error::NonConvergence {
        what: "proximal-gradient inner solve",
        iterations: opts.max_iter,
        last_change: best.0,
        last_iterate: Some(best.1),
    })
}

/// Envelope value and the minimizer `prox_{μφ}(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MoreauEval {
    pub value: f64,
    pub prox_point: Vector,
}

impl MoreauEval {
    /// `∇M^μ_φ(x) = (x − prox_{μφ}(x))/μ`
    pub fn gradient(&self, x: &Vector, mu: f64) -> Vector {
        x.sub(&self.prox_point).scale(1.0 / mu)
    }
}

pub fn moreau_envelope(
    phi: &dyn ConvexPotential,
    mu: f64,
    x: &Vector,
    opts: &InnerOptions,
) -> Result<MoreauEval> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::invalid("mu", "must be positive"));
    }
    let prox_point = phi.prox_point(x, mu, opts)?;
    let value = phi.value(&prox_point) + prox_point.distance(x).powi(2) / (2.0 * mu);
    Ok(MoreauEval { value, prox_point })
}

/// `(scale/2)‖u‖²`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SquaredNorm {
    pub dim: usize,
    pub scale: f64,
}

impl ConvexPotential for SquaredNorm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn smooth_value(&self, u: &Vector) -> f64 {
        0.5 * self.scale * u.dot(u)
    }

    fn smooth_grad(&self, u: &Vector) -> Vector {
        u.scale(self.scale)
    }
}

/// Indicator of the nonnegative orthant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonnegIndicator {
    pub dim: usize,
}

impl ConvexPotential for NonnegIndicator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn smooth_value(&self, _u: &Vector) -> f64 {
        0.0
    }

    fn smooth_grad(&self, u: &Vector) -> Vector {
        Vector::zeros(u.dim())
    }

    fn nonsmooth_value(&self, u: &Vector) -> f64 {
        if u.iter().all(|&v| v >= 0.0) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    fn prox_nonsmooth(&self, u: &Vector, _step: f64) -> Vector {
        u.map(|v| v.max(0.0))
    }
}

/// `φ(u) = 1ᵀσ̃*(W⁻ᵀu) − ⟨c, W⁻ᵀu⟩ − ½‖u‖²` with `c = Ux + b`, the convex
/// potential whose prox is the unit layer when `W` is square and invertible.
///
/// Working in the latent variable `v = W⁻ᵀu` turns the prox problem into a
/// well-conditioned, bound-constrained quadratic, which is what
/// [`ConvexPotential::prox_point`] does here.
#[derive(Debug, Clone)]
pub struct PhiClosedForm {
    w: Matrix,
    w_inv_t: Matrix,
    c: Vector,
    slope: f64,
    norm: f64,
    condition: f64,
}

impl PhiClosedForm {
    pub fn new(w: &Matrix, c: &Vector, activation: Activation) -> Result<Self> {
        let slope = match activation {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) if s <= 1.0 => s,
            Activation::LeakyRelu(s) => {
                return Err(Error::Unsupported(format!(
                    "closed-form potential needs leaky_relu slope <= 1, got {s}"
                )))
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "closed-form potential needs a conjugate antiderivative, {other} has none"
                )))
            }
        };
        if !w.is_square() {
            return Err(Error::invalid("W", format!("must be square, got {:?}", w.shape())));
        }
        if c.dim() != w.rows() {
            return Err(Error::dim("Ux + b", w.rows(), c.dim()));
        }
        let d = svd(w)?;
        let smin = d.s[d.s.dim() - 1];
        let condition = if smin > 0.0 { d.s[0] / smin } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::Singular { condition });
        }
        // W⁻ᵀ = U diag(1/s) Vᵀ
        let n = w.rows();
        let scaled_u = Matrix::from_fn(n, n, |i, j| d.u[(i, j)] / d.s[j]);
        let w_inv_t = scaled_u.matmul_nt(&d.v);
        Ok(Self {
            w: w.clone(),
            w_inv_t,
            c: c.clone(),
            slope,
            norm: d.s[0],
            condition,
        })
    }

    /// Potential of one layer at input `x`; requires `μ = 1`.
    pub fn from_layer(p: &LayerParams, cfg: &UnitLayerConfig, x: &Vector) -> Result<Self> {
        cfg.validate()?;
        if cfg.mu != 1.0 {
            return Err(Error::invalid("mu", "closed-form potential is defined for mu = 1"));
        }
        if !cfg.activation.has_conjugate() {
            return Err(Error::Unsupported(format!(
                "closed-form potential needs a conjugate antiderivative, {} has none",
                cfg.activation
            )));
        }
        Self::new(p.w(), &p.offset(x)?, cfg.activation)
    }

    fn barrier(&self) -> bool {
        self.slope == 0.0
    }

    fn latent(&self, u: &Vector) -> Vector {
        self.w_inv_t.matvec(u)
    }

    fn conj(&self, v: f64) -> f64 {
        if v >= 0.0 || self.barrier() {
            0.5 * v * v
        } else {
            0.5 * v * v / self.slope
        }
    }

    fn conj_grad(&self, v: f64) -> f64 {
        if v >= 0.0 || self.barrier() {
            v
        } else {
            v / self.slope
        }
    }

    /// Round-off in `W⁻ᵀu` grows with the condition number; components this
    /// close to zero count as on the boundary.
    fn domain_slack(&self, v: &Vector) -> f64 {
        1e-13 * self.condition * v.norm_inf().max(1.0)
    }

    /// `φ` expressed in the latent variable, `v ≥ 0` assumed for ReLU.
    pub fn latent_value(&self, v: &Vector) -> f64 {
        let wt_v = self.w.matvec_t(v);
        v.iter().map(|&a| self.conj(a)).sum::<f64>() - self.c.dot(v) - 0.5 * wt_v.dot(&wt_v)
    }
}

impl ConvexPotential for PhiClosedForm {
    fn dim(&self) -> usize {
        self.w.rows()
    }

    fn smooth_value(&self, u: &Vector) -> f64 {
        let v = self.latent(u);
        v.iter().map(|&a| self.conj(a)).sum::<f64>() - self.c.dot(&v) - 0.5 * u.dot(u)
    }

    fn smooth_grad(&self, u: &Vector) -> Vector {
        let v = self.latent(u);
        let inner = v.map(|a| self.conj_grad(a)).sub(&self.c);
        self.w_inv_t.matvec_t(&inner).sub(u)
    }

    fn nonsmooth_value(&self, u: &Vector) -> f64 {
        if !self.barrier() {
            return 0.0;
        }
        let v = self.latent(u);
        let slack = self.domain_slack(&v);
        if v.iter().all(|&a| a >= -slack) {
            0.0
        } else {
            f64::INFINITY
        }
    }

    /// For ReLU: projection onto the cone `{Wᵀp : p ≥ 0}`, computed as a
    /// nonnegative least-squares problem by accelerated projected gradient.
    fn prox_nonsmooth(&self, u: &Vector, _step: f64) -> Vector {
        if !self.barrier() {
            return u.clone();
        }
        let lip = self.norm * self.norm;
        let mut p = self.latent(u).map(|a| a.max(0.0));
        let mut y = p.clone();
        let mut t = 1.0_f64;
        for _ in 0..200_000 {
            let grad = self.w.matvec(&self.w.matvec_t(&y).sub(u));
            let next = y.sub(&grad.scale(1.0 / lip)).map(|a| a.max(0.0));
            let change = next.distance(&p);
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            // restart momentum when it points uphill
            let uphill = next.sub(&p).dot(&y.sub(&next)) > 0.0;
            y = if uphill {
                t = 1.0;
                next.clone()
            } else {
                let y = next.add(&next.sub(&p).scale((t - 1.0) / t_next));
                t = t_next;
                y
            };
            p = next;
            if change <= 1e-15 * p.norm().max(1.0) {
                break;
            }
        }
        self.w.matvec_t(&p)
    }

    fn value(&self, u: &Vector) -> f64 {
        let mut v = self.latent(u);
        if self.barrier() {
            let slack = self.domain_slack(&v);
            if v.iter().any(|&a| a < -slack) {
                return f64::INFINITY;
            }
            v = v.map(|a| a.max(0.0));
        }
        v.iter().map(|&a| self.conj(a)).sum::<f64>() - self.c.dot(&v) - 0.5 * u.dot(u)
    }

    /// Projected gradient on the latent problem
    /// `min_v Σσ̃*(v) − ⟨c, v⟩ − ½‖Wᵀv‖² + ‖Wᵀv − x‖²/(2μ)`, whose Hessian is
    /// at least `I + (1/μ − 1)WWᵀ`.
    fn prox_point(&self, x: &Vector, mu: f64, opts: &InnerOptions) -> Result<Vector> {
        if x.dim() != self.dim() {
            return Err(Error::dim("x", self.dim(), x.dim()));
        }
        if !(mu > 0.0) {
            return Err(Error::invalid("mu", "must be positive"));
        }
        let curvature = if self.barrier() { 1.0 } else { 1.0 / self.slope };
        let lip = curvature.max(1.0) + self.norm * self.norm * (1.0 / mu - 1.0).abs();
        let step = 1.0 / lip;
        let wx = self.w.matvec(x).scale(1.0 / mu);
        let project = |v: Vector| if self.barrier() { v.map(|a| a.max(0.0)) } else { v };

        let mut v = project(self.latent(x));
        let max_iter = opts.max_iter.max(100_000);
        let mut change = f64::INFINITY;
        for _ in 0..max_iter {
            let wwv = self.w.matvec(&self.w.matvec_t(&v));
            let grad = v
                .map(|a| self.conj_grad(a))
                .sub(&self.c)
                .add(&wwv.scale(1.0 / mu - 1.0))
                .sub(&wx);
            let next = project(v.sub(&grad.scale(step)));
            change = next.distance(&v);
            v = next;
            if change <= 1e-15 * v.norm().max(1.0) {
                return Ok(self.w.matvec_t(&v));
            }
        }
        if change * lip <= opts.tol {
            return Ok(self.w.matvec_t(&v));
        }
        Err(Error::NonConvergence {
            what: "latent prox solve",
            iterations: max_iter,
            last_change: change,
            last_iterate: Some(self.w.matvec_t(&v)),
        })
    }
}
