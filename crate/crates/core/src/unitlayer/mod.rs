//! The equilibrium unit layer `f(z) = (1/μ) Wᵀσ(Wz + Ux + b)`.
//!
//! When `μ ≥ L̃_σ‖W‖₂²` the layer is the proximal operator of a convex
//! function `φ = ψ* − ½‖·‖²` with `ψ(z) = (1/μ) 1ᵀσ̃(Wz + Ux + b)`, so
//! `∇ψ = f` and a fixed point of `f` minimizes `φ`. This module evaluates
//! both potentials, the Moreau-averaged form, and sampling checks of the
//! prox characterization (symmetric PSD Jacobian, nonexpansiveness).

mod moreau;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::tensors::{spectral_norm, svd, symmetric_eigenvalues, Matrix, Vector};

pub use moreau::{
    moreau_envelope, proximal_gradient, ConvexPotential, InnerOptions, MoreauEval,
    NonnegIndicator, PhiClosedForm, SquaredNorm,
};

/// Condition-number ceiling above which `W` is treated as singular.
pub const MAX_CONDITION: f64 = 1e8;

/// One layer's `(W, U, b)` with a cached spectral norm of `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    w: Matrix,
    u: Matrix,
    b: Vector,
    certified_norm: f64,
}

impl LayerParams {
    /// `w: n × m`, `u: n × d`, `b: n`.
    pub fn new(w: Matrix, u: Matrix, b: Vector) -> Result<Self> {
        if u.rows() != w.rows() {
            return Err(Error::dim("U rows", w.rows(), u.rows()));
        }
        if b.dim() != w.rows() {
            return Err(Error::dim("b", w.rows(), b.dim()));
        }
        if !(w.is_finite() && u.is_finite() && b.is_finite()) {
            return Err(Error::NonFinite {
                context: "layer parameters".into(),
            });
        }
        let certified_norm = operator_norm(&w);
        Ok(Self {
            w,
            u,
            b,
            certified_norm,
        })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn b(&self) -> &Vector {
        &self.b
    }

    /// `‖W‖₂`, recomputed on every mutation.
    pub fn certified_norm(&self) -> f64 {
        self.certified_norm
    }

    /// Number of units `n`.
    pub fn units(&self) -> usize {
        self.w.rows()
    }

    /// Hidden width `m`.
    pub fn hidden_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn input_dim(&self) -> usize {
        self.u.cols()
    }

    pub fn set_w(&mut self, w: Matrix) -> Result<()> {
        if w.shape() != self.w.shape() {
            return Err(Error::dim("W", format!("{:?}", self.w.shape()), format!("{:?}", w.shape())));
        }
        self.certified_norm = operator_norm(&w);
        self.w = w;
        Ok(())
    }

    pub fn set_u(&mut self, u: Matrix) -> Result<()> {
        if u.shape() != self.u.shape() {
            return Err(Error::dim("U", format!("{:?}", self.u.shape()), format!("{:?}", u.shape())));
        }
        self.u = u;
        Ok(())
    }

    pub fn set_b(&mut self, b: Vector) -> Result<()> {
        if b.dim() != self.b.dim() {
            return Err(Error::dim("b", self.b.dim(), b.dim()));
        }
        self.b = b;
        Ok(())
    }

    /// `Ux + b`, the input-dependent offset shared by every evaluation at `x`.
    pub fn offset(&self, x: &Vector) -> Result<Vector> {
        if x.dim() != self.u.cols() {
            return Err(Error::dim("x", self.u.cols(), x.dim()));
        }
        Ok(self.u.matvec(x).add(&self.b))
    }

    /// `Wz + Ux + b`
    pub fn pre_activation(&self, z: &Vector, x: &Vector) -> Result<Vector> {
        if z.dim() != self.w.cols() {
            return Err(Error::dim("z", self.w.cols(), z.dim()));
        }
        Ok(self.w.matvec(z).add(&self.offset(x)?))
    }

    /// Batched pre-activation; `z` is `m × B`, `ux` is `(U·X)` of shape `n × B`.
    pub(crate) fn pre_activation_batch(&self, z: &Matrix, ux: &Matrix) -> Matrix {
        self.w.matmul(z).add(ux).add_column_broadcast(&self.b)
    }
}

fn operator_norm(w: &Matrix) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    match svd(w) {
        Ok(d) => d.s[0],
        Err(_) => spectral_norm(w, 1e-12, 100_000).unwrap_or(f64::INFINITY),
    }
}

/// `μ`, `α` and the activation of a unit layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitLayerConfig {
    pub mu: f64,
    pub alpha: f64,
    pub activation: Activation,
}

impl UnitLayerConfig {
    pub fn new(activation: Activation) -> Self {
        Self {
            mu: 1.0,
            alpha: 1.0,
            activation,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    /// Basic range checks: `μ > 0`, `0 < α ≤ 1`.
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::invalid("mu", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::invalid("alpha", format!("{} not in (0, 1]", self.alpha)));
        }
        Ok(())
    }

    /// `μ ≥ L̃_σ‖W‖₂²`, the condition under which `f` is a proximal operator.
    pub fn satisfies_prox_condition(&self, p: &LayerParams) -> bool {
        self.mu + 1e-12 >= self.activation.lipschitz() * p.certified_norm().powi(2)
    }
}

/// `(1/μ) Wᵀσ(Wz + Ux + b)`
pub fn unit_forward(p: &LayerParams, cfg: &UnitLayerConfig, z: &Vector, x: &Vector) -> Result<Vector> {
    cfg.validate()?;
    let pre = p.pre_activation(z, x)?;
    let act = pre.map(|a| cfg.activation.apply(a));
    Ok(p.w.matvec_t(&act).scale(1.0 / cfg.mu))
}

/// `α · unit_forward(z) + (1 − α) z`; same fixed points as [`unit_forward`].
pub fn averaged_forward(p: &LayerParams, cfg: &UnitLayerConfig, z: &Vector, x: &Vector) -> Result<Vector> {
    let f = unit_forward(p, cfg, z, x)?;
    Ok(Vector::lincomb(cfg.alpha, &f, 1.0 - cfg.alpha, z))
}

/// `ψ(z) = (1/μ) Σᵢ σ̃((Wz + Ux + b)ᵢ)`; its gradient is [`unit_forward`].
pub fn psi_value(p: &LayerParams, cfg: &UnitLayerConfig, z: &Vector, x: &Vector) -> Result<f64> {
    cfg.validate()?;
    let pre = p.pre_activation(z, x)?;
    Ok(pre.iter().map(|&a| cfg.activation.antiderivative(a)).sum::<f64>() / cfg.mu)
}

/// Closed-form `φ(z) = 1ᵀσ̃*(W⁻ᵀz) − ⟨Ux + b, W⁻ᵀz⟩ − ½‖z‖²` for square
/// invertible `W`, piecewise-linear `σ` and `μ = 1`. Returns `+∞` outside
/// the domain.
pub fn phi_closed_form(p: &LayerParams, cfg: &UnitLayerConfig, z: &Vector, x: &Vector) -> Result<f64> {
    let phi = PhiClosedForm::from_layer(p, cfg, x)?;
    if z.dim() != phi.dim() {
        return Err(Error::dim("z", phi.dim(), z.dim()));
    }
    Ok(phi.value(z))
}

/// Outcome of [`prox_characterization_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProxCheckReport {
    /// `max |J − Jᵀ|` over sampled finite-difference Jacobians.
    pub max_jacobian_asymmetry: f64,
    /// Largest sampled `‖f(y) − f(y′)‖ / ‖y − y′‖`.
    pub max_expansion: f64,
    /// Extreme eigenvalues of the symmetrized Jacobians.
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub samples: usize,
}

impl ProxCheckReport {
    /// Symmetric, PSD, eigenvalues at most `1 + tol`, nonexpansive.
    pub fn is_prox(&self, tol: f64) -> bool {
        self.max_jacobian_asymmetry <= tol
            && self.min_eigenvalue >= -tol
            && self.max_eigenvalue <= 1.0 + tol
            && self.max_expansion <= 1.0 + tol
    }
}

const FD_STEP: f64 = 1e-5;
const KINK_MARGIN: f64 = 1e-3;

/// Numerically checks that `z ↦ unit_forward(z)` is a gradient of a convex
/// function (symmetric PSD Jacobian) and nonexpansive, at `samples` seeded
/// points. Jacobians come from central differences, not from the analytic
/// derivative used by training.
pub fn prox_characterization_check(
    p: &LayerParams,
    cfg: &UnitLayerConfig,
    x: &Vector,
    samples: usize,
    seed: u64,
) -> Result<ProxCheckReport> {
    cfg.validate()?;
    let m = p.hidden_dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = |z: &Vector| unit_forward(p, cfg, z, x);

    let top_direction = svd(p.w())?.v.column(0);
    let mut report = ProxCheckReport {
        max_jacobian_asymmetry: 0.0,
        max_expansion: 0.0,
        min_eigenvalue: f64::INFINITY,
        max_eigenvalue: f64::NEG_INFINITY,
        samples,
    };

    for _ in 0..samples {
        // Finite differences are meaningless across a kink of σ.
        let mut z = Vector::random_normal(m, &mut rng).scale(2.0);
        if cfg.activation.has_kink() {
            for _ in 0..100 {
                let pre = p.pre_activation(&z, x)?;
                if pre.iter().all(|a| a.abs() > KINK_MARGIN) {
                    break;
                }
                z = Vector::random_normal(m, &mut rng).scale(2.0);
            }
        }

        let mut jac = Matrix::zeros(m, m);
        for j in 0..m {
            let e = Vector::basis(m, j).scale(FD_STEP);
            let col = f(&z.add(&e))?.sub(&f(&z.sub(&e))?).scale(0.5 / FD_STEP);
            jac.set_column(j, &col);
        }
        let asym = jac.sub(&jac.transpose()).max_abs();
        report.max_jacobian_asymmetry = report.max_jacobian_asymmetry.max(asym);
        let ev = symmetric_eigenvalues(&jac)?;
        report.min_eigenvalue = report.min_eigenvalue.min(ev[0]);
        report.max_eigenvalue = report.max_eigenvalue.max(ev[m - 1]);

        let fz = f(&z)?;
        let probes = [
            Vector::random_normal(m, &mut rng).scale(2.0),
            Vector::random_normal(m, &mut rng).scale(1e-3),
            top_direction.scale(1e-3),
        ];
        for d in probes {
            let y = z.add(&d);
            let dist = d.norm();
            if dist == 0.0 {
                continue;
            }
            let ratio = f(&y)?.distance(&fz) / dist;
            report.max_expansion = report.max_expansion.max(ratio);
        }
    }
    Ok(report)
}
