//! Fixed-point solvers: Picard iteration and the regularized SAM iteration
//! `zᵏ = β_k S_{λ_k}(zᵏ⁻¹) + (1 − β_k) T(zᵏ⁻¹)` with
//! `S_λ(z) = (1 − γλ) z − γ ∇R(z)`, which converges to the minimizer of `R`
//! over the fixed-point set of a nonexpansive `T`.
//!
//! Both work on a single feature vector or on a batch matrix (one sample per
//! column); batch-coupled regularizers need the latter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::Regularizer;
use crate::tensors::{Matrix, Vector};

/// A point the solvers can iterate on.
pub trait Iterate: Clone {
    fn norm(&self) -> f64;
    fn distance(&self, other: &Self) -> f64;
    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self;
    fn to_matrix(&self) -> Matrix;
    fn from_matrix(m: Matrix) -> Self;
}

impl Iterate for Vector {
    fn norm(&self) -> f64 {
        Vector::norm(self)
    }

    fn distance(&self, other: &Self) -> f64 {
        Vector::distance(self, other)
    }

    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        Vector::lincomb(a, x, b, y)
    }

    fn to_matrix(&self) -> Matrix {
        self.to_column()
    }

    fn from_matrix(m: Matrix) -> Self {
        m.column(0)
    }
}

impl Iterate for Matrix {
    fn norm(&self) -> f64 {
        self.frobenius_norm()
    }

    fn distance(&self, other: &Self) -> f64 {
        self.sub(other).frobenius_norm()
    }

    fn lincomb(a: f64, x: &Self, b: f64, y: &Self) -> Self {
        Matrix::lincomb(a, x, b, y)
    }

    fn to_matrix(&self) -> Matrix {
        self.clone()
    }

    fn from_matrix(m: Matrix) -> Self {
        m
    }
}

/// `‖z − T(z)‖ / max(‖z‖, 1)`
pub fn relative_residual<I: Iterate>(z: &I, tz: &I) -> f64 {
    z.distance(tz) / z.norm().max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport<I = Vector> {
    pub z_star: I,
    /// Relative residual of `z_star` against `T`.
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Residual of each iterate before it was updated, when requested.
    pub trajectory: Option<Vec<f64>>,
}

/// Iterates `z ← T(z)` until the relative residual is at most `tol`.
/// Running out of iterations is reported through `converged`, not an error.
pub fn picard_solve<I, F>(
    t: F,
    z0: &I,
    tol: f64,
    max_iter: usize,
    record_trajectory: bool,
) -> Result<SolveReport<I>>
where
    I: Iterate,
    F: Fn(&I) -> Result<I>,
{
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let mut trajectory = record_trajectory.then(Vec::new);
    let mut z = z0.clone();
    for k in 0..max_iter {
        let tz = t(&z)?;
        let r = relative_residual(&z, &tz);
        if !r.is_finite() {
            return Err(Error::NonFinite {
                context: format!("Picard residual at iteration {k}"),
            });
        }
        if let Some(tr) = trajectory.as_mut() {
            tr.push(r);
        }
        if r <= tol {
            return Ok(SolveReport {
                z_star: z,
                residual: r,
                iterations: k,
                converged: true,
                trajectory,
            });
        }
        z = tz;
    }
    let r = relative_residual(&z, &t(&z)?);
    Ok(SolveReport {
        z_star: z,
        residual: r,
        iterations: max_iter,
        converged: r <= tol,
        trajectory,
    })
}

/// Step sizes of the SAM iteration: `β_k = η/k^ρ`, `λ_k = η/k^c` and the
/// gradient step `γ` of `S_λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamSchedule {
    pub eta: f64,
    pub rho: f64,
    pub c: f64,
    pub gamma: f64,
    /// Lipschitz constant of `∇R`.
    pub lz: f64,
}

impl SamSchedule {
    pub const DEFAULT_RHO: f64 = 0.2;
    pub const DEFAULT_C: f64 = 0.3;

    /// Largest admissible `η = min(√(2L), L/2, 1/2)`.
    pub fn max_eta(lz: f64) -> f64 {
        (2.0 * lz).sqrt().min(lz / 2.0).min(0.5)
    }

    /// Default exponents, `η` at its upper bound and `γ = 1/(2L)`.
    pub fn new(lz: f64) -> Result<Self> {
        if !(lz > 0.0 && lz.is_finite()) {
            return Err(Error::invalid("lz", "gradient Lipschitz constant must be positive"));
        }
        let s = Self {
            eta: Self::max_eta(lz),
            rho: Self::DEFAULT_RHO,
            c: Self::DEFAULT_C,
            gamma: 1.0 / (2.0 * lz),
            lz,
        };
        s.validate()?;
        Ok(s)
    }

    /// Schedule for `reg`, which must have a Lipschitz gradient.
    pub fn for_regularizer(reg: &Regularizer) -> Result<Self> {
        match reg.gradient_lipschitz() {
            Some(l) if l > 0.0 => Self::new(l),
            _ => Err(Error::Unsupported(format!(
                "{} has no Lipschitz gradient; SAM needs one",
                reg.name()
            ))),
        }
    }

    /// `β ≡ 0`: the iteration is plain Picard.
    pub fn disabled() -> Self {
        Self {
            eta: 0.0,
            rho: Self::DEFAULT_RHO,
            c: Self::DEFAULT_C,
            gamma: 0.5,
            lz: 1.0,
        }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn with_exponents(mut self, rho: f64, c: f64) -> Self {
        self.rho = rho;
        self.c = c;
        self
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.c > 0.0 && self.rho + 2.0 * self.c < 1.0) {
            return Err(Error::invalid(
                "schedule",
                format!("need rho > 0, c > 0, rho + 2c < 1 (rho={}, c={})", self.rho, self.c),
            ));
        }
        if !(self.lz > 0.0 && self.lz.is_finite()) {
            return Err(Error::invalid("schedule", "lz must be positive"));
        }
        let cap = Self::max_eta(self.lz);
        if !(self.eta >= 0.0 && self.eta <= cap * (1.0 + 1e-12)) {
            return Err(Error::invalid(
                "schedule",
                format!("eta = {} outside [0, {cap}]", self.eta),
            ));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid("schedule", "gamma must be positive"));
        }
        Ok(())
    }

    pub fn beta(&self, k: usize) -> f64 {
        self.eta / (k as f64).powf(self.rho)
    }

    pub fn lambda(&self, k: usize) -> f64 {
        self.eta / (k as f64).powf(self.c)
    }
}

/// Runs `k_steps` SAM steps from `z0`. The reported residual is measured
/// against `T` alone. With `η = 0` the path is exactly Picard's.
pub fn sam_solve<I, F>(
    t: F,
    reg: &Regularizer,
    sched: &SamSchedule,
    z0: &I,
    k_steps: usize,
    record_trajectory: bool,
) -> Result<SolveReport<I>>
where
    I: Iterate,
    F: Fn(&I) -> Result<I>,
{
    sched.validate()?;
    if k_steps == 0 {
        return Err(Error::invalid("K", "must be at least 1"));
    }
    let mut trajectory = record_trajectory.then(Vec::new);
    let mut z = z0.clone();
    for k in 1..=k_steps {
        let tz = t(&z)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(relative_residual(&z, &tz));
        }
        let beta = sched.beta(k);
        if beta == 0.0 {
            z = tz;
            continue;
        }
        let lam = sched.lambda(k);
        let grad = I::from_matrix(reg.grad(&z.to_matrix())?);
        let s = I::lincomb(1.0 - sched.gamma * lam, &z, -sched.gamma, &grad);
        z = I::lincomb(beta, &s, 1.0 - beta, &tz);
    }
    let residual = relative_residual(&z, &t(&z)?);
    if !residual.is_finite() {
        return Err(Error::NonFinite {
            context: "SAM iterate".into(),
        });
    }
    Ok(SolveReport {
        z_star: z,
        residual,
        iterations: k_steps,
        converged: true,
        trajectory,
    })
}

/// `R(z) − min_p R(p)` over sampled fixed points `p` of `T`: how far `z` is
/// from being the regularizer-minimal fixed point among the samples.
pub fn selection_gap<F>(t: F, reg: &Regularizer, z: &Vector, oracle_points: &[Vector]) -> Result<f64>
where
    F: Fn(&Vector) -> Result<Vector>,
{
    if oracle_points.is_empty() {
        return Err(Error::invalid("oracle_points", "must be nonempty"));
    }
    let mut best = f64::INFINITY;
    for (i, p) in oracle_points.iter().enumerate() {
        let r = relative_residual(p, &t(p)?);
        if r > 1e-8 {
            return Err(Error::invalid(
                "oracle_points",
                format!("point {i} is not a fixed point (residual {r:.3e})"),
            ));
        }
        best = best.min(reg.value_vec(p)?);
    }
    Ok(reg.value_vec(z)? - best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: &[f64]) -> Vector {
        Vector::from_vec(x.to_vec())
    }

    fn relu(z: &Vector) -> Result<Vector> {
        Ok(z.map(|a| a.max(0.0)))
    }

    /// Orthogonal projection onto the line z₂ = z₁.
    fn diag_projection(z: &Vector) -> Result<Vector> {
        let m = 0.5 * (z[0] + z[1]);
        Ok(v(&[m, m]))
    }

    #[test]
    fn picard_linear_fixed_point() {
        let r = picard_solve(|z: &Vector| Ok(z.map(|a| 0.25 * a + 0.5)), &v(&[0.0]), 1e-12, 1000, false).unwrap();
        assert!(r.converged);
        assert!((r.z_star[0] - 2.0 / 3.0).abs() < 1e-11);
    }

    #[test]
    fn picard_relu_one_step() {
        let r = picard_solve(relu, &v(&[-1.0, 2.0]), 1e-12, 10, false).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.z_star.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn picard_geometric_rate() {
        // averaged map with W = 0, α = 0.8: z ← 0.2 z
        let tol = 1e-10;
        let r = picard_solve(|z: &Vector| Ok(z.scale(0.2)), &v(&[5.0]), tol, 1000, true).unwrap();
        assert!(r.converged);
        // residual of z is 0.8|z|/max(|z|,1); counts the steps to bring it under tol
        let mut z: f64 = 5.0;
        let mut k = 0;
        while 0.8 * z / z.max(1.0) > tol {
            z *= 0.2;
            k += 1;
        }
        assert_eq!(r.iterations, k);
        let expected = ((tol / 5.0).ln() / 0.2f64.ln()).ceil() as usize;
        assert!(r.iterations.abs_diff(expected) <= 1, "{} vs {expected}", r.iterations);
        let tr = r.trajectory.unwrap();
        for w in tr.windows(2).skip(1) {
            assert!(w[1] <= 0.2 * w[0] + 1e-12);
        }
    }

    #[test]
    fn picard_reports_non_convergence() {
        let r = picard_solve(|z: &Vector| Ok(z.scale(-1.0)), &v(&[1.0]), 1e-8, 20, false).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 20);
        assert!(picard_solve(relu, &v(&[1.0]), 0.0, 20, false).is_err());
    }

    #[test]
    fn schedule_validation() {
        let s = SamSchedule::new(1.0).unwrap();
        assert_eq!(s.eta, 0.5);
        assert_eq!(s.gamma, 0.5);
        assert!(s.with_exponents(0.5, 0.3).validate().is_err());
        assert!(s.with_eta(0.6).validate().is_err());
        assert!(SamSchedule::for_regularizer(&Regularizer::L1 { lambda: 1.0 }).is_err());
        let err = sam_solve(relu, &Regularizer::SquaredL2 { lambda: 1.0 }, &s.with_exponents(0.6, 0.3), &v(&[1.0]), 5, false);
        assert!(err.is_err());
    }

    #[test]
    fn sam_disabled_is_picard_bit_for_bit() {
        let t = |z: &Vector| Ok(z.map(|a| (0.7 * a + 0.3).tanh()));
        let z0 = v(&[3.0, -1.0]);
        let k = 37;
        let sam = sam_solve(t, &Regularizer::SquaredL2 { lambda: 1.0 }, &SamSchedule::disabled(), &z0, k, true).unwrap();
        let pic = picard_solve(t, &z0, 1e-300, k, true).unwrap();
        assert_eq!(sam.z_star, pic.z_star);
        assert_eq!(sam.trajectory, pic.trajectory);
        assert_eq!(sam.residual, pic.residual);
    }

    fn shifted_l2(c: Vector) -> impl Fn(&Vector) -> Result<Vector> {
        move |z: &Vector| Ok(z.sub(&c))
    }

    /// SAM with R(z) = ½‖z − c‖², written through a shifted iterate so the
    /// regularizer is the library's squared_l2.
    fn sam_shifted(
        t: impl Fn(&Vector) -> Result<Vector>,
        c: &Vector,
        eta: f64,
        k: usize,
    ) -> Vector {
        let shift = shifted_l2(c.clone());
        let tt = |y: &Vector| shift(&t(&y.add(c))?);
        let sched = SamSchedule::new(1.0).unwrap().with_eta(eta);
        let y0 = shift(&Vector::zeros(c.dim())).unwrap();
        let r = sam_solve(tt, &Regularizer::SquaredL2 { lambda: 1.0 }, &sched, &y0, k, false).unwrap();
        r.z_star.add(c)
    }

    #[test]
    fn sam_selects_orthant_projection_of_c() {
        let c = v(&[-1.0, 2.0]);
        let z = sam_shifted(relu, &c, 0.01, 100_000);
        assert!(z.distance(&v(&[0.0, 2.0])) < 1e-3, "{z:?}");
    }

    #[test]
    fn sam_selects_min_norm_point_on_line() {
        let sched = SamSchedule::new(1.0).unwrap().with_eta(0.01);
        let r = sam_solve(diag_projection, &Regularizer::SquaredL2 { lambda: 1.0 }, &sched, &v(&[3.0, -1.0]), 100_000, false).unwrap();
        assert!(r.z_star.norm() < 1e-3, "{:?}", r.z_star);
    }

    #[test]
    fn selection_gap_certificates() {
        let c = v(&[-1.0, 2.0]);
        let reg_at = |z: &Vector| 0.5 * z.distance(&c).powi(2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let samples: Vec<Vector> = (0..1000)
            .map(|_| v(&[rng.random_range(0.0..4.0), rng.random_range(0.0..4.0)]))
            .collect();
        let z = sam_shifted(relu, &c, 0.01, 100_000);
        // selection_gap measures with the library regularizer; evaluate on shifted points
        let reg = Regularizer::SquaredL2 { lambda: 1.0 };
        let shifted: Vec<Vector> = samples.iter().map(|p| p.sub(&c)).collect();
        let t_shift = |y: &Vector| Ok(relu(&y.add(&c))?.sub(&c));
        let gap = selection_gap(t_shift, &reg, &z.sub(&c), &shifted).unwrap();
        assert!(gap <= 1e-4, "{gap}");
        let far = v(&[3.0, 0.0]);
        let gap_far = selection_gap(t_shift, &reg, &far.sub(&c), &shifted).unwrap();
        assert!(gap_far > 0.0);
        assert!((reg.value_vec(&far.sub(&c)).unwrap() - reg_at(&far)).abs() < 1e-12);

        let single = [v(&[2.0 / 3.0])];
        let t1 = |z: &Vector| Ok(z.map(|a| 0.25 * a + 0.5));
        let pic = picard_solve(t1, &v(&[0.0]), 1e-14, 1000, false).unwrap();
        let gap1 = selection_gap(t1, &reg, &pic.z_star, &single).unwrap();
        assert!(gap1.abs() < 1e-12);
        assert!(selection_gap(relu, &reg, &far, &[v(&[-1.0, 0.0])]).is_err());
    }

    #[test]
    fn batch_iterates() {
        let z0 = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]);
        let r = picard_solve(|z: &Matrix| Ok(z.scale(0.5)), &z0, 1e-12, 200, false).unwrap();
        assert!(r.converged);
        assert!(r.z_star.max_abs() < 1e-11);
    }
}
