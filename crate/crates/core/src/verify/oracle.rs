//! Reference solvers that share no code with the library paths they check:
//! a generic accelerated projected gradient, dense elimination, and the
//! ReLU convex programs written directly in their dual (`p ≥ 0`) variables.

use crate::error::{Error, Result};
use crate::tensors::{symmetric_eigenvalues, Matrix, Vector};

/// Accelerated projected gradient with gradient-based restarts.
/// Stops when the projected step moves less than `tol`.
pub fn fista<G, P>(grad: G, project: P, x0: Vector, lipschitz: f64, tol: f64, max_iter: usize) -> Result<Vector>
where
    G: Fn(&Vector) -> Vector,
    P: Fn(&mut Vector),
{
    if !(lipschitz > 0.0 && lipschitz.is_finite()) {
        return Err(Error::invalid("lipschitz", "must be positive"));
    }
    let step = 1.0 / lipschitz;
    let mut x = x0.clone();
    project(&mut x);
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..max_iter {
        let mut next = Vector::lincomb(1.0, &y, -step, &grad(&y));
        project(&mut next);
        let moved = next.distance(&x);
        // restart momentum when it points uphill
        let uphill = y.sub(&next).dot(&next.sub(&x)) > 0.0;
        let t_next = if uphill { 1.0 } else { 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt()) };
        y = if uphill {
            next.clone()
        } else {
            Vector::lincomb(1.0 + (t - 1.0) / t_next, &next, -(t - 1.0) / t_next, &x)
        };
        x = next;
        t = t_next;
        if moved <= tol * x.norm().max(1.0) {
            return Ok(x);
        }
    }
    Err(Error::NonConvergence {
        what: "oracle projected gradient",
        iterations: max_iter,
        last_change: f64::NAN,
        last_iterate: Some(x),
    })
}

/// Largest Hessian eigenvalue of a quadratic given only its (affine)
/// gradient: columns `∇f(eᵢ) − ∇f(0)`.
pub fn quadratic_lipschitz<G: Fn(&Vector) -> Vector>(grad: G, dim: usize) -> Result<f64> {
    let g0 = grad(&Vector::zeros(dim));
    let cols: Vec<Vector> = (0..dim).map(|i| grad(&Vector::basis(dim, i)).sub(&g0)).collect();
    let h = Matrix::from_columns(&cols);
    let sym = Matrix::lincomb(0.5, &h, 0.5, &h.transpose());
    let eig = symmetric_eigenvalues(&sym)?;
    Ok(eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
}

/// `A x = b` by Gaussian elimination with partial pivoting.
pub fn gauss_solve(a: &Matrix, b: &Vector) -> Result<Vector> {
    let n = a.rows();
    if !a.is_square() || b.dim() != n {
        return Err(Error::dim("elimination system", n, b.dim()));
    }
    let mut m = a.clone();
    let mut rhs = b.clone();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap_or(col);
        if m[(pivot, col)].abs() < 1e-14 {
            return Err(Error::Singular { condition: f64::INFINITY });
        }
        if pivot != col {
            for k in 0..n {
                let tmp = m[(col, k)];
                m[(col, k)] = m[(pivot, k)];
                m[(pivot, k)] = tmp;
            }
            let tmp = rhs[col];
            rhs[col] = rhs[pivot];
            rhs[pivot] = tmp;
        }
        for i in col + 1..n {
            let f = m[(i, col)] / m[(col, col)];
            for k in col..n {
                m[(i, k)] -= f * m[(col, k)];
            }
            rhs[i] -= f * rhs[col];
        }
    }
    let mut x = Vector::zeros(n);
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| m[(i, k)] * x[k]).sum();
        x[i] = (rhs[i] - s) / m[(i, i)];
    }
    Ok(x)
}

/// `φ(u) = ½‖v‖² − ⟨c, v⟩ − ½‖u‖²` where `Wᵀv = u`, and `+∞` unless
/// `v ≥ 0` (ReLU, square invertible `W`).
pub fn relu_phi(w: &Matrix, c: &Vector, u: &Vector) -> Result<f64> {
    let v = gauss_solve(&w.transpose(), u)?;
    if v.iter().any(|&vi| vi < -1e-9 * v.norm_inf().max(1.0)) {
        return Ok(f64::INFINITY);
    }
    let v = v.map(|vi| vi.max(0.0));
    Ok(0.5 * v.dot(&v) - c.dot(&v) - 0.5 * u.dot(u))
}

fn project_nonneg(x: &mut Vector) {
    for v in x.as_mut_slice() {
        *v = v.max(0.0);
    }
}

/// `argmin_u ½‖u − z‖² + φ(u)` for the ReLU potential of `(W, c)`, solved
/// over `u = Wᵀv`, `v ≥ 0`.
pub fn relu_prox(w: &Matrix, c: &Vector, z: &Vector) -> Result<Vector> {
    let grad = |v: &Vector| {
        let wtv = w.matvec_t(v);
        // ∇[½‖Wᵀv − z‖² + ½‖v‖² − ⟨c,v⟩ − ½‖Wᵀv‖²]
        w.matvec(&wtv.sub(z)).add(v).sub(c).sub(&w.matvec(&wtv))
    };
    let l = quadratic_lipschitz(grad, w.rows())?;
    let v = fista(grad, project_nonneg, Vector::zeros(w.rows()), l, 1e-14, 200_000)?;
    Ok(w.matvec_t(&v))
}

/// Minimum over `(z₁, z₀, p₁ ≥ 0, p₂ ≥ 0)` of
/// `Σ α[½‖p‖² − ⟨c,p⟩ − ½‖Wᵀp‖² + ‖Wᵀp − z‖²/(2μ)] + ½‖z₁ − z₀‖²`,
/// `μ = 1 − α`, with block 1 on `z₁` and block 2 on `z₀`. Returns the value
/// and the minimizing `(z₁, z₀)`.
pub fn two_block_minimum(w1: &Matrix, c1: &Vector, w2: &Matrix, c2: &Vector, alpha: f64) -> Result<(f64, Vector, Vector)> {
    let m = w1.cols();
    let (n1, n2) = (w1.rows(), w2.rows());
    let mu = 1.0 - alpha;
    let split = |x: &Vector| {
        let s = x.as_slice();
        (
            Vector::from_vec(s[..m].to_vec()),
            Vector::from_vec(s[m..2 * m].to_vec()),
            Vector::from_vec(s[2 * m..2 * m + n1].to_vec()),
            Vector::from_vec(s[2 * m + n1..].to_vec()),
        )
    };
    let block = |w: &Matrix, c: &Vector, p: &Vector, z: &Vector| {
        let wtp = w.matvec_t(p);
        let r = wtp.sub(z);
        let value = alpha * (0.5 * p.dot(p) - c.dot(p) - 0.5 * wtp.dot(&wtp) + r.dot(&r) / (2.0 * mu));
        let gp = p.sub(c).sub(&w.matvec(&wtp)).add(&w.matvec(&r).scale(1.0 / mu)).scale(alpha);
        let gz = r.scale(-alpha / mu);
        (value, gp, gz)
    };
    let eval = |x: &Vector| {
        let (z1, z0, p1, p2) = split(x);
        let (v1, gp1, gz1) = block(w1, c1, &p1, &z1);
        let (v2, gp2, gz0) = block(w2, c2, &p2, &z0);
        let d = z1.sub(&z0);
        let value = v1 + v2 + 0.5 * d.dot(&d);
        let grad = Vector::concat(&[gz1.add(&d), gz0.sub(&d), gp1, gp2]);
        (value, grad)
    };
    let project = |x: &mut Vector| {
        for v in &mut x.as_mut_slice()[2 * m..] {
            *v = v.max(0.0);
        }
    };
    let dim = 2 * m + n1 + n2;
    let l = quadratic_lipschitz(|x| eval(x).1, dim)?;
    let x = fista(|x| eval(x).1, project, Vector::zeros(dim), l, 1e-13, 2_000_000)?;
    let (z1, z0, _, _) = split(&x);
    Ok((eval(&x).0, z1, z0))
}

/// The `y` minimizing `Σ_l [½‖p_l‖² − ⟨c_l + W_l y, p_l⟩] + (L/2)‖y‖²` over
/// `y` and `p_l ≥ 0`.
pub fn wide_minimizer(ws: &[Matrix], cs: &[Vector]) -> Result<Vector> {
    if ws.is_empty() || ws.len() != cs.len() {
        return Err(Error::invalid("wide oracle", "need one offset per layer"));
    }
    let m = ws[0].cols();
    let sizes: Vec<usize> = ws.iter().map(|w| w.rows()).collect();
    let l = ws.len() as f64;
    let grad = |x: &Vector| {
        let s = x.as_slice();
        let y = Vector::from_vec(s[..m].to_vec());
        let mut gy = y.scale(l);
        let mut parts = Vec::with_capacity(ws.len() + 1);
        let mut off = m;
        for ((w, c), &n) in ws.iter().zip(cs).zip(&sizes) {
            let p = Vector::from_vec(s[off..off + n].to_vec());
            gy = gy.sub(&w.matvec_t(&p));
            parts.push(p.sub(c).sub(&w.matvec(&y)));
            off += n;
        }
        parts.insert(0, gy);
        Vector::concat(&parts)
    };
    let project = |x: &mut Vector| {
        for v in &mut x.as_mut_slice()[m..] {
            *v = v.max(0.0);
        }
    };
    let dim = m + sizes.iter().sum::<usize>();
    let lip = quadratic_lipschitz(grad, dim)?;
    let x = fista(grad, project, Vector::zeros(dim), lip, 1e-13, 2_000_000)?;
    Ok(Vector::from_vec(x.as_slice()[..m].to_vec()))
}
