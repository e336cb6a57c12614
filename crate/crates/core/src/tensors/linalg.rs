use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Matrix, Vector};
use crate::error::{Error, Result};

/// Largest dimension accepted by the dense factorizations.
pub const MAX_FACTOR_DIM: usize = 64;

const JACOBI_MAX_SWEEPS: usize = 100;
const RESTART_SEED: u64 = 0x5eed_0f5a_1d00;

/// Largest singular value by power iteration on `AᵀA`.
///
/// Starts from the normalized all-ones vector. If the converged estimate is
/// provably below `σ_max` (smaller than `‖A‖_F / √rank`), the start vector was
/// deficient in the top singular direction and the iteration restarts from a
/// seeded random vector.
pub fn spectral_norm(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("a", "empty matrix"));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("tol", "must be positive"));
    }
    let fro = a.frobenius_norm();
    if fro == 0.0 {
        return Ok(0.0);
    }
    let n = a.cols();
    let start = Vector::filled(n, 1.0 / (n as f64).sqrt());
    let sigma = power_iterate(a, start, tol, max_iter)?;
    let lower_bound = fro / (a.rows().min(a.cols()) as f64).sqrt();
    if sigma >= lower_bound * (1.0 - 1e-12) {
        return Ok(sigma);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let v = Vector::random_normal(n, &mut rng);
    let v = v.scale(1.0 / v.norm());
    let restarted = power_iterate(a, v, tol, max_iter)?;
    Ok(restarted.max(sigma))
}

fn power_iterate(a: &Matrix, mut v: Vector, tol: f64, max_iter: usize) -> Result<f64> {
    let mut sigma = a.matvec(&v).norm();
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let w = a.matvec_t(&a.matvec(&v));
        let wn = w.norm();
        if wn == 0.0 {
            return Ok(0.0);
        }
        v = w.scale(1.0 / wn);
        let next = a.matvec(&v).norm();
        change = (next - sigma).abs();
        sigma = next;
        if change <= tol * sigma {
            return Ok(sigma);
        }
    }
    Err(Error::NonConvergence {
        what: "spectral_norm power iteration",
        iterations: max_iter,
        last_change: change,
        last_iterate: Some(v),
    })
}

/// Thin singular value decomposition `A = U · diag(S) · Vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// rows × k, orthonormal columns
    pub u: Matrix,
    /// k singular values, descending
    pub s: Vector,
    /// cols × k, orthonormal columns
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.u.cols(), |i, j| self.u[(i, j)] * self.s[j]);
        us.matmul_nt(&self.v)
    }
}

/// One-sided Jacobi SVD, `k = min(rows, cols) ≤ 64`.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.is_empty() {
        return Err(Error::invalid("a", "empty matrix"));
    }
    if a.rows().min(a.cols()) > MAX_FACTOR_DIM {
        return Err(Error::invalid(
            "a",
            format!("min dimension {} exceeds {MAX_FACTOR_DIM}", a.rows().min(a.cols())),
        ));
    }
    if a.rows() < a.cols() {
        let t = jacobi_tall(&a.transpose());
        return Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        });
    }
    Ok(jacobi_tall(a))
}

fn jacobi_tall(a: &Matrix) -> Svd {
    let (r, c) = a.shape();
    // Work on columns stored contiguously.
    let mut cols: Vec<Vec<f64>> = (0..c).map(|j| a.column(j).into_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..c).map(|j| Vector::basis(c, j).into_vec()).collect();
    let eps = f64::EPSILON;

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..c {
            for q in (p + 1)..c {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for k in 0..r {
                        al += cp[k] * cp[k];
                        be += cq[k] * cq[k];
                        ga += cp[k] * cq[k];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                rotate_pair(&mut cols, p, q, cs, sn);
                rotate_pair(&mut vcols, p, q, cs, sn);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, col)| (col.iter().map(|x| x * x).sum::<f64>().sqrt(), j))
        .collect();
    order.sort_by(|x, y| y.0.total_cmp(&x.0));

    let smax = order.first().map_or(0.0, |o| o.0);
    let cutoff = smax * (r.max(c) as f64) * eps;
    let mut u = Matrix::zeros(r, c);
    let mut v = Matrix::zeros(c, c);
    let mut s = Vector::zeros(c);
    let mut rank = 0;
    for (k, &(sigma, j)) in order.iter().enumerate() {
        s[k] = sigma;
        for i in 0..c {
            v[(i, k)] = vcols[j][i];
        }
        if sigma > cutoff && sigma > 0.0 {
            for i in 0..r {
                u[(i, k)] = cols[j][i] / sigma;
            }
            rank += 1;
        }
    }
    if rank < c {
        // Columns of U belonging to (numerically) zero singular values are
        // undetermined; complete them to an orthonormal set.
        let basis = u.block(0, 0, r, rank);
        let comp = orthonormal_complement(&basis);
        for k in rank..c {
            for i in 0..r {
                u[(i, k)] = comp[(i, k - rank)];
            }
        }
    }
    Svd { u, s, v }
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, cs: f64, sn: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = cs * a - sn * b;
        *y = sn * a + cs * b;
    }
}

/// Orthonormal basis of the orthogonal complement of the column span of
/// `q` (which must have orthonormal columns). Returns `n × (n − k)`.
pub fn orthonormal_complement(q: &Matrix) -> Matrix {
    let n = q.rows();
    let k = q.cols();
    let mut basis: Vec<Vector> = q.columns();
    let mut out = Vec::with_capacity(n.saturating_sub(k));
    let mut candidates: Vec<usize> = (0..n).collect();
    while basis.len() < n {
        // Greedily take the standard basis vector with the largest residual.
        let mut best: Option<(f64, usize, Vector)> = None;
        for &i in &candidates {
            let mut r = Vector::basis(n, i);
            for _ in 0..2 {
                for b in &basis {
                    let d = r.dot(b);
                    r.axpy(-d, b);
                }
            }
            let nr = r.norm();
            if best.as_ref().map_or(true, |(bn, _, _)| nr > *bn) {
                best = Some((nr, i, r));
            }
        }
        let Some((nr, i, r)) = best else { break };
        if nr < 1e-8 {
            break;
        }
        candidates.retain(|&c| c != i);
        let r = r.scale(1.0 / nr);
        basis.push(r.clone());
        out.push(r);
    }
    Matrix::from_fn(n, out.len(), |i, j| out[j][i])
}

/// Eigenvalues of a symmetric matrix (ascending), cyclic Jacobi.
///
/// Only the upper triangle is read; the input is symmetrized first.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vector> {
    if !a.is_square() {
        return Err(Error::dim("symmetric_eigenvalues", "square", format!("{:?}", a.shape())));
    }
    let n = a.rows();
    if n > MAX_FACTOR_DIM {
        return Err(Error::invalid("a", format!("dimension {n} exceeds {MAX_FACTOR_DIM}")));
    }
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        let diag: f64 = (0..n).map(|i| m[(i, i)] * m[(i, i)]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(Vector::from_vec(ev))
}

/// `σ_max / σ_min`; infinite for rank-deficient input.
pub fn condition_number(a: &Matrix) -> Result<f64> {
    let d = svd(a)?;
    let smax = d.s[0];
    let smin = d.s[d.s.dim() - 1];
    Ok(if smin == 0.0 { f64::INFINITY } else { smax / smin })
}

/// Uniformly rescales `w` so that `‖w‖₂ ≤ bound`; feasible input is returned
/// unchanged.
pub fn spectral_project(w: &Matrix, bound: f64) -> Matrix {
    assert!(bound > 0.0, "spectral_project bound must be positive");
    if w.is_empty() {
        return w.clone();
    }
    let sigma = if w.rows().min(w.cols()) <= MAX_FACTOR_DIM {
        svd(w).map(|d| d.s[0]).unwrap_or(f64::INFINITY)
    } else {
        match spectral_norm(w, 1e-12, 100_000) {
            Ok(s) => s,
            Err(Error::NonConvergence {
                last_iterate: Some(v),
                ..
            }) => w.matvec(&v).norm(),
            Err(_) => f64::INFINITY,
        }
    };
    if sigma <= bound {
        w.clone()
    } else {
        w.scale(bound / sigma)
    }
}

/// The `mL × mL` cyclic block permutation: block row 0 holds `I` in the last
/// block column, block row `i ≥ 1` holds `I` in block column `i − 1`.
pub fn block_permutation(blocks: usize, m: usize) -> Matrix {
    assert!(blocks >= 1 && m >= 1, "block_permutation needs L >= 1 and m >= 1");
    let n = blocks * m;
    let mut p = Matrix::zeros(n, n);
    for i in 0..blocks {
        let src = if i == 0 { blocks - 1 } else { i - 1 };
        for k in 0..m {
            p[(i * m + k, src * m + k)] = 1.0;
        }
    }
    p
}

pub fn block_diagonal(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.iter().map(|b| b.rows()).sum();
    let cols = blocks.iter().map(|b| b.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let (mut r0, mut c0) = (0, 0);
    for b in blocks {
        out.set_block(r0, c0, b);
        r0 += b.rows();
        c0 += b.cols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::random_normal(rows, cols, &mut rng)
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        q.matmul_tn(q).sub(&Matrix::identity(q.cols())).max_abs()
    }

    #[test]
    fn spectral_norm_trivial_cases() {
        let i3 = Matrix::identity(3);
        assert!((spectral_norm(&i3, 1e-12, 1000).unwrap() - 1.0).abs() < 1e-12);
        let a = Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]);
        assert!((spectral_norm(&a, 1e-12, 1000).unwrap() - 2.0).abs() < 1e-12);
        assert_eq!(spectral_norm(&Matrix::zeros(2, 3), 1e-12, 10).unwrap(), 0.0);
    }

    #[test]
    fn spectral_norm_restarts_when_start_vector_misses_top_direction() {
        // ones/√2 is orthogonal to the top right-singular vector (1,-1)/√2.
        let a = Matrix::from_rows(&[vec![3.0, -3.0], vec![0.5, 0.5]]);
        let s = spectral_norm(&a, 1e-13, 10_000).unwrap();
        assert!((s - 18f64.sqrt()).abs() < 1e-10, "{s}");
    }

    #[test]
    fn spectral_norm_matches_svd_on_seeded_matrix() {
        let a = seeded(5, 4, 11);
        let s = spectral_norm(&a, 1e-14, 100_000).unwrap();
        let d = svd(&a).unwrap();
        assert!((s - d.s[0]).abs() < 1e-8 * d.s[0]);
    }

    #[test]
    fn spectral_norm_reports_nonconvergence() {
        let a = seeded(6, 6, 3);
        match spectral_norm(&a, 1e-300, 2) {
            Err(Error::NonConvergence {
                last_iterate: Some(v),
                iterations: 2,
                ..
            }) => assert_eq!(v.dim(), 6),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn svd_diagonal_and_zero() {
        let d = svd(&Matrix::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(d.s.as_slice(), &[3.0, 1.0]);
        let z = svd(&Matrix::zeros(3, 2)).unwrap();
        assert!(z.s.iter().all(|&x| x == 0.0));
        assert!(orthonormality_error(&z.u) < 1e-12);
    }

    #[test]
    fn svd_wide_seeded_reconstructs() {
        let a = seeded(4, 6, 5);
        let d = svd(&a).unwrap();
        let err = d.reconstruct().sub(&a).frobenius_norm();
        assert!(err <= 1e-10 * a.frobenius_norm(), "{err}");
        assert!(orthonormality_error(&d.u) < 1e-10);
        assert!(orthonormality_error(&d.v) < 1e-10);
        assert!(d.s.as_slice().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn svd_rank_deficient_keeps_orthonormal_u() {
        let x = seeded(5, 1, 8);
        let a = x.matmul_nt(&x); // rank one, 5x5
        let d = svd(&a).unwrap();
        assert!(orthonormality_error(&d.u) < 1e-10);
        assert!(d.reconstruct().sub(&a).frobenius_norm() < 1e-10 * a.frobenius_norm());
    }

    #[test]
    fn svd_dimension_guard() {
        assert!(svd(&Matrix::zeros(65, 65)).is_err());
        assert!(svd(&Matrix::zeros(0, 0)).is_err());
    }

    #[test]
    fn spectral_project_cases() {
        let w = Matrix::diag(&[0.5, 0.2]);
        assert_eq!(spectral_project(&w, 1.0), w);
        let two_i = Matrix::identity(3).scale(2.0);
        assert!(spectral_project(&two_i, 1.0).max_abs_diff(&Matrix::identity(3)) < 1e-15);
        let r = seeded(6, 4, 21).scale(3.0);
        let p = spectral_project(&r, 1.0);
        assert!(spectral_norm(&p, 1e-14, 100_000).unwrap() <= 1.0 + 1e-9);
    }

    #[test]
    fn block_permutation_shapes() {
        let p = block_permutation(2, 1);
        assert_eq!(p, Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]));
        assert_eq!(block_permutation(1, 3), Matrix::identity(3));
        let p = block_permutation(3, 2);
        assert!(p.matmul_nt(&p).sub(&Matrix::identity(6)).frobenius_norm() < 1e-12);
        let p3 = p.matmul(&p).matmul(&p);
        assert_eq!(p3, Matrix::identity(6));
    }

    #[test]
    fn symmetric_eigenvalues_known() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let ev = symmetric_eigenvalues(&a).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn complement_spans_rest() {
        let q = Matrix::from_rows(&[vec![1.0], vec![0.0], vec![0.0]]);
        let c = orthonormal_complement(&q);
        assert_eq!(c.shape(), (3, 2));
        assert!(q.matmul_tn(&c).max_abs() < 1e-14);
        assert!(orthonormality_error(&c) < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn spectral_norm_agrees_with_svd(rows in 1usize..7, cols in 1usize..7, seed in 0u64..1000) {
            let a = seeded(rows, cols, seed);
            let s = spectral_norm(&a, 1e-15, 1_000_000).unwrap();
            let d = svd(&a).unwrap();
            prop_assert!((s - d.s[0]).abs() <= 1e-8 * d.s[0].max(1.0));
            let recon = d.reconstruct().sub(&a).frobenius_norm();
            prop_assert!(recon <= 1e-10 * a.frobenius_norm().max(1e-300));
        }

        #[test]
        fn spectral_project_idempotent(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000, scale in 0.1f64..4.0) {
            let w = seeded(rows, cols, seed).scale(scale);
            let once = spectral_project(&w, 1.0);
            let twice = spectral_project(&once, 1.0);
            prop_assert!(twice.max_abs_diff(&once) <= 1e-12);
        }

        #[test]
        fn block_permutation_orthogonal(l in 1usize..6, m in 1usize..5) {
            let p = block_permutation(l, m);
            prop_assert!(p.matmul_nt(&p).sub(&Matrix::identity(l * m)).frobenius_norm() < 1e-12);
        }
    }
}
