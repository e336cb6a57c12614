//! Feature regularizers `R_z` over a batch of features `Z` (`m × B`, one
//! sample per column). A single feature vector is the `m × 1` case.
//!
//! `l1`, `squared_l2` and `inverse_norm` are separable over samples;
//! `decorrelation` and `hsic` couple the rows across the batch and need
//! `B ≥ 2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{Matrix, Vector};

/// Bandwidth rule for the Gaussian kernel inside HSIC.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise distance of the samples, recomputed per call.
    #[default]
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Regularizer {
    /// `λ Σ |zᵢ|`
    L1 { lambda: f64 },
    /// `(λ/2) ‖Z‖²_F`
    SquaredL2 { lambda: f64 },
    /// `Σⱼ 1/(‖zⱼ‖² + ε)` over samples.
    InverseNorm {
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
    /// `½‖D Z Zᵀ D − I‖²_F` with `D` the inverse row norms.
    Decorrelation,
    /// Sum of HSIC over all pairs of feature rows.
    Hsic {
        #[serde(default)]
        bandwidth: Bandwidth,
    },
}

fn default_epsilon() -> f64 {
    1e-2
}

const ROW_NORM_FLOOR: f64 = 1e-12;

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::L1 { lambda } | Regularizer::SquaredL2 { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::invalid("lambda", "must be finite and >= 0"));
                }
            }
            Regularizer::InverseNorm { epsilon } => {
                if !(epsilon > 0.0 && epsilon.is_finite()) {
                    return Err(Error::invalid("epsilon", "must be positive"));
                }
            }
            Regularizer::Hsic {
                bandwidth: Bandwidth::Fixed(s),
            } => {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::invalid("bandwidth", "must be positive"));
                }
            }
            _ => {}
        }
        Ok(())
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::L1 { .. } => "l1",
            Regularizer::SquaredL2 { .. } => "squared_l2",
            Regularizer::InverseNorm { .. } => "inverse_norm",
            Regularizer::Decorrelation => "decorrelation",
            Regularizer::Hsic { .. } => "hsic",
        }
    }

    /// Only these two carry the convergence guarantee of regularized
    /// fixed-point selection; the others are accepted without one.
    pub fn is_convex(&self) -> bool {
        matches!(self, Regularizer::L1 { .. } | Regularizer::SquaredL2 { .. })
    }

    /// Global Lipschitz constant of the gradient, where one exists.
    pub fn gradient_lipschitz(&self) -> Option<f64> {
        match *self {
            Regularizer::SquaredL2 { lambda } => Some(lambda),
            Regularizer::InverseNorm { epsilon } => Some(2.0 / (epsilon * epsilon)),
            _ => None,
        }
    }

    pub fn has_prox(&self) -> bool {
        matches!(self, Regularizer::L1 { .. } | Regularizer::SquaredL2 { .. })
    }

    /// Decorrelation and HSIC couple the samples of a batch.
    pub fn is_batch_coupled(&self) -> bool {
        matches!(self, Regularizer::Decorrelation | Regularizer::Hsic { .. })
    }

    fn check_batch(&self, z: &Matrix) -> Result<()> {
        if self.is_batch_coupled() && z.cols() < 2 {
            return Err(Error::invalid(
                "Z",
                format!("{} needs a batch of at least 2 samples, got {}", self.name(), z.cols()),
            ));
        }
        if matches!(self, Regularizer::Hsic { .. }) && z.rows() < 2 {
            return Err(Error::invalid("Z", "hsic needs at least 2 feature rows"));
        }
        Ok(())
    }

    pub fn value(&self, z: &Matrix) -> Result<f64> {
        self.check_batch(z)?;
        Ok(match *self {
            Regularizer::L1 { lambda } => lambda * z.as_slice().iter().map(|v| v.abs()).sum::<f64>(),
            Regularizer::SquaredL2 { lambda } => 0.5 * lambda * z.frobenius_dot(z),
            Regularizer::InverseNorm { epsilon } => (0..z.cols())
                .map(|j| 1.0 / (column_sq_norm(z, j) + epsilon))
                .sum(),
            Regularizer::Decorrelation => {
                let n = row_normalize(z).0;
                let c = n.matmul_nt(&n).sub(&Matrix::identity(z.rows()));
                0.5 * c.frobenius_dot(&c)
            }
            Regularizer::Hsic { bandwidth } => hsic_pairwise_with(z, bandwidth),
        })
    }

    pub fn value_vec(&self, z: &Vector) -> Result<f64> {
        self.value(&z.to_column())
    }

    /// Gradient with respect to `Z`; `l1` has none and errors.
    pub fn grad(&self, z: &Matrix) -> Result<Matrix> {
        self.check_batch(z)?;
        match *self {
            Regularizer::L1 { .. } => Err(Error::Unsupported(
                "l1 is nonsmooth; use its prox instead of a gradient".into(),
            )),
            Regularizer::SquaredL2 { lambda } => Ok(z.scale(lambda)),
            Regularizer::InverseNorm { epsilon } => {
                let mut g = Matrix::zeros(z.rows(), z.cols());
                for j in 0..z.cols() {
                    let s = column_sq_norm(z, j) + epsilon;
                    g.set_column(j, &z.column(j).scale(-2.0 / (s * s)));
                }
                Ok(g)
            }
            Regularizer::Decorrelation => Ok(decorrelation_grad(z)),
            Regularizer::Hsic { bandwidth } => Ok(hsic_pairwise_grad(z, bandwidth)),
        }
    }

    pub fn grad_vec(&self, z: &Vector) -> Result<Vector> {
        Ok(self.grad(&z.to_column())?.column(0))
    }

    /// Hessian-vector product `∇²R(Z)[V]`, available for the regularizers
    /// with a closed-form Hessian.
    pub fn hvp(&self, z: &Matrix, v: &Matrix) -> Result<Matrix> {
        match *self {
            Regularizer::SquaredL2 { lambda } => Ok(v.scale(lambda)),
            Regularizer::InverseNorm { epsilon } => {
                let mut out = Matrix::zeros(z.rows(), z.cols());
                for j in 0..z.cols() {
                    let zj = z.column(j);
                    let vj = v.column(j);
                    let s = zj.dot(&zj) + epsilon;
                    let hv = Vector::lincomb(-2.0 / (s * s), &vj, 8.0 * zj.dot(&vj) / (s * s * s), &zj);
                    out.set_column(j, &hv);
                }
                Ok(out)
            }
            _ => Err(Error::Unsupported(format!(
                "no Hessian-vector product for {}",
                self.name()
            ))),
        }
    }

    /// `prox_{step·R}(Z)` for `l1` (soft threshold) and `squared_l2` (shrink).
    pub fn prox(&self, z: &Matrix, step: f64) -> Result<Matrix> {
        if !(step > 0.0) {
            return Err(Error::invalid("step", "must be positive"));
        }
        match *self {
            Regularizer::L1 { lambda } => {
                let t = step * lambda;
                Ok(z.map(|v| v.signum() * (v.abs() - t).max(0.0)))
            }
            Regularizer::SquaredL2 { lambda } => Ok(z.scale(1.0 / (1.0 + step * lambda))),
            _ => Err(Error::Unsupported(format!("{} has no closed-form prox", self.name()))),
        }
    }

    pub fn prox_vec(&self, z: &Vector, step: f64) -> Result<Vector> {
        Ok(self.prox(&z.to_column(), step)?.column(0))
    }
}

fn column_sq_norm(z: &Matrix, j: usize) -> f64 {
    (0..z.rows()).map(|i| z[(i, j)] * z[(i, j)]).sum()
}

/// Rows scaled to unit norm, plus the (floored) row norms.
fn row_normalize(z: &Matrix) -> (Matrix, Vec<f64>) {
    let norms: Vec<f64> = (0..z.rows())
        .map(|i| z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt().max(ROW_NORM_FLOOR))
        .collect();
    let n = Matrix::from_fn(z.rows(), z.cols(), |i, j| z[(i, j)] / norms[i]);
    (n, norms)
}

fn decorrelation_grad(z: &Matrix) -> Matrix {
    let (n, norms) = row_normalize(z);
    let c = n.matmul_nt(&n).sub(&Matrix::identity(z.rows()));
    let gn = c.matmul(&n).scale(2.0);
    let mut g = Matrix::zeros(z.rows(), z.cols());
    for i in 0..z.rows() {
        let ni = n.row(i);
        let gi = gn.row(i);
        let proj: f64 = ni.iter().zip(gi).map(|(a, b)| a * b).sum();
        for j in 0..z.cols() {
            g[(i, j)] = (gi[j] - proj * ni[j]) / norms[i];
        }
    }
    g
}

/// Median of the pairwise distances between columns, with the pair(s)
/// realizing it (two pairs when the count is even).
fn median_distance(x: &Matrix) -> (f64, Vec<(usize, usize)>) {
    let b = x.cols();
    let mut pairs: Vec<(f64, usize, usize)> = Vec::with_capacity(b * (b - 1) / 2);
    for p in 0..b {
        for q in (p + 1)..b {
            pairs.push((column_distance(x, p, q), p, q));
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let k = pairs.len();
    if k % 2 == 1 {
        let (d, p, q) = pairs[k / 2];
        (d, vec![(p, q)])
    } else {
        let (d1, p1, q1) = pairs[k / 2 - 1];
        let (d2, p2, q2) = pairs[k / 2];
        (0.5 * (d1 + d2), vec![(p1, q1), (p2, q2)])
    }
}

fn column_distance(x: &Matrix, p: usize, q: usize) -> f64 {
    (0..x.rows())
        .map(|i| (x[(i, p)] - x[(i, q)]).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Resolved bandwidth, and whether it came from the data (so it moves with it).
fn resolve_bandwidth(x: &Matrix, bandwidth: Bandwidth) -> (f64, Option<Vec<(usize, usize)>>) {
    match bandwidth {
        Bandwidth::Fixed(s) => (s, None),
        Bandwidth::Median => {
            let (d, pairs) = median_distance(x);
            if d > 0.0 {
                (d, Some(pairs))
            } else {
                (1.0, None)
            }
        }
    }
}

fn gaussian_gram(x: &Matrix, sigma: f64) -> Matrix {
    let b = x.cols();
    let mut k = Matrix::zeros(b, b);
    for p in 0..b {
        k[(p, p)] = 1.0;
        for q in (p + 1)..b {
            let d = column_distance(x, p, q);
            let v = (-d * d / (2.0 * sigma * sigma)).exp();
            k[(p, q)] = v;
            k[(q, p)] = v;
        }
    }
    k
}

/// `HKH` with `H = I − 11ᵀ/B`.
fn center(k: &Matrix) -> Matrix {
    let b = k.rows();
    let bf = b as f64;
    let row_means: Vec<f64> = (0..b).map(|i| k.row(i).iter().sum::<f64>() / bf).collect();
    let total = row_means.iter().sum::<f64>() / bf;
    // K is symmetric, so column means equal row means.
    Matrix::from_fn(b, b, |i, j| k[(i, j)] - row_means[i] - row_means[j] + total)
}

fn centered_gram(x: &Matrix, bandwidth: Bandwidth) -> Matrix {
    let (sigma, _) = resolve_bandwidth(x, bandwidth);
    center(&gaussian_gram(x, sigma))
}

/// Biased HSIC estimate `tr(K_X H K_Y H)/(B − 1)²` between `X` (`p × B`)
/// and `Y` (`q × B`) with Gaussian kernels.
pub fn hsic_value(x: &Matrix, y: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(Error::dim("Y columns", x.cols(), y.cols()));
    }
    if x.cols() < 2 {
        return Err(Error::invalid("X", "hsic needs a batch of at least 2 samples"));
    }
    let kx = centered_gram(x, bandwidth);
    let ky = centered_gram(y, bandwidth);
    Ok(centered_trace(&kx, &ky, x.cols()))
}

// tr(K_X H K_Y H) = ⟨HK_XH, HK_YH⟩_F, which is symmetric in its arguments
// term by term.
fn centered_trace(kx: &Matrix, ky: &Matrix, b: usize) -> f64 {
    let denom = ((b - 1) * (b - 1)) as f64;
    kx.frobenius_dot(ky) / denom
}

/// `Σ_{i<j} HSIC(Z_i,:, Z_j,:)`
pub fn hsic_pairwise_penalty(z: &Matrix, bandwidth: Bandwidth) -> Result<f64> {
    Regularizer::Hsic { bandwidth }.value(z)
}

fn row_matrix(z: &Matrix, i: usize) -> Matrix {
    Matrix::from_vec(1, z.cols(), z.row(i).to_vec())
}

fn hsic_pairwise_with(z: &Matrix, bandwidth: Bandwidth) -> f64 {
    let grams: Vec<Matrix> = (0..z.rows())
        .map(|i| centered_gram(&row_matrix(z, i), bandwidth))
        .collect();
    let mut total = 0.0;
    for i in 0..z.rows() {
        for j in (i + 1)..z.rows() {
            total += centered_trace(&grams[i], &grams[j], z.cols());
        }
    }
    total
}

/// Gradient of the pairwise penalty, including the dependence of a median
/// bandwidth on the data (it is locally one distance, or the mean of two).
fn hsic_pairwise_grad(z: &Matrix, bandwidth: Bandwidth) -> Matrix {
    let m = z.rows();
    let b = z.cols();
    let denom = ((b - 1) * (b - 1)) as f64;
    let rows: Vec<Matrix> = (0..m).map(|i| row_matrix(z, i)).collect();
    let bw: Vec<(f64, Option<Vec<(usize, usize)>>)> =
        rows.iter().map(|r| resolve_bandwidth(r, bandwidth)).collect();
    let grams: Vec<Matrix> = rows
        .iter()
        .zip(&bw)
        .map(|(r, (s, _))| gaussian_gram(r, *s))
        .collect();
    let centered: Vec<Matrix> = grams.iter().map(center).collect();

    let mut sum_centered = Matrix::zeros(b, b);
    for c in &centered {
        sum_centered.axpy(1.0, c);
    }

    let mut g = Matrix::zeros(m, b);
    for i in 0..m {
        // dR/dK_i = Σ_{j≠i} H K_j H / (B−1)²
        let gk = sum_centered.sub(&centered[i]).scale(1.0 / denom);
        let k = &grams[i];
        let (sigma, median_pairs) = &bw[i];
        let s2 = sigma * sigma;
        let zi = z.row(i);
        let mut dsigma = 0.0;
        for p in 0..b {
            for q in 0..b {
                if p == q {
                    continue;
                }
                let diff = zi[p] - zi[q];
                let w = gk[(p, q)] * k[(p, q)];
                // entry (p,q) and (q,p) both depend on z_p; the q-loop covers both
                g[(i, p)] += -2.0 * w * diff / s2;
                dsigma += w * diff * diff / (s2 * sigma);
            }
        }
        if let Some(pairs) = median_pairs {
            let share = dsigma / pairs.len() as f64;
            for &(p, q) in pairs {
                let diff = zi[p] - zi[q];
                let d = diff.abs();
                if d > 0.0 {
                    g[(i, p)] += share * diff / d;
                    g[(i, q)] -= share * diff / d;
                }
            }
        }
    }
    g
}
