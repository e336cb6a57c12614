//! Rewriting a feedforward network `z_{k+1} = σ(W_k z_k + U_k x + b_k)` in
//! the unit-layer form `z̄_{k+1} = W̄_kᵀσ(W̄_k z̄_k + U_k x + b_k)` by
//! factoring every `W_k = W̄_k W̄_{k−1}ᵀ` through a common width `m`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::tensors::{orthonormal_complement, svd, Matrix, Vector};

/// Given `W_1, …, W_L` (`W_k` is `n_k × n_{k−1}`), returns
/// `W̄_0, …, W̄_L` (`W̄_k` is `n_k × m`, full row rank) with
/// `W_k = W̄_k W̄_{k−1}ᵀ`. Requires `m ≥ 2 max n_k`.
pub fn universal_factorize(w_seq: &[Matrix], m: usize, seed: u64) -> Result<Vec<Matrix>> {
    let first = w_seq
        .first()
        .ok_or_else(|| Error::invalid("W_seq", "need at least one matrix"))?;
    let mut widths = vec![first.cols()];
    for (k, w) in w_seq.iter().enumerate() {
        if w.cols() != widths[k] {
            return Err(Error::dim("W_seq chain", widths[k], w.cols()));
        }
        widths.push(w.rows());
    }
    let widest = *widths.iter().max().unwrap_or(&0);
    if m < 2 * widest {
        return Err(Error::invalid(
            "width",
            format!("m = {m} must be at least twice the widest layer ({widest})"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut bars = Vec::with_capacity(w_seq.len() + 1);
    bars.push(full_row_rank(widths[0], m, &mut rng)?);
    for w in w_seq {
        let next = factor_step(&bars[bars.len() - 1], w, &mut rng)?;
        bars.push(next);
    }
    Ok(bars)
}

fn full_row_rank(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    loop {
        let a = Matrix::random_normal(rows, cols, rng);
        let s = svd(&a)?.s;
        if s[rows - 1] > 1e-6 * s[0] {
            return Ok(a);
        }
    }
}

/// Solves `Wᵀ = A Bᵀ` for a full-rank `B` given a full-row-rank `A`, and
/// returns `B`. With `A = UΣVᵀ`, `Bᵀ = [V V⊥] C` where the top rows of `C`
/// are `Σ⁻¹UᵀWᵀ` and the free rows are orthonormal columns scaled by the
/// smallest singular value, which makes `C` (hence `B`) full column rank.
fn factor_step(a: &Matrix, w: &Matrix, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let n_prev = a.rows();
    let n_next = w.rows();
    let m = a.cols();
    let d = svd(a)?;
    let omega = d.u.matmul_tn(&w.transpose());
    let top = Matrix::from_fn(n_prev, n_next, |i, j| omega[(i, j)] / d.s[i]);
    let v_perp = orthonormal_complement(&d.v);
    let free_rows = m - n_prev;
    let smin = d.s[n_prev - 1];
    let free = if n_next == 0 {
        Matrix::zeros(free_rows, 0)
    } else {
        svd(&Matrix::random_normal(free_rows, n_next, rng))?.u.scale(smin)
    };
    let bt = d.v.matmul(&top).add(&v_perp.matmul(&free));
    Ok(bt.transpose())
}

fn check_chain(ws: usize, us: &[Matrix], bs: &[Vector]) -> Result<()> {
    if us.len() + 1 != ws || bs.len() + 1 != ws {
        return Err(Error::invalid(
            "network",
            format!("{ws} weight matrices need {} input maps and biases", ws.saturating_sub(1)),
        ));
    }
    Ok(())
}

/// `y = W_L σ(W_{L−1} σ(⋯σ(W_1 z₀ + U_1 x + b_1)⋯) + U_{L−1} x + b_{L−1})`
pub fn dnn_forward(
    ws: &[Matrix],
    us: &[Matrix],
    bs: &[Vector],
    act: Activation,
    z0: &Vector,
    x: &Vector,
) -> Result<Vector> {
    check_chain(ws.len(), us, bs)?;
    let mut z = z0.clone();
    for k in 0..ws.len() - 1 {
        let pre = ws[k].matvec(&z).add(&us[k].matvec(x)).add(&bs[k]);
        z = pre.map(|a| act.apply(a));
    }
    Ok(ws[ws.len() - 1].matvec(&z))
}

/// The same network through the factors:
/// `z̄₀ = W̄₀ᵀz₀`, `z̄_k = W̄_kᵀσ(W̄_k z̄_{k−1} + U_k x + b_k)`, `y = W̄_L z̄_{L−1}`.
pub fn reformulated_forward(
    bars: &[Matrix],
    us: &[Matrix],
    bs: &[Vector],
    act: Activation,
    z0: &Vector,
    x: &Vector,
) -> Result<Vector> {
    if bars.len() < 2 {
        return Err(Error::invalid("factors", "need at least two factors"));
    }
    check_chain(bars.len() - 1, us, bs)?;
    let mut z = bars[0].matvec_t(z0);
    for k in 1..bars.len() - 1 {
        let pre = bars[k].matvec(&z).add(&us[k - 1].matvec(x)).add(&bs[k - 1]);
        z = bars[k].matvec_t(&pre.map(|a| act.apply(a)));
    }
    Ok(bars[bars.len() - 1].matvec(&z))
}
