//! Deep OptEq: `z = T(z, x) = f_L ∘ … ∘ f_1(z)` with averaged unit layers
//! `f_l(z) = (α/μ) W_lᵀσ(W_l z + U_l x + b_l) + (1 − α) z`, a feature
//! extractor `x = g(x₀)` and a linear readout `y = W_{L+1} z`.
//!
//! Also here: the block lift of a deep equilibrium into one fixed point of
//! a block system, the wide one-layer limit, and the convex objectives the
//! equilibria minimize.

mod factorize;
mod objectives;

use crate::activations::Activation;
use crate::error::{Error, Result};
use crate::regularizers::Regularizer;
use crate::solvers::{picard_solve, relative_residual, SolveReport};
use crate::tensors::{block_diagonal, block_permutation, Matrix, Vector};
use crate::unitlayer::{averaged_forward, LayerParams, UnitLayerConfig};

pub use factorize::{dnn_forward, reformulated_forward, universal_factorize};
pub use objectives::{two_block_objective, wide_joint_objective};

/// `x = W₀ x₀`, optionally followed by an elementwise `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub weight: Matrix,
    pub tanh: bool,
}

impl Extractor {
    pub fn linear(weight: Matrix) -> Self {
        Self { weight, tanh: false }
    }

    pub fn identity(d: usize) -> Self {
        Self::linear(Matrix::identity(d))
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x0: &Vector) -> Result<Vector> {
        if x0.dim() != self.raw_dim() {
            return Err(Error::dim("x0", self.raw_dim(), x0.dim()));
        }
        let x = self.weight.matvec(x0);
        Ok(if self.tanh { x.map(f64::tanh) } else { x })
    }

    /// Columns of `x0` are samples.
    pub fn apply_batch(&self, x0: &Matrix) -> Result<Matrix> {
        if x0.rows() != self.raw_dim() {
            return Err(Error::dim("X0 rows", self.raw_dim(), x0.rows()));
        }
        let x = self.weight.matmul(x0);
        Ok(if self.tanh { x.map(f64::tanh) } else { x })
    }
}

/// A regularizer appended after the layers: `z ↦ T_R(T(z))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Structural {
    pub reg: Regularizer,
    pub gamma: f64,
}

impl Structural {
    /// `prox_{γR}` when `R` has one, otherwise a gradient step of size `γ`.
    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        if self.reg.has_prox() {
            self.reg.prox(z, self.gamma)
        } else {
            Ok(z.sub(&self.reg.grad(z)?.scale(self.gamma)))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepOptEqModel {
    extractor: Extractor,
    layers: Vec<LayerParams>,
    alpha: f64,
    mu: f64,
    activation: Activation,
    readout: Matrix,
    structural: Option<Structural>,
}

impl DeepOptEqModel {
    pub fn new(
        extractor: Extractor,
        layers: Vec<LayerParams>,
        alpha: f64,
        mu: f64,
        activation: Activation,
        readout: Matrix,
    ) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::invalid("layers", "a model needs at least one layer"))?;
        let m = first.hidden_dim();
        let d = extractor.feature_dim();
        for l in &layers {
            if l.hidden_dim() != m {
                return Err(Error::dim("layer hidden width", m, l.hidden_dim()));
            }
            if l.input_dim() != d {
                return Err(Error::dim("layer input width", d, l.input_dim()));
            }
        }
        if readout.cols() != m {
            return Err(Error::dim("readout columns", m, readout.cols()));
        }
        let model = Self {
            extractor,
            layers,
            alpha,
            mu,
            activation,
            readout,
            structural: None,
        };
        model.unit_config().validate()?;
        Ok(model)
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn readout(&self) -> &Matrix {
        &self.readout
    }

    pub fn structural(&self) -> Option<&Structural> {
        self.structural.as_ref()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layers[0].hidden_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.raw_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.readout.rows()
    }

    pub fn unit_config(&self) -> UnitLayerConfig {
        UnitLayerConfig {
            mu: self.mu,
            alpha: self.alpha,
            activation: self.activation,
        }
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        let mut m = self.clone();
        m.alpha = alpha;
        m.unit_config().validate()?;
        Ok(m)
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    pub(crate) fn extractor_mut(&mut self) -> &mut Extractor {
        &mut self.extractor
    }

    pub(crate) fn set_readout(&mut self, readout: Matrix) -> Result<()> {
        if readout.shape() != self.readout.shape() {
            return Err(Error::dim(
                "readout",
                format!("{:?}", self.readout.shape()),
                format!("{:?}", readout.shape()),
            ));
        }
        self.readout = readout;
        Ok(())
    }

    /// Every `‖W_l‖₂ ≤ 1` and at least one `‖W_l‖₂ ≤ ζ < 1`: the forward map
    /// is then a contraction and the equilibrium is unique.
    pub fn satisfies_assumptions(&self, zeta: f64) -> bool {
        let norms: Vec<f64> = self.layers.iter().map(|l| l.certified_norm()).collect();
        norms.iter().all(|&n| n <= 1.0 + 1e-12)
            && norms.iter().any(|&n| n <= zeta)
            && zeta < 1.0
            && self.mu + 1e-12 >= self.activation.lipschitz()
    }

    /// `T_{R} ∘ T` with the appended regularizer.
    pub fn append_structural_regularizer(&self, reg: Regularizer, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(Error::invalid("gamma", "must be positive"));
        }
        reg.validate()?;
        let mut m = self.clone();
        m.structural = Some(Structural { reg, gamma });
        Ok(m)
    }

    pub fn without_structural(&self) -> Self {
        let mut m = self.clone();
        m.structural = None;
        m
    }

    pub fn features(&self, x0: &Vector) -> Result<Vector> {
        self.extractor.apply(x0)
    }

    /// `f_l(z)` for layer index `l` (zero-based).
    pub fn layer_map(&self, l: usize, z: &Vector, x: &Vector) -> Result<Vector> {
        averaged_forward(&self.layers[l], &self.unit_config(), z, x)
    }

    /// `T(z, x)`; `x` is the extracted feature vector.
    pub fn forward_map(&self, z: &Vector, x: &Vector) -> Result<Vector> {
        let mut z = z.clone();
        for l in 0..self.layers.len() {
            z = self.layer_map(l, &z, x)?;
        }
        match &self.structural {
            Some(s) => Ok(s.apply(&z.to_column())?.column(0)),
            None => Ok(z),
        }
    }

    /// Batched `T`; columns of `z` (`m × B`) and `x` (`d × B`) are samples.
    pub fn forward_map_batch(&self, z: &Matrix, x: &Matrix) -> Result<Matrix> {
        if z.rows() != self.hidden_dim() {
            return Err(Error::dim("Z rows", self.hidden_dim(), z.rows()));
        }
        if x.rows() != self.feature_dim() || x.cols() != z.cols() {
            return Err(Error::dim(
                "X",
                format!("{} x {}", self.feature_dim(), z.cols()),
                format!("{} x {}", x.rows(), x.cols()),
            ));
        }
        let mut z = z.clone();
        for layer in &self.layers {
            let ux = layer.u().matmul(x);
            let pre = layer.pre_activation_batch(&z, &ux);
            let h = pre.map(|a| self.activation.apply(a));
            z = Matrix::lincomb(self.alpha / self.mu, &layer.w().matmul_tn(&h), 1.0 - self.alpha, &z);
        }
        match &self.structural {
            Some(s) => s.apply(&z),
            None => Ok(z),
        }
    }

    /// Picard solve from `z = 0`.
    pub fn equilibrium(&self, x: &Vector, tol: f64, max_iter: usize) -> Result<SolveReport> {
        picard_solve(
            |z: &Vector| self.forward_map(z, x),
            &Vector::zeros(self.hidden_dim()),
            tol,
            max_iter,
            false,
        )
    }

    pub fn predict(&self, z: &Vector) -> Vector {
        self.readout.matvec(z)
    }
}

/// Blocks `z₁, …, z_{L−1}, z₀` of a lifted deep equilibrium, each of dim `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockVector {
    pub blocks: Vec<Vector>,
}

impl BlockVector {
    pub fn new(blocks: Vec<Vector>) -> Result<Self> {
        let m = blocks
            .first()
            .ok_or_else(|| Error::invalid("blocks", "need at least one block"))?
            .dim();
        if let Some(b) = blocks.iter().find(|b| b.dim() != m) {
            return Err(Error::dim("block", m, b.dim()));
        }
        Ok(Self { blocks })
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn stacked(&self) -> Vector {
        Vector::concat(&self.blocks)
    }

    /// The `z₀` block.
    pub fn last(&self) -> &Vector {
        &self.blocks[self.blocks.len() - 1]
    }

    /// `max_l ‖z_l − z₀‖`
    pub fn max_spread(&self) -> f64 {
        let z0 = self.last();
        self.blocks.iter().map(|b| b.distance(z0)).fold(0.0, f64::max)
    }
}

/// `(f₁(z*), f₂∘f₁(z*), …, f_{L−1}∘…∘f₁(z*), z*)`
pub fn block_lift(model: &DeepOptEqModel, z_star: &Vector, x: &Vector) -> Result<BlockVector> {
    if model.structural.is_some() {
        return Err(Error::Unsupported("block lift of a model with an appended regularizer".into()));
    }
    let mut blocks = Vec::with_capacity(model.depth());
    let mut z = z_star.clone();
    for l in 0..model.depth() - 1 {
        z = model.layer_map(l, &z, x)?;
        blocks.push(z.clone());
    }
    blocks.push(z_star.clone());
    BlockVector::new(blocks)
}

/// Relative residual of `z̃ = (α/μ) W̃ᵀσ(W̃Pz̃ + Ũx + b̃) + (1 − α)Pz̃`, assembled
/// from the block-diagonal `W̃`, stacked `Ũ`, `b̃` and the cyclic permutation `P`.
pub fn block_system_residual(model: &DeepOptEqModel, zt: &BlockVector, x: &Vector) -> Result<f64> {
    if zt.len() != model.depth() {
        return Err(Error::dim("block count", model.depth(), zt.len()));
    }
    if zt.blocks[0].dim() != model.hidden_dim() {
        return Err(Error::dim("block", model.hidden_dim(), zt.blocks[0].dim()));
    }
    if x.dim() != model.feature_dim() {
        return Err(Error::dim("x", model.feature_dim(), x.dim()));
    }
    let ws: Vec<&Matrix> = model.layers.iter().map(|l| l.w()).collect();
    let us: Vec<&Matrix> = model.layers.iter().map(|l| l.u()).collect();
    let w_tilde = block_diagonal(&ws);
    let u_tilde = Matrix::vstack(&us);
    let b_tilde = Vector::concat(&model.layers.iter().map(|l| l.b().clone()).collect::<Vec<_>>());
    let p = block_permutation(model.depth(), model.hidden_dim());

    let z = zt.stacked();
    let pz = p.matvec(&z);
    let pre = w_tilde.matvec(&pz).add(&u_tilde.matvec(x)).add(&b_tilde);
    let act = pre.map(|a| model.activation.apply(a));
    let rhs = Vector::lincomb(model.alpha / model.mu, &w_tilde.matvec_t(&act), 1.0 - model.alpha, &pz);
    Ok(relative_residual(&z, &rhs))
}

/// Solves `L z = Σ_l W_lᵀσ(W_l z + U_l x + b_l)` (scaled by `1/μ`), the
/// small-`α` limit of the deep equilibrium, by Picard iteration.
pub fn wide_system_solve(model: &DeepOptEqModel, x: &Vector, tol: f64, max_iter: usize) -> Result<Vector> {
    let lf = model.depth() as f64;
    let cfg = model.unit_config().with_alpha(1.0);
    let map = |z: &Vector| -> Result<Vector> {
        let mut acc = Vector::zeros(z.dim());
        for layer in &model.layers {
            acc = acc.add(&crate::unitlayer::unit_forward(layer, &cfg, z, x)?);
        }
        Ok(acc.scale(1.0 / lf))
    };
    let r = picard_solve(map, &Vector::zeros(model.hidden_dim()), tol, max_iter, false)?;
    if !r.converged {
        return Err(Error::NonConvergence {
            what: "wide system Picard solve",
            iterations: r.iterations,
            last_change: r.residual,
            last_iterate: Some(r.z_star),
        });
    }
    Ok(r.z_star)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::unitlayer::unit_forward;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) use crate::fixtures::seeded_model;

    #[test]
    fn single_layer_forward_is_averaged_forward() {
        let model = seeded_model(&[0.8], 3, 2, 0.6, Activation::Tanh, 1);
        let x = Vector::from_vec(vec![0.3, -0.4]);
        let z = Vector::from_vec(vec![1.0, 0.0, -2.0]);
        let direct = averaged_forward(&model.layers()[0], &model.unit_config(), &z, &x).unwrap();
        assert_eq!(model.forward_map(&z, &x).unwrap(), direct);
    }

    #[test]
    fn zero_weights_forward_to_zero() {
        let layers = (0..3)
            .map(|_| LayerParams::new(Matrix::zeros(2, 2), Matrix::identity(2), Vector::filled(2, 1.0)).unwrap())
            .collect();
        let model = DeepOptEqModel::new(Extractor::identity(2), layers, 1.0, 1.0, Activation::Relu, Matrix::identity(2)).unwrap();
        let out = model.forward_map(&Vector::from_vec(vec![4.0, -9.0]), &Vector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn batch_forward_matches_columns() {
        let model = seeded_model(&[0.9, 0.7], 4, 3, 0.5, Activation::LeakyRelu(0.1), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Matrix::random_normal(4, 5, &mut rng);
        let x = Matrix::random_normal(3, 5, &mut rng);
        let batch = model.forward_map_batch(&z, &x).unwrap();
        for j in 0..5 {
            let col = model.forward_map(&z.column(j), &x.column(j)).unwrap();
            assert!(col.distance(&batch.column(j)) < 1e-14);
        }
    }

    #[test]
    fn forward_map_nonexpansive_and_contractive() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (norms, bound) in [(vec![1.0, 1.0, 1.0], 1.0 + 1e-12), (vec![1.0, 0.9, 1.0], 0.81 + 1e-12)] {
            let model = seeded_model(&norms, 4, 2, 1.0, Activation::Tanh, 4);
            let x = Vector::random_normal(2, &mut rng);
            for _ in 0..200 {
                let a = Vector::random_normal(4, &mut rng).scale(3.0);
                let b = a.add(&Vector::random_normal(4, &mut rng).scale(0.1));
                let ratio = model.forward_map(&a, &x).unwrap().distance(&model.forward_map(&b, &x).unwrap()) / a.distance(&b);
                assert!(ratio <= bound, "{ratio}");
            }
        }
    }

    #[test]
    fn block_lift_single_layer() {
        let model = seeded_model(&[0.5], 3, 2, 1.0, Activation::Relu, 5);
        let z = Vector::from_vec(vec![0.1, 0.2, 0.3]);
        let lift = block_lift(&model, &z, &Vector::zeros(2)).unwrap();
        assert_eq!(lift.blocks, vec![z.clone()]);
        let x = Vector::from_vec(vec![0.5, -0.5]);
        let unit = relative_residual(&z, &model.forward_map(&z, &x).unwrap());
        let block = block_system_residual(&model, &BlockVector::new(vec![z]).unwrap(), &x).unwrap();
        assert!((unit - block).abs() < 1e-15);
    }

    #[test]
    fn lifted_equilibrium_solves_block_system() {
        for (k, depth) in [2usize, 3, 4].into_iter().enumerate() {
            for m in [4, 8] {
                let mut norms = vec![1.0; depth];
                norms[0] = 0.8;
                let model = seeded_model(&norms, m, 3, 0.7, Activation::Relu, 20 + k as u64);
                let x = Vector::from_vec(vec![0.4, -0.1, 0.9]);
                let r = model.equilibrium(&x, 1e-11, 100_000).unwrap();
                assert!(r.converged);
                let lift = block_lift(&model, &r.z_star, &x).unwrap();
                let res = block_system_residual(&model, &lift, &x).unwrap();
                assert!(res <= (10.0 * r.residual).max(1e-8), "L={depth} m={m}: {res} vs {}", r.residual);
                let mut rng = ChaCha8Rng::seed_from_u64(1);
                let random = BlockVector::new((0..depth).map(|_| Vector::random_normal(m, &mut rng)).collect()).unwrap();
                assert!(block_system_residual(&model, &random, &x).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn wide_system_identical_layers_is_single_layer() {
        let one = seeded_model(&[0.8], 3, 2, 1.0, Activation::Relu, 8);
        let layer = one.layers()[0].clone();
        let three = DeepOptEqModel::new(
            one.extractor().clone(),
            vec![layer.clone(), layer.clone(), layer],
            1.0,
            1.0,
            Activation::Relu,
            one.readout().clone(),
        )
        .unwrap();
        let x = Vector::from_vec(vec![0.2, 0.7]);
        let a = wide_system_solve(&one, &x, 1e-12, 10_000).unwrap();
        let b = wide_system_solve(&three, &x, 1e-12, 10_000).unwrap();
        assert!(a.distance(&b) < 1e-11);
        let single = one.equilibrium(&x, 1e-12, 10_000).unwrap().z_star;
        assert!(a.distance(&single) < 1e-10);
        let f = unit_forward(&one.layers()[0], &one.unit_config(), &a, &x).unwrap();
        assert!(a.distance(&f) < 1e-10);
    }

    #[test]
    fn structural_regularizer_effects() {
        let model = seeded_model(&[0.9, 0.8], 4, 2, 1.0, Activation::Relu, 12);
        let x = Vector::from_vec(vec![1.0, -1.0]);
        let base = model.equilibrium(&x, 1e-12, 10_000).unwrap().z_star;

        let same = model.append_structural_regularizer(Regularizer::L1 { lambda: 0.0 }, 1.0).unwrap();
        let z = Vector::from_vec(vec![0.3, -0.2, 0.1, 0.5]);
        assert_eq!(same.forward_map(&z, &x).unwrap(), model.forward_map(&z, &x).unwrap());

        let l2 = model.append_structural_regularizer(Regularizer::SquaredL2 { lambda: 0.5 }, 1.0).unwrap();
        let shrunk = l2.equilibrium(&x, 1e-12, 10_000).unwrap().z_star;
        assert!(shrunk.norm() < base.norm());
        // the appended shrink divides the layer output by 1.5 at the fixed point
        let t = model.forward_map(&shrunk, &x).unwrap().scale(1.0 / 1.5);
        assert!(t.distance(&shrunk) < 1e-10);

        let l1 = model.append_structural_regularizer(Regularizer::L1 { lambda: 0.15 }, 1.0).unwrap();
        let sparse = l1.equilibrium(&x, 1e-12, 10_000).unwrap().z_star;
        let mean_abs = |v: &Vector| v.iter().map(|a| a.abs()).sum::<f64>() / v.dim() as f64;
        assert!(mean_abs(&sparse) < mean_abs(&base));

        assert!(model.append_structural_regularizer(Regularizer::L1 { lambda: 0.1 }, 0.0).is_err());
    }

    #[test]
    fn constructor_checks_shapes() {
        let l1 = LayerParams::new(Matrix::identity(2), Matrix::zeros(2, 1), Vector::zeros(2)).unwrap();
        let l2 = LayerParams::new(Matrix::identity(3), Matrix::zeros(3, 1), Vector::zeros(3)).unwrap();
        assert!(DeepOptEqModel::new(Extractor::identity(1), vec![l1.clone(), l2], 1.0, 1.0, Activation::Relu, Matrix::identity(2)).is_err());
        assert!(DeepOptEqModel::new(Extractor::identity(1), vec![], 1.0, 1.0, Activation::Relu, Matrix::identity(2)).is_err());
        assert!(DeepOptEqModel::new(Extractor::identity(1), vec![l1], 1.5, 1.0, Activation::Relu, Matrix::identity(2)).is_err());
    }
}
