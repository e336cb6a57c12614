//! A small reverse-mode tape over batch matrices.

use crate::activations::Activation;
use crate::error::Result;
use crate::regularizers::Regularizer;
use crate::tensors::Matrix;

pub(crate) type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `A · B`
    MatMul(NodeId, NodeId),
    /// `Aᵀ · B`
    MatMulTN(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `A + b 1ᵀ` with `b` an `n × 1` node.
    AddBias(NodeId, NodeId),
    Lincomb(f64, NodeId, f64, NodeId),
    Act(NodeId, Activation),
    Tanh(NodeId),
    /// `(1 − γλ) Z − γ ∇R(Z)`
    RegStep {
        z: NodeId,
        reg: Regularizer,
        gamma: f64,
        lambda: f64,
    },
    /// `prox_{step·R}(Z)`
    RegProx { z: NodeId, reg: Regularizer, step: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub(crate) struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_tn(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_tn(self.value(b));
        self.push(v, Op::MatMulTN(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add_column_broadcast(&self.value(b).column(0));
        self.push(v, Op::AddBias(a, b))
    }

    pub fn lincomb(&mut self, ca: f64, a: NodeId, cb: f64, b: NodeId) -> NodeId {
        let v = Matrix::lincomb(ca, self.value(a), cb, self.value(b));
        self.push(v, Op::Lincomb(ca, a, cb, b))
    }

    pub fn act(&mut self, a: NodeId, act: Activation) -> NodeId {
        let v = self.value(a).map(|x| act.apply(x));
        self.push(v, Op::Act(a, act))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn reg_step(&mut self, z: NodeId, reg: Regularizer, gamma: f64, lambda: f64) -> Result<NodeId> {
        let zv = self.value(z);
        let v = Matrix::lincomb(1.0 - gamma * lambda, zv, -gamma, &reg.grad(zv)?);
        Ok(self.push(v, Op::RegStep { z, reg, gamma, lambda }))
    }

    pub fn reg_prox(&mut self, z: NodeId, reg: Regularizer, step: f64) -> Result<NodeId> {
        let v = reg.prox(self.value(z), step)?;
        Ok(self.push(v, Op::RegProx { z, reg, step }))
    }

    /// Reverse sweep from `output` seeded with `seed`; returns the adjoint of
    /// every leaf (`None` where nothing flowed).
    pub fn backward(&self, output: NodeId, seed: Matrix) -> Result<Vec<Option<Matrix>>> {
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output] = Some(seed);
        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => grads[id] = Some(g),
                Op::MatMul(a, b) => {
                    let ga = g.matmul_nt(self.value(*b));
                    let gb = self.value(*a).matmul_tn(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulTN(a, b) => {
                    // C = AᵀB: dA = B gᵀ, dB = A g
                    let ga = self.value(*b).matmul_nt(&g);
                    let gb = self.value(*a).matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias(a, b) => {
                    accumulate(&mut grads, *b, g.row_sums().to_column());
                    accumulate(&mut grads, *a, g);
                }
                Op::Lincomb(ca, a, cb, b) => {
                    accumulate(&mut grads, *a, g.scale(*ca));
                    accumulate(&mut grads, *b, g.scale(*cb));
                }
                Op::Act(a, act) => {
                    let d = self.value(*a).map(|x| act.derivative(x));
                    accumulate(&mut grads, *a, g.hadamard(&d));
                }
                Op::Tanh(a) => {
                    let d = node.value.map(|y| 1.0 - y * y);
                    accumulate(&mut grads, *a, g.hadamard(&d));
                }
                Op::RegStep { z, reg, gamma, lambda } => {
                    let hv = reg.hvp(self.value(*z), &g)?;
                    accumulate(&mut grads, *z, Matrix::lincomb(1.0 - gamma * lambda, &g, -gamma, &hv));
                }
                Op::RegProx { z, reg, step } => {
                    let gz = prox_vjp(reg, *step, self.value(*z), &g);
                    accumulate(&mut grads, *z, gz);
                }
            }
        }
        Ok(grads)
    }
}

/// Adjoint of the closed-form proxes: soft thresholding passes the gradient
/// where the input survived, the `l2` shrink scales it.
pub(crate) fn prox_vjp(reg: &Regularizer, step: f64, z: &Matrix, g: &Matrix) -> Matrix {
    match *reg {
        Regularizer::L1 { lambda } => {
            let t = step * lambda;
            g.zip_map(z, |gi, zi| if zi.abs() > t { gi } else { 0.0 })
        }
        Regularizer::SquaredL2 { lambda } => g.scale(1.0 / (1.0 + step * lambda)),
        _ => unreachable!("prox nodes only hold l1 or squared_l2"),
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}
