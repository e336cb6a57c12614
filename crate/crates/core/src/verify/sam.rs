//! Regularized fixed-point selection: SAM iterates converge to the fixed
//! point of `T` that minimizes `R`, where Picard lands elsewhere.

use crate::activations::Activation;
use crate::error::Result;
use crate::regularizers::Regularizer;
use crate::solvers::{picard_solve, sam_solve, selection_gap, SamSchedule};
use crate::tensors::{Matrix, Vector};
use crate::unitlayer::{unit_forward, LayerParams, UnitLayerConfig};

use super::Recorder;

const STEPS: usize = 100_000;
/// Below the schedule's upper bound: slower early progress, much smaller
/// bias after `K` steps.
const ETA: f64 = 0.01;

/// `T(z) = relu(z)` as a unit layer with `W = I`; fixed points form the
/// nonnegative orthant. With `R = ½‖z − c‖²`, `c = (−1, 2)`, the selected
/// point is `(0, 2)`. `R` is applied to the shifted iterate `y = z − c`.
fn orthant() -> Result<(f64, f64, f64)> {
    let p = LayerParams::new(Matrix::identity(2), Matrix::zeros(2, 1), Vector::zeros(2))?;
    let cfg = UnitLayerConfig::new(Activation::Relu);
    let x = Vector::zeros(1);
    let c = Vector::from_vec(vec![-1.0, 2.0]);
    let t = |z: &Vector| unit_forward(&p, &cfg, z, &x);
    let shifted = |y: &Vector| Ok(t(&y.add(&c))?.sub(&c));
    let reg = Regularizer::SquaredL2 { lambda: 1.0 };
    let sched = SamSchedule::for_regularizer(&reg)?.with_eta(ETA);
    let z0 = Vector::from_vec(vec![1.5, 0.5]);
    let y = sam_solve(shifted, &reg, &sched, &z0.sub(&c), STEPS, false)?.z_star;
    let z = y.add(&c);
    let target = Vector::from_vec(vec![0.0, 2.0]);
    let picard = picard_solve(t, &z0, 1e-14, 100, false)?.z_star;
    let samples: Vec<Vector> = [(0.0, 2.0), (0.0, 0.0), (1.0, 1.0), (0.5, 2.5)]
        .iter()
        .map(|&(a, b)| Vector::from_vec(vec![a, b]))
        .collect();
    let shifted_samples: Vec<Vector> = samples.iter().map(|s| s.sub(&c)).collect();
    let gap = selection_gap(shifted, &reg, &y, &shifted_samples)?;
    Ok((z.distance(&target), picard.distance(&target), gap))
}

/// `T` projects onto the line spanned by `(1, 1)`; with `R = ½‖z‖²` the
/// selected fixed point is the origin.
fn line() -> Result<(f64, f64)> {
    let d = Vector::from_vec(vec![1.0, 1.0]).scale(1.0 / 2f64.sqrt());
    let t = |z: &Vector| Ok(d.scale(d.dot(z)));
    let reg = Regularizer::SquaredL2 { lambda: 1.0 };
    let sched = SamSchedule::for_regularizer(&reg)?.with_eta(ETA);
    let z0 = Vector::from_vec(vec![1.0, 2.0]);
    let z = sam_solve(t, &reg, &sched, &z0, STEPS, false)?.z_star;
    let picard = picard_solve(t, &z0, 1e-14, 100, false)?.z_star;
    Ok((z.norm(), picard.norm()))
}

pub(crate) fn run(r: &mut Recorder) {
    let o = orthant();
    r.at_most("sam-orthant", "distance to (0, 2)", o.as_ref().map(|v| v.0), 1e-3);
    r.at_most("sam-orthant", "selection gap over sampled fixed points", o.as_ref().map(|v| v.2), 1e-3);
    r.above("sam-orthant", "picard distance to (0, 2) (control)", o.map(|v| v.1), 1e-1);
    let l = line();
    r.at_most("sam-line", "distance to origin", l.as_ref().map(|v| v.0), 1e-3);
    r.above("sam-line", "picard distance to origin (control)", l.map(|v| v.1), 1e-1);
}
