use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use opteq_core::checkpoint;
use opteq_core::config::ExperimentConfig;
use opteq_core::data::make_dataset;
use opteq_core::deepnet::{dnn_forward, reformulated_forward, universal_factorize};
use opteq_core::metrics::MetricsWriter;
use opteq_core::regularizers::Regularizer;
use opteq_core::solvers::{picard_solve, sam_solve, SamSchedule, SolveReport};
use opteq_core::training::sgd_train;
use opteq_core::verify;
use opteq_core::{Matrix, Vector};

use crate::input::parse_vector;
use crate::SolveMode;

pub fn verify(suite: &str) -> Result<bool> {
    let mut all_passed = true;
    let (mut passed, mut total) = (0, 0);
    for name in selected(suite) {
        let report = verify::run_suite(name)?;
        println!("== {name}");
        for check in &report.checks {
            println!("{check}");
        }
        let ok = report.checks.iter().filter(|c| c.passed()).count();
        println!(
            "-- {name}: {ok}/{} passed in {:.2}s",
            report.checks.len(),
            report.elapsed.as_secs_f64()
        );
        passed += ok;
        total += report.checks.len();
        all_passed &= report.passed();
    }
    println!("{} {passed}/{total} checks passed", if all_passed { "OK" } else { "FAILED" });
    Ok(all_passed)
}

fn selected(suite: &str) -> Vec<&str> {
    if suite == "all" {
        verify::SUITES.to_vec()
    } else {
        vec![suite]
    }
}

/// Relative output paths in a config are taken from the config's directory.
fn resolve(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn train(config_path: &Path) -> Result<bool> {
    let cfg = ExperimentConfig::load(config_path).with_context(|| format!("loading {}", config_path.display()))?;
    let data = make_dataset(&cfg.dataset, cfg.seed)?;
    let (train, eval) = data.split_holdout(cfg.training.holdout, cfg.seed)?;
    let mut model = cfg.build_model()?;
    let spec = cfg.train_spec()?;

    let metrics_path = resolve(config_path, &cfg.output.metrics);
    let mut metrics = MetricsWriter::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let log = sgd_train(&mut model, &train, eval.as_ref(), &spec, |r| metrics.append(r))?;
    metrics.into_inner()?;

    let ckpt_path = resolve(config_path, &cfg.output.checkpoint);
    checkpoint::save(&model, &ckpt_path).with_context(|| format!("writing {}", ckpt_path.display()))?;

    let last = log.last("train").context("training produced no records")?;
    let mut summary = format!(
        "trained {} epochs: final loss {:.6e}, final residual {:.6e}",
        last.epoch + 1,
        last.loss,
        last.residual_mean
    );
    if let Some(e) = log.last("eval") {
        summary.push_str(&format!(", eval loss {:.6e}", e.loss));
    }
    println!("{summary}");
    println!("metrics: {}", metrics_path.display());
    println!("checkpoint: {}", ckpt_path.display());
    Ok(true)
}

pub struct SolveArgs {
    pub checkpoint: PathBuf,
    pub input: String,
    pub mode: SolveMode,
    pub tol: f64,
    pub max_iter: usize,
    pub steps: usize,
    pub reg: String,
    pub eta: Option<f64>,
    pub trajectory: Option<PathBuf>,
}

/// Prints the result as JSON. A Picard solve that stops before `tol`
/// still prints, but exits nonzero.
pub fn solve(args: &SolveArgs) -> Result<bool> {
    let model = checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let x0 = Vector::from_vec(parse_vector(&args.input)?);
    if x0.dim() != model.input_dim() {
        bail!("input has {} entries, the model expects {}", x0.dim(), model.input_dim());
    }
    let x = model.features(&x0)?;
    let t = |z: &Vector| model.forward_map(z, &x);
    let z0 = Vector::zeros(model.hidden_dim());
    let record = args.trajectory.is_some();

    let (report, mode, reg): (SolveReport, &str, Option<Regularizer>) = match args.mode {
        SolveMode::Picard => (picard_solve(t, &z0, args.tol, args.max_iter, record)?, "picard", None),
        SolveMode::Sam => {
            let reg: Regularizer = serde_json::from_str(&args.reg).context("parsing --reg")?;
            reg.validate()?;
            let mut sched = SamSchedule::for_regularizer(&reg)?;
            if let Some(eta) = args.eta {
                sched = sched.with_eta(eta);
            }
            (sam_solve(t, &reg, &sched, &z0, args.steps, record)?, "sam", Some(reg))
        }
    };

    if let (Some(path), Some(tr)) = (&args.trajectory, &report.trajectory) {
        let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
        writeln!(w, "iteration,residual")?;
        for (k, r) in tr.iter().enumerate() {
            writeln!(w, "{k},{r:e}")?;
        }
        w.flush()?;
    }

    let out = json!({
        "mode": mode,
        "regularizer": reg,
        "equilibrium": report.z_star.as_slice(),
        "output": model.predict(&report.z_star).as_slice(),
        "residual": report.residual,
        "iterations": report.iterations,
        "converged": report.converged,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    if !report.converged {
        eprintln!("picard stopped after {} iterations at residual {:.3e}", report.iterations, report.residual);
    }
    Ok(report.converged)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

/// Treats the layer weights and the readout as the chain of a feedforward
/// network, factors it through width `m`, and checks both the factors and
/// the forward outputs on seeded inputs.
pub fn factorize(ckpt: &Path, width: usize, seed: u64) -> Result<bool> {
    let model = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let mut chain: Vec<Matrix> = model.layers().iter().map(|l| l.w().clone()).collect();
    chain.push(model.readout().clone());
    for (k, pair) in chain.windows(2).enumerate() {
        if pair[1].cols() != pair[0].rows() {
            bail!(
                "weights do not form a chain: matrix {} has {} columns but matrix {} has {} rows",
                k + 1,
                pair[1].cols(),
                k,
                pair[0].rows()
            );
        }
    }
    let bars = universal_factorize(&chain, width, seed)?;
    let residuals: Vec<f64> = chain
        .iter()
        .enumerate()
        .map(|(k, w)| w.sub(&bars[k + 1].matmul_nt(&bars[k])).frobenius_norm() / w.frobenius_norm().max(f64::MIN_POSITIVE))
        .collect();

    let us: Vec<Matrix> = model.layers().iter().map(|l| l.u().clone()).collect();
    let bs: Vec<Vector> = model.layers().iter().map(|l| l.b().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut forward_gap: f64 = 0.0;
    for _ in 0..10 {
        let z0 = Vector::random_normal(chain[0].cols(), &mut rng);
        let x = Vector::random_normal(model.feature_dim(), &mut rng);
        let a = dnn_forward(&chain, &us, &bs, model.activation(), &z0, &x)?;
        let b = reformulated_forward(&bars, &us, &bs, model.activation(), &z0, &x)?;
        forward_gap = forward_gap.max(a.distance(&b));
    }

    let out = json!({
        "width": width,
        "seed": seed,
        "relative_residuals": residuals,
        "max_forward_gap": forward_gap,
        "factors": bars.iter().map(rows).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(true)
}
