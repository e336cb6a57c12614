//! Experiment configuration: one strict JSON document.
//!
//! Unknown fields are rejected everywhere, and every error names the field
//! path it came from (`training.lr.initial`, `model.activation`, ...).

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::Activation;
use crate::data::DatasetSpec;
use crate::deepnet::{DeepOptEqModel, Extractor};
use crate::error::{Error, Result};
use crate::regularizers::Regularizer;
use crate::solvers::SamSchedule;
use crate::tensors::{svd, Matrix, Vector};
use crate::training::{GradientMode, IftSpec, LossSpec, LrSchedule, TrainSpec, UnrolledSpec};
use crate::unitlayer::LayerParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    Identity,
    Linear,
    LinearTanh,
}

fn one() -> f64 {
    1.0
}

fn one_layer() -> usize {
    1
}

fn half() -> f64 {
    0.5
}

fn identity() -> ExtractorKind {
    ExtractorKind::Identity
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Width of the extracted features; must equal `input_dim` for the
    /// identity extractor. Defaults to `input_dim`.
    #[serde(default)]
    pub feature_dim: Option<usize>,
    pub hidden: usize,
    pub outputs: usize,
    #[serde(default = "one_layer")]
    pub layers: usize,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub mu: f64,
    pub activation: Activation,
    #[serde(default = "identity")]
    pub extractor: ExtractorKind,
    /// Spectral norm of every initial `W_l`.
    #[serde(default = "half")]
    pub init_norm: f64,
}

impl ModelSpec {
    fn feature_width(&self) -> usize {
        self.feature_dim.unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.outputs == 0 || self.layers == 0 || self.feature_width() == 0 {
            return Err(Error::invalid("model", "all dimensions and the depth must be positive"));
        }
        if self.extractor == ExtractorKind::Identity && self.feature_width() != self.input_dim {
            return Err(Error::invalid("feature_dim", "identity extractor needs feature_dim == input_dim"));
        }
        if !(self.init_norm > 0.0 && self.init_norm.is_finite()) {
            return Err(Error::invalid("init_norm", "must be positive"));
        }
        Ok(())
    }

    /// Seeded Gaussian initialization with every `‖W_l‖₂ = init_norm`.
    pub fn init(&self, seed: u64) -> Result<DeepOptEqModel> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d0, d, m) = (self.input_dim, self.feature_width(), self.hidden);
        let extractor = match self.extractor {
            ExtractorKind::Identity => Extractor::identity(d0),
            kind => Extractor {
                weight: Matrix::random_normal(d, d0, &mut rng).scale(1.0 / (d0 as f64).sqrt()),
                tanh: kind == ExtractorKind::LinearTanh,
            },
        };
        let layers = (0..self.layers)
            .map(|_| {
                let w = Matrix::random_normal(m, m, &mut rng);
                let w = w.scale(self.init_norm / svd(&w)?.s[0]);
                let u = Matrix::random_normal(m, d, &mut rng).scale(1.0 / (d as f64).sqrt());
                LayerParams::new(w, u, Vector::zeros(m))
            })
            .collect::<Result<Vec<_>>>()?;
        let readout = Matrix::random_normal(self.outputs, m, &mut rng).scale(1.0 / (m as f64).sqrt());
        DeepOptEqModel::new(extractor, layers, self.alpha, self.mu, self.activation, readout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Picard,
    Sam,
}

fn default_steps() -> usize {
    20
}

fn default_tol() -> f64 {
    1e-6
}

fn default_max_iter() -> usize {
    10_000
}

/// Overrides of the SAM schedule; unset values take the defaults for the
/// regularizer (`η` at its bound, `γ = 1/(2L)`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamOverrides {
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub rho: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub mode: SolverMode,
    /// Unrolled steps `K`.
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Equilibrium tolerance on the relative residual.
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default)]
    pub sam: SamOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    None,
    Sam,
    Structural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub placement: Placement,
    #[serde(default)]
    pub reg: Option<Regularizer>,
    /// Step of the structural operator.
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl Default for RegularizerSpec {
    fn default() -> Self {
        Self {
            placement: Placement::None,
            reg: None,
            gamma: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKind {
    Unrolled,
    Ift,
}

fn default_tol_adj() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSpec {
    pub loss: LossSpec,
    pub lr: LrSchedule,
    pub epochs: usize,
    #[serde(default)]
    pub batch_size: usize,
    pub gradient: GradientKind,
    #[serde(default = "default_tol_adj")]
    pub tol_adj: f64,
    #[serde(default)]
    pub spectral_bound: Option<f64>,
    /// Samples held out by a seeded draw and logged as the `eval` split.
    #[serde(default)]
    pub holdout: usize,
    #[serde(default)]
    pub record_wallclock: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelSpec,
    pub solver: SolverSpec,
    #[serde(default)]
    pub regularizer: RegularizerSpec,
    pub training: TrainingSpec,
    pub dataset: DatasetSpec,
    pub output: OutputSpec,
}

fn at(path: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Config {
        path: path.to_string(),
        reason: e.to_string(),
    }
}

fn config_err(path: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { "<root>".into() } else { path },
                reason: e.into_inner().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(at("model"))?;
        if self.solver.steps == 0 {
            return Err(config_err("solver.steps", "must be at least 1"));
        }
        if !(self.solver.tol > 0.0) {
            return Err(config_err("solver.tol", "must be positive"));
        }
        if self.solver.max_iter == 0 {
            return Err(config_err("solver.max_iter", "must be at least 1"));
        }
        let r = &self.regularizer;
        match (r.placement, &r.reg) {
            (Placement::None, Some(_)) => return Err(config_err("regularizer.reg", "set but placement is none")),
            (Placement::Sam | Placement::Structural, None) => {
                return Err(config_err("regularizer.reg", "required for this placement"))
            }
            (_, Some(reg)) => reg.validate().map_err(at("regularizer.reg"))?,
            _ => {}
        }
        if r.placement == Placement::Structural {
            match r.gamma {
                Some(g) if g > 0.0 && g.is_finite() => {}
                _ => return Err(config_err("regularizer.gamma", "structural placement needs a positive gamma")),
            }
        }
        if (self.solver.mode == SolverMode::Sam) != (r.placement == Placement::Sam) {
            return Err(config_err(
                "solver.mode",
                "sam mode and regularizer placement `sam` go together",
            ));
        }
        if self.solver.mode == SolverMode::Sam && self.training.gradient == GradientKind::Ift {
            return Err(config_err("training.gradient", "ift trains at the plain equilibrium; use picard mode"));
        }
        if self.solver.mode == SolverMode::Sam {
            self.sam_schedule().map_err(at("solver.sam"))?;
        }
        let t = &self.training;
        t.loss.validate().map_err(at("training.loss"))?;
        t.lr.validate().map_err(at("training.lr"))?;
        if t.holdout >= self.dataset.samples() {
            return Err(config_err("training.holdout", "must leave at least one training sample"));
        }
        if !(t.tol_adj > 0.0) {
            return Err(config_err("training.tol_adj", "must be positive"));
        }
        if let Some(b) = t.spectral_bound {
            if !(b > 0.0 && b.is_finite()) {
                return Err(config_err("training.spectral_bound", "must be positive"));
            }
        }
        Ok(())
    }

    /// The SAM schedule implied by the regularizer and the overrides.
    pub fn sam_schedule(&self) -> Result<SamSchedule> {
        let reg = self
            .regularizer
            .reg
            .ok_or_else(|| Error::invalid("regularizer", "SAM needs a regularizer"))?;
        let mut s = SamSchedule::for_regularizer(&reg)?;
        let o = self.solver.sam;
        if let Some(eta) = o.eta {
            s.eta = eta;
        }
        if let Some(rho) = o.rho {
            s.rho = rho;
        }
        if let Some(c) = o.c {
            s.c = c;
        }
        if let Some(g) = o.gamma {
            s.gamma = g;
        }
        s.validate()?;
        Ok(s)
    }

    /// Initial model, with the structural regularizer appended if configured.
    pub fn build_model(&self) -> Result<DeepOptEqModel> {
        let m = self.model.init(self.seed).map_err(at("model"))?;
        match (self.regularizer.placement, self.regularizer.reg, self.regularizer.gamma) {
            (Placement::Structural, Some(reg), Some(gamma)) => m
                .append_structural_regularizer(reg, gamma)
                .map_err(at("regularizer")),
            _ => Ok(m),
        }
    }

    pub fn unrolled_spec(&self) -> Result<UnrolledSpec> {
        Ok(match self.solver.mode {
            SolverMode::Picard => UnrolledSpec::picard(self.solver.steps),
            SolverMode::Sam => UnrolledSpec::sam(
                self.solver.steps,
                self.regularizer.reg.expect("validated"),
                self.sam_schedule()?,
            ),
        })
    }

    pub fn train_spec(&self) -> Result<TrainSpec> {
        let t = &self.training;
        let gradient = match t.gradient {
            GradientKind::Unrolled => GradientMode::Unrolled(self.unrolled_spec()?),
            GradientKind::Ift => GradientMode::Ift(IftSpec {
                tol_fwd: self.solver.tol,
                tol_adj: t.tol_adj,
                max_iter: self.solver.max_iter,
            }),
        };
        Ok(TrainSpec {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            loss: t.loss,
            gradient,
            seed: self.seed,
            spectral_bound: t.spectral_bound,
            record_wallclock: t.record_wallclock,
        })
    }
}
