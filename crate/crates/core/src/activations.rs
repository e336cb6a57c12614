//! Monotone Lipschitz activations together with the antiderivative
//! `σ̃(a) = ∫₀ᵃ σ(t) dt` and, for the piecewise-linear kinds, its convex
//! conjugate `σ̃*`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    /// `max(a, 0) + slope · min(a, 0)`, `slope ≥ 0`.
    LeakyRelu(f64),
    Tanh,
    /// `1/(1 + e^{−a}) − 1/2`, shifted so that `σ(0) = 0`.
    SigmoidShifted,
}

impl Activation {
    pub fn leaky_relu(slope: f64) -> Result<Self> {
        if !(slope >= 0.0 && slope.is_finite()) {
            return Err(Error::invalid("slope", "leaky_relu slope must be finite and >= 0"));
        }
        Ok(Activation::LeakyRelu(slope))
    }

    /// Lipschitz constant of `σ`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Activation::Relu | Activation::Tanh => 1.0,
            Activation::LeakyRelu(s) => s.max(1.0),
            Activation::SigmoidShifted => 0.25,
        }
    }

    #[inline]
    pub fn apply(&self, a: f64) -> f64 {
        match *self {
            Activation::Relu => a.max(0.0),
            Activation::LeakyRelu(s) => {
                if a > 0.0 {
                    a
                } else {
                    s * a
                }
            }
            Activation::Tanh => a.tanh(),
            Activation::SigmoidShifted => sigmoid(a) - 0.5,
        }
    }

    /// `σ'(a)`; at the kink of the piecewise-linear kinds the left slope is
    /// used, so `σ'(0) = 0` for ReLU.
    #[inline]
    pub fn derivative(&self, a: f64) -> f64 {
        match *self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if a > 0.0 {
                    1.0
                } else {
                    s
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::SigmoidShifted => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
        }
    }

    /// `σ̃(a) = ∫₀ᵃ σ(t) dt`.
    pub fn antiderivative(&self, a: f64) -> f64 {
        match *self {
            Activation::Relu => 0.5 * a.max(0.0).powi(2),
            Activation::LeakyRelu(s) => {
                if a > 0.0 {
                    0.5 * a * a
                } else {
                    0.5 * s * a * a
                }
            }
            // ln cosh a, written to avoid overflow for large |a|
            Activation::Tanh => {
                let x = a.abs();
                x + (-2.0 * x).exp().ln_1p() - LN_2
            }
            Activation::SigmoidShifted => softplus(a) - LN_2 - 0.5 * a,
        }
    }

    /// Convex conjugate `σ̃*(x)` of the antiderivative; `+∞` outside its domain.
    ///
    /// Only the piecewise-linear kinds have an elementary conjugate. For ReLU
    /// the boundary value `σ̃*(0) = 0` is the lower-semicontinuous closure.
    pub fn conjugate_antiderivative(&self, x: f64) -> Result<f64> {
        match *self {
            Activation::Relu => Ok(if x >= 0.0 { 0.5 * x * x } else { f64::INFINITY }),
            Activation::LeakyRelu(s) => Ok(if x >= 0.0 {
                0.5 * x * x
            } else if s > 0.0 {
                0.5 * x * x / s
            } else {
                f64::INFINITY
            }),
            other => Err(Error::Unsupported(format!(
                "no closed-form conjugate antiderivative for {other}"
            ))),
        }
    }

    pub fn has_conjugate(&self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }

    /// Piecewise-linear activations have points where `σ'` jumps.
    pub fn has_kink(&self) -> bool {
        matches!(self, Activation::Relu | Activation::LeakyRelu(_))
    }
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

fn softplus(a: f64) -> f64 {
    a.max(0.0) + (-a.abs()).exp().ln_1p()
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Activation::Relu => write!(f, "relu"),
            Activation::LeakyRelu(s) => write!(f, "leaky_relu({s})"),
            Activation::Tanh => write!(f, "tanh"),
            Activation::SigmoidShifted => write!(f, "sigmoid_shifted"),
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "relu" => return Ok(Activation::Relu),
            "tanh" => return Ok(Activation::Tanh),
            "sigmoid_shifted" => return Ok(Activation::SigmoidShifted),
            "leaky_relu" => return Ok(Activation::LeakyRelu(0.01)),
            _ => {}
        }
        if let Some(arg) = s
            .strip_prefix("leaky_relu(")
            .and_then(|rest| rest.strip_suffix(')'))
        {
            let slope: f64 = arg
                .trim()
                .parse()
                .map_err(|_| Error::invalid("activation", format!("bad slope in `{s}`")))?;
            return Activation::leaky_relu(slope);
        }
        Err(Error::invalid(
            "activation",
            format!("unknown kind `{s}` (expected relu, leaky_relu(s), tanh, sigmoid_shifted)"),
        ))
    }
}

impl Serialize for Activation {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Activation {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
