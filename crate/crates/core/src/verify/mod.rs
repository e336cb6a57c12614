//! Property suites that check each result against an independent oracle
//! and report measured values next to their tolerances.

mod blocks;
mod factor;
mod gradients;
pub mod oracle;
mod prox;
mod sam;
mod training;

use std::fmt;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};

pub const SUITES: [&str; 7] = [
    "prox",
    "block-lift",
    "wide-limit",
    "sam-selection",
    "gradients",
    "factorization",
    "training",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Relation {
    /// `measured ≤ tolerance`
    AtMost,
    /// `measured > tolerance`
    Above,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    /// Checks answering the same question share a group.
    pub group: &'static str,
    pub name: String,
    pub measured: f64,
    pub tolerance: f64,
    pub relation: Relation,
    /// Set when the check could not be computed.
    pub error: Option<String>,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.error.is_none()
            && match self.relation {
                Relation::AtMost => self.measured <= self.tolerance,
                Relation::Above => self.measured > self.tolerance,
            }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed() { "PASS" } else { "FAIL" };
        match &self.error {
            Some(e) => write!(f, "[{tag}] {}/{}: error: {e}", self.group, self.name),
            None => {
                let op = match self.relation {
                    Relation::AtMost => "<=",
                    Relation::Above => ">",
                };
                write!(
                    f,
                    "[{tag}] {}/{}: measured {:.3e} (required {op} {:.1e})",
                    self.group, self.name, self.measured, self.tolerance
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(Check::passed)
    }

    pub fn group<'a>(&'a self, group: &'a str) -> impl Iterator<Item = &'a Check> + 'a {
        self.checks.iter().filter(move |c| c.group == group)
    }
}

fn series(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(", ")
}

/// Collects checks for one suite.
#[derive(Default)]
pub(crate) struct Recorder {
    checks: Vec<Check>,
}

impl Recorder {
    pub fn at_most<E: fmt::Display>(&mut self, group: &'static str, name: impl Into<String>, measured: Result<f64, E>, tolerance: f64) {
        self.push(group, name.into(), measured, tolerance, Relation::AtMost);
    }

    pub fn above<E: fmt::Display>(&mut self, group: &'static str, name: impl Into<String>, measured: Result<f64, E>, tolerance: f64) {
        self.push(group, name.into(), measured, tolerance, Relation::Above);
    }

    fn push<E: fmt::Display>(
        &mut self,
        group: &'static str,
        name: String,
        measured: Result<f64, E>,
        tolerance: f64,
        relation: Relation,
    ) {
        let (measured, error) = match measured {
            Ok(v) if v.is_nan() => (v, Some("measured value is NaN".to_string())),
            Ok(v) => (v, None),
            Err(e) => (f64::NAN, Some(e.to_string())),
        };
        self.checks.push(Check {
            group,
            name,
            measured,
            tolerance,
            relation,
            error,
        });
    }
}

/// Runs one suite by name.
pub fn run_suite(name: &str) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut r = Recorder::default();
    let suite = match name {
        "prox" => {
            prox::run(&mut r);
            "prox"
        }
        "block-lift" => {
            blocks::run_block_lift(&mut r);
            "block-lift"
        }
        "wide-limit" => {
            blocks::run_wide_limit(&mut r);
            "wide-limit"
        }
        "sam-selection" => {
            sam::run(&mut r);
            "sam-selection"
        }
        "gradients" => {
            gradients::run(&mut r);
            "gradients"
        }
        "factorization" => {
            factor::run(&mut r);
            "factorization"
        }
        "training" => {
            training::run(&mut r);
            "training"
        }
        other => {
            return Err(Error::invalid(
                "suite",
                format!("unknown suite `{other}`; expected one of {} or `all`", SUITES.join(", ")),
            ))
        }
    };
    Ok(SuiteReport {
        suite,
        checks: r.checks,
        elapsed: start.elapsed(),
    })
}

/// `all` runs every suite in order; any other name runs that suite.
pub fn run(name: &str) -> Result<Vec<SuiteReport>> {
    if name == "all" {
        SUITES.iter().map(|s| run_suite(s)).collect()
    } else {
        run_suite(name).map(|r| vec![r])
    }
}
