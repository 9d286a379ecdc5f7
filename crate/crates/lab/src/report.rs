use serde::{Deserialize, Serialize};

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub stderr: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub method: String,
}

impl Criterion {
    /// `|value - target| <= tol`.
    pub fn near(name: impl Into<String>, value: f64, stderr: f64, target: f64, tol: f64, method: &str) -> Self {
        Self::new(name, value, stderr, tol, (value - target).abs() <= tol, method)
    }

    /// `value <= tol`.
    pub fn at_most(name: impl Into<String>, value: f64, stderr: f64, tol: f64, method: &str) -> Self {
        Self::new(name, value, stderr, tol, value <= tol, method)
    }

    /// `value >= tol`.
    pub fn at_least(name: impl Into<String>, value: f64, stderr: f64, tol: f64, method: &str) -> Self {
        Self::new(name, value, stderr, tol, value >= tol, method)
    }

    pub fn new(name: impl Into<String>, value: f64, stderr: f64, tolerance: f64, pass: bool, method: &str) -> Self {
        Self { name: name.into(), value, stderr, tolerance, pass: pass && value.is_finite(), method: method.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub pass: bool,
    pub criteria: Vec<Criterion>,
    /// Values reported for context but not gated.
    #[serde(default)]
    pub diagnostics: Vec<(String, f64)>,
    #[serde(default)]
    pub notes: Vec<String>,
    pub stages: Vec<Stage>,
}

impl RunSummary {
    pub fn criterion(&self, name: &str) -> Option<&Criterion> {
        self.criteria.iter().find(|c| c.name == name)
    }

    pub fn failed(&self) -> impl Iterator<Item = &Criterion> {
        self.criteria.iter().filter(|c| !c.pass)
    }
}
