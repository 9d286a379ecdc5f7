//! Orchestration for the quenched random dynamics lab: configuration,
//! presets, scenario pipelines and result files.

// NaN-rejecting comparisons and index loops over small matrices are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod config;
pub mod output;
pub mod presets;
pub mod report;
pub mod scenarios;
pub mod setting;

use std::path::PathBuf;

use rds_core::transfer::UlamCache;

pub use config::{validate, ExperimentConfig, Scenario};
pub use report::{Criterion, RunSummary};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LabError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("{0}")]
    Io(String),
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error(transparent)]
    Core(#[from] rds_core::Error),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub n_bins: Option<usize>,
    pub dump: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.master_seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        if let Some(t) = self.threads {
            cfg.threads = Some(t);
        }
        if let Some(n) = self.n_bins {
            cfg.numerics.n_bins = n;
        }
        cfg.dump |= self.dump;
    }
}

/// Holds state shared across runs in one process. Ulam matrices are looked
/// up by map parameters and resolution, so rerunning a config reuses them.
#[derive(Debug, Clone, Default)]
pub struct Lab {
    cache: UlamCache,
}

impl Lab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cache(&self) -> &UlamCache {
        &self.cache
    }

    /// Validates and runs `cfg`, without writing files.
    pub fn evaluate(&self, cfg: &ExperimentConfig) -> Result<scenarios::Outcome> {
        let problems = validate(cfg);
        if !problems.is_empty() {
            return Err(LabError::Invalid(problems));
        }
        scenarios::run(cfg, &self.cache)
    }

    /// Runs `cfg` and writes `results.csv`, `summary.txt` and optionally
    /// `dump/` under the output directory.
    pub fn run(&self, cfg: &ExperimentConfig) -> Result<RunSummary> {
        let outcome = self.evaluate(cfg)?;
        let dir = output::output_dir(cfg);
        output::write_all(&dir, cfg, &outcome)?;
        Ok(outcome.summary)
    }
}
