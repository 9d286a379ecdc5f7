//! Experiment configuration: TOML in, validated struct out.
//!
//! ```toml
//! scenario = "clt"
//! master_seed = 7
//!
//! [base]
//! process = "iid"          # or "markov"
//! symbols = ["b2"]
//! weights = [1.0]
//!
//! [maps.b2]
//! family = "beta"
//! beta = 2
//!
//! [observable]
//! name = "cos_2pi"
//!
//! [numerics]
//! n_bins = 1024
//! n = 10000
//! n_paths = 5000
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rds_core::base_env::BaseProcess;
use rds_core::fast_slow::{FastSlowSpec, ScalarFn};
use rds_core::fiber_maps::{FiberMap, MapFamily};
use rds_core::observable::Formula;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Decay,
    Decomposition,
    Clt,
    Lil,
    IteratedWip,
    Moments,
    Homogenization,
    Conditions,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Self::Decay => "decay",
            Self::Decomposition => "decomposition",
            Self::Clt => "clt",
            Self::Lil => "lil",
            Self::IteratedWip => "iterated_wip",
            Self::Moments => "moments",
            Self::Homogenization => "homogenization",
            Self::Conditions => "conditions",
        }
    }

    /// Scenarios that sample fiber trajectories.
    pub fn samples_trajectories(self) -> bool {
        matches!(self, Self::Clt | Self::Lil | Self::IteratedWip | Self::Moments | Self::Homogenization)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseSpec {
    /// `"iid"` or `"markov"`.
    pub process: String,
    pub symbols: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transition: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stationary: Option<Vec<f64>>,
    /// Past indices available for pull-backs; defaults to enough for the
    /// truncation and density pull-back.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k_past: Option<usize>,
}

impl BaseSpec {
    pub fn build(&self) -> rds_core::Result<BaseProcess> {
        match self.process.as_str() {
            "iid" => BaseProcess::iid(self.symbols.clone(), self.weights.clone().unwrap_or_default()),
            "markov" => {
                BaseProcess::markov(self.symbols.clone(), self.transition.clone().unwrap_or_default(), self.stationary.clone())
            }
            other => Err(rds_core::Error::InvalidProcess(format!("unknown process kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservableSpec {
    /// Entry of the formula library, see [`library`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Explicit components; used when `name` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub formulas: Option<Vec<Formula>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
}

pub struct LibraryEntry {
    pub name: &'static str,
    pub description: &'static str,
    pub formulas: fn() -> Vec<Formula>,
}

pub fn library() -> &'static [LibraryEntry] {
    &[
        LibraryEntry { name: "x_minus_half", description: "x - 1/2", formulas: || vec![Formula::poly(&[-0.5, 1.0])] },
        LibraryEntry { name: "x", description: "x (centred per fiber)", formulas: || vec![Formula::poly(&[0.0, 1.0])] },
        LibraryEntry { name: "x_squared", description: "x^2 (centred per fiber)", formulas: || vec![Formula::poly(&[0.0, 0.0, 1.0])] },
        LibraryEntry { name: "cos_2pi", description: "cos 2πx", formulas: || vec![Formula::cos(1.0)] },
        LibraryEntry { name: "sin_2pi", description: "sin 2πx", formulas: || vec![Formula::sin(1.0)] },
        LibraryEntry {
            name: "x_minus_half_cos_2pi",
            description: "(x - 1/2, cos 2πx)",
            formulas: || vec![Formula::poly(&[-0.5, 1.0]), Formula::cos(1.0)],
        },
        LibraryEntry {
            name: "x_sin_2pi",
            description: "(x, sin 2πx)",
            formulas: || vec![Formula::poly(&[0.0, 1.0]), Formula::sin(1.0)],
        },
        LibraryEntry {
            name: "coboundary_x_one_minus_x",
            description: "q - q∘T with q = x(1 - x)",
            formulas: || vec![Formula::coboundary(Formula::poly(&[0.0, 1.0, -1.0]))],
        },
    ]
}

impl ObservableSpec {
    pub fn formulas(&self) -> Result<Vec<Formula>, String> {
        match (&self.name, &self.formulas) {
            (Some(n), _) => library()
                .iter()
                .find(|e| e.name == n)
                .map(|e| (e.formulas)())
                .ok_or_else(|| format!("observable.name {n:?} is not in the formula library")),
            (None, Some(f)) if !f.is_empty() => Ok(f.clone()),
            _ => Err("observable needs a library name or a non-empty formulas list".into()),
        }
    }
}

fn default_n_bins() -> usize {
    1024
}
fn default_n_lags() -> usize {
    60
}
fn default_positions() -> usize {
    rds_core::stats::estimators::DEFAULT_POSITIONS
}
fn default_n() -> usize {
    10_000
}
fn default_n_paths() -> usize {
    1000
}
fn default_moment_p() -> u32 {
    4
}
fn default_pairing_paths() -> usize {
    1000
}
fn default_decay_steps() -> usize {
    40
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Numerics {
    #[serde(default = "default_n_bins")]
    pub n_bins: usize,
    /// Series truncation for χ; by default the smallest `k` with `K̂ ρ̂^k ≤ 1e-6`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncation_k: Option<usize>,
    #[serde(default = "default_n_lags")]
    pub n_lags: usize,
    /// Path positions averaged over in the quadrature estimators.
    #[serde(default = "default_positions")]
    pub positions: usize,
    /// Trajectory length (`n_max` for the LIL scenario, largest grid point for moments).
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    #[serde(default = "default_moment_p")]
    pub moment_p: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub moment_grid: Option<Vec<usize>>,
    /// Paths for the exact pairing identity check.
    #[serde(default = "default_pairing_paths")]
    pub pairing_paths: usize,
    /// Transfer-operator steps in the decay profile.
    #[serde(default = "default_decay_steps")]
    pub decay_steps: usize,
}

impl Default for Numerics {
    fn default() -> Self {
        Self {
            n_bins: default_n_bins(),
            truncation_k: None,
            n_lags: default_n_lags(),
            positions: default_positions(),
            n: default_n(),
            n_paths: default_n_paths(),
            epsilon: None,
            dt: None,
            moment_p: default_moment_p(),
            moment_grid: None,
            pairing_paths: default_pairing_paths(),
            decay_steps: default_decay_steps(),
        }
    }
}

/// Known values to test estimates against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Oracle {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_sigma_tol")]
    pub sigma_tolerance: f64,
    #[serde(default = "default_e_tol")]
    pub e_tolerance: f64,
    /// Σ is expected to vanish (coboundary observable).
    #[serde(default)]
    pub degenerate: bool,
}

fn default_sigma_tol() -> f64 {
    0.01
}
fn default_e_tol() -> f64 {
    0.005
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "default_vanishing")]
    pub vanishing: f64,
    /// Reconstruction gate is `reconstruction_factor / N`.
    #[serde(default = "default_recon")]
    pub reconstruction_factor: f64,
    #[serde(default = "default_n_se")]
    pub n_se: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ks: Option<f64>,
    #[serde(default = "default_rate")]
    pub decay_rate_max: f64,
    #[serde(default = "default_sum_slope_tol")]
    pub sum_slope: f64,
    #[serde(default = "default_iter_slope_tol")]
    pub iterated_slope: f64,
    #[serde(default = "default_pairing")]
    pub pairing: f64,
}

fn default_vanishing() -> f64 {
    1e-3
}
fn default_recon() -> f64 {
    2.0
}
fn default_n_se() -> f64 {
    3.0
}
fn default_rate() -> f64 {
    0.999
}
fn default_sum_slope_tol() -> f64 {
    0.05
}
fn default_iter_slope_tol() -> f64 {
    0.1
}
fn default_pairing() -> f64 {
    1e-10
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            vanishing: default_vanishing(),
            reconstruction_factor: default_recon(),
            n_se: default_n_se(),
            ks: None,
            decay_rate_max: default_rate(),
            sum_slope: default_sum_slope_tol(),
            iterated_slope: default_iter_slope_tol(),
            pairing: default_pairing(),
        }
    }
}

fn default_mode() -> String {
    "frozen".into()
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FastSlowConfig {
    pub a: Vec<ScalarFn>,
    pub b: Vec<Vec<ScalarFn>>,
    pub xi: Vec<f64>,
    /// `"frozen"` or `"averaged"`.
    #[serde(default = "default_mode")]
    pub mode: String,
    /// Use the drift correction `ã`; `false` runs the SDE with `ã = a`.
    #[serde(default = "yes")]
    pub corrected: bool,
    /// Drive the SDE with the oracle Σ and E instead of the estimates.
    #[serde(default)]
    pub use_oracle: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refinement: Option<Vec<f64>>,
}

impl FastSlowConfig {
    pub fn spec(&self, epsilon: f64) -> FastSlowSpec {
        FastSlowSpec {
            d: self.a.len(),
            e: self.b.first().map_or(0, Vec::len),
            a: self.a.clone(),
            b: self.b.clone(),
            epsilon,
            xi: self.xi.clone(),
        }
    }
}

/// Inputs of the condition checkers. `rho` are user-supplied per-symbol
/// contraction factors for the mixing criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionsConfig {
    #[serde(default = "one")]
    pub alpha: f64,
    pub rho: Vec<f64>,
    #[serde(default = "default_k_max")]
    pub k_max: usize,
    /// Per-symbol oscillation constants `ε_ω` (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub osc: Option<Vec<f64>>,
    /// Per-symbol Hölder constants `H_ω` (default 0).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub holder: Option<Vec<f64>>,
    /// Explicit `a_ω` probe `(q, l, d, η, α)` checked against `expect_a_omega`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_omega_probe: Option<(usize, f64, usize, f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_a_omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_probe: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expect_b: Option<f64>,
}

fn one() -> f64 {
    1.0
}
fn default_k_max() -> usize {
    20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub description: String,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Worker threads; 0 or absent uses all cores.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Write `dump/` CSVs.
    #[serde(default)]
    pub dump: bool,
    pub base: BaseSpec,
    pub maps: BTreeMap<String, MapFamily>,
    pub observable: ObservableSpec,
    #[serde(default)]
    pub numerics: Numerics,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<Oracle>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fast_slow: Option<FastSlowConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditions: Option<ConditionsConfig>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        toml::from_str(text).map_err(|e| LabError::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Fiber maps in symbol order.
    pub fn fiber_maps(&self) -> rds_core::Result<Vec<FiberMap>> {
        self.base
            .symbols
            .iter()
            .map(|s| {
                let fam = self.maps.get(s).ok_or_else(|| rds_core::Error::InvalidMap(format!("no map for symbol {s}")))?;
                FiberMap::build(fam)
            })
            .collect()
    }

    /// Hash of the canonical form. Output location and thread count do not
    /// change results and are left out.
    pub fn hash(&self) -> String {
        let mut canon = self.clone();
        canon.output_dir = None;
        canon.threads = None;
        canon.dump = false;
        // serde_json maps are ordered, so table order in the source is irrelevant.
        let value = serde_json::to_value(&canon).expect("config serialises");
        let bytes = serde_json::to_vec(&value).expect("json");
        let digest = Sha256::digest(&bytes);
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn epsilon(&self) -> f64 {
        self.numerics.epsilon.unwrap_or(0.05)
    }
}

fn check_probability(v: &[f64], field: &str, out: &mut Vec<String>) {
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        out.push(format!("{field} has invalid entry {x}"));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        out.push(format!("{field} sums to {s}, not 1"));
    }
}

/// Every problem that would stop `run`; empty iff the config is runnable.
pub fn validate(cfg: &ExperimentConfig) -> Vec<String> {
    let mut out = Vec::new();
    let b = &cfg.base;
    if b.symbols.is_empty() {
        out.push("base.symbols must not be empty".into());
    }
    let mut seen = std::collections::BTreeSet::new();
    for s in &b.symbols {
        if !seen.insert(s) {
            out.push(format!("base.symbols repeats {s:?}"));
        }
    }
    let n = b.symbols.len();
    match b.process.as_str() {
        "iid" => match &b.weights {
            None => out.push("base.weights is required for an iid process".into()),
            Some(w) if w.len() != n => out.push(format!("base.weights has {} entries for {n} symbols", w.len())),
            Some(w) => check_probability(w, "base.weights", &mut out),
        },
        "markov" => match &b.transition {
            None => out.push("base.transition is required for a markov process".into()),
            Some(t) => {
                if t.len() != n || t.iter().any(|r| r.len() != n) {
                    out.push(format!("base.transition must be {n}x{n}"));
                } else {
                    for (i, row) in t.iter().enumerate() {
                        check_probability(row, &format!("base.transition row {i}"), &mut out);
                    }
                }
            }
        },
        other => out.push(format!("base.process must be \"iid\" or \"markov\", got {other:?}")),
    }
    if out.is_empty() && n > 0 {
        if let Err(e) = b.build() {
            out.push(format!("base: {e}"));
        }
    }
    for s in &b.symbols {
        match cfg.maps.get(s) {
            None => out.push(format!("maps.{s} is missing")),
            Some(f) => {
                if let Err(e) = FiberMap::build(f) {
                    out.push(format!("maps.{s}: {e}"));
                }
            }
        }
    }
    for s in cfg.maps.keys() {
        if !b.symbols.contains(s) {
            out.push(format!("maps.{s} does not name a base symbol"));
        }
    }
    let dim = match cfg.observable.formulas() {
        Ok(f) => {
            if let Some(d) = cfg.observable.dimension {
                if d != f.len() {
                    out.push(format!("observable.dimension is {d} but the formulas have {} components", f.len()));
                }
            }
            f.len()
        }
        Err(e) => {
            out.push(e);
            0
        }
    };
    let num = &cfg.numerics;
    for (name, v) in [
        ("n_bins", num.n_bins),
        ("n_lags", num.n_lags),
        ("positions", num.positions),
        ("n", num.n),
        ("n_paths", num.n_paths),
        ("pairing_paths", num.pairing_paths),
        ("decay_steps", num.decay_steps),
    ] {
        if v == 0 {
            out.push(format!("numerics.{name} must be positive"));
        }
    }
    if num.truncation_k == Some(0) {
        out.push("numerics.truncation_k must be positive".into());
    }
    if let Some(eps) = num.epsilon {
        if !(eps > 0.0 && eps < 1.0) {
            out.push("epsilon must be in (0,1)".into());
        }
    }
    if let Some(dt) = num.dt {
        if !(dt > 0.0 && dt <= 1e-3) {
            out.push("dt must be in (0, 1e-3]".into());
        }
    }
    if ![4, 6, 8].contains(&num.moment_p) {
        out.push("numerics.moment_p must be 4, 6 or 8".into());
    }
    if let Some(g) = &num.moment_grid {
        if g.len() < 2 || g.contains(&0) {
            out.push("numerics.moment_grid needs at least two positive sizes".into());
        }
    }
    match cfg.scenario {
        Scenario::Lil if num.n < rds_core::stats::limits::LIL_MIN_N => {
            out.push(format!("numerics.n must be at least {} for the lil scenario", rds_core::stats::limits::LIL_MIN_N));
        }
        Scenario::Homogenization => match &cfg.fast_slow {
            None => out.push("fast_slow section is required for the homogenization scenario".into()),
            Some(fs) => {
                if fs.mode != "frozen" && fs.mode != "averaged" {
                    out.push(format!("fast_slow.mode must be \"frozen\" or \"averaged\", got {:?}", fs.mode));
                }
                let spec = fs.spec(cfg.epsilon());
                if spec.e != dim && dim > 0 {
                    out.push(format!("fast_slow.b has {} columns but the observable has dimension {dim}", spec.e));
                }
                if let Err(e) = spec.validate() {
                    out.push(format!("fast_slow: {e}"));
                }
                if fs.use_oracle && cfg.oracle.as_ref().is_none_or(|o| o.sigma.is_none() || o.e.is_none()) {
                    out.push("fast_slow.use_oracle needs oracle.sigma and oracle.e".into());
                }
                if let Some(r) = &fs.refinement {
                    if r.iter().any(|e| !(*e > 0.0 && *e < 1.0)) {
                        out.push("epsilon must be in (0,1)".into());
                    }
                }
            }
        },
        Scenario::Conditions => match &cfg.conditions {
            None => out.push("conditions section is required for the conditions scenario".into()),
            Some(c) => {
                if c.rho.len() != n {
                    out.push(format!("conditions.rho has {} entries for {n} symbols", c.rho.len()));
                }
                for (field, v) in [("osc", &c.osc), ("holder", &c.holder)] {
                    if let Some(v) = v {
                        if v.len() != n {
                            out.push(format!("conditions.{field} has {} entries for {n} symbols", v.len()));
                        }
                    }
                }
                if c.k_max == 0 {
                    out.push("conditions.k_max must be positive".into());
                }
            }
        },
        _ => {}
    }
    if let Some(o) = &cfg.oracle {
        for (field, m) in [("sigma", &o.sigma), ("e", &o.e)] {
            if let Some(m) = m {
                if dim > 0 && (m.len() != dim || m.iter().any(|r| r.len() != dim)) {
                    out.push(format!("oracle.{field} must be {dim}x{dim}"));
                }
            }
        }
    }
    out
}
