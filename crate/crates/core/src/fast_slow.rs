//! Discrete fast-slow recursion driven by the fiber dynamics, the homogenized
//! SDE with corrected drift, and a two-sample comparison at time 1.
//!
//! `x_{n+1} = x_n + ε² a(x_n) + ε b(x_n) v_n(y_n)`, `x̂(t) = x_{⌊t/ε²⌋}`,
//! against `dZ = ã(Z) dt + b(Z) dW` with `Cov(W(1)) = Σ`.

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::base_env::BaseProcess;
use crate::numerics::{ecdf_on_grid, ks_two_sample, mean_se, psd_sqrt, variance_se};
use crate::observable::Observable;
use crate::seed;
use crate::stats::estimators::Matrix;
use crate::stats::sums::observe;
use crate::stats::trajectory::TrajectorySampler;
use crate::transfer::{decay_profile, DensityField, QuenchedSystem, UlamCache};
use crate::{Error, Result};

/// Scalar function of the slow state `x ∈ ℝ^d` with an analytic gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarFn {
    /// `constant + linear · x`.
    Affine { constant: f64, linear: Vec<f64> },
    /// Polynomial of degree at most 3 in `x[var]`, coefficients lowest first.
    Poly { var: usize, coeffs: Vec<f64> },
    /// `offset + amp sin(freq x[var] + phase)`.
    Sin { var: usize, amp: f64, freq: f64, phase: f64, offset: f64 },
}

impl ScalarFn {
    pub fn constant(c: f64) -> Self {
        Self::Affine { constant: c, linear: Vec::new() }
    }

    pub fn linear(constant: f64, linear: Vec<f64>) -> Self {
        Self::Affine { constant, linear }
    }

    pub fn sin(var: usize, amp: f64, freq: f64, phase: f64, offset: f64) -> Self {
        Self::Sin { var, amp, freq, phase, offset }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        match self {
            Self::Affine { linear, .. } if linear.len() > d => {
                Err(Error::Dimension { expected: d, got: linear.len() })
            }
            Self::Poly { var, coeffs } => {
                if *var >= d {
                    Err(Error::Dimension { expected: d, got: var + 1 })
                } else if coeffs.len() > 4 {
                    Err(Error::InvalidArgument(format!("polynomial degree {} exceeds 3", coeffs.len() - 1)))
                } else {
                    Ok(())
                }
            }
            Self::Sin { var, .. } if *var >= d => Err(Error::Dimension { expected: d, got: var + 1 }),
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Affine { constant, linear } => constant + linear.iter().zip(x).map(|(l, x)| l * x).sum::<f64>(),
            Self::Poly { var, coeffs } => coeffs.iter().rev().fold(0.0, |acc, &c| acc * x[*var] + c),
            Self::Sin { var, amp, freq, phase, offset } => offset + amp * (freq * x[*var] + phase).sin(),
        }
    }

    /// `∂f/∂x_alpha`.
    pub fn partial(&self, x: &[f64], alpha: usize) -> f64 {
        match self {
            Self::Affine { linear, .. } => linear.get(alpha).copied().unwrap_or(0.0),
            Self::Poly { var, coeffs } if *var == alpha => coeffs
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, &c)| acc * x[*var] + k as f64 * c),
            Self::Sin { var, amp, freq, phase, .. } if *var == alpha => amp * freq * (freq * x[*var] + phase).cos(),
            _ => 0.0,
        }
    }

    pub fn is_constant(&self) -> bool {
        match self {
            Self::Affine { linear, .. } => linear.iter().all(|&l| l == 0.0),
            Self::Poly { coeffs, .. } => coeffs.iter().skip(1).all(|&c| c == 0.0),
            Self::Sin { amp, freq, .. } => *amp == 0.0 || *freq == 0.0,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.is_constant() && self.value(&[0.0; 8][..]) == 0.0
    }
}

/// Central-difference partial derivative.
pub fn fd_partial(f: &ScalarFn, x: &[f64], alpha: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[alpha] += h;
    xm[alpha] -= h;
    (f.value(&xp) - f.value(&xm)) / (2.0 * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastSlowSpec {
    pub d: usize,
    pub e: usize,
    /// `a[α]`, length `d`.
    pub a: Vec<ScalarFn>,
    /// `b[α][β]`, `d × e`.
    pub b: Vec<Vec<ScalarFn>>,
    pub epsilon: f64,
    pub xi: Vec<f64>,
}

impl FastSlowSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.e == 0 {
            return Err(Error::InvalidArgument("slow and fast dimensions must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidArgument("epsilon must be in (0,1)".into()));
        }
        if self.a.len() != self.d {
            return Err(Error::Dimension { expected: self.d, got: self.a.len() });
        }
        if self.xi.len() != self.d {
            return Err(Error::Dimension { expected: self.d, got: self.xi.len() });
        }
        if self.b.len() != self.d {
            return Err(Error::Dimension { expected: self.d, got: self.b.len() });
        }
        for row in &self.b {
            if row.len() != self.e {
                return Err(Error::Dimension { expected: self.e, got: row.len() });
            }
            for f in row {
                f.validate(self.d)?;
            }
        }
        for f in &self.a {
            f.validate(self.d)?;
        }
        Ok(())
    }

    /// Number of fast steps `⌊1/ε²⌋` up to time 1 (rounding-safe).
    pub fn n_steps(&self) -> usize {
        steps_for(self.epsilon)
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        Self { epsilon, ..self.clone() }
    }

    pub fn b_is_zero(&self) -> bool {
        self.b.iter().flatten().all(ScalarFn::is_zero)
    }

    /// Largest relative gap between analytic and finite-difference
    /// derivatives of `a` and `b` over `n_probes` points in `[-2, 2]^d`.
    pub fn derivative_check(&self, n_probes: usize, seed: u64) -> f64 {
        let mut rng = seed::stage_rng(seed, "derivative-check", 0);
        let mut worst: f64 = 0.0;
        for _ in 0..n_probes {
            let x: Vec<f64> = (0..self.d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for f in self.a.iter().chain(self.b.iter().flatten()) {
                for alpha in 0..self.d {
                    let an = f.partial(&x, alpha);
                    let fd = fd_partial(f, &x, alpha, 1e-5);
                    worst = worst.max((an - fd).abs() / an.abs().max(1.0));
                }
            }
        }
        worst
    }
}

fn steps_for(epsilon: f64) -> usize {
    (1.0 / (epsilon * epsilon) + 1e-9).floor() as usize
}

/// Slow path on the grid `t_k = k ε²`, `k = 0..=n_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowPath {
    pub epsilon: f64,
    pub states: Vec<Vec<f64>>,
}

impl SlowPath {
    pub fn at_time(&self, t: f64) -> &[f64] {
        let k = ((t / (self.epsilon * self.epsilon) + 1e-9).floor() as usize).min(self.states.len() - 1);
        &self.states[k]
    }

    pub fn last(&self) -> &[f64] {
        self.states.last().expect("non-empty")
    }
}

fn step(spec: &FastSlowSpec, x: &[f64], vk: &[f64], out: &mut [f64]) {
    let eps = spec.epsilon;
    let e2 = eps * eps;
    for alpha in 0..spec.d {
        let mut noise = 0.0;
        for beta in 0..spec.e {
            noise += spec.b[alpha][beta].value(x) * vk[beta];
        }
        out[alpha] = x[alpha] + e2 * spec.a[alpha].value(x) + eps * noise;
    }
}

/// Runs the recursion on precomputed fast values `vals[k * e + β]`.
pub fn integrate_with_values(spec: &FastSlowSpec, vals: &[f64], keep_path: bool) -> Result<SlowPath> {
    spec.validate()?;
    let n = spec.n_steps();
    if vals.len() < n * spec.e {
        return Err(Error::Dimension { expected: n * spec.e, got: vals.len() });
    }
    let mut states = Vec::with_capacity(if keep_path { n + 1 } else { 2 });
    let mut x = spec.xi.clone();
    let mut next = vec![0.0; spec.d];
    states.push(x.clone());
    for k in 0..n {
        step(spec, &x, &vals[k * spec.e..(k + 1) * spec.e], &mut next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step: k + 1 });
        }
        std::mem::swap(&mut x, &mut next);
        if keep_path {
            states.push(x.clone());
        }
    }
    if !keep_path {
        states.push(x);
    }
    Ok(SlowPath { epsilon: spec.epsilon, states })
}

/// One slow path with `y_start` drawn from the equivariant density.
pub fn integrate_fast_slow(
    spec: &FastSlowSpec,
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    traj_seed: u64,
) -> Result<SlowPath> {
    check_observable(spec, v)?;
    let n = spec.n_steps();
    let traj = TrajectorySampler::new(system, densities).sample(start, n, traj_seed)?;
    let vals = observe(system, v, &traj, start, n)?;
    integrate_with_values(spec, &vals, true)
}

fn check_observable(spec: &FastSlowSpec, v: &Observable) -> Result<()> {
    if v.dim() != spec.e {
        return Err(Error::Dimension { expected: spec.e, got: v.dim() });
    }
    if !v.is_centered() {
        return Err(Error::NotCentered);
    }
    Ok(())
}

/// `ã(x) = a(x) + Σ_{α,β,γ} E^{βγ} ∂_α b^{·β}(x) b^{αγ}(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectedDrift {
    pub a: Vec<ScalarFn>,
    pub b: Vec<Vec<ScalarFn>>,
    pub e_matrix: Matrix,
}

impl CorrectedDrift {
    pub fn d(&self) -> usize {
        self.a.len()
    }

    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.eval_with(x, |f, x, alpha| f.partial(x, alpha))
    }

    /// Same formula with the derivatives of `b` taken by central differences.
    pub fn eval_fd(&self, x: &[f64], h: f64) -> Vec<f64> {
        self.eval_with(x, |f, x, alpha| fd_partial(f, x, alpha, h))
    }

    fn eval_with(&self, x: &[f64], deriv: impl Fn(&ScalarFn, &[f64], usize) -> f64) -> Vec<f64> {
        let d = self.d();
        let e = self.e_matrix.len();
        let mut out: Vec<f64> = self.a.iter().map(|f| f.value(x)).collect();
        for (i, o) in out.iter_mut().enumerate() {
            for alpha in 0..d {
                for beta in 0..e {
                    let db = deriv(&self.b[i][beta], x, alpha);
                    if db == 0.0 {
                        continue;
                    }
                    for gamma in 0..e {
                        *o += self.e_matrix[beta][gamma] * db * self.b[alpha][gamma].value(x);
                    }
                }
            }
        }
        out
    }

    /// `ã - a` at `x`.
    pub fn correction(&self, x: &[f64]) -> Vec<f64> {
        self.eval(x).iter().zip(&self.a).map(|(t, f)| t - f.value(x)).collect()
    }
}

pub fn corrected_drift(spec: &FastSlowSpec, e_matrix: &Matrix) -> Result<CorrectedDrift> {
    spec.validate()?;
    if e_matrix.len() != spec.e || e_matrix.iter().any(|r| r.len() != spec.e) {
        return Err(Error::Dimension { expected: spec.e, got: e_matrix.len() });
    }
    Ok(CorrectedDrift { a: spec.a.clone(), b: spec.b.clone(), e_matrix: e_matrix.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizedSDE {
    pub drift: CorrectedDrift,
    pub sigma: Matrix,
}

pub const PSD_TOL: f64 = 1e-8;

impl HomogenizedSDE {
    pub fn new(spec: &FastSlowSpec, sigma: &Matrix, e_matrix: &Matrix) -> Result<Self> {
        let drift = corrected_drift(spec, e_matrix)?;
        if sigma.len() != spec.e || sigma.iter().any(|r| r.len() != spec.e) {
            return Err(Error::Dimension { expected: spec.e, got: sigma.len() });
        }
        Ok(Self { drift, sigma: sigma.clone() })
    }

    /// Uncorrected drift `ã = a`.
    pub fn without_correction(spec: &FastSlowSpec, sigma: &Matrix) -> Result<Self> {
        Self::new(spec, sigma, &vec![vec![0.0; spec.e]; spec.e])
    }

    pub fn sigma_sqrt(&self) -> Result<DMatrix<f64>> {
        let e = self.sigma.len();
        psd_sqrt(&DMatrix::from_fn(e, e, |a, b| self.sigma[a][b]), PSD_TOL)
    }
}

/// `dt = ε²/4`, capped at the scheme's `1e-3` limit.
pub fn default_dt(epsilon: f64) -> f64 {
    (epsilon * epsilon / 4.0).min(1e-3)
}

/// Euler-Maruyama `Z(horizon)` samples with increments `b(Z) Σ^{1/2} ξ √dt`.
pub fn euler_maruyama(
    sde: &HomogenizedSDE,
    xi: &[f64],
    dt: f64,
    horizon: f64,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(dt > 0.0 && dt <= 1e-3) {
        return Err(Error::InvalidArgument(format!("dt must be in (0, 1e-3], got {dt}")));
    }
    if !(horizon > 0.0) || n_paths == 0 {
        return Err(Error::InvalidArgument("horizon and n_paths must be positive".into()));
    }
    let d = sde.drift.d();
    if xi.len() != d {
        return Err(Error::Dimension { expected: d, got: xi.len() });
    }
    let root = sde.sigma_sqrt()?;
    let e = sde.sigma.len();
    let steps = (horizon / dt).round().max(1.0) as usize;
    let h = horizon / steps as f64;
    let sq = h.sqrt();
    let out: Vec<Result<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stage_rng(seed, "euler-maruyama", i as u64);
            let mut z = xi.to_vec();
            let mut g = vec![0.0; e];
            let mut dw = vec![0.0; e];
            for k in 0..steps {
                g.iter_mut().for_each(|x| *x = StandardNormal.sample(&mut rng));
                for (a, w) in dw.iter_mut().enumerate() {
                    *w = sq * (0..e).map(|b| root[(a, b)] * g[b]).sum::<f64>();
                }
                let drift = sde.drift.eval(&z);
                let mut next = vec![0.0; d];
                for alpha in 0..d {
                    let noise: f64 = (0..e).map(|b| sde.drift.b[alpha][b].value(&z) * dw[b]).sum();
                    next[alpha] = z[alpha] + drift[alpha] * h + noise;
                }
                if next.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { step: k + 1 });
                }
                z = next;
            }
            Ok(z)
        })
        .collect();
    out.into_iter().collect()
}

/// Uniform-decay precondition for the homogenization comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRegime {
    /// Per distinct symbol: contraction surrogate of its Ulam operator.
    pub symbol_rates: Vec<(usize, f64)>,
    /// Fitted decay rate of each observable component along the path.
    pub fitted_rates: Vec<Option<f64>>,
    pub dispersion: f64,
}

pub const MAX_RATE: f64 = 0.999;
pub const MAX_DISPERSION: f64 = 0.5;

impl DecayRegime {
    pub fn holds(&self) -> bool {
        self.reason().is_none()
    }

    pub fn reason(&self) -> Option<String> {
        if let Some((s, r)) = self.symbol_rates.iter().find(|(_, r)| !(*r < MAX_RATE)) {
            return Some(format!("symbol {s} has contraction rate {r:.4} >= {MAX_RATE}"));
        }
        if let Some(r) = self.fitted_rates.iter().flatten().find(|r| !(**r < 1.0)) {
            return Some(format!("fitted decay rate {r:.4} is not below 1"));
        }
        if self.dispersion > MAX_DISPERSION {
            return Some(format!("decay rates disperse by {:.3} across symbols", self.dispersion));
        }
        None
    }
}

pub fn decay_regime(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n_max: usize,
) -> Result<DecayRegime> {
    let symbol_rates: Vec<(usize, f64)> =
        system.path().distinct().into_iter().map(|s| (s, system.contraction_surrogate(s, 20))).collect();
    let lo = symbol_rates.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let hi = symbol_rates.iter().map(|r| r.1).fold(f64::NEG_INFINITY, f64::max);
    let n_max = n_max.min((densities.hi() - start).max(1) as usize).min((system.path().hi() - start).max(1) as usize);
    let mut fitted_rates = Vec::new();
    for comp in v.bin_values(system, start) {
        fitted_rates.push(decay_profile(system, densities, start, &comp, n_max)?.fitted_rate);
    }
    Ok(DecayRegime { symbol_rates, fitted_rates, dispersion: hi - lo })
}

/// Whether the fast dynamics sit on one frozen base path or each trajectory
/// draws its own.
#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub enum ComparisonMode {
    Frozen,
    Averaged { process: BaseProcess, k_past: usize, cache: UlamCache },
}

impl ComparisonMode {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Frozen => "frozen",
            Self::Averaged { .. } => "averaged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentComparison {
    pub component: usize,
    pub mean_fast_slow: f64,
    pub mean_fast_slow_se: f64,
    pub mean_sde: f64,
    pub mean_sde_se: f64,
    pub var_fast_slow: f64,
    pub var_fast_slow_se: f64,
    pub var_sde: f64,
    pub var_sde_se: f64,
    pub ks: f64,
    pub ks_threshold: f64,
    pub mean_ok: bool,
    pub var_ok: bool,
    pub ks_ok: bool,
}

impl ComponentComparison {
    pub fn mean_z(&self) -> f64 {
        z_score(self.mean_fast_slow - self.mean_sde, self.mean_fast_slow_se, self.mean_sde_se)
    }

    pub fn var_z(&self) -> f64 {
        z_score(self.var_fast_slow - self.var_sde, self.var_fast_slow_se, self.var_sde_se)
    }

    pub fn pass(&self) -> bool {
        self.mean_ok && self.var_ok && self.ks_ok
    }
}

fn z_score(diff: f64, a: f64, b: f64) -> f64 {
    let se = (a * a + b * b).sqrt();
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogenizationReport {
    pub mode: String,
    pub epsilon: f64,
    pub n_paths: usize,
    pub components: Vec<ComponentComparison>,
    pub fast_slow: Vec<Vec<f64>>,
    pub sde: Vec<Vec<f64>>,
}

impl HomogenizationReport {
    pub fn pass(&self) -> bool {
        self.components.iter().all(ComponentComparison::pass)
    }

    pub fn max_ks(&self) -> f64 {
        self.components.iter().map(|c| c.ks).fold(0.0, f64::max)
    }

    /// Both empirical CDFs of component `c` on a `points`-point grid spanning the pooled samples.
    pub fn ecdf_dump(&self, c: usize, points: usize) -> Vec<(f64, f64, f64)> {
        let a: Vec<f64> = self.fast_slow.iter().map(|x| x[c]).collect();
        let b: Vec<f64> = self.sde.iter().map(|x| x[c]).collect();
        let lo = a.iter().chain(&b).copied().fold(f64::INFINITY, f64::min);
        let hi = a.iter().chain(&b).copied().fold(f64::NEG_INFINITY, f64::max);
        let grid: Vec<f64> = (0..points)
            .map(|i| if points > 1 { lo + (hi - lo) * i as f64 / (points - 1) as f64 } else { lo })
            .collect();
        let fa = ecdf_on_grid(&a, &grid);
        let fb = ecdf_on_grid(&b, &grid);
        grid.into_iter().zip(fa).zip(fb).map(|((g, x), y)| (g, x, y)).collect()
    }
}

pub const ECDF_POINTS: usize = 512;

/// Default KS gate, `max(0.05, ε)`: at ε = 0.05 this is 0.05 and it widens
/// linearly for coarser ε where the bias dominates.
pub fn default_ks_threshold(epsilon: f64) -> f64 {
    epsilon.max(0.05)
}

#[derive(Debug, Clone)]
pub struct CompareOptions {
    pub mode: ComparisonMode,
    pub dt: Option<f64>,
    pub ks_threshold: Option<f64>,
    pub n_se: f64,
    /// Skip the decay-regime precondition (diagnostic runs only).
    pub skip_regime_check: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self { mode: ComparisonMode::Frozen, dt: None, ks_threshold: None, n_se: 3.0, skip_regime_check: false }
    }
}

fn fast_slow_ensemble(
    spec: &FastSlowSpec,
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n_paths: usize,
    seed: u64,
    mode: &ComparisonMode,
) -> Result<Vec<Vec<f64>>> {
    let n = spec.n_steps();
    match mode {
        ComparisonMode::Frozen => {
            let sampler = TrajectorySampler::new(system, densities);
            let out = sampler.ensemble(start, n, n_paths, seed, |traj| {
                let vals = observe(system, v, traj, start, n)?;
                Ok(integrate_with_values(spec, &vals, false)?.last().to_vec())
            })?;
            out.into_iter().collect()
        }
        ComparisonMode::Averaged { process, k_past, cache } => {
            let maps = system.shared_maps();
            let n_bins = system.n_bins();
            let out: Vec<Result<Vec<f64>>> = (0..n_paths)
                .into_par_iter()
                .map(|i| {
                    let path_seed = seed::derive(seed, "base-path", i as u64);
                    let path = process.sample_path(*k_past, n + 1, path_seed);
                    let sys = QuenchedSystem::with_cache(std::sync::Arc::new(path), maps.clone(), n_bins, cache)?;
                    let field = DensityField::along(&sys, 0, n as i64, *k_past)?;
                    let vi = v.centered(&sys, &field, 0, n as i64)?;
                    let traj = TrajectorySampler::new(&sys, &field).sample(0, n, seed::derive(seed, "trajectory", i as u64))?;
                    let vals = observe(&sys, &vi, &traj, 0, n)?;
                    Ok(integrate_with_values(spec, &vals, false)?.last().to_vec())
                })
                .collect();
            out.into_iter().collect()
        }
    }
}

/// Compares `x̂^ε(1)` over `n_paths` fast trajectories with `n_paths`
/// Euler-Maruyama samples of `Z(1)`.
#[allow(clippy::too_many_arguments)]
pub fn homogenization_compare(
    spec: &FastSlowSpec,
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    sde: &HomogenizedSDE,
    start: i64,
    n_paths: usize,
    seed: u64,
    opts: &CompareOptions,
) -> Result<HomogenizationReport> {
    spec.validate()?;
    check_observable(spec, v)?;
    if n_paths < 2 {
        return Err(Error::InvalidArgument("homogenization comparison needs at least 2 paths".into()));
    }
    if !opts.skip_regime_check {
        let regime = decay_regime(system, densities, v, start, 60)?;
        if let Some(reason) = regime.reason() {
            return Err(Error::DecayRegime(reason));
        }
    }
    let fast_slow = fast_slow_ensemble(spec, system, densities, v, start, n_paths, seed::derive(seed, "fast-slow", 0), &opts.mode)?;
    let dt = opts.dt.unwrap_or_else(|| default_dt(spec.epsilon));
    let sde_samples = euler_maruyama(sde, &spec.xi, dt, 1.0, n_paths, seed::derive(seed, "sde", 0))?;
    let threshold = opts.ks_threshold.unwrap_or_else(|| default_ks_threshold(spec.epsilon));
    let components = (0..spec.d)
        .map(|c| {
            let a: Vec<f64> = fast_slow.iter().map(|x| x[c]).collect();
            let b: Vec<f64> = sde_samples.iter().map(|x| x[c]).collect();
            let (ma, sa) = mean_se(&a);
            let (mb, sb) = mean_se(&b);
            let (va, vsa) = variance_se(&a);
            let (vb, vsb) = variance_se(&b);
            let ks = ks_two_sample(&a, &b);
            let mut cc = ComponentComparison {
                component: c,
                mean_fast_slow: ma,
                mean_fast_slow_se: sa,
                mean_sde: mb,
                mean_sde_se: sb,
                var_fast_slow: va,
                var_fast_slow_se: vsa,
                var_sde: vb,
                var_sde_se: vsb,
                ks,
                ks_threshold: threshold,
                mean_ok: false,
                var_ok: false,
                ks_ok: false,
            };
            // Without noise both sides are deterministic schemes for the same
            // ODE and differ only by their O(ε²) step bias.
            let degenerate = va <= 1e-24 && vb <= 1e-24;
            let ode_gap = spec.epsilon * spec.epsilon * ma.abs().max(1.0);
            cc.mean_ok = cc.mean_z().abs() <= opts.n_se || (degenerate && (ma - mb).abs() <= ode_gap);
            cc.var_ok = cc.var_z().abs() <= opts.n_se || degenerate;
            cc.ks_ok = ks < threshold || (degenerate && (ma - mb).abs() <= ode_gap);
            cc
        })
        .collect();
    Ok(HomogenizationReport {
        mode: opts.mode.label().into(),
        epsilon: spec.epsilon,
        n_paths,
        components,
        fast_slow,
        sde: sde_samples,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub epsilons: Vec<f64>,
    pub ks: Vec<f64>,
    /// Two-sample 5% critical value used as the noise allowance.
    pub noise: f64,
    pub monotone: bool,
}

/// KS distance to the SDE law for each `ε`; passes iff no refinement step
/// raises it by more than the two-sample noise level.
#[allow(clippy::too_many_arguments)]
pub fn epsilon_refinement(
    spec: &FastSlowSpec,
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    sde: &HomogenizedSDE,
    start: i64,
    epsilons: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<RefinementReport> {
    let mut ks = Vec::with_capacity(epsilons.len());
    for (i, &eps) in epsilons.iter().enumerate() {
        let s = spec.with_epsilon(eps);
        let opts = CompareOptions { dt: Some(default_dt(eps)), ..CompareOptions::default() };
        let r = homogenization_compare(&s, system, densities, v, sde, start, n_paths, seed::derive(seed, "refine", i as u64), &opts)?;
        ks.push(r.max_ks());
    }
    let noise = 1.358 * (2.0 / n_paths as f64).sqrt();
    let monotone = ks.windows(2).all(|w| w[1] <= w[0] + noise);
    Ok(RefinementReport { epsilons: epsilons.to_vec(), ks, noise, monotone })
}
