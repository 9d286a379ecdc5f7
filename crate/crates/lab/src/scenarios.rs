//! Scenario pipelines. Every run shares the estimator stage (decomposition,
//! Σ and E) and then adds the checks of its scenario.

use std::time::Instant;

use rds_core::decomp::{off_grid_reconstruction_error, reconstruction_error, write_decomposition_csv};
use rds_core::fast_slow::{
    decay_regime, epsilon_refinement, homogenization_compare, CompareOptions, ComparisonMode, HomogenizedSDE,
    ECDF_POINTS,
};
use rds_core::fiber_maps::{a_omega, b_constant, expansion_report};
use rds_core::seed;
use rds_core::stats::estimators::{
    correlation_estimates, drift_correction_limit, estimate_sigma_martingale, CorrelationEstimates, MartingaleEstimate,
    Matrix, MatrixEstimate,
};
use rds_core::stats::limits::{clt_test, lil_envelope, log_grid, moment_diagnostics, pairing_check, wip_mean_check};
use rds_core::transfer::{decay_profile, Density, UlamCache};

use crate::config::{ExperimentConfig, Scenario};
use crate::report::{Criterion, RunSummary, Stage};
use crate::setting::{Setting, PULLBACK};
use crate::Result;

/// Band the LIL ratio must fall in for this fraction of paths.
pub const LIL_BAND_FRACTION: f64 = 0.9;

pub struct Outcome {
    pub summary: RunSummary,
    /// `(relative path under dump/, contents)`.
    pub dumps: Vec<(String, Vec<u8>)>,
}

struct Run<'a> {
    cfg: &'a ExperimentConfig,
    criteria: Vec<Criterion>,
    diagnostics: Vec<(String, f64)>,
    notes: Vec<String>,
    stages: Vec<Stage>,
    dumps: Vec<(String, Vec<u8>)>,
    clock: Instant,
}

impl<'a> Run<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Self {
        Self {
            cfg,
            criteria: Vec::new(),
            diagnostics: Vec::new(),
            notes: Vec::new(),
            stages: Vec::new(),
            dumps: Vec::new(),
            clock: Instant::now(),
        }
    }

    fn stage(&mut self, name: &str) {
        let now = Instant::now();
        self.stages.push(Stage { name: name.into(), seconds: (now - self.clock).as_secs_f64() });
        self.clock = now;
    }

    fn push(&mut self, c: Criterion) {
        self.criteria.push(c);
    }

    fn diag(&mut self, name: impl Into<String>, v: f64) {
        self.diagnostics.push((name.into(), v));
    }

    fn dump(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
        if self.cfg.dump {
            let mut buf = Vec::new();
            f(&mut buf)?;
            self.dumps.push((name.into(), buf));
        }
        Ok(())
    }

    fn seed(&self, stage: &str) -> u64 {
        seed::derive(self.cfg.master_seed, stage, 0)
    }

    fn finish(self) -> Outcome {
        let pass = self.criteria.iter().all(|c| c.pass);
        Outcome {
            summary: RunSummary {
                scenario: self.cfg.scenario.name().into(),
                config_hash: self.cfg.hash(),
                master_seed: self.cfg.master_seed,
                pass,
                criteria: self.criteria,
                diagnostics: self.diagnostics,
                notes: self.notes,
                stages: self.stages,
            },
            dumps: self.dumps,
        }
    }
}

/// `name`, or `name[a,b]` for matrix entries of a multi-component run.
fn entry(name: &str, dim: usize, a: usize, b: usize) -> String {
    if dim == 1 {
        name.into()
    } else {
        format!("{name}[{a},{b}]")
    }
}

struct Estimates {
    corr: CorrelationEstimates,
    mart: MartingaleEstimate,
}

fn estimate(run: &mut Run, s: &Setting) -> Result<Estimates> {
    let corr = correlation_estimates(&s.system, &s.field, &s.v, s.positions.clone(), s.n_lags)?;
    let mart = estimate_sigma_martingale(&s.system, &s.field, &s.v, s.positions.clone(), s.truncation_k)?;
    run.stage("estimators");
    Ok(Estimates { corr, mart })
}

fn oracle_entries(run: &mut Run, name: &str, est: &MatrixEstimate, target: &Matrix, tol: f64) {
    let dim = est.dim();
    for a in 0..dim {
        for b in 0..dim {
            run.push(Criterion::near(entry(name, dim, a, b), est.value[a][b], est.se(a, b), target[a][b], tol, est.method.tag()));
        }
    }
}

/// Reconstruction, Σ and E consistency and any oracle gates; common to all scenarios.
fn common_checks(run: &mut Run, s: &Setting, est: &Estimates) -> Result<()> {
    let cfg = run.cfg;
    let dec = &est.mart.decomposition;
    let n_bins = s.system.n_bins() as f64;
    let recon = reconstruction_error(&s.system, &s.v, &dec.chi, &dec.m)?;
    run.push(Criterion::at_most("reconstruction", recon, 0.0, cfg.tolerances.reconstruction_factor / n_bins, "ulam"));
    let off = off_grid_reconstruction_error(&s.system, &s.v, &dec.chi, &dec.m, 8, run.seed("off-grid"))?;
    run.diag("reconstruction_off_grid", off);
    run.diag("chi_truncation_error", dec.chi.est_error);
    run.diag("truncation_k", s.truncation_k as f64);

    // Σ from the martingale route against E and the lag-0 term from correlations.
    let (sigma, e, lag0) = (&est.mart.sigma, &est.corr.e, &est.corr.lag0);
    let dim = sigma.dim();
    let (mut worst, mut worst_se, mut worst_ratio) = (0.0, 0.0, f64::NEG_INFINITY);
    for a in 0..dim {
        for b in 0..dim {
            let gap = (sigma.value[a][b] - e.value[a][b] - e.value[b][a] - lag0.value[a][b]).abs();
            let se = (sigma.se(a, b).powi(2) + e.se(a, b).powi(2) + e.se(b, a).powi(2) + lag0.se(a, b).powi(2)).sqrt();
            let ratio = if se > 0.0 { gap / se } else if gap == 0.0 { 0.0 } else { f64::INFINITY };
            if ratio > worst_ratio {
                (worst, worst_se, worst_ratio) = (gap, se, ratio);
            }
        }
    }
    let n_se = cfg.tolerances.n_se;
    run.push(Criterion::at_most("sigma_e_consistency", worst, worst_se, n_se * worst_se, "martingale_route+correlation_sum"));

    for a in 0..dim {
        run.diag(entry("sigma_correlation", dim, a, a), est.corr.sigma.value[a][a]);
        run.diag(entry("sigma_martingale", dim, a, a), sigma.value[a][a]);
        run.diag(entry("e_correlation", dim, a, a), e.value[a][a]);
    }
    if let Some(o) = &cfg.oracle {
        if let Some(target) = &o.sigma {
            oracle_entries(run, "sigma_correlation", &est.corr.sigma, target, o.sigma_tolerance);
            oracle_entries(run, "sigma_martingale", sigma, target, o.sigma_tolerance);
        }
        if let Some(target) = &o.e {
            oracle_entries(run, "e_correlation", e, target, o.e_tolerance);
        }
        if o.degenerate {
            let est = &est.corr.sigma;
            for a in 0..dim {
                for b in 0..dim {
                    let se = est.se(a, b);
                    let v = est.value[a][b].abs();
                    run.push(Criterion::at_most(entry("sigma_degenerate", dim, a, b), v, se, 2.0 * se, est.method.tag()));
                }
            }
        }
    }
    run.stage("common checks");
    Ok(())
}

/// Σ for the limit theorems: the oracle when given, else the martingale route.
fn sigma_for_limits(cfg: &ExperimentConfig, est: &Estimates) -> Matrix {
    cfg.oracle.as_ref().and_then(|o| o.sigma.clone()).unwrap_or_else(|| est.mart.sigma.value.clone())
}

fn dump_common(run: &mut Run, s: &Setting, est: &Estimates) -> Result<()> {
    let names = s.process.names().to_vec();
    for sym in s.system.path().distinct() {
        let op = s.system.op_for_symbol(sym);
        run.dump(format!("operator_{}.csv", names[sym]), |w| op.write_csv(&names[sym], w))?;
    }
    let h0 = Density::from_mass(s.field.mass(0)?.to_vec())?;
    run.dump("density_0.csv", |w| h0.write_csv("h_0", w))?;
    let dec = &est.mart.decomposition;
    run.dump("decomposition.csv", |w| write_decomposition_csv(&s.system, &dec.chi, &dec.m, &dec.residuals, w))?;
    let by_lag = est.corr.table.mean_by_lag();
    run.dump("correlations.csv", |w| {
        use std::io::Write;
        writeln!(w, "lag,beta,gamma,value")?;
        for (l, m) in by_lag.iter().enumerate() {
            for (a, row) in m.iter().enumerate() {
                for (b, x) in row.iter().enumerate() {
                    writeln!(w, "{l},{a},{b},{x}")?;
                }
            }
        }
        Ok(())
    })
}

pub fn run(cfg: &ExperimentConfig, cache: &UlamCache) -> Result<Outcome> {
    let mut run = Run::new(cfg);
    let s = Setting::build(cfg, cache)?;
    run.stage("setting");
    let est = estimate(&mut run, &s)?;
    common_checks(&mut run, &s, &est)?;
    match cfg.scenario {
        Scenario::Decay => decay(&mut run, &s)?,
        Scenario::Decomposition => decomposition(&mut run, &s, &est)?,
        Scenario::Clt => clt(&mut run, &s, &est)?,
        Scenario::Lil => lil(&mut run, &s, &est)?,
        Scenario::IteratedWip => iterated_wip(&mut run, &s, &est)?,
        Scenario::Moments => moments(&mut run, &s)?,
        Scenario::Homogenization => homogenization(&mut run, &s, &est, cache)?,
        Scenario::Conditions => conditions(&mut run, &s)?,
    }
    dump_common(&mut run, &s, &est)?;
    Ok(run.finish())
}

fn decay(run: &mut Run, s: &Setting) -> Result<()> {
    let tol = run.cfg.tolerances.decay_rate_max;
    let dim = s.v.dim();
    let mut profiles = Vec::new();
    for (c, phi) in s.v.bin_values(&s.system, 0).iter().enumerate() {
        let p = decay_profile(&s.system, &s.field, 0, phi, run.cfg.numerics.decay_steps)?;
        let rate = p.fitted_rate.unwrap_or(f64::NAN);
        let name = if dim == 1 { "decay_rate".to_string() } else { format!("decay_rate[{c}]") };
        run.push(Criterion::at_most(name, rate, 0.0, tol, "ulam"));
        if let Some(k) = p.envelope_k {
            run.diag(format!("decay_envelope_k[{c}]"), k);
        }
        if p.warning {
            run.notes.push(format!("component {c}: {} bin evaluations skipped at the density floor", p.excluded));
        }
        profiles.push(p);
    }
    run.stage("decay");
    run.dump("decay_profile.csv", |w| {
        use std::io::Write;
        writeln!(w, "component,n,sup_deviation")?;
        for (c, p) in profiles.iter().enumerate() {
            for (i, d) in p.sup_deviation.iter().enumerate() {
                writeln!(w, "{c},{},{d}", i + 1)?;
            }
        }
        Ok(())
    })
}

fn decomposition(run: &mut Run, s: &Setting, est: &Estimates) -> Result<()> {
    let dec = &est.mart.decomposition;
    run.push(Criterion::at_most("vanishing", dec.max_residual(), 0.0, run.cfg.tolerances.vanishing, "ulam"));
    let dc = drift_correction_limit(
        &s.system,
        &s.field,
        &s.v,
        s.positions.clone(),
        s.n_lags,
        s.truncation_k,
        Some(&est.corr.e),
    )?;
    let dim = s.v.dim();
    for a in 0..dim {
        for b in 0..dim {
            run.diag(entry("e_martingale_route", dim, a, b), dc.correction.value[a][b]);
            run.diag(entry("lagged_m", dim, a, b), dc.lagged_m.value[a][b]);
        }
    }
    if !dc.lagged_m_vanishes(run.cfg.tolerances.n_se) {
        run.notes.push("lagged ∫ m m∘τ^n did not vanish within the standard errors".into());
    }
    run.stage("decomposition");
    Ok(())
}

fn clt(run: &mut Run, s: &Setting, est: &Estimates) -> Result<()> {
    let num = &run.cfg.numerics;
    let sigma = sigma_for_limits(run.cfg, est);
    let report = clt_test(&s.system, &s.field, &s.v, 0, num.n, num.n_paths, &sigma, run.seed("clt"), run.cfg.tolerances.ks)?;
    for p in &report.projections {
        match (p.ks, p.pass) {
            (Some(ks), Some(pass)) => run.push(Criterion::new(format!("clt_ks[{}]", p.label), ks, 0.0, p.threshold, pass, "monte_carlo")),
            _ => run.notes.push(format!("projection {}: {}", p.label, p.note.clone().unwrap_or_else(|| "skipped".into()))),
        }
    }
    if report.all_skipped() {
        run.push(Criterion::new("clt_ks", f64::NAN, 0.0, f64::NAN, false, "monte_carlo"));
    }
    let dim = s.v.dim();
    for a in 0..dim {
        run.diag(entry("sigma_monte_carlo", dim, a, a), report.sigma_mc.value[a][a]);
    }
    run.stage("clt");
    run.dump("clt_samples.csv", |w| {
        use std::io::Write;
        writeln!(w, "path,component,value")?;
        for (i, x) in report.samples.iter().enumerate() {
            for (c, v) in x.iter().enumerate() {
                writeln!(w, "{i},{c},{v}")?;
            }
        }
        Ok(())
    })
}

fn lil(run: &mut Run, s: &Setting, est: &Estimates) -> Result<()> {
    let num = &run.cfg.numerics;
    let sigma = sigma_for_limits(run.cfg, est);
    let r = lil_envelope(&s.system, &s.field, &s.v, 0, num.n, num.n_paths, &sigma, run.seed("lil"))?;
    run.push(Criterion::at_least("lil_band_fraction", r.fraction_in_band, 0.0, LIL_BAND_FRACTION, "monte_carlo"));
    run.diag("lil_fraction_above", r.fraction_above);
    run.diag("lil_median_ratio", r.median);
    run.stage("lil");
    Ok(())
}

fn iterated_wip(run: &mut Run, s: &Setting, est: &Estimates) -> Result<()> {
    let num = &run.cfg.numerics;
    let oracle_e = run.cfg.oracle.as_ref().and_then(|o| o.e.clone());
    let (target, target_se) = match oracle_e {
        Some(e) => (e, None),
        None => (est.corr.e.value.clone(), Some(est.corr.e.se_matrix())),
    };
    let r = wip_mean_check(&s.system, &s.field, &s.v, 0, num.n, num.n_paths, &target, target_se.as_ref(), run.seed("wip"))?;
    let n_se = run.cfg.tolerances.n_se;
    let dim = s.v.dim();
    for e in &r.entries {
        let comb = if e.z != 0.0 && e.z.is_finite() { (e.mean - e.target).abs() / e.z.abs() } else { e.se };
        run.push(Criterion::new(
            entry("wip_mean", dim, e.beta, e.gamma),
            e.mean,
            comb,
            n_se * comb,
            e.z.abs() <= n_se,
            "monte_carlo",
        ));
    }
    run.stage("iterated wip");
    let dev = pairing_check(&s.system, &s.field, &s.v, 0, num.n, num.pairing_paths, run.seed("pairing"))?;
    run.push(Criterion::at_most("pairing_identity", dev, 0.0, run.cfg.tolerances.pairing, "exact"));
    run.stage("pairing");
    Ok(())
}

fn moments(run: &mut Run, s: &Setting) -> Result<()> {
    let num = &run.cfg.numerics;
    let ns = num.moment_grid.clone().unwrap_or_else(|| log_grid(3.0, 4.0, 3));
    let regime = decay_regime(&s.system, &s.field, &s.v, 0, num.decay_steps)?;
    let r = moment_diagnostics(&s.system, &s.field, &s.v, 0, &ns, num.n_paths, num.moment_p, (0, 0), run.seed("moments"))?;
    let sum = r.sum_slope.unwrap_or(f64::NAN);
    let it = r.iterated_slope.unwrap_or(f64::NAN);
    if regime.holds() {
        let t = &run.cfg.tolerances;
        run.push(Criterion::near("sum_moment_slope", sum, 0.0, 0.5, t.sum_slope, "monte_carlo"));
        run.push(Criterion::near("iterated_moment_slope", it, 0.0, 1.0, t.iterated_slope, "monte_carlo"));
    } else {
        run.diag("sum_moment_slope", sum);
        run.diag("iterated_moment_slope", it);
        run.notes.push(regime.reason().unwrap_or_default());
    }
    for (n, (a, b)) in r.ns.iter().zip(r.sum_norms.iter().zip(&r.iterated_norms)) {
        run.diag(format!("sum_norm[{n}]"), *a);
        run.diag(format!("iterated_norm[{n}]"), *b);
    }
    run.stage("moments");
    Ok(())
}

fn homogenization(run: &mut Run, s: &Setting, est: &Estimates, cache: &UlamCache) -> Result<()> {
    let cfg = run.cfg;
    let fs = cfg.fast_slow.as_ref().expect("validated");
    let spec = fs.spec(cfg.epsilon());
    let (sigma, e) = match (&cfg.oracle, fs.use_oracle) {
        (Some(o), true) => (o.sigma.clone().expect("validated"), o.e.clone().expect("validated")),
        _ => (est.corr.sigma.value.clone(), est.corr.e.value.clone()),
    };
    let sde = if fs.corrected { HomogenizedSDE::new(&spec, &sigma, &e)? } else { HomogenizedSDE::without_correction(&spec, &sigma)? };
    let mode = match fs.mode.as_str() {
        "averaged" => ComparisonMode::Averaged { process: s.process.clone(), k_past: PULLBACK, cache: cache.clone() },
        _ => ComparisonMode::Frozen,
    };
    let opts = CompareOptions {
        mode,
        dt: cfg.numerics.dt,
        ks_threshold: cfg.tolerances.ks,
        n_se: cfg.tolerances.n_se,
        skip_regime_check: false,
    };
    let n_paths = cfg.numerics.n_paths;
    let r = homogenization_compare(&spec, &s.system, &s.field, &s.v, &sde, 0, n_paths, run.seed("homogenization"), &opts)?;
    let d = spec.d;
    let n_se = cfg.tolerances.n_se;
    for c in &r.components {
        let dm = (c.mean_fast_slow - c.mean_sde).abs();
        let sm = c.mean_fast_slow_se.hypot(c.mean_sde_se);
        let dv = (c.var_fast_slow - c.var_sde).abs();
        let sv = c.var_fast_slow_se.hypot(c.var_sde_se);
        let k = c.component;
        let name = |base: &str| if d == 1 { base.to_string() } else { format!("{base}[{k}]") };
        run.push(Criterion::new(name("homogenization_mean"), dm, sm, n_se * sm, c.mean_ok, "monte_carlo"));
        run.push(Criterion::new(name("homogenization_variance"), dv, sv, n_se * sv, c.var_ok, "monte_carlo"));
        run.push(Criterion::new(name("homogenization_ks"), c.ks, 0.0, c.ks_threshold, c.ks_ok, "monte_carlo"));
    }
    run.stage("homogenization");
    if let Some(eps) = &fs.refinement {
        let rr = epsilon_refinement(&spec, &s.system, &s.field, &s.v, &sde, 0, eps, n_paths, run.seed("refinement"))?;
        let worst = rr.ks.windows(2).map(|w| w[1] - w[0]).fold(f64::NEG_INFINITY, f64::max);
        run.push(Criterion::new("refinement_ks_increase", worst, 0.0, rr.noise, rr.monotone, "monte_carlo"));
        run.stage("refinement");
    }
    if cfg.dump {
        let rows: Vec<Vec<(f64, f64, f64)>> = (0..d).map(|c| r.ecdf_dump(c, ECDF_POINTS)).collect();
        run.dump("homogenization_ecdf.csv", |w| {
            use std::io::Write;
            writeln!(w, "component,x,fast_slow,sde")?;
            for (c, pts) in rows.iter().enumerate() {
                for (x, a, b) in pts {
                    writeln!(w, "{c},{x},{a},{b}")?;
                }
            }
            Ok(())
        })?;
    }
    Ok(())
}

fn conditions(run: &mut Run, s: &Setting) -> Result<()> {
    let c = run.cfg.conditions.as_ref().expect("validated");
    if let (Some((q, l, d, eta, alpha)), Some(expect)) = (c.a_omega_probe, c.expect_a_omega) {
        let a = a_omega(q, d, l, eta, alpha)?;
        run.push(Criterion::near("a_omega_probe", a, 0.0, expect, 1e-12, "analytic"));
    }
    if let (Some(sv), Some(expect)) = (c.b_probe, c.expect_b) {
        let b = b_constant(sv);
        run.push(Criterion::new("b_constant", b, 0.0, 0.0, b == expect, "analytic"));
    }
    let psi = s.process.psi_upper(c.k_max)?;
    let psi_max = psi.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if s.process.is_iid() {
        run.push(Criterion::at_most("psi_upper_max", psi_max, 0.0, 0.0, "analytic"));
    } else {
        run.diag("psi_upper_max", psi_max);
    }
    let mix = s.process.check_upper_mixing_criterion(&c.rho, c.k_max)?;
    let psi_sum: f64 = mix.psi_upper.iter().sum();
    run.push(Criterion::new("mixing_criterion", psi_sum, 0.0, mix.threshold, mix.criterion_ok, "analytic"));
    if let Some(reason) = mix.reason {
        run.notes.push(reason);
    }
    let n = s.process.n_symbols();
    let osc = c.osc.clone().unwrap_or_else(|| vec![0.0; n]);
    let holder = c.holder.clone().unwrap_or_else(|| vec![0.0; n]);
    match expansion_report(s.system.maps(), s.process.marginal(), c.alpha, &osc, &holder) {
        Ok(rep) => {
            for (name, r) in s.process.names().iter().zip(&rep.per_symbol) {
                run.diag(format!("a_omega[{name}]"), r.a_omega);
                run.diag(format!("s_omega[{name}]"), r.s_omega);
                run.diag(format!("b_omega[{name}]"), r.b_omega);
            }
            run.diag("mean_a_omega", rep.mean_a);
        }
        Err(e) => run.notes.push(format!("expansion constants unavailable: {e}")),
    }
    run.stage("conditions");
    Ok(())
}
