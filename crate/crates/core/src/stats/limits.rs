//! Monte Carlo checks of the limit laws: CLT, LIL envelope, the mean of the
//! iterated sums and moment scaling of maximal sums.

use serde::{Deserialize, Serialize};

use super::estimators::{Matrix, MatrixEstimate, Method};
use super::sums::{iterated_from_values, observe, running_maxima};
use super::trajectory::TrajectorySampler;
use crate::numerics::{ks_one_sample, linear_fit, mean_se, normal_cdf, CompensatedSum};
use crate::observable::Observable;
use crate::seed;
use crate::transfer::{DensityField, QuenchedSystem};
use crate::{Error, Result};

/// Allowance added to the asymptotic 5% KS critical value for discretisation bias.
pub const KS_MODEL_ALLOWANCE: f64 = 0.01;

pub fn ks_threshold(n_paths: usize) -> f64 {
    1.63 / (n_paths as f64).sqrt() + KS_MODEL_ALLOWANCE
}

/// Runs `f` on the observed values `[k * e + c]` of each of `n_paths` orbits.
pub fn observed_ensemble<T, F>(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n: usize,
    n_paths: usize,
    seed: u64,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&[f64]) -> T + Sync,
{
    if !v.is_centered() {
        return Err(Error::NotCentered);
    }
    let sampler = TrajectorySampler::new(system, densities);
    let out = sampler.ensemble(start, n, n_paths, seed, |traj| observe(system, v, traj, start, n).map(|vals| f(&vals)))?;
    out.into_iter().collect()
}

fn sums_of(vals: &[f64], e: usize) -> Vec<f64> {
    let mut acc = vec![CompensatedSum::new(); e];
    for chunk in vals.chunks_exact(e) {
        acc.iter_mut().zip(chunk).for_each(|(a, &x)| a.add(x));
    }
    acc.iter().map(CompensatedSum::value).collect()
}

/// Sample covariance of `W(1)` with standard errors, the Monte Carlo route to `Σ`.
pub fn monte_carlo_sigma(w1: &[Vec<f64>]) -> Result<MatrixEstimate> {
    let e = w1.first().ok_or(Error::Empty("no samples"))?.len();
    let mut value = vec![vec![0.0; e]; e];
    let mut se = vec![vec![0.0; e]; e];
    let means: Vec<f64> = (0..e).map(|c| mean_se(&w1.iter().map(|w| w[c]).collect::<Vec<_>>()).0).collect();
    for a in 0..e {
        for b in 0..e {
            let prods: Vec<f64> = w1.iter().map(|w| (w[a] - means[a]) * (w[b] - means[b])).collect();
            let (m, s) = mean_se(&prods);
            value[a][b] = m;
            se[a][b] = s;
        }
    }
    Ok(MatrixEstimate {
        method: Method::MonteCarlo,
        value,
        positional_se: se,
        discretization: vec![vec![0.0; e]; e],
        tail: vec![vec![0.0; e]; e],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub label: String,
    pub direction: Vec<f64>,
    pub variance: f64,
    pub ks: Option<f64>,
    pub threshold: f64,
    pub pass: Option<bool>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CltReport {
    pub n: usize,
    pub n_paths: usize,
    pub projections: Vec<ProjectionResult>,
    /// `n^{-1/2} S_n` per path.
    pub samples: Vec<Vec<f64>>,
    pub sigma_mc: MatrixEstimate,
}

impl CltReport {
    /// True iff every evaluated projection passes and at least one was evaluated.
    pub fn pass(&self) -> bool {
        let evaluated: Vec<bool> = self.projections.iter().filter_map(|p| p.pass).collect();
        !evaluated.is_empty() && evaluated.iter().all(|&p| p)
    }

    pub fn max_ks(&self) -> Option<f64> {
        self.projections.iter().filter_map(|p| p.ks).reduce(f64::max)
    }

    pub fn all_skipped(&self) -> bool {
        self.projections.iter().all(|p| p.ks.is_none())
    }
}

fn projections(e: usize) -> Vec<(String, Vec<f64>)> {
    let mut out: Vec<(String, Vec<f64>)> = (0..e)
        .map(|c| {
            let mut d = vec![0.0; e];
            d[c] = 1.0;
            (format!("component_{c}"), d)
        })
        .collect();
    if e > 1 {
        let s = 1.0 / (e as f64).sqrt();
        out.push(("diagonal".into(), vec![s; e]));
    }
    out
}

/// KS distance of `n^{-1/2} S_n` against `Normal(0, uᵀΣu)` for each
/// coordinate direction and the normalised diagonal.
#[allow(clippy::too_many_arguments)]
pub fn clt_test(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n: usize,
    n_paths: usize,
    sigma: &Matrix,
    seed: u64,
    threshold: Option<f64>,
) -> Result<CltReport> {
    let e = v.dim();
    if sigma.len() != e || sigma.iter().any(|r| r.len() != e) {
        return Err(Error::Dimension { expected: e, got: sigma.len() });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("clt_test needs n >= 1".into()));
    }
    let rn = (n as f64).sqrt();
    let samples = observed_ensemble(system, densities, v, start, n, n_paths, seed, |vals| {
        sums_of(vals, e).into_iter().map(|s| s / rn).collect::<Vec<f64>>()
    })?;
    let threshold = threshold.unwrap_or_else(|| ks_threshold(n_paths));
    let projections = projections(e)
        .into_iter()
        .map(|(label, u)| {
            let variance: f64 = (0..e).flat_map(|a| (0..e).map(move |b| (a, b))).map(|(a, b)| u[a] * sigma[a][b] * u[b]).sum();
            if !(variance > 0.0) {
                return ProjectionResult {
                    label,
                    direction: u,
                    variance,
                    ks: None,
                    threshold,
                    pass: None,
                    note: Some(format!("skipped: projected variance {variance:e} is not positive")),
                };
            }
            let proj: Vec<f64> = samples.iter().map(|s| s.iter().zip(&u).map(|(x, w)| x * w).sum()).collect();
            let ks = ks_one_sample(&proj, normal_cdf(variance));
            ProjectionResult { label, direction: u, variance, ks: Some(ks), threshold, pass: Some(ks < threshold), note: None }
        })
        .collect();
    let sigma_mc = monte_carlo_sigma(&samples)?;
    Ok(CltReport { n, n_paths, projections, samples, sigma_mc })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LilReport {
    pub n_max: usize,
    pub ratios: Vec<f64>,
    pub fraction_above: f64,
    pub fraction_in_band: f64,
    pub median: f64,
}

pub const LIL_MIN_N: usize = 100;

fn lil_ratio(vals: &[f64], e: usize, sigma_diag: &[f64], n_max: usize) -> f64 {
    let mut s = vec![0.0; e];
    let mut worst: f64 = 0.0;
    for k in 0..n_max {
        s.iter_mut().zip(&vals[k * e..(k + 1) * e]).for_each(|(a, b)| *a += b);
        let n = k + 1;
        if n < LIL_MIN_N {
            continue;
        }
        let nf = n as f64;
        let scale = (2.0 * nf * nf.ln().ln()).sqrt();
        for c in 0..e {
            if sigma_diag[c] > 0.0 {
                worst = worst.max(s[c].abs() / (scale * sigma_diag[c].sqrt()));
            }
        }
    }
    worst
}

/// Distribution over paths of `max_{100≤n≤n_max} |S_n| / sqrt(2Σ n ln ln n)`,
/// maximised over components with positive variance.
#[allow(clippy::too_many_arguments)]
pub fn lil_envelope(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n_max: usize,
    n_paths: usize,
    sigma: &Matrix,
    seed: u64,
) -> Result<LilReport> {
    if n_max < LIL_MIN_N {
        return Err(Error::InvalidArgument(format!("lil_envelope needs n_max >= {LIL_MIN_N}, got {n_max}")));
    }
    let e = v.dim();
    if sigma.len() != e {
        return Err(Error::Dimension { expected: e, got: sigma.len() });
    }
    let diag: Vec<f64> = (0..e).map(|c| sigma[c][c]).collect();
    let ratios = observed_ensemble(system, densities, v, start, n_max, n_paths, seed, |vals| lil_ratio(vals, e, &diag, n_max))?;
    Ok(summarise_lil(n_max, ratios))
}

fn summarise_lil(n_max: usize, ratios: Vec<f64>) -> LilReport {
    let p = ratios.len() as f64;
    let fraction_above = ratios.iter().filter(|&&r| r > 1.5).count() as f64 / p;
    let fraction_in_band = ratios.iter().filter(|&&r| (0.4..=1.5).contains(&r)).count() as f64 / p;
    let mut sorted = ratios.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    LilReport { n_max, ratios, fraction_above, fraction_in_band, median }
}

/// Same statistic for an i.i.d. Gaussian sequence of unit variance, used to
/// calibrate the envelope band at finite `n_max`.
pub fn lil_gaussian_surrogate(n_max: usize, n_paths: usize, seed: u64) -> Result<LilReport> {
    use rand_distr::{Distribution, StandardNormal};
    use rayon::prelude::*;
    if n_max < LIL_MIN_N {
        return Err(Error::InvalidArgument(format!("lil_envelope needs n_max >= {LIL_MIN_N}, got {n_max}")));
    }
    let ratios = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stage_rng(seed, "lil-surrogate", i as u64);
            let vals: Vec<f64> = (0..n_max).map(|_| StandardNormal.sample(&mut rng)).collect();
            lil_ratio(&vals, 1, &[1.0], n_max)
        })
        .collect();
    Ok(summarise_lil(n_max, ratios))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WipEntry {
    pub beta: usize,
    pub gamma: usize,
    pub mean: f64,
    pub se: f64,
    pub target: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WipReport {
    pub n: usize,
    pub n_paths: usize,
    pub entries: Vec<WipEntry>,
}

impl WipReport {
    pub fn pass(&self) -> bool {
        self.entries.iter().all(|e| e.z.abs() < 3.0)
    }

    pub fn max_abs_z(&self) -> f64 {
        self.entries.iter().map(|e| e.z.abs()).fold(0.0, f64::max)
    }

    /// Mean `𝕎(1)` as a Monte Carlo estimate of `E`.
    pub fn e_estimate(&self) -> MatrixEstimate {
        let e = (self.entries.len() as f64).sqrt() as usize;
        let mut value = vec![vec![0.0; e]; e];
        let mut se = vec![vec![0.0; e]; e];
        for w in &self.entries {
            value[w.beta][w.gamma] = w.mean;
            se[w.beta][w.gamma] = w.se;
        }
        MatrixEstimate {
            method: Method::MonteCarlo,
            value,
            positional_se: se,
            discretization: vec![vec![0.0; e]; e],
            tail: vec![vec![0.0; e]; e],
        }
    }
}

/// z-scores of the ensemble mean of `𝕎(1)` against `target`. When
/// `target_se` is given it is combined in quadrature with the Monte Carlo SE.
#[allow(clippy::too_many_arguments)]
pub fn wip_mean_check(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n: usize,
    n_paths: usize,
    target: &Matrix,
    target_se: Option<&Matrix>,
    seed: u64,
) -> Result<WipReport> {
    let e = v.dim();
    if target.len() != e {
        return Err(Error::Dimension { expected: e, got: target.len() });
    }
    if n == 0 {
        return Err(Error::InvalidArgument("wip_mean_check needs n >= 1".into()));
    }
    let finals = observed_ensemble(system, densities, v, start, n, n_paths, seed, |vals| {
        let mut s = vec![0.0; e];
        let mut ww = vec![0.0; e * e];
        for vk in vals.chunks_exact(e) {
            for b in 0..e {
                for g in 0..e {
                    ww[b * e + g] += s[b] * vk[g];
                }
            }
            s.iter_mut().zip(vk).for_each(|(a, x)| *a += x);
        }
        ww.iter().map(|x| x / n as f64).collect::<Vec<f64>>()
    })?;
    let mut entries = Vec::with_capacity(e * e);
    for b in 0..e {
        for g in 0..e {
            let xs: Vec<f64> = finals.iter().map(|w| w[b * e + g]).collect();
            let (mean, mc_se) = mean_se(&xs);
            let t_se = target_se.map_or(0.0, |s| s[b][g]);
            let se = (mc_se * mc_se + t_se * t_se).sqrt();
            let diff = mean - target[b][g];
            let z = if se > 0.0 {
                diff / se
            } else if diff == 0.0 {
                0.0
            } else {
                f64::INFINITY
            };
            entries.push(WipEntry { beta: b, gamma: g, mean, se, target: target[b][g], z });
        }
    }
    Ok(WipReport { n, n_paths, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub p: u32,
    pub ns: Vec<usize>,
    /// `‖max_{k≤n} |S_k|‖_p` for each `n`.
    pub sum_norms: Vec<f64>,
    /// `‖max_{k≤n} |S^{βγ}_k|‖_{p/2}` for each `n`.
    pub iterated_norms: Vec<f64>,
    pub sum_slope: Option<f64>,
    pub iterated_slope: Option<f64>,
}

fn loglog_slope(ns: &[usize], ys: &[f64]) -> Option<f64> {
    if ys.iter().any(|&y| !(y > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly).map(|(s, _)| s)
}

/// Moments of maximal Birkhoff and iterated sums on the grid `ns`, read off a
/// single orbit of length `max(ns)` per path. `pair = (β, γ)` selects the
/// iterated-sum entry.
#[allow(clippy::too_many_arguments)]
pub fn moment_diagnostics(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    ns: &[usize],
    n_paths: usize,
    p: u32,
    pair: (usize, usize),
    seed: u64,
) -> Result<MomentReport> {
    if ![4, 6, 8].contains(&p) {
        return Err(Error::InvalidArgument(format!("moment order must be 4, 6 or 8, got {p}")));
    }
    let e = v.dim();
    if pair.0 >= e || pair.1 >= e {
        return Err(Error::Dimension { expected: e, got: pair.0.max(pair.1) + 1 });
    }
    let n_max = *ns.iter().max().ok_or(Error::Empty("moment grid"))?;
    if ns.contains(&0) {
        return Err(Error::InvalidArgument("moment grid must be positive".into()));
    }
    let per_path = observed_ensemble(system, densities, v, start, n_max, n_paths, seed, |vals| {
        let (ms, mi) = running_maxima(vals, e, n_max, pair.0, pair.1);
        ns.iter().map(|&n| (ms[n], mi[n])).collect::<Vec<_>>()
    })?;
    let pf = p as f64;
    let mut sum_norms = Vec::with_capacity(ns.len());
    let mut iterated_norms = Vec::with_capacity(ns.len());
    for i in 0..ns.len() {
        let a = mean_se(&per_path.iter().map(|r| r[i].0.powf(pf)).collect::<Vec<_>>()).0;
        let b = mean_se(&per_path.iter().map(|r| r[i].1.powf(pf / 2.0)).collect::<Vec<_>>()).0;
        sum_norms.push(a.powf(1.0 / pf));
        iterated_norms.push(b.powf(2.0 / pf));
    }
    let sum_slope = loglog_slope(ns, &sum_norms);
    let iterated_slope = loglog_slope(ns, &iterated_norms);
    Ok(MomentReport { p, ns: ns.to_vec(), sum_norms, iterated_norms, sum_slope, iterated_slope })
}

/// Largest pairing-identity deviation over `n_paths` orbits of length `n`.
pub fn pairing_check(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n: usize,
    n_paths: usize,
    seed: u64,
) -> Result<f64> {
    let e = v.dim();
    let devs = observed_ensemble(system, densities, v, start, n, n_paths, seed, |vals| {
        iterated_from_values(vals, e, n, 0.0, 0).pairing_deviation()
    })?;
    Ok(devs.into_iter().fold(0.0, f64::max))
}

/// `n_max` rounded grid `10^{a}, ..., 10^{b}` in `steps` equal log increments.
pub fn log_grid(lo_exp: f64, hi_exp: f64, steps: usize) -> Vec<usize> {
    if steps < 2 {
        return vec![10f64.powf(hi_exp).round() as usize];
    }
    (0..steps)
        .map(|i| 10f64.powf(lo_exp + (hi_exp - lo_exp) * i as f64 / (steps - 1) as f64).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_env::BasePath;
    use crate::fiber_maps::{FiberMap, MapFamily};
    use crate::observable::Formula;

    fn doubling(n_future: usize) -> (QuenchedSystem, DensityField) {
        let maps = vec![FiberMap::build(&MapFamily::Beta { beta: 2 }).unwrap()];
        let sys = QuenchedSystem::new(BasePath::constant(0, 0, n_future), maps, 256).unwrap();
        let field = DensityField::along(&sys, 0, n_future as i64, 0).unwrap();
        (sys, field)
    }

    fn obs(f: Formula, sys: &QuenchedSystem, field: &DensityField) -> Observable {
        Observable::scalar(f).unwrap().centered(sys, field, field.lo(), field.hi()).unwrap()
    }

    #[test]
    fn clt_cos_and_degenerate() {
        let (sys, field) = doubling(3000);
        let v = obs(Formula::cos(1.0), &sys, &field);
        let r = clt_test(&sys, &field, &v, 0, 2000, 2000, &vec![vec![0.5]], 1, None).unwrap();
        assert!(r.pass(), "{:?}", r.projections);
        assert!((r.sigma_mc.value[0][0] - 0.5).abs() < 4.0 * r.sigma_mc.se(0, 0));
        let zero = obs(Formula::constant(0.0), &sys, &field);
        let r = clt_test(&sys, &field, &zero, 0, 100, 50, &vec![vec![0.0]], 1, None).unwrap();
        assert!(r.all_skipped() && !r.pass());
        assert!(r.projections[0].note.as_deref().unwrap().starts_with("skipped"));
    }

    #[test]
    fn birkhoff_mean_is_centered() {
        let (sys, field) = doubling(100_000);
        let v = obs(Formula::poly(&[-0.5, 1.0]), &sys, &field);
        let r = clt_test(&sys, &field, &v, 0, 100_000, 1000, &vec![vec![0.25]], 3, None).unwrap();
        let xs: Vec<f64> = r.samples.iter().map(|s| s[0]).collect();
        let (m, se) = mean_se(&xs);
        assert!(m.abs() <= 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn lil_examples() {
        let (sys, field) = doubling(100_000);
        let zero = obs(Formula::constant(0.0), &sys, &field);
        let r = lil_envelope(&sys, &field, &zero, 0, 1000, 10, &vec![vec![0.0]], 1).unwrap();
        assert!(r.ratios.iter().all(|&x| x == 0.0));
        assert!(lil_envelope(&sys, &field, &zero, 0, 99, 10, &vec![vec![0.0]], 1).is_err());

        let v = obs(Formula::poly(&[-0.5, 1.0]), &sys, &field);
        let r = lil_envelope(&sys, &field, &v, 0, 100_000, 200, &vec![vec![0.25]], 2).unwrap();
        let g = lil_gaussian_surrogate(100_000, 2000, 2).unwrap();
        // The observed band fraction should match the Gaussian calibration.
        let se = (g.fraction_in_band * (1.0 - g.fraction_in_band) / 200.0).sqrt();
        assert!(r.fraction_in_band >= g.fraction_in_band - 4.0 * se - 0.02, "{} vs {}", r.fraction_in_band, g.fraction_in_band);
        assert!(r.fraction_in_band >= 0.9, "{}", r.fraction_in_band);
    }

    #[test]
    fn wip_examples() {
        let (sys, field) = doubling(5000);
        let zero = obs(Formula::constant(0.0), &sys, &field);
        let r = wip_mean_check(&sys, &field, &zero, 0, 100, 20, &vec![vec![0.0]], None, 1).unwrap();
        assert_eq!((r.entries[0].mean, r.entries[0].z), (0.0, 0.0));
        let v = obs(Formula::poly(&[-0.5, 1.0]), &sys, &field);
        let r = wip_mean_check(&sys, &field, &v, 0, 4000, 4000, &vec![vec![1.0 / 12.0]], None, 2).unwrap();
        assert!(r.pass(), "{:?}", r.entries);
        let c = obs(Formula::cos(1.0), &sys, &field);
        let r = wip_mean_check(&sys, &field, &c, 0, 4000, 4000, &vec![vec![0.0]], None, 2).unwrap();
        assert!(r.pass(), "{:?}", r.entries);
    }

    #[test]
    fn moments_examples() {
        let (sys, field) = doubling(4000);
        let zero = obs(Formula::constant(0.0), &sys, &field);
        let r = moment_diagnostics(&sys, &field, &zero, 0, &[100, 200], 10, 4, (0, 0), 1).unwrap();
        assert!(r.sum_norms.iter().chain(&r.iterated_norms).all(|&x| x == 0.0));
        assert_eq!(r.sum_slope, None);
        assert!(moment_diagnostics(&sys, &field, &zero, 0, &[100], 10, 5, (0, 0), 1).is_err());
        let v = obs(Formula::poly(&[-0.5, 1.0]), &sys, &field);
        let r = moment_diagnostics(&sys, &field, &v, 0, &[250, 1000, 4000], 1000, 4, (0, 0), 3).unwrap();
        assert!((r.sum_slope.unwrap() - 0.5).abs() < 0.05, "{r:?}");
        assert!((r.iterated_slope.unwrap() - 1.0).abs() < 0.1, "{r:?}");
    }

    #[test]
    fn pairing_on_orbits() {
        let (sys, field) = doubling(2000);
        let v = Observable::new(vec![Formula::poly(&[-0.5, 1.0]), Formula::sin(2.0)])
            .unwrap()
            .centered(&sys, &field, 0, 2000)
            .unwrap();
        assert!(pairing_check(&sys, &field, &v, 0, 2000, 50, 4).unwrap() < 1e-10);
    }

    #[test]
    fn grid_and_threshold() {
        assert_eq!(log_grid(3.0, 4.0, 3), vec![1000, 3162, 10000]);
        assert!((ks_threshold(5000) - (1.63 / 5000f64.sqrt() + 0.01)).abs() < 1e-15);
    }
}
