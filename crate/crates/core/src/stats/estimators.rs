//! Ulam-quadrature estimators of `Σ`, `E` and the drift correction.
//!
//! Ω-averages are replaced by averages over consecutive positions along the
//! frozen path. Every estimate carries three error terms: the standard error
//! across positions, a discretisation term `|est_N - est_{N/2}|`, and the
//! geometric tail bound of the truncated lag series.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomp::{compute_chi, compute_m_range, verify_vanishing, ChiField, MField};
use crate::numerics::{mean_se, min_eigenvalue};
use crate::observable::Observable;
use crate::transfer::{decay_profile, DensityField, QuenchedSystem};
use crate::{Error, Result};

pub const DEFAULT_POSITIONS: usize = 256;
pub const DEFAULT_LAGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    CorrelationSum,
    MartingaleRoute,
    MonteCarlo,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Self::CorrelationSum => "correlation-sum",
            Self::MartingaleRoute => "martingale-route",
            Self::MonteCarlo => "monte-carlo",
        }
    }
}

pub type Matrix = Vec<Vec<f64>>;

fn zeros(e: usize) -> Matrix {
    vec![vec![0.0; e]; e]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub method: Method,
    pub value: Matrix,
    pub positional_se: Matrix,
    pub discretization: Matrix,
    pub tail: Matrix,
}

impl MatrixEstimate {
    pub fn dim(&self) -> usize {
        self.value.len()
    }

    /// Combined error `sqrt(se² + disc² + tail²)` of entry `(a, b)`.
    pub fn se(&self, a: usize, b: usize) -> f64 {
        let (p, d, t) = (self.positional_se[a][b], self.discretization[a][b], self.tail[a][b]);
        (p * p + d * d + t * t).sqrt()
    }

    pub fn scalar(&self) -> (f64, f64) {
        (self.value[0][0], self.se(0, 0))
    }

    pub fn se_matrix(&self) -> Matrix {
        let e = self.dim();
        (0..e).map(|a| (0..e).map(|b| self.se(a, b)).collect()).collect()
    }

    /// Smallest eigenvalue of the symmetrised estimate.
    pub fn min_eigenvalue(&self) -> f64 {
        let e = self.dim();
        let m = nalgebra::DMatrix::from_fn(e, e, |a, b| 0.5 * (self.value[a][b] + self.value[b][a]));
        min_eigenvalue(&m)
    }

    /// Same point estimate scaled by `c` (errors scale by `|c|`).
    pub fn scaled(&self, c: f64) -> Self {
        let s = |m: &Matrix, f: f64| m.iter().map(|r| r.iter().map(|x| x * f).collect()).collect();
        Self {
            method: self.method,
            value: s(&self.value, c),
            positional_se: s(&self.positional_se, c.abs()),
            discretization: s(&self.discretization, c.abs()),
            tail: s(&self.tail, c.abs()),
        }
    }

    fn from_positions(method: Method, fine: &[Matrix], coarse: Option<&[Matrix]>, tail: Matrix) -> Self {
        let e = fine[0].len();
        let mut value = zeros(e);
        let mut positional_se = zeros(e);
        let mut discretization = zeros(e);
        for a in 0..e {
            for b in 0..e {
                let xs: Vec<f64> = fine.iter().map(|m| m[a][b]).collect();
                let (mean, se) = mean_se(&xs);
                value[a][b] = mean;
                positional_se[a][b] = if se.is_finite() { se } else { 0.0 };
                if let Some(c) = coarse {
                    let ys: Vec<f64> = c.iter().map(|m| m[a][b]).collect();
                    discretization[a][b] = (mean - mean_se(&ys).0).abs();
                }
            }
        }
        Self { method, value, positional_se, discretization, tail }
    }
}

/// Per-position lag-0 and lagged correlation matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationTable {
    pub start: i64,
    pub n_lags: usize,
    /// `lag0[p][β][γ] = ∫ v^β v^γ dμ_p`.
    pub lag0: Vec<Matrix>,
    /// `lags[p][n-1][β][γ] = ∫ v^β (v^γ ∘ T^{(n)}) dμ_p`.
    pub lags: Vec<Vec<Matrix>>,
}

impl CorrelationTable {
    pub fn sigma_per_position(&self) -> Vec<Matrix> {
        self.lag0
            .iter()
            .zip(&self.lags)
            .map(|(l0, ls)| {
                let e = l0.len();
                let mut s = l0.clone();
                for c in ls {
                    for a in 0..e {
                        for b in 0..e {
                            s[a][b] += c[a][b] + c[b][a];
                        }
                    }
                }
                s
            })
            .collect()
    }

    pub fn e_per_position(&self) -> Vec<Matrix> {
        self.lags
            .iter()
            .map(|ls| {
                let e = ls.first().map_or(self.lag0[0].len(), |c| c.len());
                let mut s = zeros(e);
                for c in ls {
                    for a in 0..e {
                        for b in 0..e {
                            s[a][b] += c[a][b];
                        }
                    }
                }
                s
            })
            .collect()
    }

    /// Position-averaged correlation at each lag, `[n][β][γ]` with `n = 0..=n_lags`.
    pub fn mean_by_lag(&self) -> Vec<Matrix> {
        let e = self.lag0[0].len();
        let p = self.lag0.len() as f64;
        let mut out = vec![zeros(e); self.n_lags + 1];
        for (l0, ls) in self.lag0.iter().zip(&self.lags) {
            for a in 0..e {
                for b in 0..e {
                    out[0][a][b] += l0[a][b] / p;
                    for (n, c) in ls.iter().enumerate() {
                        out[n + 1][a][b] += c[a][b] / p;
                    }
                }
            }
        }
        out
    }
}

fn check_positions(positions: &Range<i64>) -> Result<()> {
    if positions.is_empty() {
        return Err(Error::Empty("no path positions to average over"));
    }
    Ok(())
}

pub fn correlation_table(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: Range<i64>,
    n_lags: usize,
) -> Result<CorrelationTable> {
    if !v.is_centered() {
        return Err(Error::NotCentered);
    }
    check_positions(&positions)?;
    let last = positions.end - 1 + n_lags as i64;
    system.path().check_window(positions.start, last + 1)?;
    densities.mass(positions.start)?;
    densities.mass(last)?;
    let e = v.dim();
    let n = system.n_bins();
    let vals: Vec<Vec<Vec<f64>>> = (positions.start..=last).map(|j| v.bin_values(system, j)).collect();
    let at = |j: i64| &vals[(j - positions.start) as usize];
    let rows: Vec<(Matrix, Vec<Matrix>)> = positions
        .clone()
        .into_par_iter()
        .map(|p| {
            let h = densities.mass(p).expect("checked");
            let vp = at(p);
            let mut l0 = zeros(e);
            for a in 0..e {
                for b in 0..e {
                    l0[a][b] = (0..n).map(|i| vp[a][i] * vp[b][i] * h[i]).sum();
                }
            }
            let mut lags = vec![zeros(e); n_lags];
            let mut buf = vec![0.0; n];
            for a in 0..e {
                let mut x: Vec<f64> = (0..n).map(|i| vp[a][i] * h[i]).collect();
                for (k, lag) in lags.iter_mut().enumerate() {
                    let j = p + k as i64;
                    system.op_at(j).push_into(&x, &mut buf);
                    std::mem::swap(&mut x, &mut buf);
                    let vt = at(j + 1);
                    for b in 0..e {
                        lag[a][b] = x.iter().zip(&vt[b]).map(|(m, g)| m * g).sum();
                    }
                }
            }
            (l0, lags)
        })
        .collect();
    let (lag0, lags) = rows.into_iter().unzip();
    Ok(CorrelationTable { start: positions.start, n_lags, lag0, lags })
}

/// Tail bound `Σ_{n>L} |∫ v^β (v^γ∘T^{(n)}) dμ| ≤ tail_β max|v^γ|` for each `(β, γ)`.
fn lag_tail(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: &Range<i64>,
    n_lags: usize,
) -> Result<Matrix> {
    let e = v.dim();
    let n_max = n_lags.max(1);
    let starts = [positions.start, positions.start + (positions.end - positions.start) / 2];
    let mut tail_b = vec![0.0f64; e];
    let mut sup = vec![0.0f64; e];
    for &s in &starts {
        if s + n_max as i64 > system.path().hi() || s + n_max as i64 > densities.hi() {
            continue;
        }
        for (c, comp) in v.bin_values(system, s).into_iter().enumerate() {
            sup[c] = sup[c].max(comp.iter().fold(0.0f64, |a, x| a.max(x.abs())));
            let p = decay_profile(system, densities, s, &comp, n_max)?;
            tail_b[c] = tail_b[c].max(p.tail_after(n_lags));
        }
    }
    Ok((0..e).map(|a| (0..e).map(|b| tail_b[a] * sup[b]).collect()).collect())
}

/// Resolution `N/2` copy of the setting, with `v` re-centred on the coarse grid.
pub fn coarsen(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
) -> Result<Option<(QuenchedSystem, DensityField, Observable)>> {
    let n = system.n_bins();
    if n < 8 {
        return Ok(None);
    }
    let cs = system.with_bins(n / 2)?;
    let cd = densities.at_resolution(&cs)?;
    let cv = v.centered(&cs, &cd, cd.lo(), cd.hi())?;
    Ok(Some((cs, cd, cv)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEstimates {
    pub sigma: MatrixEstimate,
    pub e: MatrixEstimate,
    pub lag0: MatrixEstimate,
    pub table: CorrelationTable,
}

impl CorrelationEstimates {
    /// `|Σ - E - Eᵀ - lag0|` entrywise.
    pub fn consistency_gap(&self) -> Matrix {
        let e = self.sigma.dim();
        (0..e)
            .map(|a| {
                (0..e)
                    .map(|b| {
                        (self.sigma.value[a][b] - self.e.value[a][b] - self.e.value[b][a] - self.lag0.value[a][b]).abs()
                    })
                    .collect()
            })
            .collect()
    }
}

/// `Σ`, `E` and the lag-0 term by the correlation-sum route.
pub fn correlation_estimates(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: Range<i64>,
    n_lags: usize,
) -> Result<CorrelationEstimates> {
    let table = correlation_table(system, densities, v, positions.clone(), n_lags)?;
    let coarse = match coarsen(system, densities, v)? {
        Some((cs, cd, cv)) => Some(correlation_table(&cs, &cd, &cv, positions.clone(), n_lags)?),
        None => None,
    };
    let tail_e = lag_tail(system, densities, v, &positions, n_lags)?;
    let e = v.dim();
    let tail_s: Matrix = (0..e).map(|a| (0..e).map(|b| tail_e[a][b] + tail_e[b][a]).collect()).collect();
    let sig_f = table.sigma_per_position();
    let e_f = table.e_per_position();
    let sig_c = coarse.as_ref().map(CorrelationTable::sigma_per_position);
    let e_c = coarse.as_ref().map(CorrelationTable::e_per_position);
    let sigma = MatrixEstimate::from_positions(Method::CorrelationSum, &sig_f, sig_c.as_deref(), tail_s);
    let e_est = MatrixEstimate::from_positions(Method::CorrelationSum, &e_f, e_c.as_deref(), tail_e);
    let lag0 = MatrixEstimate::from_positions(
        Method::CorrelationSum,
        &table.lag0,
        coarse.as_ref().map(|c| c.lag0.as_slice()),
        zeros(e),
    );
    Ok(CorrelationEstimates { sigma, e: e_est, lag0, table })
}

pub fn estimate_sigma_correlation(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: Range<i64>,
    n_lags: usize,
) -> Result<MatrixEstimate> {
    Ok(correlation_estimates(system, densities, v, positions, n_lags)?.sigma)
}

pub fn estimate_e(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: Range<i64>,
    n_lags: usize,
) -> Result<MatrixEstimate> {
    Ok(correlation_estimates(system, densities, v, positions, n_lags)?.e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub chi: ChiField,
    pub m: MField,
    pub residuals: Vec<f64>,
}

impl Decomposition {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// `χ` on `lo..=hi + 1` and `m` on `lo..=hi` with truncation `k`.
pub fn decompose(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    lo: i64,
    hi: i64,
    k: usize,
) -> Result<Decomposition> {
    let chi = compute_chi(system, densities, v, lo, hi + 1, k)?;
    let m = compute_m_range(system, v, &chi, lo, hi)?;
    let residuals = verify_vanishing(system, densities, &m)?;
    Ok(Decomposition { chi, m, residuals })
}

fn m_second_moments(
    system: &QuenchedSystem,
    densities: &DensityField,
    m: &MField,
    positions: &Range<i64>,
) -> Result<Vec<Matrix>> {
    positions.clone().map(|p| m.second_moment(system, densities, p)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleEstimate {
    pub sigma: MatrixEstimate,
    pub decomposition: Decomposition,
}

/// `Σ = avg_p Σ_cells m_p m_pᵀ h_p`.
pub fn estimate_sigma_martingale(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: Range<i64>,
    k: usize,
) -> Result<MartingaleEstimate> {
    check_positions(&positions)?;
    let dec = decompose(system, densities, v, positions.start, positions.end - 1, k)?;
    let fine = m_second_moments(system, densities, &dec.m, &positions)?;
    let coarse = match coarsen(system, densities, v)? {
        Some((cs, cd, cv)) => {
            let cdec = decompose(&cs, &cd, &cv, positions.start, positions.end - 1, k)?;
            Some(m_second_moments(&cs, &cd, &cdec.m, &positions)?)
        }
        None => None,
    };
    // Fresh truncation error enters ∫ m mᵀ at most twice.
    let e = v.dim();
    let bound = 2.0 * dec.chi.est_error * (dec.m.field.sup_norm() + dec.chi.est_error);
    let sigma = MatrixEstimate::from_positions(Method::MartingaleRoute, &fine, coarse.as_deref(), vec![vec![bound; e]; e]);
    Ok(MartingaleEstimate { sigma, decomposition: dec })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftCorrection {
    /// `E(v)`, the limit of `Σ_j ∫ (v v∘τ^j - m m∘τ^j) dμ`.
    pub correction: MatrixEstimate,
    /// `Σ_{n=1}^{L} ∫ m^β (m^γ∘τ^n) dμ`, which must vanish.
    pub lagged_m: MatrixEstimate,
}

impl DriftCorrection {
    /// `|lagged m| ≤ n_se × its error` for every entry.
    pub fn lagged_m_vanishes(&self, n_se: f64) -> bool {
        let e = self.lagged_m.dim();
        (0..e).all(|a| (0..e).all(|b| self.lagged_m.value[a][b].abs() <= n_se * self.lagged_m.se(a, b)))
    }
}

fn lagged_m_table(
    system: &QuenchedSystem,
    densities: &DensityField,
    m: &MField,
    positions: &Range<i64>,
    n_lags: usize,
) -> Result<Vec<Matrix>> {
    let e = m.field.dim;
    let n = system.n_bins();
    positions
        .clone()
        .into_par_iter()
        .map(|p| {
            let mut out = zeros(e);
            let mut buf = vec![0.0; n];
            for a in 0..e {
                let mut x = m.pushed_mass(system, densities, p, a)?;
                for k in 1..=n_lags {
                    let j = p + k as i64;
                    for (b, row) in out[a].iter_mut().enumerate() {
                        *row += m.pair_with_mass(system, j, b, &x)?;
                    }
                    if k < n_lags {
                        system.op_at(j).push_into(&x, &mut buf);
                        std::mem::swap(&mut x, &mut buf);
                    }
                }
            }
            Ok(out)
        })
        .collect()
}

/// Drift correction of the iterated invariance principle and the check that
/// lagged martingale correlations vanish.
pub fn drift_correction_limit(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    positions: Range<i64>,
    n_lags: usize,
    k: usize,
    e_estimate: Option<&MatrixEstimate>,
) -> Result<DriftCorrection> {
    check_positions(&positions)?;
    let correction = match e_estimate {
        Some(e) => e.clone(),
        None => estimate_e(system, densities, v, positions.clone(), n_lags)?,
    };
    let hi = positions.end - 1 + n_lags as i64;
    let dec = decompose(system, densities, v, positions.start, hi, k)?;
    let fine = lagged_m_table(system, densities, &dec.m, &positions, n_lags)?;
    let coarse = match coarsen(system, densities, v)? {
        Some((cs, cd, cv)) => {
            let cdec = decompose(&cs, &cd, &cv, positions.start, hi, k)?;
            Some(lagged_m_table(&cs, &cd, &cdec.m, &positions, n_lags)?)
        }
        None => None,
    };
    let e = v.dim();
    let lagged_m = MatrixEstimate::from_positions(Method::MartingaleRoute, &fine, coarse.as_deref(), zeros(e));
    Ok(DriftCorrection { correction, lagged_m })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_env::{BasePath, BaseProcess};
    use crate::fiber_maps::{FiberMap, MapFamily};
    use crate::observable::Formula;
    use std::sync::Arc;

    fn beta(b: u32) -> FiberMap {
        FiberMap::build(&MapFamily::Beta { beta: b }).unwrap()
    }

    fn doubling(n_bins: usize) -> (QuenchedSystem, DensityField) {
        let sys = QuenchedSystem::new(BasePath::constant(0, 60, 200), vec![beta(2)], n_bins).unwrap();
        let field = DensityField::along(&sys, -60, 200, 0).unwrap();
        (sys, field)
    }

    fn centered(fs: Vec<Formula>, sys: &QuenchedSystem, field: &DensityField) -> Observable {
        Observable::new(fs).unwrap().centered(sys, field, field.lo(), field.hi()).unwrap()
    }

    #[test]
    fn doubling_sigma_and_e_oracles() {
        let (sys, field) = doubling(4096);
        let lin = centered(vec![Formula::poly(&[-0.5, 1.0])], &sys, &field);
        let est = correlation_estimates(&sys, &field, &lin, 0..8, 60).unwrap();
        let (s, s_se) = est.sigma.scalar();
        assert!((s - 0.25).abs() < 0.005, "{s} ± {s_se}");
        let (e, _) = est.e.scalar();
        assert!((e - 1.0 / 12.0).abs() < 0.003, "{e}");
        assert!(est.consistency_gap()[0][0] < 1e-12);
        // Lag-n correlations follow 2^{-n}/12.
        let by_lag = est.table.mean_by_lag();
        for n in 1..6 {
            assert!((by_lag[n][0][0] - 2f64.powi(-(n as i32)) / 12.0).abs() < 1e-3);
        }

        let cos = centered(vec![Formula::cos(1.0)], &sys, &field);
        let est = correlation_estimates(&sys, &field, &cos, 0..8, 60).unwrap();
        assert!((est.sigma.scalar().0 - 0.5).abs() < 0.005);
        assert!(est.e.scalar().0.abs() < 0.003);

        let zero = centered(vec![Formula::constant(0.0)], &sys, &field);
        let est = correlation_estimates(&sys, &field, &zero, 0..8, 60).unwrap();
        assert_eq!((est.sigma.scalar().0, est.e.scalar().0), (0.0, 0.0));
    }

    #[test]
    fn martingale_route_agrees() {
        let (sys, field) = doubling(4096);
        let cos = centered(vec![Formula::cos(1.0)], &sys, &field);
        let mr = estimate_sigma_martingale(&sys, &field, &cos, 0..8, 30).unwrap();
        assert!((mr.sigma.scalar().0 - 0.5).abs() < 0.005);
        let lin = centered(vec![Formula::poly(&[-0.5, 1.0])], &sys, &field);
        let mr = estimate_sigma_martingale(&sys, &field, &lin, 0..8, 40).unwrap();
        let cr = estimate_sigma_correlation(&sys, &field, &lin, 0..8, 60).unwrap();
        let (a, sa) = mr.sigma.scalar();
        let (b, sb) = cr.scalar();
        assert!((a - 0.25).abs() < 0.01, "{a} ± {sa}");
        assert!((a - b).abs() <= 3.0 * (sa * sa + sb * sb).sqrt() + 1e-3, "{a} ± {sa} vs {b} ± {sb}");
        let zero = centered(vec![Formula::constant(0.0)], &sys, &field);
        assert_eq!(estimate_sigma_martingale(&sys, &field, &zero, 0..4, 10).unwrap().sigma.scalar().0, 0.0);
    }

    #[test]
    fn drift_correction_examples() {
        let (sys, field) = doubling(2048);
        let lin = centered(vec![Formula::poly(&[-0.5, 1.0])], &sys, &field);
        let dc = drift_correction_limit(&sys, &field, &lin, 0..4, 40, 40, None).unwrap();
        assert!((dc.correction.scalar().0 - 1.0 / 12.0).abs() < 0.003);
        assert!(dc.lagged_m.scalar().0.abs() < 1e-3, "{:?}", dc.lagged_m);

        let two = centered(vec![Formula::poly(&[-0.5, 1.0]), Formula::cos(1.0)], &sys, &field);
        let dc = drift_correction_limit(&sys, &field, &two, 0..4, 40, 40, None).unwrap();
        let c = &dc.correction.value;
        assert!((c[0][0] - 1.0 / 12.0).abs() < 0.003 && c[1][1].abs() < 0.003);
        assert!(c[0][1].is_finite() && c[1][0].is_finite());

        // A martingale observable needs no correction.
        let cos = centered(vec![Formula::cos(1.0)], &sys, &field);
        let dc = drift_correction_limit(&sys, &field, &cos, 0..4, 40, 40, None).unwrap();
        assert!(dc.correction.scalar().0.abs() < 1e-9);
    }

    #[test]
    fn random_beta_consistency_and_psd() {
        let p = BaseProcess::iid(vec!["b2".into(), "b3".into()], vec![0.5, 0.5]).unwrap();
        let sys = QuenchedSystem::new(p.sample_path(80, 200, 3), vec![beta(2), beta(3)], 1024).unwrap();
        let field = DensityField::along(&sys, -80, 200, 0).unwrap();
        let v = centered(vec![Formula::poly(&[0.0, 1.0]), Formula::sin(1.0)], &sys, &field);
        let est = correlation_estimates(&sys, &field, &v, 0..64, 40).unwrap();
        assert!(est.sigma.min_eigenvalue() >= -1e-8);
        for a in 0..2 {
            for b in 0..2 {
                assert!((est.sigma.value[a][b] - est.sigma.value[b][a]).abs() <= 1e-12);
                assert!(est.e.se(a, b) > 0.0);
            }
        }
        let mr = estimate_sigma_martingale(&sys, &field, &v, 0..64, 40).unwrap();
        for a in 0..2 {
            let gap = (mr.sigma.value[a][a] - est.sigma.value[a][a]).abs();
            let se = (mr.sigma.se(a, a).powi(2) + est.sigma.se(a, a).powi(2)).sqrt();
            assert!(gap <= 3.0 * se, "component {a}: gap {gap} vs 3 × {se}");
        }
    }

    #[test]
    fn scale_equivariance() {
        let (sys, field) = doubling(512);
        let v = centered(vec![Formula::poly(&[0.0, 1.0, 1.0])], &sys, &field);
        let w = v.scaled(-2.0);
        let a = correlation_estimates(&sys, &field, &v, 0..4, 30).unwrap();
        let b = correlation_estimates(&sys, &field, &w, 0..4, 30).unwrap();
        assert!((b.sigma.value[0][0] - 4.0 * a.sigma.value[0][0]).abs() < 1e-12);
        assert!((b.e.value[0][0] - 4.0 * a.e.value[0][0]).abs() < 1e-12);
    }

    #[test]
    fn coboundary_sigma_vanishes() {
        let maps = Arc::new(vec![beta(2)]);
        let sys = QuenchedSystem::with_cache(
            Arc::new(BasePath::constant(0, 60, 200)),
            maps.clone(),
            4096,
            &crate::transfer::UlamCache::new(),
        )
        .unwrap();
        let field = DensityField::along(&sys, -60, 200, 0).unwrap();
        let q = Formula::poly(&[0.0, 1.0, -1.0]);
        let v = Observable::with_maps(vec![Formula::coboundary(q)], maps)
            .unwrap()
            .centered(&sys, &field, -60, 200)
            .unwrap();
        let s = estimate_sigma_correlation(&sys, &field, &v, 0..8, 60).unwrap();
        let (val, se) = s.scalar();
        assert!(val.abs() <= 2.0 * se, "{val} vs se {se}");
    }

    #[test]
    fn errors_for_bad_inputs() {
        let (sys, field) = doubling(64);
        let raw = Observable::scalar(Formula::poly(&[0.0, 1.0])).unwrap();
        assert_eq!(correlation_table(&sys, &field, &raw, 0..4, 5), Err(Error::NotCentered));
        let v = raw.centered(&sys, &field, -60, 200).unwrap();
        assert!(correlation_table(&sys, &field, &v, 0..0, 5).is_err());
        assert!(matches!(correlation_table(&sys, &field, &v, 190..200, 20), Err(Error::Window { .. })));
    }
}
