//! Martingale-coboundary decomposition `v = m + χ - χ∘τ` on a frozen path.
//!
//! `χ_j = Σ_{n=1}^{k} L^{(n)}_{j-n}(v_{j-n} h_{j-n}) / h_j` is accumulated
//! as a signed mass vector with the Horner recursion
//! `Z ← L_i(Z + v_i h_i)` over `i = j-k, ..., j-1`, then divided by `h_j`.
//! `m_j(x) = v_j(x) + χ_j(x) - χ_{j+1}(T_j x)` jumps wherever `T_j` does, so
//! it is stored per cell (bins refined at branch breakpoints, see
//! [`CellOperator`]) and evaluated at cell midpoints, with `χ_j`, `χ_{j+1}`
//! read piecewise-constant on bins.

use std::io::{self, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::mean_se;
use crate::observable::Observable;
use crate::seed;
use crate::stats::trajectory::TrajectorySampler;
use crate::transfer::{decay_profile, CellOperator, DensityField, QuenchedSystem, DENSITY_FLOOR};
use crate::{Error, Result};

/// Default target for `K ρ^k max‖v‖` when choosing the truncation.
pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-6;
pub const MAX_TRUNCATION: usize = 400;

pub fn center_observable(
    v: &Observable,
    system: &QuenchedSystem,
    densities: &DensityField,
    lo: i64,
    hi: i64,
) -> Result<Observable> {
    v.centered(system, densities, lo, hi)
}

/// Per-index, per-component bin arrays on the window `lo..=hi`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinField {
    pub dim: usize,
    pub lo: i64,
    /// `values[j - lo][component][bin]`.
    pub values: Vec<Vec<Vec<f64>>>,
}

impl BinField {
    pub fn hi(&self) -> i64 {
        self.lo + self.values.len() as i64 - 1
    }

    pub fn get(&self, j: i64) -> Option<&Vec<Vec<f64>>> {
        if j < self.lo {
            return None;
        }
        self.values.get((j - self.lo) as usize)
    }

    pub fn at(&self, j: i64) -> Result<&Vec<Vec<f64>>> {
        self.get(j).ok_or(Error::MissingIndex(j))
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().flatten().flatten().fold(0.0, |a, v| a.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &BinField) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .zip(other.values.iter().flatten().flatten())
            .fold(0.0, |a, (x, y)| a.max((x - y).abs()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChiField {
    pub field: BinField,
    pub truncation_k: usize,
    /// Geometric tail bound `K̂ Σ_{n>k} ρ̂^n max‖v‖` from fitted decay profiles.
    pub est_error: f64,
    /// Bins where `h_j` fell below the density floor (set to 0).
    pub masked: usize,
}

/// `values[j - lo][component][cell]` over the cells of the map at `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MField {
    pub field: BinField,
}

fn cells_at(system: &QuenchedSystem, j: i64) -> Result<&CellOperator> {
    system
        .op_at(j)
        .cells()
        .ok_or_else(|| Error::InvalidArgument(format!("operator at index {j} has no cell structure")))
}

impl MField {
    /// `m_j(x)` for component `c`, read on the cell containing `x`.
    pub fn value(&self, system: &QuenchedSystem, j: i64, c: usize, x: f64) -> Result<f64> {
        let cells = cells_at(system, j)?;
        Ok(self.field.at(j)?[c][cells.cell_of(x)])
    }

    /// `Σ_cells m m^T h w` at index `j`.
    pub fn second_moment(&self, system: &QuenchedSystem, densities: &DensityField, j: i64) -> Result<Vec<Vec<f64>>> {
        let cells = cells_at(system, j)?;
        let h = densities.mass(j)?;
        let vals = self.field.at(j)?;
        let e = self.field.dim;
        let mut out = vec![vec![0.0; e]; e];
        for k in 0..cells.n_cells() {
            let w = h[cells.bin(k)] * cells.weight(k);
            for a in 0..e {
                for b in 0..e {
                    out[a][b] += vals[a][k] * vals[b][k] * w;
                }
            }
        }
        Ok(out)
    }

    /// `m_j h_j` as bin masses pushed one step: `L_j(m_j h_j)`.
    pub fn pushed_mass(&self, system: &QuenchedSystem, densities: &DensityField, j: i64, c: usize) -> Result<Vec<f64>> {
        let cells = cells_at(system, j)?;
        let h = densities.mass(j)?;
        let vals = &self.field.at(j)?[c];
        let mh: Vec<f64> = (0..cells.n_cells()).map(|k| vals[k] * h[cells.bin(k)] * cells.weight(k)).collect();
        let mut out = vec![0.0; system.n_bins()];
        cells.push_into(&mh, &mut out);
        Ok(out)
    }

    /// `Σ_cells X[bin] w m_j` for a bin-mass vector `X` at index `j`.
    pub fn pair_with_mass(&self, system: &QuenchedSystem, j: i64, c: usize, mass: &[f64]) -> Result<f64> {
        let cells = cells_at(system, j)?;
        let vals = &self.field.at(j)?[c];
        Ok((0..cells.n_cells()).map(|k| mass[cells.bin(k)] * cells.weight(k) * vals[k]).sum())
    }
}

/// Fitted envelope of one component's decay, normalised by its sup norm.
fn envelope_tail(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    n_max: usize,
    after: usize,
) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for comp in v.bin_values(system, start) {
        let p = decay_profile(system, densities, start, &comp, n_max)?;
        worst = worst.max(p.tail_after(after));
    }
    Ok(worst)
}

/// Smallest `k` with `K̂ ρ̂^k ≤ tol`, from the decay profile of `v` at `start`.
pub fn default_truncation(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    start: i64,
    probe: usize,
    tol: f64,
) -> Result<usize> {
    let mut k_needed = 1usize;
    for comp in v.bin_values(system, start) {
        let p = decay_profile(system, densities, start, &comp, probe)?;
        if let (Some(r), Some(c)) = (p.fitted_rate, p.fitted_k) {
            if c > tol {
                let k = if r <= 0.0 {
                    1
                } else if r >= 1.0 {
                    MAX_TRUNCATION
                } else {
                    ((tol / c).ln() / r.ln()).ceil() as usize
                };
                k_needed = k_needed.max(k.min(MAX_TRUNCATION));
            }
        }
    }
    Ok(k_needed)
}

/// `χ_j` for `j ∈ lo..=hi` with truncation `k`.
pub fn compute_chi(
    system: &QuenchedSystem,
    densities: &DensityField,
    v: &Observable,
    lo: i64,
    hi: i64,
    k: usize,
) -> Result<ChiField> {
    if !v.is_centered() {
        return Err(Error::NotCentered);
    }
    if lo > hi {
        return Err(Error::InvalidArgument(format!("empty index range {lo}..={hi}")));
    }
    let first = lo - k as i64;
    if first < system.path().lo() || first < densities.lo() {
        return Err(Error::InsufficientPast {
            required: (k as i64 - lo).max(0) as usize,
            available: system.path().k_past().min((-densities.lo()).max(0) as usize),
        });
    }
    system.path().check_window(first, hi + 1)?;
    let n = system.n_bins();
    let e = v.dim();
    // vh[i - first][c] = v_i h_i as signed masses.
    let vh: Vec<Vec<Vec<f64>>> = (first..hi)
        .map(|i| {
            let h = densities.mass(i)?;
            Ok(v.bin_values(system, i)
                .into_iter()
                .map(|comp| comp.iter().zip(h).map(|(a, b)| a * b).collect())
                .collect())
        })
        .collect::<Result<_>>()?;
    let mut masked = 0usize;
    let mut values = Vec::with_capacity((hi - lo + 1) as usize);
    let mut z = vec![0.0; n];
    let mut buf = vec![0.0; n];
    for j in lo..=hi {
        let h = densities.mass(j)?;
        let mut per_comp = Vec::with_capacity(e);
        for c in 0..e {
            z.iter_mut().for_each(|x| *x = 0.0);
            for i in (j - k as i64)..j {
                let src = &vh[(i - first) as usize][c];
                z.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                system.op_at(i).push_into(&z, &mut buf);
                std::mem::swap(&mut z, &mut buf);
            }
            let chi: Vec<f64> = z
                .iter()
                .zip(h)
                .map(|(m, &hb)| {
                    if hb < DENSITY_FLOOR {
                        masked += 1;
                        0.0
                    } else {
                        m / hb
                    }
                })
                .collect();
            per_comp.push(chi);
        }
        values.push(per_comp);
    }
    let max_v = (first..hi)
        .flat_map(|i| v.bin_values(system, i).into_iter().flatten())
        .fold(0.0f64, |a, x| a.max(x.abs()));
    let tail = if k == 0 || max_v == 0.0 {
        0.0
    } else {
        // Envelopes from a few starts in the truncated range; each profile's
        // `K̂` carries the scale of the probed component.
        let n_starts = k.min(8);
        let mut worst: f64 = 0.0;
        for t in 0..n_starts {
            let s0 = first + (t * k / n_starts) as i64;
            let n_max = k.min((system.path().hi() - s0) as usize).min((densities.hi() - s0) as usize).max(1);
            worst = worst.max(envelope_tail(system, densities, v, s0, n_max, k)?);
        }
        worst
    };
    Ok(ChiField {
        field: BinField { dim: e, lo, values },
        truncation_k: k,
        est_error: tail.max(0.0),
        masked,
    })
}

/// `m_j` for every `j` with `χ_j` and `χ_{j+1}` available, i.e. `lo..hi`.
pub fn compute_m(system: &QuenchedSystem, v: &Observable, chi: &ChiField) -> Result<MField> {
    let lo = chi.field.lo;
    let hi = chi.field.hi();
    if hi <= lo {
        return Err(Error::MissingIndex(lo + 1));
    }
    compute_m_range(system, v, chi, lo, hi - 1)
}

pub fn compute_m_range(
    system: &QuenchedSystem,
    v: &Observable,
    chi: &ChiField,
    lo: i64,
    hi: i64,
) -> Result<MField> {
    let e = v.dim();
    if chi.field.dim != e {
        return Err(Error::Dimension { expected: e, got: chi.field.dim });
    }
    let mut values = Vec::with_capacity((hi - lo + 1).max(0) as usize);
    for j in lo..=hi {
        let cj = chi.field.at(j)?;
        let cn = chi.field.at(j + 1)?;
        let map = system.map_at(j);
        let cells = cells_at(system, j)?;
        let sym = system.symbol_at(j);
        let pts: Vec<(f64, usize, usize)> = (0..cells.n_cells())
            .map(|k| {
                let x = cells.midpoint(k);
                (x, cells.bin(k), system.bin_of(map.image(x)))
            })
            .collect();
        values.push(
            (0..e)
                .map(|c| pts.iter().map(|&(x, b, bt)| v.eval_component(c, j, sym, x) + cj[c][b] - cn[c][bt]).collect())
                .collect(),
        );
    }
    Ok(MField { field: BinField { dim: e, lo, values } })
}

/// `max_bins |L_j(m_j h_j) / h_{j+1}|` per index (max over components).
pub fn verify_vanishing(system: &QuenchedSystem, densities: &DensityField, m: &MField) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(m.field.values.len());
    for k in 0..m.field.values.len() {
        let j = m.field.lo + k as i64;
        let hn = densities.mass(j + 1)?;
        let mut r: f64 = 0.0;
        for c in 0..m.field.dim {
            let pushed = m.pushed_mass(system, densities, j, c)?;
            for (g, &hb) in pushed.iter().zip(hn) {
                if hb >= DENSITY_FLOOR {
                    r = r.max((g / hb).abs());
                }
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// `max |v_j - (m_j + χ_{j+1}∘T_j - χ_j)|` at the cell midpoints.
pub fn reconstruction_error(system: &QuenchedSystem, v: &Observable, chi: &ChiField, m: &MField) -> Result<f64> {
    let mut err: f64 = 0.0;
    for (k, comps) in m.field.values.iter().enumerate() {
        let j = m.field.lo + k as i64;
        let s = system.symbol_at(j);
        let map = system.map_at(j);
        let cells = cells_at(system, j)?;
        let cj = chi.field.at(j)?;
        let cn = chi.field.at(j + 1)?;
        for (c, mc) in comps.iter().enumerate() {
            for (q, &mv) in mc.iter().enumerate() {
                let x = cells.midpoint(q);
                let recon = mv + cn[c][system.bin_of(map.image(x))] - cj[c][cells.bin(q)];
                err = err.max((v.eval_component(c, j, s, x) - recon).abs());
            }
        }
    }
    Ok(err)
}

/// Same identity at uniformly drawn off-grid points, with `m` and `χ` read
/// piecewise-constant. This measures interpolation error, which is `O(1/N)`.
pub fn off_grid_reconstruction_error(
    system: &QuenchedSystem,
    v: &Observable,
    chi: &ChiField,
    m: &MField,
    points_per_index: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = seed::stage_rng(seed, "off-grid-reconstruction", 0);
    let mut err: f64 = 0.0;
    for (k, comps) in m.field.values.iter().enumerate() {
        let j = m.field.lo + k as i64;
        let s = system.symbol_at(j);
        let map = system.map_at(j);
        let cj = chi.field.at(j)?;
        let cn = chi.field.at(j + 1)?;
        let cells = cells_at(system, j)?;
        for _ in 0..points_per_index {
            let x: f64 = rng.random();
            let b = system.bin_of(x);
            let q = cells.cell_of(x);
            let bt = system.bin_of(map.image(x));
            for (c, mc) in comps.iter().enumerate() {
                let recon = mc[q] + cn[c][bt] - cj[c][b];
                err = err.max((v.eval_component(c, j, s, x) - recon).abs());
            }
        }
    }
    Ok(err)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TestFunction {
    One,
    X,
    X2,
}

impl TestFunction {
    pub const ALL: [TestFunction; 3] = [TestFunction::One, TestFunction::X, TestFunction::X2];

    #[inline]
    pub fn eval(self, x: f64) -> f64 {
        match self {
            Self::One => 1.0,
            Self::X => x,
            Self::X2 => x * x,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::One => "1",
            Self::X => "x",
            Self::X2 => "x^2",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityEntry {
    pub a: usize,
    pub b: usize,
    pub component: usize,
    pub g: TestFunction,
    pub mean: f64,
    pub se: f64,
}

impl OrthogonalityEntry {
    pub fn z(&self) -> f64 {
        if self.se > 0.0 {
            self.mean / self.se
        } else if self.mean == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }

    pub fn within(&self, n_se: f64) -> bool {
        self.z().abs() <= n_se
    }
}

/// Empirical `E_μ[m_{start+a}(x_{start+a}) g(x_{start+b})]` for
/// `1 ≤ a < b ≤ n` and `g ∈ {1, x, x²}`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_martingale_check(
    system: &QuenchedSystem,
    densities: &DensityField,
    m: &MField,
    start: i64,
    n: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<OrthogonalityEntry>> {
    if n < 2 {
        return Err(Error::InvalidArgument("horizon must be at least 2".into()));
    }
    let mut cell_ops = Vec::with_capacity(n);
    for a in 1..n {
        m.field.at(start + a as i64)?;
        cell_ops.push(cells_at(system, start + a as i64)?);
    }
    let e = m.field.dim;
    let pairs: Vec<(usize, usize)> = (1..n).flat_map(|a| (a + 1..=n).map(move |b| (a, b))).collect();
    let width = pairs.len() * e * 3;
    let sampler = TrajectorySampler::new(system, densities);
    let rows = sampler.ensemble(start, n, n_paths, seed, |traj| {
        let mut row = Vec::with_capacity(width);
        for &(a, b) in &pairs {
            let vals = m.field.get(start + a as i64).expect("checked above");
            let cell = cell_ops[a - 1].cell_of(traj[a]);
            for comp in vals {
                for g in TestFunction::ALL {
                    row.push(comp[cell] * g.eval(traj[b]));
                }
            }
        }
        row
    })?;
    let mut out = Vec::with_capacity(width);
    let mut col = vec![0.0; rows.len()];
    let mut idx = 0;
    for &(a, b) in &pairs {
        for component in 0..e {
            for g in TestFunction::ALL {
                for (r, row) in rows.iter().enumerate() {
                    col[r] = row[idx];
                }
                let (mean, se) = mean_se(&col);
                out.push(OrthogonalityEntry { a, b, component, g, mean, se });
                idx += 1;
            }
        }
    }
    Ok(out)
}

/// `index,component,cell,bin,x,chi,m,residual` rows, one per cell.
pub fn write_decomposition_csv<W: Write>(
    system: &QuenchedSystem,
    chi: &ChiField,
    m: &MField,
    residuals: &[f64],
    mut w: W,
) -> io::Result<()> {
    writeln!(w, "index,component,cell,bin,x,chi,m,residual")?;
    for (k, comps) in m.field.values.iter().enumerate() {
        let j = m.field.lo + k as i64;
        let Some(cj) = chi.field.get(j) else { continue };
        let Some(cells) = system.op_at(j).cells() else { continue };
        let r = residuals.get(k).copied().unwrap_or(f64::NAN);
        for (c, mc) in comps.iter().enumerate() {
            for (q, mv) in mc.iter().enumerate() {
                let b = cells.bin(q);
                writeln!(w, "{j},{c},{q},{b},{},{},{mv},{r}", cells.midpoint(q), cj[c][b])?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_env::{BasePath, BaseProcess};
    use crate::fiber_maps::{FiberMap, MapFamily};
    use crate::observable::Formula;
    use proptest::prelude::*;

    fn beta(b: u32) -> FiberMap {
        FiberMap::build(&MapFamily::Beta { beta: b }).unwrap()
    }

    fn doubling(n_bins: usize, k_past: usize, n_future: usize) -> (QuenchedSystem, DensityField) {
        let sys = QuenchedSystem::new(BasePath::constant(0, k_past, n_future), vec![beta(2)], n_bins).unwrap();
        let field = DensityField::along(&sys, -(k_past as i64), n_future as i64, 0).unwrap();
        (sys, field)
    }

    fn centered(f: Vec<Formula>, sys: &QuenchedSystem, field: &DensityField) -> Observable {
        Observable::new(f).unwrap().centered(sys, field, field.lo(), field.hi()).unwrap()
    }

    fn lin() -> Formula {
        Formula::poly(&[0.0, 1.0])
    }

    #[test]
    fn chi_requires_centering_and_past() {
        let (sys, field) = doubling(64, 10, 5);
        let raw = Observable::scalar(lin()).unwrap();
        assert_eq!(compute_chi(&sys, &field, &raw, 0, 2, 5), Err(Error::NotCentered));
        let v = centered(vec![lin()], &sys, &field);
        assert!(matches!(compute_chi(&sys, &field, &v, 0, 2, 11), Err(Error::InsufficientPast { .. })));
    }

    #[test]
    fn chi_of_cos_and_zero_vanish() {
        let (sys, field) = doubling(4096, 40, 4);
        let v = centered(vec![Formula::cos(1.0)], &sys, &field);
        let chi = compute_chi(&sys, &field, &v, 0, 2, 30).unwrap();
        assert!(chi.field.sup_norm() < 1e-12, "{}", chi.field.sup_norm());
        let m = compute_m(&sys, &v, &chi).unwrap();
        let r = verify_vanishing(&sys, &field, &m).unwrap();
        assert!(r.iter().all(|&x| x <= 1e-6), "{r:?}");
        for (k, comps) in m.field.values.iter().enumerate() {
            let vj = v.bin_values(&sys, k as i64);
            assert!(comps[0].iter().zip(&vj[0]).all(|(a, b)| (a - b).abs() < 1e-12));
        }

        let zero = centered(vec![Formula::constant(0.0)], &sys, &field);
        let chi = compute_chi(&sys, &field, &zero, 0, 2, 30).unwrap();
        assert_eq!(chi.field.sup_norm(), 0.0);
        let m = compute_m(&sys, &zero, &chi).unwrap();
        assert_eq!(verify_vanishing(&sys, &field, &m).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn chi_for_linear_observable_on_doubling() {
        let n = 4096;
        let (sys, field) = doubling(n, 40, 4);
        let v = centered(vec![lin()], &sys, &field);
        let chi = compute_chi(&sys, &field, &v, 0, 3, 30).unwrap();
        for j in 0..=3 {
            for (i, &c) in chi.field.at(j).unwrap()[0].iter().enumerate() {
                let x = sys.midpoint(i);
                // Ulam projection error of each term is below 1/(2N) and vanishes
                // once 2^n ≥ N, so the sum is bounded by log2(N)/(2N).
                assert!((c - (x - 0.5)).abs() < 12.0 / (2.0 * n as f64) + 1e-8, "j {j} bin {i}: {c}");
            }
        }
        let m = compute_m(&sys, &v, &chi).unwrap();
        // m(x) = 2x - 1/2 - (2x mod 1 - 1/2) - 1/2 = 0 on [0,1/2), 1/2 on [1/2,1) minus centering.
        for (i, &mv) in m.field.at(0).unwrap()[0].iter().enumerate() {
            let x = sys.midpoint(i);
            let closed = (x - 0.5) + (x - 0.5) - ((2.0 * x) % 1.0 - 0.5);
            assert!((mv - closed).abs() < 1e-3, "{x}: {mv} vs {closed}");
        }
        let r = verify_vanishing(&sys, &field, &m).unwrap();
        assert!(r.iter().all(|&x| x <= 1e-3), "{r:?}");
        assert!(reconstruction_error(&sys, &v, &chi, &m).unwrap() < 1e-12);
        assert!(off_grid_reconstruction_error(&sys, &v, &chi, &m, 2000, 1).unwrap() < 4.0 / n as f64);
    }

    #[test]
    fn vanishing_on_random_beta_ensemble() {
        let p = BaseProcess::iid(vec!["b2".into(), "b3".into()], vec![0.5, 0.5]).unwrap();
        let sys = QuenchedSystem::new(p.sample_path(60, 20, 8), vec![beta(2), beta(3)], 4096).unwrap();
        let field = DensityField::along(&sys, -60, 20, 0).unwrap();
        let v = centered(vec![lin()], &sys, &field);
        let chi = compute_chi(&sys, &field, &v, 0, 10, 40).unwrap();
        let m = compute_m(&sys, &v, &chi).unwrap();
        let r = verify_vanishing(&sys, &field, &m).unwrap();
        assert!(r.iter().all(|&x| x <= 1e-3), "{r:?}");
        assert!(chi.est_error < 1e-6, "{}", chi.est_error);
    }

    #[test]
    fn vanishing_on_nonlinear_map() {
        let map = FiberMap::build(&MapFamily::Mixed { d: 3, q: 1, eta: 3.0, curvature: 0.5 }).unwrap();
        let sys = QuenchedSystem::new(BasePath::constant(0, 120, 10), vec![map], 2048).unwrap();
        let field = DensityField::along(&sys, -60, 10, 60).unwrap();
        let v = centered(vec![lin()], &sys, &field);
        let chi = compute_chi(&sys, &field, &v, 0, 5, 40).unwrap();
        let m = compute_m(&sys, &v, &chi).unwrap();
        let r = verify_vanishing(&sys, &field, &m).unwrap();
        assert!(r.iter().all(|&x| x <= 5e-3), "{r:?}");
        assert!(reconstruction_error(&sys, &v, &chi, &m).unwrap() < 1e-12);
    }

    #[test]
    fn truncation_consistency() {
        let p = BaseProcess::iid(vec!["b2".into(), "b3".into()], vec![0.5, 0.5]).unwrap();
        let sys = QuenchedSystem::new(p.sample_path(60, 4, 2), vec![beta(2), beta(3)], 1024).unwrap();
        let field = DensityField::along(&sys, -60, 4, 0).unwrap();
        let v = centered(vec![Formula::poly(&[0.0, 1.0, 1.0])], &sys, &field);
        let a = compute_chi(&sys, &field, &v, 0, 2, 8).unwrap();
        let b = compute_chi(&sys, &field, &v, 0, 2, 18).unwrap();
        assert!(a.field.max_abs_diff(&b.field) <= a.est_error, "{} > {}", a.field.max_abs_diff(&b.field), a.est_error);
        let k = default_truncation(&sys, &field, &v, -40, 30, DEFAULT_TRUNCATION_TOL).unwrap();
        assert!((10..=40).contains(&k), "{k}");
    }

    #[test]
    fn components_stack() {
        let (sys, field) = doubling(512, 30, 3);
        let two = centered(vec![lin(), Formula::cos(2.0)], &sys, &field);
        let chi2 = compute_chi(&sys, &field, &two, 0, 2, 20).unwrap();
        for c in 0..2 {
            let chi1 = compute_chi(&sys, &field, &two.component(c), 0, 2, 20).unwrap();
            for (a, b) in chi2.field.values.iter().zip(&chi1.field.values) {
                assert_eq!(a[c], b[0]);
            }
        }
    }

    #[test]
    fn orthogonality_to_the_future() {
        let (sys, field) = doubling(1024, 30, 12);
        let v = centered(vec![Formula::cos(1.0)], &sys, &field);
        let chi = compute_chi(&sys, &field, &v, 0, 6, 20).unwrap();
        let m = compute_m(&sys, &v, &chi).unwrap();
        let table = reverse_martingale_check(&sys, &field, &m, 0, 4, 100_000, 17).unwrap();
        assert_eq!(table.len(), 6 * 3);
        let e12x = table.iter().find(|e| e.a == 1 && e.b == 2 && e.g == TestFunction::X).unwrap();
        assert!(e12x.within(3.0), "{e12x:?}");
        let ones: Vec<_> = table.iter().filter(|e| e.g == TestFunction::One).collect();
        assert!(ones.iter().all(|e| e.within(4.0)));

        let zero = centered(vec![Formula::constant(0.0)], &sys, &field);
        let chi = compute_chi(&sys, &field, &zero, 0, 6, 20).unwrap();
        let m = compute_m(&sys, &zero, &chi).unwrap();
        let table = reverse_martingale_check(&sys, &field, &m, 0, 3, 100, 1).unwrap();
        assert!(table.iter().all(|e| e.mean == 0.0 && e.z() == 0.0));
    }

    #[test]
    fn csv_dump_shape() {
        let (sys, field) = doubling(4, 4, 2);
        let v = centered(vec![lin()], &sys, &field);
        let chi = compute_chi(&sys, &field, &v, 0, 1, 3).unwrap();
        let m = compute_m(&sys, &v, &chi).unwrap();
        let r = verify_vanishing(&sys, &field, &m).unwrap();
        let mut buf = Vec::new();
        write_decomposition_csv(&sys, &chi, &m, &r, &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().count(), 1 + 4);
        assert!(s.starts_with("index,component,cell,bin,x,chi,m,residual\n0,0,0,0,0.125,"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn chi_is_linear(alpha in -3.0f64..3.0, c1 in -1.0f64..1.0, c2 in -1.0f64..1.0, seed in 0u64..1000) {
            let p = BaseProcess::iid(vec!["b2".into(), "b3".into()], vec![0.4, 0.6]).unwrap();
            let sys = QuenchedSystem::new(p.sample_path(20, 3, seed), vec![beta(2), beta(3)], 128).unwrap();
            let field = DensityField::along(&sys, -20, 3, 0).unwrap();
            let f1 = Formula::poly(&[0.0, c1, 1.0]);
            let f2 = Formula::Cos { freq: 3.0, amp: c2 };
            let combo = Formula::Sum { terms: vec![Formula::Scaled { factor: alpha, inner: Box::new(f1.clone()) }, f2.clone()] };
            let chi = |f: Formula| {
                let v = centered(vec![f], &sys, &field);
                compute_chi(&sys, &field, &v, 0, 2, 15).unwrap().field
            };
            let (a, b, c) = (chi(f1), chi(f2), chi(combo));
            for j in 0..3 {
                for i in 0..128 {
                    let lhs = c.values[j][0][i];
                    let rhs = alpha * a.values[j][0][i] + b.values[j][0][i];
                    prop_assert!((lhs - rhs).abs() < 1e-10);
                }
            }
        }
    }
}
