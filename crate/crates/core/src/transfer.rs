//! Ulam discretisation of transfer operators along a base path.
//!
//! Bin `i` is `[i/N, (i+1)/N)`. An [`UlamOperator`] stores the bin-to-bin
//! transition probabilities `Leb(B_i ∩ T^{-1} B_j) / Leb(B_i)` in CSR form,
//! indexed by source row. Densities are probability masses per bin, so a
//! density value is `mass * N`.

use std::collections::HashMap;
use std::io::{self, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::base_env::BasePath;
use crate::fiber_maps::{FiberMap, MapFamily};
use crate::numerics::{linear_fit, mean_se};
use crate::stats::trajectory::TrajectorySampler;
use crate::{Error, Result};

/// Densities below this are treated as zero when converting measures back
/// to functions; such bins are masked.
pub const DENSITY_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub struct UlamOperator {
    n_bins: usize,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    /// Largest `|row sum - 1|` before renormalisation.
    renormalization_drift: f64,
    cells: Option<CellOperator>,
}

/// The same transition structure on bins refined at branch breakpoints.
///
/// A cell is `B_i ∩ I_b` for bin `i` and branch interval `I_b`. Functions
/// that are smooth on each branch but jump at breakpoints (such as `χ∘T`)
/// are represented per cell, which keeps their transfer accurate even when
/// breakpoints do not fall on bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct CellOperator {
    n_bins: usize,
    bin: Vec<u32>,
    branch: Vec<u32>,
    left: Vec<f64>,
    right: Vec<f64>,
    /// `Leb(cell) * N`, the fraction of the bin the cell occupies.
    weight: Vec<f64>,
    first_cell: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    /// Probability that a uniform point of the cell lands in bin `col`.
    vals: Vec<f64>,
}

impl CellOperator {
    pub fn n_cells(&self) -> usize {
        self.bin.len()
    }

    pub fn bin(&self, c: usize) -> usize {
        self.bin[c] as usize
    }

    pub fn branch(&self, c: usize) -> usize {
        self.branch[c] as usize
    }

    pub fn weight(&self, c: usize) -> f64 {
        self.weight[c]
    }

    pub fn bounds(&self, c: usize) -> (f64, f64) {
        (self.left[c], self.right[c])
    }

    pub fn midpoint(&self, c: usize) -> f64 {
        0.5 * (self.left[c] + self.right[c])
    }

    pub fn cells_of_bin(&self, i: usize) -> std::ops::Range<usize> {
        self.first_cell[i]..self.first_cell[i + 1]
    }

    /// Cell containing `x ∈ [0,1)`.
    #[inline]
    pub fn cell_of(&self, x: f64) -> usize {
        let i = ((x * self.n_bins as f64) as usize).min(self.n_bins - 1);
        let r = self.cells_of_bin(i);
        let last = r.end - 1;
        r.into_iter().find(|&c| x < self.right[c]).unwrap_or(last)
    }

    /// `out[j] = Σ_c mass[c] P[c][j]`.
    pub fn push_into(&self, mass: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (c, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for k in self.row_ptr[c]..self.row_ptr[c + 1] {
                out[self.cols[k] as usize] += m * self.vals[k];
            }
        }
    }
}

impl UlamOperator {
    pub fn identity(n_bins: usize) -> Self {
        Self {
            n_bins,
            row_ptr: (0..=n_bins).collect(),
            cols: (0..n_bins as u32).collect(),
            vals: vec![1.0; n_bins],
            renormalization_drift: 0.0,
            cells: None,
        }
    }

    /// Exact Ulam matrix: each branch's inverse image of every target bin is
    /// an interval with closed-form endpoints, intersected with source bins.
    pub fn from_map(map: &FiberMap, n_bins: usize) -> Result<Self> {
        if n_bins < 2 {
            return Err(Error::InvalidArgument(format!("n_bins must be >= 2, got {n_bins}")));
        }
        let nf = n_bins as f64;
        // (source bin, branch, target bin, Leb * N)
        let mut quads: Vec<(u32, u32, u32, f64)> = Vec::new();
        for (bi, b) in map.branches().iter().enumerate() {
            for j in 0..n_bins {
                let y0 = b.inverse(j as f64 / nf);
                let y1 = b.inverse((j + 1) as f64 / nf);
                let (lo, hi) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };
                let first = ((lo * nf).floor() as usize).min(n_bins - 1);
                let last = ((hi * nf).ceil() as usize).clamp(first + 1, n_bins);
                for i in first..last {
                    let overlap = hi.min((i + 1) as f64 / nf) - lo.max(i as f64 / nf);
                    if overlap > 0.0 {
                        quads.push((i as u32, bi as u32, j as u32, overlap * nf));
                    }
                }
            }
        }
        quads.sort_unstable_by_key(|q| (q.0, q.1, q.2));
        let cells = CellOperator::from_quads(map, n_bins, &quads);
        let mut op = Self::from_triplets(n_bins, quads.into_iter().map(|(i, _, j, v)| (i, j, v)).collect());
        op.cells = Some(cells);
        Ok(op)
    }

    fn from_triplets(n_bins: usize, mut triplets: Vec<(u32, u32, f64)>) -> Self {
        triplets.sort_unstable_by_key(|t| (t.0, t.1));
        let mut row_ptr = vec![0usize; n_bins + 1];
        let mut cols: Vec<u32> = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut rows: Vec<u32> = Vec::with_capacity(triplets.len());
        for (i, j, v) in triplets {
            if rows.last() == Some(&i) && cols.last() == Some(&j) {
                *vals.last_mut().unwrap() += v;
            } else {
                rows.push(i);
                cols.push(j);
                vals.push(v);
            }
        }
        for &i in &rows {
            row_ptr[i as usize + 1] += 1;
        }
        for i in 0..n_bins {
            row_ptr[i + 1] += row_ptr[i];
        }
        let mut drift: f64 = 0.0;
        for i in 0..n_bins {
            let r = row_ptr[i]..row_ptr[i + 1];
            let s: f64 = vals[r.clone()].iter().sum();
            drift = drift.max((s - 1.0).abs());
            if s > 0.0 {
                vals[r].iter_mut().for_each(|v| *v /= s);
            }
        }
        Self { n_bins, row_ptr, cols, vals, renormalization_drift: drift, cells: None }
    }

    pub fn cells(&self) -> Option<&CellOperator> {
        self.cells.as_ref()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn renormalization_drift(&self) -> f64 {
        self.renormalization_drift
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().map(|&c| c as usize).zip(self.vals[r].iter().copied())
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.n_bins)
            .map(|i| {
                let mut row = vec![0.0; self.n_bins];
                for (j, v) in self.row(i) {
                    row[j] = v;
                }
                row
            })
            .collect()
    }

    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.n_bins)
            .map(|i| (self.row(i).map(|(_, v)| v).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.vals.iter().all(|&v| v >= 0.0) && self.max_row_sum_error() <= tol
    }

    /// `out[j] = Σ_i m[i] P[i][j]` for a signed mass vector.
    pub fn push_into(&self, mass: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                out[self.cols[k] as usize] += m * self.vals[k];
            }
        }
    }

    pub fn push(&self, mass: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_bins];
        self.push_into(mass, &mut out);
        out
    }

    /// Operator of "apply `self`, then `next`": rows of `self` pushed
    /// through `next`.
    pub fn then(&self, next: &UlamOperator) -> Result<UlamOperator> {
        if next.n_bins != self.n_bins {
            return Err(Error::Dimension { expected: self.n_bins, got: next.n_bins });
        }
        let n = self.n_bins;
        let mut acc = vec![0.0; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            for (k, a) in self.row(i) {
                for (j, b) in next.row(k) {
                    if acc[j] == 0.0 {
                        touched.push(j);
                    }
                    acc[j] += a * b;
                }
            }
            touched.sort_unstable();
            for &j in &touched {
                if acc[j] != 0.0 {
                    cols.push(j as u32);
                    vals.push(acc[j]);
                }
                acc[j] = 0.0;
            }
            touched.clear();
            row_ptr.push(cols.len());
        }
        Ok(UlamOperator { n_bins: n, row_ptr, cols, vals, renormalization_drift: 0.0, cells: None })
    }

    /// Row-major sparse dump: `row,col,value` lines after a header naming
    /// the bin count and symbol.
    pub fn write_csv<W: Write>(&self, symbol: &str, mut w: W) -> io::Result<()> {
        writeln!(w, "# n_bins={} symbol={}", self.n_bins, symbol)?;
        writeln!(w, "row,col,value")?;
        for i in 0..self.n_bins {
            for (j, v) in self.row(i) {
                writeln!(w, "{i},{j},{v}")?;
            }
        }
        Ok(())
    }
}

impl CellOperator {
    /// `quads` sorted by (bin, branch, target).
    fn from_quads(map: &FiberMap, n_bins: usize, quads: &[(u32, u32, u32, f64)]) -> Self {
        let nf = n_bins as f64;
        let mut op = CellOperator {
            n_bins,
            bin: Vec::new(),
            branch: Vec::new(),
            left: Vec::new(),
            right: Vec::new(),
            weight: Vec::new(),
            first_cell: vec![0; n_bins + 1],
            row_ptr: vec![0],
            cols: Vec::with_capacity(quads.len()),
            vals: Vec::with_capacity(quads.len()),
        };
        let mut k = 0;
        while k < quads.len() {
            let (i, b) = (quads[k].0, quads[k].1);
            let start = k;
            while k < quads.len() && quads[k].0 == i && quads[k].1 == b {
                k += 1;
            }
            let w: f64 = quads[start..k].iter().map(|q| q.3).sum();
            let br = &map.branches()[b as usize];
            op.bin.push(i);
            op.branch.push(b);
            op.left.push(br.left.max(i as f64 / nf));
            op.right.push(br.right.min((i + 1) as f64 / nf));
            op.weight.push(w);
            for q in &quads[start..k] {
                op.cols.push(q.2);
                op.vals.push(q.3 / w);
            }
            op.row_ptr.push(op.cols.len());
            op.first_cell[i as usize + 1] = op.bin.len();
        }
        for i in 0..n_bins {
            op.first_cell[i + 1] = op.first_cell[i + 1].max(op.first_cell[i]);
        }
        op
    }
}

/// Probability mass per bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    mass: Vec<f64>,
}

impl Density {
    pub fn uniform(n_bins: usize) -> Self {
        Self { mass: vec![1.0 / n_bins as f64; n_bins] }
    }

    pub fn from_mass(mass: Vec<f64>) -> Result<Self> {
        if mass.iter().any(|&m| !(m >= 0.0)) {
            return Err(Error::InvalidArgument("negative or NaN density mass".into()));
        }
        let s: f64 = mass.iter().sum();
        if (s - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!("density mass sums to {s}")));
        }
        Ok(Self { mass })
    }

    pub fn n_bins(&self) -> usize {
        self.mass.len()
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    /// Density value (w.r.t. Lebesgue) on bin `i`.
    pub fn value(&self, i: usize) -> f64 {
        self.mass[i] * self.mass.len() as f64
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn l1_distance(&self, other: &Density) -> f64 {
        self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum()
    }

    pub fn write_csv<W: Write>(&self, label: &str, mut w: W) -> io::Result<()> {
        writeln!(w, "# n_bins={} symbol={}", self.n_bins(), label)?;
        writeln!(w, "bin,mass")?;
        for (i, m) in self.mass.iter().enumerate() {
            writeln!(w, "{i},{m}")?;
        }
        Ok(())
    }
}

pub fn push_density(op: &UlamOperator, d: &Density) -> Result<Density> {
    if op.n_bins() != d.n_bins() {
        return Err(Error::Dimension { expected: op.n_bins(), got: d.n_bins() });
    }
    Ok(Density { mass: op.push(&d.mass) })
}

/// Shared table of Ulam matrices keyed by `(map parameters, n_bins)`.
#[derive(Debug, Clone, Default)]
pub struct UlamCache {
    inner: Arc<CacheInner>,
}

#[derive(Debug, Default)]
struct CacheInner {
    table: Mutex<HashMap<(String, usize), Arc<UlamOperator>>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl UlamCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(family: &MapFamily) -> String {
        // Debug formatting of f64 is round-trip exact, so this is content addressed.
        format!("{family:?}")
    }

    pub fn get(&self, map: &FiberMap, n_bins: usize) -> Result<Arc<UlamOperator>> {
        let key = (Self::key(map.family()), n_bins);
        if let Some(op) = self.inner.table.lock().unwrap().get(&key) {
            self.inner.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(Arc::clone(op));
        }
        let op = Arc::new(UlamOperator::from_map(map, n_bins)?);
        self.inner.misses.fetch_add(1, Ordering::Relaxed);
        self.inner.table.lock().unwrap().entry(key).or_insert_with(|| Arc::clone(&op));
        Ok(op)
    }

    pub fn hits(&self) -> usize {
        self.inner.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.inner.misses.load(Ordering::Relaxed)
    }
}

/// A frozen base path together with its fiber maps and their Ulam
/// operators at a fixed resolution.
#[derive(Debug, Clone)]
pub struct QuenchedSystem {
    path: Arc<BasePath>,
    maps: Arc<Vec<FiberMap>>,
    ops: Vec<Arc<UlamOperator>>,
    n_bins: usize,
    cache: UlamCache,
}

impl QuenchedSystem {
    pub fn new(path: BasePath, maps: Vec<FiberMap>, n_bins: usize) -> Result<Self> {
        Self::with_cache(Arc::new(path), Arc::new(maps), n_bins, &UlamCache::new())
    }

    pub fn with_cache(
        path: Arc<BasePath>,
        maps: Arc<Vec<FiberMap>>,
        n_bins: usize,
        cache: &UlamCache,
    ) -> Result<Self> {
        if let Some(&s) = path.symbols().iter().find(|&&s| s >= maps.len()) {
            return Err(Error::InvalidArgument(format!("path symbol {s} has no fiber map")));
        }
        let ops = maps.iter().map(|m| cache.get(m, n_bins)).collect::<Result<Vec<_>>>()?;
        Ok(Self { path, maps, ops, n_bins, cache: cache.clone() })
    }

    /// Same path and maps at another resolution (shares the cache).
    pub fn with_bins(&self, n_bins: usize) -> Result<Self> {
        Self::with_cache(Arc::clone(&self.path), Arc::clone(&self.maps), n_bins, &self.cache)
    }

    /// Same maps and resolution on another base path.
    pub fn with_path(&self, path: BasePath) -> Result<Self> {
        Self::with_cache(Arc::new(path), Arc::clone(&self.maps), self.n_bins, &self.cache)
    }

    pub fn path(&self) -> &BasePath {
        &self.path
    }

    pub fn maps(&self) -> &[FiberMap] {
        &self.maps
    }

    pub fn shared_maps(&self) -> Arc<Vec<FiberMap>> {
        self.maps.clone()
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn cache(&self) -> &UlamCache {
        &self.cache
    }

    pub fn symbol_at(&self, j: i64) -> usize {
        self.path.at(j)
    }

    pub fn map_at(&self, j: i64) -> &FiberMap {
        &self.maps[self.path.at(j)]
    }

    pub fn op_at(&self, j: i64) -> &UlamOperator {
        &self.ops[self.path.at(j)]
    }

    pub fn op_for_symbol(&self, s: usize) -> &UlamOperator {
        &self.ops[s]
    }

    pub fn midpoint(&self, i: usize) -> f64 {
        (i as f64 + 0.5) / self.n_bins as f64
    }

    pub fn midpoints(&self) -> Vec<f64> {
        (0..self.n_bins).map(|i| self.midpoint(i)).collect()
    }

    #[inline]
    pub fn bin_of(&self, x: f64) -> usize {
        ((x * self.n_bins as f64) as usize).min(self.n_bins - 1)
    }

    /// Every map in the alphabet is affine full-branch, so every equivariant
    /// density is Lebesgue.
    pub fn preserves_lebesgue(&self) -> bool {
        self.maps.iter().all(FiberMap::preserves_lebesgue)
    }

    /// `L^{(n)}` starting at index `from`, as a matrix product in path order.
    pub fn operator_cocycle(&self, from: i64, n: usize) -> Result<UlamOperator> {
        self.path.check_window(from, from + n as i64)?;
        let mut acc = UlamOperator::identity(self.n_bins);
        for j in from..from + n as i64 {
            acc = acc.then(self.op_at(j))?;
        }
        Ok(acc)
    }

    /// Uniform density pushed through the `k_pullback` operators preceding
    /// index `at`.
    pub fn equivariant_density(&self, at: i64, k_pullback: usize) -> Result<Density> {
        let from = at - k_pullback as i64;
        if from < self.path.lo() {
            return Err(Error::InsufficientPast {
                required: (-(from)).max(0) as usize,
                available: self.path.k_past(),
            });
        }
        self.path.check_window(from, at + 1)?;
        let mut mass = vec![1.0 / self.n_bins as f64; self.n_bins];
        let mut buf = vec![0.0; self.n_bins];
        for j in from..at {
            self.op_at(j).push_into(&mass, &mut buf);
            std::mem::swap(&mut mass, &mut buf);
        }
        Ok(Density { mass })
    }

    /// Dobrushin-free surrogate for a per-step contraction factor: the
    /// geometric-mean L¹ contraction of zero-mean signed masses under
    /// `n_steps` applications of the symbol's Ulam operator, maximised over a
    /// few test vectors. Relative to the uniform density; flagged as a
    /// surrogate wherever it is reported.
    pub fn contraction_surrogate(&self, symbol: usize, n_steps: usize) -> f64 {
        let op = &self.ops[symbol];
        let n = self.n_bins;
        let mut worst: f64 = 0.0;
        for k in 1..=4 {
            let mut z: Vec<f64> = (0..n)
                .map(|i| {
                    let x = self.midpoint(i);
                    if k == 4 { x - 0.5 } else { (2.0 * std::f64::consts::PI * k as f64 * x).cos() }
                })
                .collect();
            let mean = z.iter().sum::<f64>() / n as f64;
            z.iter_mut().for_each(|v| *v = (*v - mean) / n as f64);
            let n0: f64 = z.iter().map(|v| v.abs()).sum();
            let mut buf = vec![0.0; n];
            let mut steps = 0;
            for _ in 0..n_steps {
                op.push_into(&z, &mut buf);
                std::mem::swap(&mut z, &mut buf);
                steps += 1;
                if z.iter().map(|v| v.abs()).sum::<f64>() < 1e-13 * n0 {
                    break;
                }
            }
            let nk: f64 = z.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
            worst = worst.max((nk / n0).powf(1.0 / steps as f64));
        }
        worst
    }
}

/// Equivariant densities `h_j` for a contiguous index range.
#[derive(Debug, Clone)]
pub enum DensityField {
    /// All maps preserve Lebesgue, so `h_j` is uniform for every `j`.
    Uniform { lo: i64, hi: i64, mass: Vec<f64> },
    Tabulated { lo: i64, k_pullback: usize, densities: Vec<Density> },
}

impl DensityField {
    /// Densities on `lo..=hi`, the first obtained by pulling back
    /// `k_pullback` steps. Lebesgue-preserving systems skip the pushes.
    pub fn along(system: &QuenchedSystem, lo: i64, hi: i64, k_pullback: usize) -> Result<Self> {
        system.path().check_window(lo, hi + 1)?;
        if system.preserves_lebesgue() {
            return Ok(Self::Uniform { lo, hi, mass: Density::uniform(system.n_bins()).mass });
        }
        Self::tabulated(system, lo, hi, k_pullback)
    }

    /// Same as [`DensityField::along`] but always computed by explicit pushes.
    pub fn tabulated(system: &QuenchedSystem, lo: i64, hi: i64, k_pullback: usize) -> Result<Self> {
        let mut h = system.equivariant_density(lo, k_pullback)?;
        system.path().check_window(lo, hi + 1)?;
        let mut densities = Vec::with_capacity((hi - lo + 1) as usize);
        for j in lo..hi {
            let next = push_density(system.op_at(j), &h)?;
            densities.push(h);
            h = next;
        }
        densities.push(h);
        Ok(Self::Tabulated { lo, k_pullback, densities })
    }

    /// The same field recomputed for `system` (typically another resolution).
    pub fn at_resolution(&self, system: &QuenchedSystem) -> Result<Self> {
        match self {
            Self::Uniform { lo, hi, .. } => Self::along(system, *lo, *hi, 0),
            Self::Tabulated { lo, k_pullback, .. } => Self::tabulated(system, *lo, self.hi(), *k_pullback),
        }
    }

    pub fn lo(&self) -> i64 {
        match self {
            Self::Uniform { lo, .. } | Self::Tabulated { lo, .. } => *lo,
        }
    }

    pub fn hi(&self) -> i64 {
        match self {
            Self::Uniform { hi, .. } => *hi,
            Self::Tabulated { lo, densities, .. } => lo + densities.len() as i64 - 1,
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, Self::Uniform { .. })
    }

    pub fn get(&self, j: i64) -> Option<&[f64]> {
        if j < self.lo() || j > self.hi() {
            return None;
        }
        Some(match self {
            Self::Uniform { mass, .. } => mass,
            Self::Tabulated { lo, densities, .. } => densities[(j - lo) as usize].mass(),
        })
    }

    /// Mass vector `h_j`; errors if `j` is outside the tabulated range.
    pub fn mass(&self, j: i64) -> Result<&[f64]> {
        self.get(j).ok_or(Error::MissingIndex(j))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    /// `sup_deviation[n-1] = ‖L^{(n)}φ - ∫φ dμ‖_∞` for `n = 1..=n_max`.
    pub sup_deviation: Vec<f64>,
    pub mean: f64,
    pub fitted_rate: Option<f64>,
    pub fitted_k: Option<f64>,
    /// Smallest `K` with `sup_deviation[n-1] ≤ K ρ̂^n` at every fitted point.
    pub envelope_k: Option<f64>,
    /// Bin evaluations skipped because the target density was below the floor.
    pub excluded: usize,
    /// More than 10% of the evaluated bins were excluded.
    pub warning: bool,
}

impl DecayProfile {
    /// `Σ_{n>k} K ρ^n`, the geometric tail of the upper envelope.
    pub fn tail_after(&self, k: usize) -> f64 {
        match (self.fitted_rate, self.envelope_k.or(self.fitted_k)) {
            (Some(r), Some(c)) if r < 1.0 => c * r.powi(k as i32 + 1) / (1.0 - r),
            (Some(_), Some(_)) => f64::INFINITY,
            _ => 0.0,
        }
    }
}

/// Measures `‖L^{(n)}_{σ^{start}ω} φ - ∫φ dμ‖_∞` along the path, with `φ`
/// given by its bin-midpoint values at index `start`.
pub fn decay_profile(
    system: &QuenchedSystem,
    densities: &DensityField,
    start: i64,
    phi: &[f64],
    n_max: usize,
) -> Result<DecayProfile> {
    let n = system.n_bins();
    if phi.len() != n {
        return Err(Error::Dimension { expected: n, got: phi.len() });
    }
    system.path().check_window(start, start + n_max as i64)?;
    let h0 = densities.mass(start)?;
    let mut g: Vec<f64> = phi.iter().zip(h0).map(|(p, h)| p * h).collect();
    let mean: f64 = g.iter().sum();
    let mut buf = vec![0.0; n];
    let mut sup_deviation = Vec::with_capacity(n_max);
    let (mut excluded, mut evaluated) = (0usize, 0usize);
    for step in 0..n_max {
        let j = start + step as i64;
        system.op_at(j).push_into(&g, &mut buf);
        std::mem::swap(&mut g, &mut buf);
        let h = densities.mass(j + 1)?;
        let mut dev: f64 = 0.0;
        for (gi, hi) in g.iter().zip(h) {
            evaluated += 1;
            if *hi < DENSITY_FLOOR {
                excluded += 1;
                continue;
            }
            dev = dev.max((gi / hi - mean).abs());
        }
        sup_deviation.push(dev);
    }
    let scale = phi.iter().map(|p| (p - mean).abs()).fold(0.0, f64::max);
    // Bin averaging biases deviations by about `scale / N`; fit only above that.
    let floor = (16.0 * scale / n as f64).max(1e-13);
    let (ns, logs): (Vec<f64>, Vec<f64>) = sup_deviation
        .iter()
        .enumerate()
        .filter(|(_, &d)| d > floor)
        .map(|(i, &d)| ((i + 1) as f64, d.ln()))
        .unzip();
    let (fitted_rate, fitted_k) = match linear_fit(&ns, &logs) {
        Some((slope, intercept)) => (Some(slope.exp()), Some(intercept.exp())),
        None if ns.len() == 1 => (Some(0.0), Some(logs[0].exp())),
        None => (None, None),
    };
    let envelope_k = match fitted_rate {
        Some(r) if r > 0.0 => {
            Some(ns.iter().zip(&logs).map(|(n, l)| (l - n * r.ln()).exp()).fold(0.0, f64::max))
        }
        _ => fitted_k,
    };
    Ok(DecayProfile {
        sup_deviation,
        mean,
        fitted_rate,
        fitted_k,
        envelope_k,
        excluded,
        warning: evaluated > 0 && excluded * 10 > evaluated,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualityResidual {
    /// Monte Carlo estimate of `∫ f (g∘T^{(n)}) dμ_ω`.
    pub left: f64,
    pub left_se: f64,
    /// Ulam quadrature of `∫ (L^{(n)} f) g dμ_{σ^n ω}`.
    pub right: f64,
    pub residual: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn duality_check<F, G>(
    system: &QuenchedSystem,
    densities: &DensityField,
    start: i64,
    f: F,
    g: G,
    n: usize,
    n_samples: usize,
    seed: u64,
) -> Result<DualityResidual>
where
    F: Fn(f64) -> f64 + Sync,
    G: Fn(f64) -> f64 + Sync,
{
    if n == 0 {
        return Err(Error::InvalidArgument("duality check needs n >= 1".into()));
    }
    let h0 = densities.mass(start)?;
    let mut mass: Vec<f64> = (0..system.n_bins()).map(|i| f(system.midpoint(i)) * h0[i]).collect();
    let mut buf = vec![0.0; mass.len()];
    for j in start..start + n as i64 {
        system.op_at(j).push_into(&mass, &mut buf);
        std::mem::swap(&mut mass, &mut buf);
    }
    let right: f64 = mass.iter().enumerate().map(|(i, m)| m * g(system.midpoint(i))).sum();

    let sampler = TrajectorySampler::new(system, densities);
    let samples: Vec<f64> = sampler.ensemble(start, n, n_samples, seed, |traj| f(traj[0]) * g(traj[n]))?;
    let (left, left_se) = mean_se(&samples);
    Ok(DualityResidual { left, left_se, right, residual: (left - right).abs() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiber_maps::MapFamily;
    use std::f64::consts::PI;

    fn beta(b: u32) -> FiberMap {
        FiberMap::build(&MapFamily::Beta { beta: b }).unwrap()
    }

    fn doubling_system(n_bins: usize, len: usize) -> QuenchedSystem {
        QuenchedSystem::new(BasePath::constant(0, len, len), vec![beta(2)], n_bins).unwrap()
    }

    fn identity_map() -> FiberMap {
        FiberMap::build(&MapFamily::LasotaYorke { breakpoints: vec![0.0, 1.0], slopes: vec![1.0] }).unwrap()
    }

    /// Independent oracle: Leb(B_i ∩ T^{-1}B_j) by fine midpoint sampling of B_i.
    fn sampled_ulam(map: &FiberMap, n: usize, per_bin: usize) -> Vec<Vec<f64>> {
        let mut m = vec![vec![0.0; n]; n];
        for (i, row) in m.iter_mut().enumerate() {
            for k in 0..per_bin {
                let x = (i as f64 + (k as f64 + 0.5) / per_bin as f64) / n as f64;
                let j = ((map.image(x) * n as f64) as usize).min(n - 1);
                row[j] += 1.0 / per_bin as f64;
            }
        }
        m
    }

    #[test]
    fn doubling_ulam_small_grids() {
        let op = UlamOperator::from_map(&beta(2), 2).unwrap();
        assert_eq!(op.to_dense(), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);
        let op = UlamOperator::from_map(&beta(2), 4).unwrap();
        let expect = vec![
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
            vec![0.5, 0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.5, 0.5],
        ];
        assert_eq!(op.to_dense(), expect);
        assert!(UlamOperator::from_map(&beta(2), 1).is_err());
    }

    #[test]
    fn identity_map_gives_identity_matrix() {
        for n in [2, 7, 64] {
            let op = UlamOperator::from_map(&identity_map(), n).unwrap();
            assert_eq!(op.to_dense(), UlamOperator::identity(n).to_dense());
            assert_eq!(op.cells().unwrap().n_cells(), n);
        }
    }

    #[test]
    fn exact_ulam_matches_sampling_oracle() {
        let maps = [
            beta(3),
            FiberMap::build(&MapFamily::LasotaYorke { breakpoints: vec![0.0, 0.4, 1.0], slopes: vec![2.5, -5.0 / 3.0] })
                .unwrap(),
            FiberMap::build(&MapFamily::Mixed { d: 3, q: 1, eta: 3.0, curvature: 0.5 }).unwrap(),
        ];
        for map in &maps {
            let n = 16;
            let exact = UlamOperator::from_map(map, n).unwrap().to_dense();
            let oracle = sampled_ulam(map, n, 20_000);
            for i in 0..n {
                for j in 0..n {
                    assert!((exact[i][j] - oracle[i][j]).abs() < 2e-4, "{map:?} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn ulam_rows_stochastic_and_lebesgue_fixed() {
        for b in [2, 3, 5] {
            for n in [64, 1000, 4096] {
                let op = UlamOperator::from_map(&beta(b), n).unwrap();
                assert!(op.is_row_stochastic(1e-12));
                let u = Density::uniform(n);
                let out = push_density(&op, &u).unwrap();
                let err = out.mass().iter().map(|m| (m - 1.0 / n as f64).abs()).fold(0.0, f64::max);
                assert!(err * n as f64 <= 1e-12, "beta {b} N {n}: {err}");
            }
        }
    }

    #[test]
    fn cells_refine_bins_at_breakpoints() {
        let op = UlamOperator::from_map(&beta(3), 64).unwrap();
        let cells = op.cells().unwrap();
        assert_eq!(cells.n_cells(), 66);
        let straddle = cells.cells_of_bin(21);
        assert_eq!(straddle.len(), 2);
        let (_, r) = cells.bounds(straddle.start);
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(cells.cell_of(0.333), straddle.start);
        assert_eq!(cells.cell_of(0.334), straddle.start + 1);
        for i in 0..64 {
            let w: f64 = cells.cells_of_bin(i).map(|c| cells.weight(c)).sum();
            assert!((w - 1.0).abs() < 1e-12);
        }
        // Cell masses that are constant on each bin push like bin masses.
        let mass: Vec<f64> = (0..64).map(|i| (i as f64 * 0.37).sin()).collect();
        let cell_mass: Vec<f64> = (0..cells.n_cells()).map(|c| mass[cells.bin(c)] * cells.weight(c)).collect();
        let mut a = vec![0.0; 64];
        cells.push_into(&cell_mass, &mut a);
        let b = op.push(&mass);
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-14));
    }

    #[test]
    fn push_density_examples() {
        let op = UlamOperator::from_map(&beta(2), 2).unwrap();
        let out = push_density(&op, &Density::from_mass(vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!(out.mass(), &[0.5, 0.5]);
        let out = push_density(&op, &Density::from_mass(vec![1.0, 0.0]).unwrap()).unwrap();
        assert_eq!(out.mass(), &[0.5, 0.5]);
        let id = UlamOperator::identity(3);
        let d = Density::from_mass(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(push_density(&id, &d).unwrap(), d);
        assert!(matches!(push_density(&id, &Density::uniform(4)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn cocycle_products() {
        let sys = doubling_system(4, 4);
        let zero = sys.operator_cocycle(0, 0).unwrap();
        assert_eq!(zero, UlamOperator::identity(4));
        let one = sys.operator_cocycle(0, 1).unwrap();
        assert_eq!(one.to_dense(), sys.op_at(0).to_dense());
        let two = sys.operator_cocycle(0, 2).unwrap();
        assert_eq!(two.to_dense(), vec![vec![0.25; 4]; 4]);
        assert!(matches!(sys.operator_cocycle(2, 5), Err(Error::Window { .. })));
    }

    #[test]
    fn mixed_cocycles_stay_stochastic_and_conserve_mass() {
        let maps = vec![
            beta(3),
            FiberMap::build(&MapFamily::Mixed { d: 3, q: 1, eta: 3.0, curvature: 0.5 }).unwrap(),
        ];
        let path = BasePath::from_symbols(vec![0, 1, 1, 0, 1, 0, 0, 1, 1, 1, 0], 0, 0).unwrap();
        let sys = QuenchedSystem::new(path, maps, 128).unwrap();
        for n in 1..=10 {
            let op = sys.operator_cocycle(0, n).unwrap();
            assert!(op.is_row_stochastic(1e-12), "n = {n}");
        }
        let field = DensityField::tabulated(&sys, 0, 10, 0).unwrap();
        for j in 0..=10 {
            assert!((field.mass(j).unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn equivariant_density_cases() {
        let iid = crate::base_env::BaseProcess::iid(vec!["b2".into(), "b3".into()], vec![0.5, 0.5]).unwrap();
        let sys = QuenchedSystem::new(iid.sample_path(30, 5, 4), vec![beta(2), beta(3)], 512).unwrap();
        let h = sys.equivariant_density(0, 30).unwrap();
        assert!(h.l1_distance(&Density::uniform(512)) < 1e-12);
        assert_eq!(sys.equivariant_density(0, 0).unwrap(), Density::uniform(512));
        assert_eq!(
            sys.equivariant_density(0, 31).unwrap_err(),
            Error::InsufficientPast { required: 31, available: 30 }
        );
    }

    #[test]
    fn equivariant_density_of_nonlinear_map_is_ulam_fixed_point() {
        let map = FiberMap::build(&MapFamily::Mixed { d: 3, q: 1, eta: 3.0, curvature: 0.8 }).unwrap();
        let n = 1024;
        let sys = QuenchedSystem::new(BasePath::constant(0, 40, 0), vec![map.clone()], n).unwrap();
        let h = sys.equivariant_density(0, 40).unwrap();
        // Oracle: power iteration to convergence on the single matrix.
        let op = UlamOperator::from_map(&map, n).unwrap();
        let mut p = Density::uniform(n);
        for _ in 0..500 {
            p = push_density(&op, &p).unwrap();
        }
        assert!(h.l1_distance(&p) < 1e-8, "{}", h.l1_distance(&p));
        assert!(h.l1_distance(&Density::uniform(n)) > 1e-3);
        // Successive pullbacks approach the fixed point monotonically.
        let dists: Vec<f64> =
            (0..10).map(|k| sys.equivariant_density(0, k).unwrap().l1_distance(&p)).collect();
        assert!(dists.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn decay_profile_examples() {
        let n = 4096;
        let sys = doubling_system(n, 64);
        let field = DensityField::along(&sys, 0, 40, 0).unwrap();
        let mids = sys.midpoints();

        let c = decay_profile(&sys, &field, 0, &vec![3.0; n], 20).unwrap();
        assert!(c.sup_deviation.iter().all(|&d| d < 1e-12));
        assert_eq!(c.fitted_rate, None);

        let cos: Vec<f64> = mids.iter().map(|x| (2.0 * PI * x).cos()).collect();
        let p = decay_profile(&sys, &field, 0, &cos, 5).unwrap();
        assert!(p.sup_deviation[0] < 1e-12, "{}", p.sup_deviation[0]);

        let lin: Vec<f64> = mids.iter().map(|x| x - 0.5).collect();
        let p = decay_profile(&sys, &field, 0, &lin, 30).unwrap();
        let rate = p.fitted_rate.unwrap();
        assert!((rate - 0.5).abs() < 0.02, "{rate}");
        assert!(!p.warning && p.excluded == 0);
    }

    #[test]
    fn grid_refinement_of_means_is_first_order() {
        let map = FiberMap::build(&MapFamily::Mixed { d: 3, q: 1, eta: 3.0, curvature: 0.8 }).unwrap();
        let mut means = Vec::new();
        for n in [256, 512, 1024, 2048] {
            let sys = QuenchedSystem::new(BasePath::constant(0, 60, 0), vec![map.clone()], n).unwrap();
            let h = sys.equivariant_density(0, 60).unwrap();
            means.push(h.mass().iter().enumerate().map(|(i, m)| m * sys.midpoint(i)).sum::<f64>());
        }
        let d: Vec<f64> = means.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        // O(1/N): each refinement at least roughly halves the change.
        for w in d.windows(2) {
            assert!(w[1] <= 0.75 * w[0] + 1e-12, "{d:?}");
        }
        assert!(d[0] < 20.0 / 256.0);
    }

    #[test]
    fn duality_examples() {
        let sys = doubling_system(1024, 8);
        let field = DensityField::along(&sys, 0, 8, 0).unwrap();
        let r = duality_check(&sys, &field, 0, |_| 1.0, |_| 1.0, 1, 1000, 1).unwrap();
        assert!((r.left - 1.0).abs() < 1e-15 && (r.right - 1.0).abs() < 1e-12);
        let r = duality_check(&sys, &field, 0, |x| (2.0 * PI * x).cos(), |x| x * x, 1, 100_000, 2).unwrap();
        assert!(r.right.abs() < 1e-12);
        assert!(r.left.abs() < 4.0 * r.left_se);
        let r = duality_check(&sys, &field, 0, |x| x - 0.5, |x| x - 0.5, 1, 200_000, 3).unwrap();
        assert!((r.right - 1.0 / 24.0).abs() < 1e-3, "{}", r.right);
        assert!((r.left - 1.0 / 24.0).abs() < 4.0 * r.left_se, "{r:?}");
        assert!(r.residual < 4.0 * r.left_se + 1e-3);
    }

    #[test]
    fn cache_hits_on_reuse() {
        let cache = UlamCache::new();
        let maps = Arc::new(vec![beta(2), beta(3)]);
        let path = Arc::new(BasePath::constant(0, 2, 2));
        let a = QuenchedSystem::with_cache(path.clone(), maps.clone(), 64, &cache).unwrap();
        assert_eq!((cache.hits(), cache.misses()), (0, 2));
        let _b = QuenchedSystem::with_cache(path, maps, 64, &cache).unwrap();
        assert_eq!((cache.hits(), cache.misses()), (2, 2));
        let _c = a.with_bins(32).unwrap();
        assert_eq!(cache.misses(), 4);
    }

    #[test]
    fn contraction_surrogate_for_beta_maps() {
        let sys = QuenchedSystem::new(BasePath::constant(0, 1, 1), vec![beta(2), beta(3)], 1024).unwrap();
        let r2 = sys.contraction_surrogate(0, 8);
        let r3 = sys.contraction_surrogate(1, 8);
        assert!(r2 <= 1.0 && r3 <= 1.0 && r3 < r2 + 1e-12, "{r2} {r3}");
    }

    #[test]
    fn csv_dumps_have_headers() {
        let op = UlamOperator::from_map(&beta(2), 2).unwrap();
        let mut buf = Vec::new();
        op.write_csv("doubling", &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("# n_bins=2 symbol=doubling\nrow,col,value\n0,0,0.5\n"));
        let mut buf = Vec::new();
        Density::uniform(2).write_csv("h0", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "# n_bins=2 symbol=h0\nbin,mass\n0,0.5\n1,0.5\n");
    }
}
