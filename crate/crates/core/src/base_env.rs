//! Stationary symbol processes driving the random maps.
//!
//! The base `(Ω, σ, P)` is realised as a two-sided stationary sequence of
//! symbols drawn from a finite alphabet, either i.i.d. or a primitive Markov
//! chain. A [`BasePath`] is a finite window `[-k_past, n_future]` of one such
//! sequence; the backward half of a Markov window is drawn from the exact
//! time-reversed kernel so that the whole window is stationary in law.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::numerics::linear_fit;
use crate::seed;
use crate::{Error, Result};

const PROB_TOL: f64 = 1e-12;
const STATIONARY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ProcessKind {
    Iid {
        weights: Vec<f64>,
    },
    Markov {
        transition: Vec<Vec<f64>>,
        stationary: Vec<f64>,
        /// `reverse[i][j] = stationary[j] * transition[j][i] / stationary[i]`.
        reverse: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone)]
pub struct BaseProcess {
    names: Vec<String>,
    kind: ProcessKind,
    marginal: WeightedIndex<f64>,
    forward: Vec<WeightedIndex<f64>>,
    backward: Vec<WeightedIndex<f64>>,
}

fn check_probability_vector(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidProcess(format!("{what} has negative or non-finite entries")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > PROB_TOL {
        return Err(Error::InvalidProcess(format!("{what} sums to {s}, not 1")));
    }
    Ok(())
}

fn weighted(p: &[f64]) -> Result<WeightedIndex<f64>> {
    WeightedIndex::new(p.iter().copied())
        .map_err(|e| Error::InvalidProcess(format!("cannot sample from {p:?}: {e}")))
}

/// Stationary distribution of a row-stochastic matrix via the linear system
/// `π(P - I) = 0, Σπ = 1`.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = transition.len();
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(j, i)] = transition[i][j] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for j in 0..n {
        a[(n - 1, j)] = 1.0;
    }
    let mut b = DVector::<f64>::zeros(n);
    b[n - 1] = 1.0;
    let pi = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::InvalidProcess("transition kernel has no unique stationary law".into()))?;
    Ok(pi.iter().map(|x| x.max(0.0)).collect())
}

/// A non-negative square matrix is primitive iff its `(n-1)^2 + 1`-th power
/// is strictly positive (Wielandt).
pub fn is_primitive(transition: &[Vec<f64>]) -> bool {
    let n = transition.len();
    let base: Vec<Vec<bool>> = transition
        .iter()
        .map(|row| row.iter().map(|&p| p > 0.0).collect())
        .collect();
    let exponent = (n - 1) * (n - 1) + 1;
    let mut pow = base.clone();
    for _ in 1..exponent {
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if pow[i][k] {
                    for j in 0..n {
                        next[i][j] |= base[k][j];
                    }
                }
            }
        }
        pow = next;
    }
    pow.iter().all(|row| row.iter().all(|&b| b))
}

impl BaseProcess {
    pub fn iid(names: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidProcess("empty alphabet".into()));
        }
        if weights.len() != names.len() {
            return Err(Error::Dimension { expected: names.len(), got: weights.len() });
        }
        check_probability_vector(&weights, "weights")?;
        let marginal = weighted(&weights)?;
        Ok(Self {
            names,
            kind: ProcessKind::Iid { weights },
            marginal,
            forward: Vec::new(),
            backward: Vec::new(),
        })
    }

    /// Markov base. When `stationary` is `None` it is solved for; when given
    /// it must be a fixed point of the kernel within `1e-10`.
    pub fn markov(
        names: Vec<String>,
        transition: Vec<Vec<f64>>,
        stationary: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = names.len();
        if n == 0 {
            return Err(Error::InvalidProcess("empty alphabet".into()));
        }
        if transition.len() != n || transition.iter().any(|r| r.len() != n) {
            return Err(Error::InvalidProcess(format!("transition must be {n}x{n}")));
        }
        for (i, row) in transition.iter().enumerate() {
            check_probability_vector(row, &format!("transition row {i}"))?;
        }
        if !is_primitive(&transition) {
            return Err(Error::NotPrimitive);
        }
        let stationary = match stationary {
            Some(pi) => {
                check_probability_vector(&pi, "stationary")?;
                pi
            }
            None => stationary_distribution(&transition)?,
        };
        for j in 0..n {
            let fixed: f64 = (0..n).map(|i| stationary[i] * transition[i][j]).sum();
            if (fixed - stationary[j]).abs() > STATIONARY_TOL {
                return Err(Error::InvalidProcess(format!(
                    "stationary is not a fixed point of the kernel at state {j}"
                )));
            }
        }
        if let Some(i) = stationary.iter().position(|&p| p <= 0.0) {
            return Err(Error::ZeroStationaryMass(i));
        }
        let reverse: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let row: Vec<f64> = (0..n)
                    .map(|j| stationary[j] * transition[j][i] / stationary[i])
                    .collect();
                let s: f64 = row.iter().sum();
                row.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let marginal = weighted(&stationary)?;
        let forward = transition.iter().map(|r| weighted(r)).collect::<Result<Vec<_>>>()?;
        let backward = reverse.iter().map(|r| weighted(r)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            names,
            kind: ProcessKind::Markov { transition, stationary, reverse },
            marginal,
            forward,
            backward,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_symbols(&self) -> usize {
        self.names.len()
    }

    pub fn kind(&self) -> &ProcessKind {
        &self.kind
    }

    /// One-time marginal law: the weights (i.i.d.) or the stationary law.
    pub fn marginal(&self) -> &[f64] {
        match &self.kind {
            ProcessKind::Iid { weights } => weights,
            ProcessKind::Markov { stationary, .. } => stationary,
        }
    }

    pub fn is_iid(&self) -> bool {
        matches!(self.kind, ProcessKind::Iid { .. })
    }

    /// Draws a two-sided window `[-k_past, n_future]`.
    pub fn sample_path(&self, k_past: usize, n_future: usize, seed: u64) -> BasePath {
        let mut rng = seed::rng(seed);
        let len = k_past + n_future + 1;
        let mut symbols = vec![0usize; len];
        let origin = k_past;
        match &self.kind {
            ProcessKind::Iid { .. } => {
                for s in symbols.iter_mut() {
                    *s = self.marginal.sample(&mut rng);
                }
            }
            ProcessKind::Markov { .. } => {
                symbols[origin] = self.marginal.sample(&mut rng);
                for i in origin + 1..len {
                    symbols[i] = self.forward[symbols[i - 1]].sample(&mut rng);
                }
                for i in (0..origin).rev() {
                    symbols[i] = self.backward[symbols[i + 1]].sample(&mut rng);
                }
            }
        }
        BasePath { symbols, k_past, n_future, seed }
    }

    /// `ψ_U(k)` for `k = 1..=k_max`.
    pub fn psi_upper(&self, k_max: usize) -> Result<Vec<f64>> {
        match &self.kind {
            ProcessKind::Iid { .. } => Ok(vec![0.0; k_max]),
            ProcessKind::Markov { transition, stationary, .. } => {
                psi_upper_markov(transition, stationary, k_max)
            }
        }
    }

    /// Evaluates `limsup ψ_U(k) < 1/E[ρ] - 1` with `ψ_U(k_max)` standing in
    /// for the limsup, plus the requirement `E[ρ] < 1`.
    pub fn check_upper_mixing_criterion(&self, rho: &[f64], k_max: usize) -> Result<MixingReport> {
        if rho.len() != self.n_symbols() {
            return Err(Error::Dimension { expected: self.n_symbols(), got: rho.len() });
        }
        if let Some(r) = rho.iter().find(|&&r| !(r > 0.0 && r <= 1.0)) {
            return Err(Error::InvalidArgument(format!("contraction factor {r} not in (0,1]")));
        }
        if k_max == 0 {
            return Err(Error::InvalidArgument("k_max must be positive".into()));
        }
        let psi = self.psi_upper(k_max)?;
        let e_rho: f64 = self.marginal().iter().zip(rho).map(|(p, r)| p * r).sum();
        let threshold = 1.0 / e_rho - 1.0;
        let psi_tail = psi[k_max - 1];
        let (criterion_ok, reason) = if e_rho >= 1.0 {
            (false, Some("mean contraction not < 1".to_string()))
        } else if psi_tail >= threshold {
            (false, Some(format!("psi_U({k_max}) = {psi_tail} >= {threshold}")))
        } else {
            (true, None)
        };
        let envelope = GeometricEnvelope::fit(&psi);
        Ok(MixingReport { psi_upper: psi, e_rho, threshold, criterion_ok, reason, envelope })
    }
}

/// `ψ_U(k) = max_{i,j} (P^k[i][j] / π[j] - 1)^+` for a primitive kernel.
pub fn psi_upper_markov(
    transition: &[Vec<f64>],
    stationary: &[f64],
    k_max: usize,
) -> Result<Vec<f64>> {
    if !is_primitive(transition) {
        return Err(Error::NotPrimitive);
    }
    let n = transition.len();
    let p = DMatrix::from_fn(n, n, |i, j| transition[i][j]);
    let mut pk = p.clone();
    let mut out = Vec::with_capacity(k_max);
    for k in 1..=k_max {
        if k > 1 {
            pk = &pk * &p;
        }
        let mut psi: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                psi = psi.max(pk[(i, j)] / stationary[j] - 1.0);
            }
        }
        out.push(psi.max(0.0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricEnvelope {
    /// `ψ_U(k) ≈ prefactor * rate^k`.
    pub rate: f64,
    pub prefactor: f64,
}

impl GeometricEnvelope {
    /// Least squares on `ln ψ_U(k)` over the `k` with `ψ_U(k) > 1e-14`.
    pub fn fit(psi: &[f64]) -> Option<Self> {
        let (ks, logs): (Vec<f64>, Vec<f64>) = psi
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 1e-14)
            .map(|(i, &p)| ((i + 1) as f64, p.ln()))
            .unzip();
        let (slope, intercept) = linear_fit(&ks, &logs)?;
        Some(Self { rate: slope.exp(), prefactor: intercept.exp() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingReport {
    pub psi_upper: Vec<f64>,
    pub e_rho: f64,
    /// Right-hand side `1/E[ρ] - 1`.
    pub threshold: f64,
    pub criterion_ok: bool,
    pub reason: Option<String>,
    pub envelope: Option<GeometricEnvelope>,
}

/// Finite two-sided window of the base sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasePath {
    symbols: Vec<usize>,
    k_past: usize,
    n_future: usize,
    seed: u64,
}

impl BasePath {
    /// Path with the same symbol everywhere (a frozen single map).
    pub fn constant(symbol: usize, k_past: usize, n_future: usize) -> Self {
        Self { symbols: vec![symbol; k_past + n_future + 1], k_past, n_future, seed: 0 }
    }

    /// `symbols[0]` sits at index `-k_past`.
    pub fn from_symbols(symbols: Vec<usize>, k_past: usize, seed: u64) -> Result<Self> {
        if symbols.len() <= k_past {
            return Err(Error::InvalidArgument("path shorter than its past".into()));
        }
        let n_future = symbols.len() - k_past - 1;
        Ok(Self { symbols, k_past, n_future, seed })
    }

    pub fn k_past(&self) -> usize {
        self.k_past
    }

    pub fn n_future(&self) -> usize {
        self.n_future
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lo(&self) -> i64 {
        -(self.k_past as i64)
    }

    pub fn hi(&self) -> i64 {
        self.n_future as i64
    }

    pub fn contains(&self, j: i64) -> bool {
        j >= self.lo() && j <= self.hi()
    }

    pub fn get(&self, j: i64) -> Option<usize> {
        if self.contains(j) {
            Some(self.symbols[(j + self.k_past as i64) as usize])
        } else {
            None
        }
    }

    /// Symbol at index `j`; panics outside the window.
    pub fn at(&self, j: i64) -> usize {
        self.get(j)
            .unwrap_or_else(|| panic!("index {j} outside path window {}..={}", self.lo(), self.hi()))
    }

    /// Checks that `from..to` (exclusive) lies inside the window.
    pub fn check_window(&self, from: i64, to: i64) -> Result<()> {
        if from < self.lo() || to - 1 > self.hi() {
            return Err(Error::Window { from, to, lo: self.lo(), hi: self.hi() });
        }
        Ok(())
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    /// Distinct symbols that occur in the window, sorted.
    pub fn distinct(&self) -> Vec<usize> {
        let mut s = self.symbols.clone();
        s.sort_unstable();
        s.dedup();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    fn sticky() -> BaseProcess {
        BaseProcess::markov(names(2), vec![vec![0.9, 0.1], vec![0.1, 0.9]], None).unwrap()
    }

    #[test]
    fn single_symbol_gives_constant_path() {
        let p = BaseProcess::iid(names(1), vec![1.0]).unwrap();
        let path = p.sample_path(4, 7, 99);
        assert_eq!(path.symbols().len(), 12);
        assert!(path.symbols().iter().all(|&s| s == 0));
    }

    #[test]
    fn iid_window_size_and_frequency() {
        let p = BaseProcess::iid(names(2), vec![0.5, 0.5]).unwrap();
        let path = p.sample_path(3, 5, 1);
        assert_eq!(path.symbols().len(), 9);
        assert_eq!((path.lo(), path.hi()), (-3, 5));
        let big = p.sample_path(0, 999_999, 2);
        let freq = big.symbols().iter().filter(|&&s| s == 0).count() as f64 / 1e6;
        assert!((freq - 0.5).abs() < 0.002, "{freq}");
    }

    #[test]
    fn markov_stationary_matches_eigenvector_and_samples() {
        let p = sticky();
        let pi = p.marginal();
        assert!((pi[0] - 0.5).abs() < 1e-14 && (pi[1] - 0.5).abs() < 1e-14);
        let path = p.sample_path(500_000, 499_999, 3);
        let freq = path.symbols().iter().filter(|&&s| s == 0).count() as f64 / 1e6;
        // The chain is sticky (correlation time ~5), so the MC error is ~3x i.i.d.
        assert!((freq - 0.5).abs() < 0.006, "{freq}");
    }

    #[test]
    fn asymmetric_stationary_and_reversal() {
        let t = vec![vec![0.5, 0.5, 0.0], vec![0.2, 0.3, 0.5], vec![0.6, 0.0, 0.4]];
        let p = BaseProcess::markov(names(3), t.clone(), None).unwrap();
        let pi = p.marginal().to_vec();
        for j in 0..3 {
            let f: f64 = (0..3).map(|i| pi[i] * t[i][j]).sum();
            assert!((f - pi[j]).abs() < 1e-12);
        }
        // Pair law of (X_{-1}, X_0) must equal π[a] t[a][b].
        let mut counts = [[0usize; 3]; 3];
        let reps = 100_000;
        for s in 0..reps {
            let path = p.sample_path(1, 0, s);
            counts[path.at(-1)][path.at(0)] += 1;
        }
        for a in 0..3 {
            for b in 0..3 {
                let expect = pi[a] * t[a][b];
                let got = counts[a][b] as f64 / reps as f64;
                let se = (expect * (1.0 - expect) / reps as f64).sqrt();
                assert!((got - expect).abs() <= 4.0 * se + 1e-12, "{a}{b}: {got} vs {expect}");
            }
        }
    }

    #[test]
    fn stationarity_of_blocks_across_offsets() {
        // Law of 2-blocks at offsets -5 and +5 compared by a chi-square
        // homogeneity test at the 1% level.
        let t = vec![vec![0.7, 0.3], vec![0.4, 0.6]];
        let p = BaseProcess::markov(names(2), t, None).unwrap();
        let reps = 100_000u64;
        let mut c = [[0f64; 4]; 2];
        for s in 0..reps {
            let path = p.sample_path(6, 6, 10_000 + s);
            for (row, off) in [(0usize, -5i64), (1, 5)] {
                let k = path.at(off) * 2 + path.at(off + 1);
                c[row][k] += 1.0;
            }
        }
        let total = 2.0 * reps as f64;
        let mut stat = 0.0;
        for k in 0..4 {
            let col = c[0][k] + c[1][k];
            for row in c.iter() {
                let e = col * reps as f64 / total;
                stat += (row[k] - e).powi(2) / e;
            }
        }
        let crit = ChiSquared::new(3.0).unwrap().inverse_cdf(0.99);
        assert!(stat < crit, "chi2 {stat} >= {crit}");
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let p = sticky();
        assert_eq!(p.sample_path(10, 20, 5), p.sample_path(10, 20, 5));
        assert_ne!(p.sample_path(10, 20, 5), p.sample_path(10, 20, 6));
    }

    #[test]
    fn invalid_processes_rejected() {
        assert!(BaseProcess::iid(vec![], vec![]).is_err());
        assert!(BaseProcess::iid(names(2), vec![0.5, 0.6]).is_err());
        let bad_row = BaseProcess::markov(names(2), vec![vec![0.5, 0.6], vec![0.5, 0.5]], None);
        assert!(matches!(bad_row, Err(Error::InvalidProcess(_))));
        let periodic = BaseProcess::markov(names(2), vec![vec![0.0, 1.0], vec![1.0, 0.0]], None);
        assert_eq!(periodic.unwrap_err(), Error::NotPrimitive);
        let reducible = BaseProcess::markov(names(2), vec![vec![1.0, 0.0], vec![0.5, 0.5]], None);
        assert_eq!(reducible.unwrap_err(), Error::NotPrimitive);
        let wrong_pi =
            BaseProcess::markov(names(2), vec![vec![0.9, 0.1], vec![0.1, 0.9]], Some(vec![0.6, 0.4]));
        assert!(wrong_pi.is_err());
    }

    #[test]
    fn psi_upper_values() {
        let iid = BaseProcess::iid(names(2), vec![0.3, 0.7]).unwrap();
        assert!(iid.psi_upper(50).unwrap().iter().all(|&p| p == 0.0));

        let psi = sticky().psi_upper(50).unwrap();
        assert!((psi[0] - 0.8).abs() < 1e-12);
        for (k, p) in psi.iter().enumerate() {
            // P^k = ½ + ½·0.8^k on the diagonal, so ψ_U(k) = 0.8^k exactly.
            assert!(*p <= 0.8 * 0.8f64.powi(k as i32) + 1e-12);
            assert!(*p >= 0.0);
        }
        for w in psi.windows(2) {
            assert!(w[1] <= w[0] * 0.8 + 1e-15);
        }
        let env = GeometricEnvelope::fit(&psi).unwrap();
        assert!((env.rate - 0.8).abs() < 1e-6, "{env:?}");
    }

    #[test]
    fn psi_upper_rejects_periodic_kernel() {
        let t = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert_eq!(psi_upper_markov(&t, &[0.5, 0.5], 5).unwrap_err(), Error::NotPrimitive);
    }

    #[test]
    fn upper_mixing_criterion_cases() {
        let iid = BaseProcess::iid(names(1), vec![1.0]).unwrap();
        let r = iid.check_upper_mixing_criterion(&[0.5], 50).unwrap();
        assert!(r.criterion_ok);
        assert_eq!(r.threshold, 1.0);

        let r = iid.check_upper_mixing_criterion(&[1.0], 50).unwrap();
        assert!(!r.criterion_ok);
        assert_eq!(r.reason.as_deref(), Some("mean contraction not < 1"));

        let r = sticky().check_upper_mixing_criterion(&[0.4, 0.6], 20).unwrap();
        assert!((r.e_rho - 0.5).abs() < 1e-15);
        assert!((r.threshold - 1.0).abs() < 1e-12);
        assert!((r.psi_upper[19] - 0.8f64.powi(20)).abs() < 1e-12);
        assert!(r.criterion_ok);
    }
}
