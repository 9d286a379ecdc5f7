//! Vector observables `v(symbol, x) ∈ ℝ^e` built from a small formula
//! library, with optional fiberwise centering.

use std::f64::consts::PI;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::fiber_maps::FiberMap;
use crate::transfer::{DensityField, QuenchedSystem};
use crate::{Error, Result};

/// One scalar component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Formula {
    /// `Σ_k coeffs[k] x^k`.
    Poly { coeffs: Vec<f64> },
    /// `amp cos(2π freq x)`.
    Cos { freq: f64, amp: f64 },
    /// `amp sin(2π freq x)`.
    Sin { freq: f64, amp: f64 },
    /// `scales[symbol] * inner(x)`.
    SymbolScaled { scales: Vec<f64>, inner: Box<Formula> },
    Scaled { factor: f64, inner: Box<Formula> },
    Sum { terms: Vec<Formula> },
    /// `q(x) - q(T_symbol x)`.
    Coboundary { q: Box<Formula> },
}

impl Formula {
    pub fn poly(coeffs: &[f64]) -> Self {
        Self::Poly { coeffs: coeffs.to_vec() }
    }

    pub fn constant(c: f64) -> Self {
        Self::Poly { coeffs: vec![c] }
    }

    pub fn cos(freq: f64) -> Self {
        Self::Cos { freq, amp: 1.0 }
    }

    pub fn sin(freq: f64) -> Self {
        Self::Sin { freq, amp: 1.0 }
    }

    pub fn coboundary(q: Formula) -> Self {
        Self::Coboundary { q: Box::new(q) }
    }

    fn needs_maps(&self) -> bool {
        match self {
            Self::Coboundary { .. } => true,
            Self::SymbolScaled { inner, .. } | Self::Scaled { inner, .. } => inner.needs_maps(),
            Self::Sum { terms } => terms.iter().any(Formula::needs_maps),
            _ => false,
        }
    }

    fn max_symbol(&self) -> Option<usize> {
        match self {
            Self::SymbolScaled { scales, inner } => {
                Some(scales.len().saturating_sub(1)).max(inner.max_symbol())
            }
            Self::Sum { terms } => terms.iter().filter_map(Formula::max_symbol).max(),
            Self::Coboundary { q } | Self::Scaled { inner: q, .. } => q.max_symbol(),
            _ => None,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            Self::Poly { coeffs } => coeffs.iter().all(|&c| c == 0.0),
            Self::Cos { amp, .. } | Self::Sin { amp, .. } => *amp == 0.0,
            Self::SymbolScaled { scales, inner } => scales.iter().all(|&s| s == 0.0) || inner.is_zero(),
            Self::Scaled { factor, inner } => *factor == 0.0 || inner.is_zero(),
            Self::Sum { terms } => terms.iter().all(Formula::is_zero),
            Self::Coboundary { q } => q.is_zero(),
        }
    }

    #[inline]
    pub fn eval(&self, symbol: usize, x: f64, maps: &[FiberMap]) -> f64 {
        match self {
            Self::Poly { coeffs } => coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c),
            Self::Cos { freq, amp } => amp * (2.0 * PI * freq * x).cos(),
            Self::Sin { freq, amp } => amp * (2.0 * PI * freq * x).sin(),
            Self::SymbolScaled { scales, inner } => scales[symbol] * inner.eval(symbol, x, maps),
            Self::Scaled { factor, inner } => factor * inner.eval(symbol, x, maps),
            Self::Sum { terms } => terms.iter().map(|t| t.eval(symbol, x, maps)).sum(),
            Self::Coboundary { q } => {
                q.eval(symbol, x, maps) - q.eval(symbol, maps[symbol].image(x), maps)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Centering {
    None,
    /// `means[symbol][component]`; valid when every `μ_j` depends on the
    /// symbol at `j` only (e.g. Lebesgue-preserving ensembles).
    PerSymbol(Vec<Vec<f64>>),
    /// `means[j - lo][component]`.
    PerIndex { lo: i64, means: Vec<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub struct Observable {
    formulas: Vec<Formula>,
    maps: Option<Arc<Vec<FiberMap>>>,
    centering: Centering,
}

impl PartialEq for Observable {
    fn eq(&self, other: &Self) -> bool {
        self.formulas == other.formulas && self.centering == other.centering
    }
}

impl Observable {
    pub fn new(formulas: Vec<Formula>) -> Result<Self> {
        if formulas.is_empty() {
            return Err(Error::Empty("observable needs at least one component"));
        }
        if formulas.iter().any(Formula::needs_maps) {
            return Err(Error::InvalidArgument("coboundary components need maps: use Observable::with_maps".into()));
        }
        Ok(Self { formulas, maps: None, centering: Centering::None })
    }

    pub fn scalar(f: Formula) -> Result<Self> {
        Self::new(vec![f])
    }

    pub fn with_maps(formulas: Vec<Formula>, maps: Arc<Vec<FiberMap>>) -> Result<Self> {
        if formulas.is_empty() {
            return Err(Error::Empty("observable needs at least one component"));
        }
        if let Some(s) = formulas.iter().filter_map(Formula::max_symbol).max() {
            if s >= maps.len() && formulas.iter().any(Formula::needs_maps) {
                return Err(Error::InvalidArgument(format!("symbol {s} has no fiber map")));
            }
        }
        Ok(Self { formulas, maps: Some(maps), centering: Centering::None })
    }

    pub fn dim(&self) -> usize {
        self.formulas.len()
    }

    pub fn formulas(&self) -> &[Formula] {
        &self.formulas
    }

    pub fn centering(&self) -> &Centering {
        &self.centering
    }

    pub fn is_centered(&self) -> bool {
        !matches!(self.centering, Centering::None)
    }

    pub fn is_zero(&self) -> bool {
        self.formulas.iter().all(Formula::is_zero)
    }

    fn maps(&self) -> &[FiberMap] {
        self.maps.as_deref().map_or(&[], Vec::as_slice)
    }

    /// Uncentered value of component `c`.
    #[inline]
    pub fn raw(&self, c: usize, symbol: usize, x: f64) -> f64 {
        self.formulas[c].eval(symbol, x, self.maps())
    }

    #[inline]
    fn offset(&self, j: i64, symbol: usize, c: usize) -> f64 {
        match &self.centering {
            Centering::None => 0.0,
            Centering::PerSymbol(m) => m[symbol][c],
            Centering::PerIndex { lo, means } => {
                let k = j - lo;
                assert!(k >= 0 && (k as usize) < means.len(), "index {j} outside centering window");
                means[k as usize][c]
            }
        }
    }

    /// Component `c` of `v_j(x)` where `symbol` is the path symbol at `j`.
    #[inline]
    pub fn eval_component(&self, c: usize, j: i64, symbol: usize, x: f64) -> f64 {
        self.raw(c, symbol, x) - self.offset(j, symbol, c)
    }

    #[inline]
    pub fn eval(&self, j: i64, symbol: usize, x: f64, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.eval_component(c, j, symbol, x);
        }
    }

    /// `v_j` at the bin midpoints of `system`, one vector per component.
    pub fn bin_values(&self, system: &QuenchedSystem, j: i64) -> Vec<Vec<f64>> {
        let s = system.symbol_at(j);
        (0..self.dim())
            .map(|c| (0..system.n_bins()).map(|i| self.eval_component(c, j, s, system.midpoint(i))).collect())
            .collect()
    }

    /// `∫ v_j dμ_j` by bin-midpoint quadrature.
    pub fn fiber_mean(&self, system: &QuenchedSystem, densities: &DensityField, j: i64) -> Result<Vec<f64>> {
        let h = densities.mass(j)?;
        let s = system.symbol_at(j);
        Ok((0..self.dim())
            .map(|c| {
                (0..system.n_bins()).map(|i| self.eval_component(c, j, s, system.midpoint(i)) * h[i]).sum()
            })
            .collect())
    }

    /// Subtracts fiberwise means along `lo..=hi`. Lebesgue-preserving systems
    /// get per-symbol centering, which is valid at every index.
    pub fn centered(&self, system: &QuenchedSystem, densities: &DensityField, lo: i64, hi: i64) -> Result<Self> {
        let raw = Self { centering: Centering::None, ..self.clone() };
        let centering = if densities.is_uniform() {
            let j0 = densities.lo();
            let mass = densities.mass(j0)?;
            Centering::PerSymbol(
                (0..system.maps().len())
                    .map(|s| {
                        (0..raw.dim())
                            .map(|c| {
                                (0..system.n_bins()).map(|i| raw.raw(c, s, system.midpoint(i)) * mass[i]).sum()
                            })
                            .collect()
                    })
                    .collect(),
            )
        } else {
            let means = (lo..=hi).map(|j| raw.fiber_mean(system, densities, j)).collect::<Result<Vec<_>>>()?;
            Centering::PerIndex { lo, means }
        };
        Ok(Self { centering, ..raw })
    }

    /// `c * v`, keeping the centering consistent.
    pub fn scaled(&self, c: f64) -> Self {
        let scale = |f: &Formula| Formula::Scaled { factor: c, inner: Box::new(f.clone()) };
        let scale_means = |m: &Vec<Vec<f64>>| m.iter().map(|r| r.iter().map(|v| v * c).collect()).collect();
        Self {
            formulas: self.formulas.iter().map(scale).collect(),
            maps: self.maps.clone(),
            centering: match &self.centering {
                Centering::None => Centering::None,
                Centering::PerSymbol(m) => Centering::PerSymbol(scale_means(m)),
                Centering::PerIndex { lo, means } => Centering::PerIndex { lo: *lo, means: scale_means(means) },
            },
        }
    }

    /// Single component as a scalar observable.
    pub fn component(&self, c: usize) -> Self {
        let pick = |m: &Vec<Vec<f64>>| m.iter().map(|r| vec![r[c]]).collect();
        Self {
            formulas: vec![self.formulas[c].clone()],
            maps: self.maps.clone(),
            centering: match &self.centering {
                Centering::None => Centering::None,
                Centering::PerSymbol(m) => Centering::PerSymbol(pick(m)),
                Centering::PerIndex { lo, means } => Centering::PerIndex { lo: *lo, means: pick(means) },
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_env::BasePath;
    use crate::fiber_maps::MapFamily;

    fn doubling() -> QuenchedSystem {
        let maps = vec![FiberMap::build(&MapFamily::Beta { beta: 2 }).unwrap()];
        QuenchedSystem::new(BasePath::constant(0, 4, 4), maps, 256).unwrap()
    }

    #[test]
    fn formula_values() {
        let m: Vec<FiberMap> = vec![FiberMap::build(&MapFamily::Beta { beta: 2 }).unwrap()];
        assert_eq!(Formula::poly(&[1.0, -2.0, 3.0]).eval(0, 0.5, &m), 0.75);
        assert!((Formula::cos(1.0).eval(0, 0.25, &m)).abs() < 1e-15);
        assert!((Formula::sin(1.0).eval(0, 0.25, &m) - 1.0).abs() < 1e-15);
        let q = Formula::poly(&[0.0, 1.0, -1.0]);
        let cb = Formula::coboundary(q);
        // q(0.3) - q(0.6) = 0.21 - 0.24
        assert!((cb.eval(0, 0.3, &m) + 0.03).abs() < 1e-15);
        let ss = Formula::SymbolScaled { scales: vec![2.0, -1.0], inner: Box::new(Formula::poly(&[0.0, 1.0])) };
        assert_eq!(ss.eval(1, 0.5, &m), -0.5);
    }

    #[test]
    fn coboundary_requires_maps() {
        let cb = Formula::coboundary(Formula::poly(&[0.0, 1.0]));
        assert!(Observable::scalar(cb.clone()).is_err());
        let maps = Arc::new(vec![FiberMap::build(&MapFamily::Beta { beta: 2 }).unwrap()]);
        assert!(Observable::with_maps(vec![cb], maps).is_ok());
        assert!(Observable::new(vec![]).is_err());
    }

    #[test]
    fn centering_examples() {
        let sys = doubling();
        let field = DensityField::along(&sys, -4, 4, 0).unwrap();
        let seven = Observable::scalar(Formula::constant(7.0)).unwrap().centered(&sys, &field, -4, 4).unwrap();
        assert!(seven.eval_component(0, 0, 0, 0.3).abs() < 1e-12);
        let x = Observable::scalar(Formula::poly(&[0.0, 1.0])).unwrap().centered(&sys, &field, -4, 4).unwrap();
        assert!((x.eval_component(0, 2, 0, 0.8) - 0.3).abs() < 1e-12);
        let c = Observable::scalar(Formula::cos(1.0)).unwrap().centered(&sys, &field, -4, 4).unwrap();
        assert!((c.eval_component(0, 0, 0, 0.1) - (2.0 * PI * 0.1).cos()).abs() < 1e-12);
        for j in -4..=4 {
            assert!(c.fiber_mean(&sys, &field, j).unwrap()[0].abs() < 1e-8);
        }
    }

    #[test]
    fn per_index_centering_for_tabulated_fields() {
        let maps = vec![FiberMap::build(&MapFamily::Mixed { d: 3, q: 1, eta: 3.0, curvature: 0.8 }).unwrap()];
        let sys = QuenchedSystem::new(BasePath::constant(0, 30, 5), maps, 512).unwrap();
        let field = DensityField::along(&sys, 0, 5, 30).unwrap();
        let v = Observable::new(vec![Formula::poly(&[0.0, 1.0]), Formula::cos(1.0)]).unwrap();
        let c = v.centered(&sys, &field, 0, 5).unwrap();
        assert!(matches!(c.centering(), Centering::PerIndex { .. }));
        for j in 0..=5 {
            for m in c.fiber_mean(&sys, &field, j).unwrap() {
                assert!(m.abs() < 1e-8);
            }
        }
    }

    #[test]
    fn scaling_and_components() {
        let sys = doubling();
        let field = DensityField::along(&sys, -4, 4, 0).unwrap();
        let v = Observable::new(vec![Formula::poly(&[0.0, 1.0]), Formula::cos(2.0)])
            .unwrap()
            .centered(&sys, &field, -4, 4)
            .unwrap();
        let w = v.scaled(-3.0);
        let mut a = [0.0; 2];
        let mut b = [0.0; 2];
        v.eval(1, 0, 0.37, &mut a);
        w.eval(1, 0, 0.37, &mut b);
        assert!((b[0] + 3.0 * a[0]).abs() < 1e-14 && (b[1] + 3.0 * a[1]).abs() < 1e-14);
        assert_eq!(v.component(1).eval_component(0, 1, 0, 0.37), a[1]);
    }
}
