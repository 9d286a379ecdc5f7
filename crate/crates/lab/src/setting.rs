//! Base path, quenched system, densities and centred observable for a config.

use std::ops::Range;
use std::sync::Arc;

use rds_core::base_env::BaseProcess;
use rds_core::decomp::{default_truncation, DEFAULT_TRUNCATION_TOL};
use rds_core::observable::Observable;
use rds_core::seed;
use rds_core::transfer::{DensityField, QuenchedSystem, UlamCache};

use crate::config::{ExperimentConfig, Scenario};
use crate::Result;

/// Pull-back depth for the first equivariant density.
pub const PULLBACK: usize = 60;
/// Truncation assumed while probing for the default one.
const PROBE_TRUNCATION: usize = 40;

pub struct Setting {
    pub process: BaseProcess,
    pub system: QuenchedSystem,
    pub field: DensityField,
    pub v: Observable,
    pub truncation_k: usize,
    pub positions: Range<i64>,
    pub n_lags: usize,
}

/// Future indices the scenario reads along the base path.
fn future_needed(cfg: &ExperimentConfig) -> usize {
    let num = &cfg.numerics;
    let mut n = num.positions + num.n_lags + 2;
    n = n.max(num.decay_steps + 2);
    if cfg.scenario.samples_trajectories() {
        let grid_max = num.moment_grid.as_ref().and_then(|g| g.iter().max().copied()).unwrap_or(0);
        n = n.max(num.n + 1).max(grid_max + 1);
    }
    if cfg.scenario == Scenario::IteratedWip {
        n = n.max(num.n + 1);
    }
    if let Some(fs) = &cfg.fast_slow {
        let smallest = fs.refinement.iter().flatten().copied().fold(cfg.epsilon(), f64::min);
        n = n.max(fs.spec(smallest).n_steps() + 1);
    }
    n
}

impl Setting {
    pub fn build(cfg: &ExperimentConfig, cache: &UlamCache) -> Result<Self> {
        let process = cfg.base.build()?;
        let maps = Arc::new(cfg.fiber_maps()?);
        let n_future = future_needed(cfg);
        let lags = cfg.numerics.n_lags;
        let mut k = cfg.numerics.truncation_k.unwrap_or(PROBE_TRUNCATION);
        loop {
            let k_past = cfg.base.k_past.unwrap_or(k + lags + PULLBACK);
            let path = Arc::new(process.sample_path(k_past, n_future, seed::derive(cfg.master_seed, "base", 0)));
            let system = QuenchedSystem::with_cache(path, Arc::clone(&maps), cfg.numerics.n_bins, cache)?;
            let pull = PULLBACK.min(k_past);
            let field = DensityField::along(&system, system.path().lo() + pull as i64, system.path().hi(), pull)?;
            let formulas = cfg.observable.formulas().map_err(|e| crate::LabError::Invalid(vec![e]))?;
            let v = Observable::with_maps(formulas, Arc::clone(&maps))?.centered(&system, &field, field.lo(), field.hi())?;
            let needed = match cfg.numerics.truncation_k {
                Some(k) => k,
                None => default_truncation(&system, &field, &v, 0, cfg.numerics.decay_steps, DEFAULT_TRUNCATION_TOL)?,
            };
            // Rebuild once with a deeper past if the default truncation needs it.
            if cfg.base.k_past.is_none() && needed > k {
                k = needed;
                continue;
            }
            let positions = 0..cfg.numerics.positions as i64;
            return Ok(Self { process, system, field, v, truncation_k: needed, positions, n_lags: lags });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;

    #[test]
    fn windows_cover_the_pipeline() {
        let cfg = presets::load("random-beta-decomposition").unwrap();
        let cache = UlamCache::new();
        let s = Setting::build(&cfg, &cache).unwrap();
        assert_eq!(s.truncation_k, 40);
        let lo = s.positions.start - s.truncation_k as i64;
        assert!(s.field.lo() <= lo);
        assert!(s.field.hi() >= s.positions.end + s.n_lags as i64);
        assert!(s.v.is_centered());
        assert_eq!(cache.misses(), 2);
    }

    #[test]
    fn default_truncation_deepens_the_past() {
        let mut cfg = presets::load("random-beta-decomposition").unwrap();
        cfg.numerics.truncation_k = None;
        cfg.numerics.n_bins = 256;
        let s = Setting::build(&cfg, &UlamCache::new()).unwrap();
        assert!(s.truncation_k >= 1);
        assert!(s.field.lo() <= -(s.truncation_k as i64));
    }
}
