//! Orbit sampling under the fiber maps with `x_start ~ μ_start`.
//!
//! Forward iteration `x_{j+1} = T_j(x_j)` in floating point collapses for
//! maps like `2x mod 1` (every step shifts out one mantissa bit, so the
//! orbit reaches 0 after about 53 steps). The default sampler therefore runs
//! backwards: it draws the final point from `μ_{start+n}` and then picks an
//! inverse branch at every step with probability
//! `h_j(y_b(x)) |y_b'(x)| / h_{j+1}(x)`. This produces the same joint law of
//! `(x_start, ..., x_{start+n})` with `x_{j+1} = T_j(x_j)` holding exactly up
//! to rounding in the contracting direction. When the density field does not
//! cover the whole window the sampler falls back to forward iteration,
//! which is exact only for maps whose slopes are not powers of two.

use rand::Rng as _;
use rayon::prelude::*;

use crate::seed;
use crate::transfer::{DensityField, QuenchedSystem};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Backward,
    Forward,
}

/// Largest double below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

pub struct TrajectorySampler<'a> {
    system: &'a QuenchedSystem,
    densities: &'a DensityField,
    force: Option<SamplingMode>,
}

impl<'a> TrajectorySampler<'a> {
    pub fn new(system: &'a QuenchedSystem, densities: &'a DensityField) -> Self {
        Self { system, densities, force: None }
    }

    pub fn with_mode(mut self, mode: SamplingMode) -> Self {
        self.force = Some(mode);
        self
    }

    pub fn system(&self) -> &QuenchedSystem {
        self.system
    }

    /// Mode used for a window `start..=start+n`.
    pub fn mode_for(&self, start: i64, n: usize) -> SamplingMode {
        if let Some(m) = self.force {
            return m;
        }
        let end = start + n as i64;
        if self.densities.lo() <= start && self.densities.hi() >= end {
            SamplingMode::Backward
        } else {
            SamplingMode::Forward
        }
    }

    fn check(&self, start: i64, n: usize, mode: SamplingMode) -> Result<()> {
        self.system.path().check_window(start, start + n as i64 + 1)?;
        match mode {
            SamplingMode::Backward => {
                self.densities.mass(start)?;
                self.densities.mass(start + n as i64)?;
            }
            SamplingMode::Forward => {
                self.densities.mass(start)?;
            }
        }
        Ok(())
    }

    /// Inverse-CDF table of the bin masses at index `j`; `None` if uniform.
    fn cdf_at(&self, j: i64) -> Result<Option<Vec<f64>>> {
        if self.densities.is_uniform() {
            return Ok(None);
        }
        let mass = self.densities.mass(j)?;
        let mut acc = 0.0;
        let mut cdf: Vec<f64> = mass
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect();
        let total = acc;
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(Some(cdf))
    }

    fn draw(&self, cdf: &Option<Vec<f64>>, rng: &mut seed::Rng) -> f64 {
        match cdf {
            None => rng.random::<f64>(),
            Some(cdf) => {
                let u: f64 = rng.random();
                let i = cdf.partition_point(|&c| c <= u).min(cdf.len() - 1);
                let n = cdf.len() as f64;
                ((i as f64 + rng.random::<f64>()) / n).min(BELOW_ONE)
            }
        }
    }

    /// Fills `out[k] = x_{start+k}` for `k = 0..=n`.
    pub fn sample_into(&self, start: i64, n: usize, rng: &mut seed::Rng, out: &mut Vec<f64>) -> Result<()> {
        let mode = self.mode_for(start, n);
        self.check(start, n, mode)?;
        let cdf = match mode {
            SamplingMode::Backward => self.cdf_at(start + n as i64)?,
            SamplingMode::Forward => self.cdf_at(start)?,
        };
        self.fill(start, n, mode, &cdf, rng, out);
        Ok(())
    }

    fn fill(
        &self,
        start: i64,
        n: usize,
        mode: SamplingMode,
        cdf: &Option<Vec<f64>>,
        rng: &mut seed::Rng,
        out: &mut Vec<f64>,
    ) {
        out.clear();
        out.resize(n + 1, 0.0);
        match mode {
            SamplingMode::Forward => {
                out[0] = self.draw(cdf, rng);
                for k in 0..n {
                    out[k + 1] = self.system.map_at(start + k as i64).image(out[k]);
                }
            }
            SamplingMode::Backward => {
                out[n] = self.draw(cdf, rng);
                let uniform = self.densities.is_uniform();
                let nb = self.system.n_bins();
                let mut w: Vec<f64> = Vec::with_capacity(8);
                for k in (0..n).rev() {
                    let j = start + k as i64;
                    let x = out[k + 1];
                    let branches = self.system.map_at(j).branches();
                    w.clear();
                    let h = if uniform { None } else { self.densities.get(j) };
                    let mut total = 0.0;
                    for b in branches {
                        let mut wb = b.inverse_jacobian(x);
                        if let Some(h) = h {
                            wb *= h[self.system.bin_of(b.inverse(x))] * nb as f64;
                        }
                        total += wb;
                        w.push(total);
                    }
                    if !(total > 0.0) {
                        // Target point in a masked bin; fall back to Lebesgue weights.
                        total = 0.0;
                        w.clear();
                        for b in branches {
                            total += b.inverse_jacobian(x);
                            w.push(total);
                        }
                    }
                    let u = rng.random::<f64>() * total;
                    let pick = w.partition_point(|&c| c <= u).min(branches.len() - 1);
                    out[k] = branches[pick].inverse(x).min(BELOW_ONE);
                }
            }
        }
    }

    pub fn sample(&self, start: i64, n: usize, seed: u64) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        self.sample_into(start, n, &mut seed::rng(seed), &mut out)?;
        Ok(out)
    }

    /// Runs `f` on `n_paths` independent trajectories in parallel and returns
    /// the results in path order. Path `i` uses `seed::derive(seed, "trajectory", i)`.
    pub fn ensemble<T, F>(&self, start: i64, n: usize, n_paths: usize, seed: u64, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&[f64]) -> T + Sync,
    {
        if n_paths == 0 {
            return Err(Error::Empty("ensemble with zero paths"));
        }
        let mode = self.mode_for(start, n);
        self.check(start, n, mode)?;
        let cdf = match mode {
            SamplingMode::Backward => self.cdf_at(start + n as i64)?,
            SamplingMode::Forward => self.cdf_at(start)?,
        };
        Ok((0..n_paths)
            .into_par_iter()
            .map_init(Vec::new, |buf, i| {
                let mut rng = seed::stage_rng(seed, "trajectory", i as u64);
                self.fill(start, n, mode, &cdf, &mut rng, buf);
                f(buf)
            })
            .collect())
    }
}
