//! Birkhoff sums and the normalised iterated-sum processes along one orbit.

use serde::{Deserialize, Serialize};

use crate::observable::Observable;
use crate::transfer::QuenchedSystem;
use crate::{Error, Result};

/// `v_{start+k}(x_k)` for `k < n`, laid out `[k * e + component]`.
pub fn observe(system: &QuenchedSystem, v: &Observable, traj: &[f64], start: i64, n: usize) -> Result<Vec<f64>> {
    if traj.len() < n {
        return Err(Error::Dimension { expected: n, got: traj.len() });
    }
    system.path().check_window(start, start + n as i64)?;
    let e = v.dim();
    let mut out = vec![0.0; n * e];
    for (k, chunk) in out.chunks_exact_mut(e).enumerate() {
        let j = start + k as i64;
        v.eval(j, system.symbol_at(j), traj[k], chunk);
    }
    Ok(out)
}

/// `S_n = Σ_{k<n} u_{start+k}(x_k)`.
pub fn birkhoff_sum(system: &QuenchedSystem, u: &Observable, traj: &[f64], start: i64, n: usize) -> Result<Vec<f64>> {
    let e = u.dim();
    let vals = observe(system, u, traj, start, n)?;
    let mut s = vec![0.0; e];
    for chunk in vals.chunks_exact(e) {
        s.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    Ok(s)
}

/// `W` and `𝕎` on the grid `t = k/n`, `k = 0..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathStats {
    pub n: usize,
    pub e: usize,
    pub x0: f64,
    pub path_id: u64,
    /// `w[k * e + β] = n^{-1/2} Σ_{j<k} v^β_j`.
    pub w: Vec<f64>,
    /// `ww[k * e² + β e + γ] = n^{-1} Σ_{0≤i<j≤k-1} v^β_i v^γ_j`.
    pub ww: Vec<f64>,
    /// `q[k * e² + β e + γ] = n^{-1} Σ_{j<k} v^β_j v^γ_j`.
    pub q: Vec<f64>,
}

impl PathStats {
    pub fn w_at(&self, k: usize) -> &[f64] {
        &self.w[k * self.e..(k + 1) * self.e]
    }

    pub fn ww_at(&self, k: usize, beta: usize, gamma: usize) -> f64 {
        self.ww[k * self.e * self.e + beta * self.e + gamma]
    }

    pub fn q_at(&self, k: usize, beta: usize, gamma: usize) -> f64 {
        self.q[k * self.e * self.e + beta * self.e + gamma]
    }

    /// `W(1)`.
    pub fn w_end(&self) -> &[f64] {
        self.w_at(self.n)
    }

    /// `max_{k,β,γ} |W^β W^γ - 𝕎^{βγ} - 𝕎^{γβ} - Q^{βγ}|`.
    pub fn pairing_deviation(&self) -> f64 {
        let e = self.e;
        let mut worst: f64 = 0.0;
        for k in 0..=self.n {
            let w = self.w_at(k);
            for b in 0..e {
                for g in 0..e {
                    let d = w[b] * w[g] - self.ww_at(k, b, g) - self.ww_at(k, g, b) - self.q_at(k, b, g);
                    worst = worst.max(d.abs());
                }
            }
        }
        worst
    }
}

/// Forms `W`, `𝕎` and `Q` from an orbit by the running-sum recursion
/// `𝕎^{βγ} += (Σ_{i<j} v^β_i) v^γ_j`.
pub fn iterated_path(
    system: &QuenchedSystem,
    v: &Observable,
    traj: &[f64],
    start: i64,
    n: usize,
    path_id: u64,
) -> Result<PathStats> {
    if n == 0 {
        return Err(Error::InvalidArgument("iterated sums need n >= 1".into()));
    }
    let e = v.dim();
    let vals = observe(system, v, traj, start, n)?;
    Ok(iterated_from_values(&vals, e, n, traj[0], path_id))
}

pub fn iterated_from_values(vals: &[f64], e: usize, n: usize, x0: f64, path_id: u64) -> PathStats {
    let e2 = e * e;
    let mut w = vec![0.0; (n + 1) * e];
    let mut ww = vec![0.0; (n + 1) * e2];
    let mut q = vec![0.0; (n + 1) * e2];
    let mut s = vec![0.0; e];
    let mut acc_ww = vec![0.0; e2];
    let mut acc_q = vec![0.0; e2];
    let rn = (n as f64).sqrt();
    let nf = n as f64;
    for k in 0..n {
        let vk = &vals[k * e..(k + 1) * e];
        for b in 0..e {
            for g in 0..e {
                acc_ww[b * e + g] += s[b] * vk[g];
                acc_q[b * e + g] += vk[b] * vk[g];
            }
        }
        s.iter_mut().zip(vk).for_each(|(a, b)| *a += b);
        for b in 0..e {
            w[(k + 1) * e + b] = s[b] / rn;
        }
        for i in 0..e2 {
            ww[(k + 1) * e2 + i] = acc_ww[i] / nf;
            q[(k + 1) * e2 + i] = acc_q[i] / nf;
        }
    }
    PathStats { n, e, x0, path_id, w, ww, q }
}

/// Iterated sum `Σ_{i<j<k} v^β_i v^γ_j` and Birkhoff sums, unnormalised, at
/// every `k ≤ n`, returned as running maxima of their absolute values.
pub fn running_maxima(vals: &[f64], e: usize, n: usize, beta: usize, gamma: usize) -> (Vec<f64>, Vec<f64>) {
    let mut s = vec![0.0; e];
    let mut it = 0.0;
    let mut max_s = Vec::with_capacity(n + 1);
    let mut max_it = Vec::with_capacity(n + 1);
    let (mut ms, mut mi) = (0.0f64, 0.0f64);
    max_s.push(0.0);
    max_it.push(0.0);
    for k in 0..n {
        let vk = &vals[k * e..(k + 1) * e];
        it += s[beta] * vk[gamma];
        s.iter_mut().zip(vk).for_each(|(a, b)| *a += b);
        let norm = s.iter().map(|x| x * x).sum::<f64>().sqrt();
        ms = ms.max(norm);
        mi = mi.max(it.abs());
        max_s.push(ms);
        max_it.push(mi);
    }
    (max_s, max_it)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::base_env::BasePath;
    use crate::fiber_maps::{FiberMap, MapFamily};
    use crate::observable::Formula;
    use crate::transfer::DensityField;
    use proptest::prelude::*;

    fn doubling() -> (QuenchedSystem, DensityField) {
        let maps = vec![FiberMap::build(&MapFamily::Beta { beta: 2 }).unwrap()];
        let sys = QuenchedSystem::new(BasePath::constant(0, 0, 100), maps, 64).unwrap();
        let field = DensityField::along(&sys, 0, 100, 0).unwrap();
        (sys, field)
    }

    #[test]
    fn birkhoff_examples() {
        let (sys, field) = doubling();
        let zero = Observable::scalar(Formula::constant(0.0)).unwrap().centered(&sys, &field, 0, 100).unwrap();
        let traj: Vec<f64> = (0..11).map(|k| k as f64 / 11.0).collect();
        assert_eq!(birkhoff_sum(&sys, &zero, &traj, 0, 10).unwrap(), vec![0.0]);
        let v = Observable::scalar(Formula::poly(&[0.0, 1.0])).unwrap().centered(&sys, &field, 0, 100).unwrap();
        let s1 = birkhoff_sum(&sys, &v, &traj, 0, 1).unwrap()[0];
        assert_eq!(s1, v.eval_component(0, 0, 0, traj[0]));
    }

    #[test]
    fn two_step_hand_expansion() {
        let (a, b) = (0.3, -1.7);
        let p = iterated_from_values(&[a, b], 1, 2, 0.0, 0);
        assert!((p.ww_at(2, 0, 0) - a * b / 2.0).abs() < 1e-15);
        assert!((p.w_end()[0] - (a + b) / 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(p.w_at(0), &[0.0]);
        assert_eq!(p.ww_at(0, 0, 0), 0.0);
        let zero = iterated_from_values(&[0.0; 10], 2, 5, 0.0, 0);
        assert!(zero.w.iter().chain(&zero.ww).all(|&x| x == 0.0));
    }

    #[test]
    fn running_maxima_match_direct() {
        let vals = [1.0, -2.0, 0.5, 3.0];
        let (ms, mi) = running_maxima(&vals, 1, 4, 0, 0);
        assert_eq!(ms, vec![0.0, 1.0, 1.0, 1.0, 2.5]);
        // iterated sums: 0, 0, -2, -2 + (-1)(0.5) = -2.5, -2.5 + (-0.5)(3) = -4
        assert_eq!(mi, vec![0.0, 0.0, 2.0, 2.5, 4.0]);
    }

    proptest! {
        #[test]
        fn pairing_identity_holds(vals in prop::collection::vec(-2.0f64..2.0, 2..200), e in 1usize..4) {
            let n = vals.len() / e;
            prop_assume!(n >= 1);
            let p = iterated_from_values(&vals[..n * e], e, n, 0.0, 0);
            prop_assert!(p.pairing_deviation() < 1e-12);
        }

        #[test]
        fn scaling_is_exact_for_powers_of_two(vals in prop::collection::vec(-2.0f64..2.0, 1..100)) {
            let n = vals.len();
            let scaled: Vec<f64> = vals.iter().map(|v| 4.0 * v).collect();
            let a = iterated_from_values(&vals, 1, n, 0.0, 0);
            let b = iterated_from_values(&scaled, 1, n, 0.0, 0);
            for k in 0..=n {
                prop_assert_eq!(b.w_at(k)[0], 4.0 * a.w_at(k)[0]);
                prop_assert_eq!(b.ww_at(k, 0, 0), 16.0 * a.ww_at(k, 0, 0));
            }
        }
    }
}
