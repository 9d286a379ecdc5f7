//! Full-branch piecewise monotone maps of `[0,1)` and the dominating-expansion
//! condition checkers.
//!
//! Every branch maps its interval bijectively onto `[0,1)`, so transfer
//! operators reduce to sums over inverse branches. Inverse branches have
//! closed forms, which is what the Ulam discretisation and the backward
//! trajectory sampler rely on.

use serde::{Deserialize, Serialize};

use crate::base_env::BasePath;
use crate::{Error, Result};

/// Built-in map families; the `family` tag is what configs use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MapFamily {
    /// `x ↦ βx mod 1`.
    Beta { beta: u32 },
    /// Piecewise-linear full-branch map. Slope signs pick the orientation of
    /// each branch and `|slope| * length` must be 1.
    LasotaYorke { breakpoints: Vec<f64>, slopes: Vec<f64> },
    /// `q` slack branches with a bent (quadratic) inverse followed by
    /// `d - q` affine branches of slope `eta`. The slack branches share the
    /// remaining length `1 - (d - q)/eta`; their inverse Lipschitz constant is
    /// `length * (1 + curvature)`.
    Mixed { d: usize, q: usize, eta: f64, curvature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum BranchShape {
    Increasing,
    Decreasing,
    /// Inverse `y(x) = left + len * (x + c x (1 - x))`, `0 <= c < 1`.
    Bent { c: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub left: f64,
    pub right: f64,
    pub shape: BranchShape,
    /// Declared as a weakly-expanding/contracting branch (counted in `q`).
    pub slack: bool,
}

impl Branch {
    #[inline]
    pub fn len(&self) -> f64 {
        self.right - self.left
    }

    #[inline]
    pub fn is_affine(&self) -> bool {
        !matches!(self.shape, BranchShape::Bent { .. })
    }

    /// Inverse branch `y_i(x)`, `x ∈ [0,1]`.
    #[inline]
    pub fn inverse(&self, x: f64) -> f64 {
        let g = match self.shape {
            BranchShape::Increasing => x,
            BranchShape::Decreasing => 1.0 - x,
            BranchShape::Bent { c } => x + c * x * (1.0 - x),
        };
        self.left + self.len() * g
    }

    /// `|y_i'(x)|`, which equals `1/|T'(y_i(x))|`.
    #[inline]
    pub fn inverse_jacobian(&self, x: f64) -> f64 {
        match self.shape {
            BranchShape::Increasing | BranchShape::Decreasing => self.len(),
            BranchShape::Bent { c } => self.len() * (1.0 + c * (1.0 - 2.0 * x)),
        }
    }

    /// Forward image of `y ∈ [left, right)`; may return exactly 1.0 at the
    /// right end of a decreasing branch, callers fold it.
    #[inline]
    pub fn forward(&self, y: f64) -> f64 {
        let u = (y - self.left) / self.len();
        match self.shape {
            BranchShape::Increasing => u,
            BranchShape::Decreasing => 1.0 - u,
            BranchShape::Bent { c } => {
                2.0 * u / ((1.0 + c) + ((1.0 + c) * (1.0 + c) - 4.0 * c * u).max(0.0).sqrt())
            }
        }
    }

    /// Lipschitz constant of the inverse branch.
    pub fn inverse_lipschitz(&self) -> f64 {
        match self.shape {
            BranchShape::Increasing | BranchShape::Decreasing => self.len(),
            BranchShape::Bent { c } => self.len() * (1.0 + c.abs()),
        }
    }

    /// Minimal local expansion `min |T'|` on the branch.
    pub fn min_expansion(&self) -> f64 {
        1.0 / self.inverse_lipschitz()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberMap {
    family: MapFamily,
    branches: Vec<Branch>,
}

#[inline]
fn fold(x: f64) -> f64 {
    if x >= 1.0 {
        x - 1.0
    } else if x < 0.0 {
        0.0
    } else {
        x
    }
}

impl FiberMap {
    pub fn build(family: &MapFamily) -> Result<Self> {
        let branches = match family {
            MapFamily::Beta { beta } => {
                if *beta < 2 {
                    return Err(Error::InvalidMap(format!("beta must be an integer >= 2, got {beta}")));
                }
                let b = f64::from(*beta);
                (0..*beta)
                    .map(|k| Branch {
                        left: f64::from(k) / b,
                        right: f64::from(k + 1) / b,
                        shape: BranchShape::Increasing,
                        slack: false,
                    })
                    .collect()
            }
            MapFamily::LasotaYorke { breakpoints, slopes } => lasota_yorke(breakpoints, slopes)?,
            MapFamily::Mixed { d, q, eta, curvature } => mixed(*d, *q, *eta, *curvature)?,
        };
        Ok(Self { family: family.clone(), branches })
    }

    pub fn family(&self) -> &MapFamily {
        &self.family
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// All branches affine: such full-branch maps preserve Lebesgue measure,
    /// because `Σ 1/|slope_i| = Σ len_i = 1`.
    pub fn preserves_lebesgue(&self) -> bool {
        self.branches.iter().all(Branch::is_affine)
    }

    #[inline]
    pub fn branch_index(&self, x: f64) -> usize {
        self.branches.partition_point(|b| b.left <= x).saturating_sub(1)
    }

    /// `T(x)` for `x ∈ [0,1]`; `1.0` is folded to `0.0` on input.
    pub fn apply(&self, x: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&x) || x.is_nan() {
            return Err(Error::Domain(x));
        }
        Ok(self.image(if x == 1.0 { 0.0 } else { x }))
    }

    /// Unchecked forward evaluation for `x ∈ [0,1)`.
    #[inline]
    pub fn image(&self, x: f64) -> f64 {
        let b = &self.branches[self.branch_index(x)];
        fold(b.forward(x))
    }
}

fn lasota_yorke(breakpoints: &[f64], slopes: &[f64]) -> Result<Vec<Branch>> {
    if breakpoints.len() < 2 || slopes.len() != breakpoints.len() - 1 {
        return Err(Error::InvalidMap(format!(
            "need k+1 breakpoints for k slopes, got {} and {}",
            breakpoints.len(),
            slopes.len()
        )));
    }
    if breakpoints[0] != 0.0 || *breakpoints.last().unwrap() != 1.0 {
        return Err(Error::BranchCoverage("breakpoints must start at 0 and end at 1".into()));
    }
    let mut out = Vec::with_capacity(slopes.len());
    for (w, &s) in breakpoints.windows(2).zip(slopes) {
        let (l, r) = (w[0], w[1]);
        if !(r > l) {
            return Err(Error::BranchCoverage(format!("breakpoints not increasing at {l}, {r}")));
        }
        if s == 0.0 || !s.is_finite() {
            return Err(Error::InvalidMap("slope 0 (or non-finite) rejected".into()));
        }
        let image = s.abs() * (r - l);
        if (image - 1.0).abs() > 1e-9 {
            return Err(Error::BranchCoverage(format!(
                "branch [{l}, {r}) with slope {s} has image length {image}"
            )));
        }
        out.push(Branch {
            left: l,
            right: r,
            shape: if s > 0.0 { BranchShape::Increasing } else { BranchShape::Decreasing },
            slack: s.abs() <= 1.0,
        });
    }
    Ok(out)
}

fn mixed(d: usize, q: usize, eta: f64, curvature: f64) -> Result<Vec<Branch>> {
    if q >= d {
        return Err(Error::NoExpandingBranches { q, d });
    }
    if q == 0 {
        return Err(Error::InvalidMap("mixed family needs q >= 1 slack branches".into()));
    }
    if !(0.0..1.0).contains(&curvature) {
        return Err(Error::InvalidMap(format!("curvature {curvature} not in [0,1)")));
    }
    if !(eta > 1.0) {
        return Err(Error::NotExpanding(eta));
    }
    let slack_total = 1.0 - (d - q) as f64 / eta;
    if slack_total <= 0.0 {
        return Err(Error::BranchCoverage(format!(
            "{} branches of slope {eta} leave no room for {q} slack branches",
            d - q
        )));
    }
    let slack_len = slack_total / q as f64;
    let mut out = Vec::with_capacity(d);
    let mut left = 0.0;
    for i in 0..d {
        let right = if i + 1 == d {
            1.0
        } else if i < q {
            left + slack_len
        } else {
            left + 1.0 / eta
        };
        out.push(Branch {
            left,
            right,
            shape: if i < q { BranchShape::Bent { c: curvature } } else { BranchShape::Increasing },
            slack: i < q,
        });
        left = right;
    }
    Ok(out)
}

/// `a_ω = (q l^α + (d - q) η^{-α}) / d`.
pub fn a_omega(q: usize, d: usize, l: f64, eta: f64, alpha: f64) -> Result<f64> {
    if q >= d {
        return Err(Error::NoExpandingBranches { q, d });
    }
    if !(eta > 1.0) {
        return Err(Error::NotExpanding(eta));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("Hölder exponent {alpha} not in (0,1]")));
    }
    Ok((q as f64 * l.powf(alpha) + (d - q) as f64 * eta.powf(-alpha)) / d as f64)
}

/// `B(ω) = 12 (1 + 2/s_ω)^4`.
pub fn b_constant(s_omega: f64) -> f64 {
    12.0 * (1.0 + 2.0 / s_omega).powi(4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub q: usize,
    pub d: usize,
    pub l: f64,
    pub eta: f64,
    pub alpha: f64,
    pub a_omega: f64,
    pub eps_omega: f64,
    pub s_omega: f64,
    pub h_omega: f64,
    pub b_omega: f64,
    /// First clause `s_ω < 1`.
    pub contraction_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleExpansion {
    pub per_symbol: Vec<ExpansionReport>,
    /// `E_P[a_ω]` under the supplied symbol probabilities.
    pub mean_a: f64,
    pub max_a: f64,
}

/// Branch data read off a built map: slack branches are those declared so
/// by the family, or (for affine families) those with `|T'| <= 1`.
pub fn branch_constants(map: &FiberMap) -> (usize, usize, f64, f64) {
    let slack: Vec<&Branch> = map.branches().iter().filter(|b| b.slack).collect();
    let q = slack.len();
    let d = map.n_branches();
    let l = slack.iter().map(|b| b.inverse_lipschitz()).fold(1.0, f64::max);
    let eta = map
        .branches()
        .iter()
        .filter(|b| !b.slack)
        .map(|b| b.min_expansion())
        .fold(f64::INFINITY, f64::min);
    (q, d, l, eta)
}

pub fn expansion_report(
    maps: &[FiberMap],
    probabilities: &[f64],
    alpha: f64,
    osc: &[f64],
    holder: &[f64],
) -> Result<EnsembleExpansion> {
    let n = maps.len();
    for len in [probabilities.len(), osc.len(), holder.len()] {
        if len != n {
            return Err(Error::Dimension { expected: n, got: len });
        }
    }
    if osc.iter().chain(holder).any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidArgument("oscillation and Hölder constants must be >= 0".into()));
    }
    let mut per_symbol = Vec::with_capacity(n);
    for ((map, &eps), &h) in maps.iter().zip(osc).zip(holder) {
        let (q, d, l, eta) = branch_constants(map);
        let a = a_omega(q, d, l, eta, alpha)?;
        let s = eps.exp() * a;
        per_symbol.push(ExpansionReport {
            q,
            d,
            l,
            eta,
            alpha,
            a_omega: a,
            eps_omega: eps,
            s_omega: s,
            h_omega: h,
            b_omega: b_constant(s),
            contraction_ok: s < 1.0,
        });
    }
    let mean_a = per_symbol.iter().zip(probabilities).map(|(r, p)| r.a_omega * p).sum();
    let max_a = per_symbol.iter().map(|r| r.a_omega).fold(0.0, f64::max);
    Ok(EnsembleExpansion { per_symbol, mean_a, max_a })
}

/// Second clause of the potential bound, checked for every consecutive pair
/// `(ω_j, ω_{j+1})` of the path: `e^{ε_ω} H_ω <= (s_{σω}^{-1} - 1)/(1 + s_ω^{-1})`.
pub fn holder_clause_along(reports: &[ExpansionReport], path: &BasePath) -> Vec<bool> {
    path.symbols()
        .windows(2)
        .map(|w| {
            let (r, next) = (&reports[w[0]], &reports[w[1]]);
            r.eps_omega.exp() * r.h_omega <= (1.0 / next.s_omega - 1.0) / (1.0 + 1.0 / r.s_omega)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TameBound {
    /// `R̂(ω) = max_n a_n B(σ^n ω)`.
    pub r_hat: f64,
    /// 1-based `n` attaining the maximum (first one on ties).
    pub argmax: usize,
    /// `R̂^q`.
    pub r_hat_pow_q: f64,
    /// `mean(B^q) * Σ a_n^q` over the supplied sample.
    pub moment_bound: f64,
}

/// `b_values[n-1] = B(σ^n ω)` and `a_n[n-1] = a_n` for `n = 1, 2, ...`.
pub fn tame_b(b_values: &[f64], a_n: &[f64], q: f64) -> Result<TameBound> {
    if b_values.is_empty() {
        return Err(Error::Empty("B sample"));
    }
    if a_n.len() != b_values.len() {
        return Err(Error::Dimension { expected: b_values.len(), got: a_n.len() });
    }
    if a_n.iter().any(|&a| !(a > 0.0)) || !(q > 0.0) {
        return Err(Error::InvalidArgument("a_n and q must be positive".into()));
    }
    let (mut r_hat, mut argmax) = (f64::NEG_INFINITY, 0);
    for (i, (b, a)) in b_values.iter().zip(a_n).enumerate() {
        if a * b > r_hat {
            r_hat = a * b;
            argmax = i + 1;
        }
    }
    let mean_bq = b_values.iter().map(|b| b.powf(q)).sum::<f64>() / b_values.len() as f64;
    let sum_aq: f64 = a_n.iter().map(|a| a.powf(q)).sum();
    Ok(TameBound { r_hat, argmax, r_hat_pow_q: r_hat.powf(q), moment_bound: mean_bq * sum_aq })
}
