//! Exact tail-risk calculators on atom distributions and the discrepancy
//! bounds reported during training.
//!
//! Conventions. `var_p` is the lower `p`-quantile `inf{z : F(z) ≥ p}`.
//! `cvar_p` is the conditional mean `E[Z | Z ≥ VaR_p]` with the boundary
//! atom counted in full; `cvar_p_split` instead keeps exactly `1 − p` of
//! upper mass, splitting the boundary atom. The dropout value keeps the
//! *lowest* `1 − α` mass of returns, so `V_α = −cvar_p_split(−Z, α)`.

mod bounds;
mod dist;

pub use bounds::{
    discrepancy_bound, eps_alpha, estimate_eps_m, estimate_lipschitz_k, residual, BoundsReport, LipschitzEstimate,
};
pub use dist::ReturnDistribution;

use thiserror::Error;

use crate::envs::{DiscreteMdp, EnvError, TabularPolicy};

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("atom ({value}, {prob}) is not a finite value with nonnegative probability")]
    BadAtom { value: f64, prob: f64 },
    #[error("probabilities sum to {0}, not 1")]
    Mass(f64),
    #[error("{name} = {value} outside {range}")]
    Level {
        name: &'static str,
        value: f64,
        range: &'static str,
    },
    #[error("bias of member {0} is stale; recompute before estimating")]
    Stale(usize),
    #[error("empty input")]
    Empty,
    #[error("need at least two states, got {0}")]
    TooFewStates(usize),
    #[error("every sampled state pair coincides")]
    AllCoincident,
    #[error("non-finite input to {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Enumerate(#[from] EnvError),
}

/// Tolerance on cumulative mass when locating the quantile atom, so that
/// `F(z) = 0.8` computed as `0.7999999999999999` still counts as reaching 0.8.
const CDF_TOL: f64 = 1e-12;

fn check_open_unit(name: &'static str, p: f64) -> Result<(), RiskError> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(RiskError::Level {
            name,
            value: p,
            range: "(0, 1)",
        })
    }
}

/// Index of the atom holding the `p`-quantile.
fn var_index(dist: &ReturnDistribution, p: f64) -> usize {
    let atoms = dist.atoms();
    let mut cum = 0.0;
    for (i, &(_, prob)) in atoms.iter().enumerate() {
        cum += prob;
        if cum >= p - CDF_TOL {
            return i;
        }
    }
    atoms.len() - 1
}

/// Smallest atom value whose cumulative probability reaches `p`.
pub fn var_p(dist: &ReturnDistribution, p: f64) -> Result<f64, RiskError> {
    check_open_unit("p", p)?;
    Ok(dist.atoms()[var_index(dist, p)].0)
}

/// `E[Z | Z ≥ VaR_p(Z)]` with the boundary atom included in full.
pub fn cvar_p(dist: &ReturnDistribution, p: f64) -> Result<f64, RiskError> {
    check_open_unit("p", p)?;
    let tail = &dist.atoms()[var_index(dist, p)..];
    let mass: f64 = tail.iter().map(|a| a.1).sum();
    Ok(tail.iter().map(|(v, q)| v * q).sum::<f64>() / mass)
}

/// Mean of the upper `1 − p` probability mass, splitting the boundary atom.
pub fn cvar_p_split(dist: &ReturnDistribution, p: f64) -> Result<f64, RiskError> {
    check_open_unit("p", p)?;
    Ok(-lower_tail_mean(&dist.negate(), 1.0 - p))
}

/// Mean of the lowest `mass` of probability, splitting the boundary atom so
/// exactly `mass` is retained. `mass` must lie in (0, 1].
pub fn lower_tail_mean(dist: &ReturnDistribution, mass: f64) -> f64 {
    debug_assert!(mass > 0.0 && mass <= 1.0 + 1e-12);
    let mut remaining = mass;
    let mut acc = 0.0;
    for &(v, p) in dist.atoms() {
        if remaining <= 0.0 {
            break;
        }
        let take = p.min(remaining);
        acc += take * v;
        remaining -= take;
    }
    // Rounding can leave a sliver of `remaining` after the last atom.
    acc / (mass - remaining.max(0.0))
}

/// `V_α`: expected return over the lowest `1 − α` mass of the return
/// distribution, computed exactly by enumeration.
pub fn exact_v_alpha(mdp: &DiscreteMdp, policy: &TabularPolicy, alpha: f64) -> Result<f64, RiskError> {
    let dist = mdp.enumerate_returns(policy)?;
    v_alpha_of(&dist, alpha)
}

/// `V_α` of an already enumerated distribution.
pub fn v_alpha_of(dist: &ReturnDistribution, alpha: f64) -> Result<f64, RiskError> {
    if !(0.0..1.0).contains(&alpha) {
        return Err(RiskError::Level {
            name: "alpha",
            value: alpha,
            range: "[0, 1)",
        });
    }
    Ok(lower_tail_mean(dist, 1.0 - alpha))
}

/// Admissible trajectory reweightings: densities `0 ≤ δ ≤ cap` with
/// `E_P[δ] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationSet {
    cap: f64,
}

impl PerturbationSet {
    /// The set whose worst case reproduces dropping the top `α` mass:
    /// densities bounded by `1 / (1 − α)`.
    pub fn for_dropout(alpha: f64) -> Result<Self, RiskError> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(RiskError::Level {
                name: "alpha",
                value: alpha,
                range: "[0, 1)",
            });
        }
        Ok(Self { cap: 1.0 / (1.0 - alpha) })
    }

    /// Densities bounded by an explicit `cap ≥ 1`.
    pub fn with_cap(cap: f64) -> Result<Self, RiskError> {
        if !(cap >= 1.0 && cap.is_finite()) {
            return Err(RiskError::Level {
                name: "cap",
                value: cap,
                range: "[1, inf)",
            });
        }
        Ok(Self { cap })
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    /// Whether `delta` (one density per atom) is admissible.
    pub fn contains(&self, dist: &ReturnDistribution, delta: &[f64]) -> bool {
        if delta.len() != dist.atoms().len() {
            return false;
        }
        let mean: f64 = dist.atoms().iter().zip(delta).map(|(a, d)| a.1 * d).sum();
        delta.iter().all(|&d| (0.0..=self.cap + 1e-12).contains(&d)) && (mean - 1.0).abs() < 1e-9
    }

    /// Worst-case mean over the set, `inf_δ E_P[δ Z]`, by the greedy
    /// construction: full density on the lowest returns until the unit of
    /// reweighted mass is spent.
    pub fn worst_case(&self, dist: &ReturnDistribution) -> f64 {
        let mut remaining = 1.0_f64;
        let mut acc = 0.0;
        for &(v, p) in dist.atoms() {
            if remaining <= 0.0 {
                break;
            }
            let w = (p * self.cap).min(remaining);
            acc += w * v;
            remaining -= w;
        }
        acc / (1.0 - remaining.max(0.0))
    }

    /// The maximising density for `worst_case`, one entry per atom.
    pub fn worst_case_density(&self, dist: &ReturnDistribution) -> Vec<f64> {
        let mut remaining = 1.0_f64;
        dist.atoms()
            .iter()
            .map(|&(_, p)| {
                let w = (p * self.cap).min(remaining).max(0.0);
                remaining -= w;
                w / p
            })
            .collect()
    }
}

/// `E_P[δ Z]` for a per-atom density.
pub fn reweighted_mean(dist: &ReturnDistribution, delta: &[f64]) -> f64 {
    dist.atoms().iter().zip(delta).map(|(&(v, p), d)| p * d * v).sum()
}

/// Pessimistic value under the worst admissible model perturbation,
/// `inf_{δ ∈ Δ} E_{P̂}[G]` (the supremum of the adversary's objective
/// `E_{P̂}[−G]`, sign flipped back), over the enumerated return distribution.
pub fn adversary_sup(mdp: &DiscreteMdp, policy: &TabularPolicy, alpha: f64) -> Result<f64, RiskError> {
    adversary_value(mdp, policy, PerturbationSet::for_dropout(alpha)?)
}

/// `adversary_sup` over an arbitrary perturbation set.
pub fn adversary_value(mdp: &DiscreteMdp, policy: &TabularPolicy, set: PerturbationSet) -> Result<f64, RiskError> {
    let dist = mdp.enumerate_returns(policy)?;
    Ok(set.worst_case(&dist))
}
