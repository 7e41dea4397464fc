use rand::Rng as _;
use serde::Serialize;

use super::RiskError;
use crate::config::DropoutConfig;
use crate::ensemble::EnsembleState;
use crate::seed;

/// Discrepancy from rolling out with dropout on a fixed model:
/// `α(1+α) / ((1−α)(1−γ)) · R_m`.
pub fn eps_alpha(cfg: &DropoutConfig) -> f64 {
    let a = cfg.alpha;
    a * (1.0 + a) / ((1.0 - a) * (1.0 - cfg.gamma)) * cfg.reward_sup
}

/// Bound on the gap between the dropout value on the model subset and the
/// true return: `(1−β)γK/(1−γ)·ε_M + (1−β)·ε_α`.
pub fn discrepancy_bound(cfg: &DropoutConfig, eps_m: f64, k: f64) -> f64 {
    let keep = 1.0 - cfg.beta;
    keep * cfg.gamma * k / (1.0 - cfg.gamma) * eps_m + keep * eps_alpha(cfg)
}

/// Mean bias over every member of the ensemble, dropped ones included.
pub fn estimate_eps_m(ens: &EnsembleState) -> Result<f64, RiskError> {
    let members = ens.members();
    if members.is_empty() {
        return Err(RiskError::Empty);
    }
    let mut sum = 0.0;
    for (i, m) in members.iter().enumerate() {
        sum += m.bias().ok_or(RiskError::Stale(i))?;
    }
    Ok(sum / members.len() as f64)
}

/// `(ε_k, η)` with `ε_k = V_env − (V_α^model − D)` and `η = ε_k − ε_α`.
pub fn residual(v_env: f64, v_alpha_model: f64, d_bound: f64, cfg: &DropoutConfig) -> (f64, f64) {
    let eps_k = v_env - (v_alpha_model - d_bound);
    (eps_k, eps_k - eps_alpha(cfg))
}

/// Sampled lower estimate of a Lipschitz constant. Only a heuristic: the
/// true constant is a supremum over all pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub k: f64,
    /// Non-coincident pairs actually compared.
    pub pairs_used: usize,
}

/// `max |V(s) − V(s')| / ‖s − s'‖` over `budget` random pairs drawn from a
/// stream fixed by `seed`; a larger budget extends the same pair sequence,
/// so the estimate never decreases with the budget.
pub fn estimate_lipschitz_k(
    value: impl Fn(&[f64]) -> f64,
    states: &[Vec<f64>],
    budget: usize,
    seed: u64,
) -> Result<LipschitzEstimate, RiskError> {
    if states.len() < 2 {
        return Err(RiskError::TooFewStates(states.len()));
    }
    let values: Vec<f64> = states.iter().map(|s| value(s)).collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(RiskError::NonFinite("value estimator"));
    }
    let mut rng = seed::derived_rng(seed, "lipschitz", &[]);
    let n = states.len();
    let mut k = 0.0_f64;
    let mut used = 0;
    for _ in 0..budget {
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let dist = states[i]
            .iter()
            .zip(&states[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if dist == 0.0 {
            continue;
        }
        used += 1;
        k = k.max((values[i] - values[j]).abs() / dist);
    }
    if used == 0 {
        return Err(RiskError::AllCoincident);
    }
    Ok(LipschitzEstimate { k, pairs_used: used })
}

/// One epoch's bound quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundsReport {
    pub epoch: usize,
    pub eps_alpha: f64,
    pub eps_m: f64,
    pub lipschitz_k: f64,
    /// True when `lipschitz_k` came from the sampled heuristic.
    pub k_estimated: bool,
    pub d_alpha_beta: f64,
    pub v_env: f64,
    pub v_alpha_model: f64,
    pub eps_k: f64,
    pub eta: f64,
}

impl BoundsReport {
    pub fn new(
        epoch: usize,
        cfg: &DropoutConfig,
        eps_m: f64,
        lipschitz_k: f64,
        k_estimated: bool,
        v_env: f64,
        v_alpha_model: f64,
    ) -> Result<Self, RiskError> {
        if !(eps_m >= 0.0 && lipschitz_k >= 0.0) {
            return Err(RiskError::Level {
                name: "eps_m / K",
                value: eps_m.min(lipschitz_k),
                range: "[0, inf)",
            });
        }
        let ea = eps_alpha(cfg);
        let d = discrepancy_bound(cfg, eps_m, lipschitz_k);
        let (eps_k, eta) = residual(v_env, v_alpha_model, d, cfg);
        let report = Self {
            epoch,
            eps_alpha: ea,
            eps_m,
            lipschitz_k,
            k_estimated,
            d_alpha_beta: d,
            v_env,
            v_alpha_model,
            eps_k,
            eta,
        };
        let all = [ea, eps_m, lipschitz_k, d, v_env, v_alpha_model, eps_k, eta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RiskError::NonFinite("bounds report"));
        }
        Ok(report)
    }
}
