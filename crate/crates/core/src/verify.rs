//! Brute-force identity and bound checks on random enumerable MDPs.

use rand::Rng as _;
use serde::Serialize;

use crate::config::DropoutConfig;
use crate::envs::{DiscreteMdp, TabularPolicy};
use crate::risk::{
    cvar_p, cvar_p_split, discrepancy_bound, eps_alpha, v_alpha_of, PerturbationSet, ReturnDistribution, RiskError,
};
use crate::seed;

pub const THREE_WAY_ALPHAS: [f64; 3] = [0.1, 0.25, 0.5];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    pub trials: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Flip the sign of the CVaR used in the checks, to confirm the suite
    /// catches a broken implementation.
    pub inject_cvar_sign_flip: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            trials: 100,
            tolerance: 1e-9,
            seed: 0,
            inject_cvar_sign_flip: false,
        }
    }
}

/// Outcome of one check family.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub cases: usize,
    /// Largest amount by which an identity or bound was missed (0 when all
    /// hold).
    pub max_violation: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_violation <= self.tolerance
    }
}

/// A seeded random MDP within the enumeration limits used by the checks:
/// up to 4 states, 3 actions and horizon 4, with `γ ∈ [0.5, 0.99]`.
#[derive(Debug, Clone)]
pub struct MdpCase {
    pub mdp: DiscreteMdp,
    pub policy: TabularPolicy,
    pub returns: ReturnDistribution,
}

pub fn random_case(seed_: u64, trial: usize) -> Result<MdpCase, RiskError> {
    let mut rng = seed::derived_rng(seed_, "verify-mdp", &[trial as u64]);
    let n_s = rng.random_range(1..=4);
    let n_a = rng.random_range(1..=3);
    let horizon = rng.random_range(0..=4);
    let gamma = rng.random_range(0.5..0.99);
    let mdp = DiscreteMdp::random(n_s, n_a, horizon, gamma, 1.0, &mut rng);
    let policy = TabularPolicy::random(n_s, n_a, &mut rng);
    let returns = mdp.enumerate_returns(&policy)?;
    Ok(MdpCase { mdp, policy, returns })
}

fn cvar_under_test(dist: &ReturnDistribution, p: f64, flip: bool) -> Result<f64, RiskError> {
    let c = cvar_p_split(dist, p)?;
    Ok(if flip { -c } else { c })
}

/// Run every suite. Returns one row per check family.
pub fn run(opts: &VerifyOptions) -> Result<Vec<CheckResult>, RiskError> {
    let tol = opts.tolerance;
    let mut three_way = 0.0_f64;
    let mut lemma = 0.0_f64;
    let mut monotone = 0.0_f64;
    let mut coherence = 0.0_f64;
    let mut cases = 0;
    for trial in 0..opts.trials {
        let case = random_case(opts.seed, trial)?;
        let v = case.mdp.value(&case.policy);
        let cfg_for = |alpha: f64| DropoutConfig::new(alpha, 0.0, case.mdp.gamma(), case.mdp.reward_sup().max(f64::MIN_POSITIVE));
        for alpha in THREE_WAY_ALPHAS {
            let va = v_alpha_of(&case.returns, alpha)?;
            let c = -cvar_under_test(&case.returns.negate(), alpha, opts.inject_cvar_sign_flip)?;
            let s = PerturbationSet::for_dropout(alpha)?.worst_case(&case.returns);
            three_way = three_way.max((va - c).abs()).max((va - s).abs());
            let cfg = cfg_for(alpha).map_err(|_| RiskError::Level {
                name: "gamma",
                value: case.mdp.gamma(),
                range: "(0, 1)",
            })?;
            lemma = lemma.max((va - v).abs() - eps_alpha(&cfg));
            cases += 1;
        }
        let mut last = f64::INFINITY;
        for k in 0..=18 {
            let va = v_alpha_of(&case.returns, k as f64 * 0.05)?;
            monotone = monotone.max(va - last);
            last = va;
        }
        // Translation and positive homogeneity of the discrete CVaR.
        let shift = 0.75;
        let scale = 2.5;
        let shifted = case.returns.map_values(|z| z + shift)?;
        let scaled = case.returns.map_values(|z| z * scale)?;
        for p in [0.1, 0.5, 0.9] {
            let c = cvar_p(&case.returns, p)?;
            let flip = |x: f64| if opts.inject_cvar_sign_flip { -x } else { x };
            coherence = coherence
                .max((flip(cvar_p(&shifted, p)?) - (flip(c) + shift)).abs())
                .max((flip(cvar_p(&scaled, p)?) - scale * flip(c)).abs());
        }
    }
    Ok(vec![
        CheckResult {
            name: "dropout value = -CVaR(-Z) = adversary worst case",
            cases,
            max_violation: three_way,
            tolerance: tol,
        },
        CheckResult {
            name: "|V_alpha - V| <= eps_alpha",
            cases,
            max_violation: lemma.max(0.0),
            tolerance: tol,
        },
        CheckResult {
            name: "V_alpha nonincreasing in alpha",
            cases: opts.trials * 18,
            max_violation: monotone.max(0.0),
            tolerance: tol,
        },
        CheckResult {
            name: "CVaR translation / homogeneity",
            cases: opts.trials * 3,
            max_violation: coherence,
            tolerance: tol,
        },
        bound_monotonicity(tol),
    ])
}

/// Over a 5⁵ grid of (α, β, ε_M, K, R_m) at fixed γ, check that the
/// discrepancy bound is nondecreasing in α, ε_M, K and R_m and
/// nonincreasing in β.
pub fn bound_monotonicity(tol: f64) -> CheckResult {
    let axes: [[f64; 5]; 5] = [
        [0.0, 0.1, 0.2, 0.35, 0.5],
        [0.0, 0.1, 0.2, 0.35, 0.5],
        [0.0, 0.1, 0.5, 1.0, 2.0],
        [0.0, 0.5, 1.0, 2.0, 5.0],
        [0.1, 0.5, 1.0, 2.0, 4.0],
    ];
    let gamma = 0.9;
    let eval = |ix: [usize; 5]| {
        let cfg = DropoutConfig::new(axes[0][ix[0]], axes[1][ix[1]], gamma, axes[4][ix[4]]).expect("grid values valid");
        discrepancy_bound(&cfg, axes[2][ix[2]], axes[3][ix[3]])
    };
    let mut worst = 0.0_f64;
    let mut cases = 0;
    for flat in 0..5usize.pow(5) {
        let ix: [usize; 5] = std::array::from_fn(|d| (flat / 5usize.pow(d as u32)) % 5);
        let here = eval(ix);
        for d in 0..5 {
            if ix[d] + 1 < 5 {
                let mut up = ix;
                up[d] += 1;
                let next = eval(up);
                // β (axis 1) must not increase the bound; the rest must not
                // decrease it.
                let violation = if d == 1 { next - here } else { here - next };
                worst = worst.max(violation);
                cases += 1;
            }
        }
    }
    CheckResult {
        name: "discrepancy bound monotone in (alpha, eps_M, K, R_m), antitone in beta",
        cases,
        max_violation: worst,
        tolerance: tol,
    }
}
