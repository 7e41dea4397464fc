use rand::Rng as _;

use super::EnvError;
use crate::risk::ReturnDistribution;
use crate::seed::Rng;

/// Largest trajectory space `mdp_enumerate_returns` will walk.
pub const MAX_TRAJECTORIES: u64 = 1_000_000;

const ROW_TOL: f64 = 1e-12;

/// Finite-horizon tabular MDP whose trajectory space is small enough to
/// enumerate. A trajectory visits `s_0, …, s_T` and collects
/// `Σ_{t=0}^{T} γ^t r(s_t, a_t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMdp {
    n_states: usize,
    n_actions: usize,
    /// `P(s' | s, a)` at `[(s·A + a)·S + s']`.
    transition: Vec<f64>,
    /// `r(s, a)` at `[s·A + a]`.
    reward: Vec<f64>,
    initial: Vec<f64>,
    horizon: usize,
    gamma: f64,
}

/// Explicit action distribution per state, `π(a | s)` at `[s·A + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn new(n_states: usize, n_actions: usize, probs: Vec<f64>) -> Result<Self, EnvError> {
        if probs.len() != n_states * n_actions {
            return Err(EnvError::MdpShape("policy table size".into()));
        }
        check_rows(&probs, n_actions, "policy")?;
        Ok(Self { n_actions, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
        }
    }

    pub fn random(n_states: usize, n_actions: usize, rng: &mut Rng) -> Self {
        let mut probs = Vec::with_capacity(n_states * n_actions);
        for _ in 0..n_states {
            probs.extend(random_simplex(n_actions, rng));
        }
        Self { n_actions, probs }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }
}

fn check_rows(table: &[f64], width: usize, what: &str) -> Result<(), EnvError> {
    for (i, row) in table.chunks(width).enumerate() {
        if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(EnvError::MdpShape(format!("{what} row {i} has an invalid entry")));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_TOL {
            return Err(EnvError::RowSum { row: i, sum });
        }
    }
    Ok(())
}

fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    // Exponential spacings give a uniform point on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|x| x / total).collect();
    // Put the rounding residue on the largest entry.
    let residue = 1.0 - p.iter().sum::<f64>();
    let imax = (0..n).max_by(|&a, &b| p[a].total_cmp(&p[b])).expect("n > 0");
    p[imax] += residue;
    p
}

impl DiscreteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        initial: Vec<f64>,
        horizon: usize,
        gamma: f64,
    ) -> Result<Self, EnvError> {
        if n_states == 0 || n_actions == 0 {
            return Err(EnvError::MdpShape("empty state or action set".into()));
        }
        if transition.len() != n_states * n_actions * n_states
            || reward.len() != n_states * n_actions
            || initial.len() != n_states
        {
            return Err(EnvError::MdpShape("table sizes do not match (S, A)".into()));
        }
        check_rows(&transition, n_states, "transition")?;
        check_rows(&initial, n_states, "initial")?;
        if reward.iter().any(|r| !r.is_finite()) {
            return Err(EnvError::MdpShape("non-finite reward".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(EnvError::MdpShape(format!("gamma {gamma} outside [0, 1]")));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            initial,
            horizon,
            gamma,
        })
    }

    /// Random MDP with rewards uniform in `[-r_max, r_max]`.
    pub fn random(n_states: usize, n_actions: usize, horizon: usize, gamma: f64, r_max: f64, rng: &mut Rng) -> Self {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            transition.extend(random_simplex(n_states, rng));
        }
        let reward = (0..n_states * n_actions)
            .map(|_| rng.random_range(-r_max..=r_max))
            .collect();
        let initial = random_simplex(n_states, rng);
        Self::new(n_states, n_actions, transition, reward, initial, horizon, gamma).expect("generated tables are valid")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, s: usize, a: usize, next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + next]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn initial(&self, s: usize) -> f64 {
        self.initial[s]
    }

    /// `max |r(s, a)|`.
    pub fn reward_sup(&self) -> f64 {
        self.reward.iter().fold(0.0_f64, |m, r| m.max(r.abs()))
    }

    /// `(S·A)^(T+1)`, saturating.
    pub fn trajectory_count(&self) -> u64 {
        let base = (self.n_states * self.n_actions) as u64;
        (0..=self.horizon).fold(1u64, |acc, _| acc.saturating_mul(base))
    }

    /// Exact return distribution under `policy` by walking every
    /// state-action path with positive probability.
    pub fn enumerate_returns(&self, policy: &TabularPolicy) -> Result<ReturnDistribution, EnvError> {
        let required = self.trajectory_count();
        if required > MAX_TRAJECTORIES {
            return Err(EnvError::TooManyTrajectories {
                required,
                cap: MAX_TRAJECTORIES,
            });
        }
        let mut atoms = Vec::new();
        for s in 0..self.n_states {
            let p0 = self.initial[s];
            if p0 > 0.0 {
                self.walk(policy, s, 0, p0, 0.0, 1.0, &mut atoms);
            }
        }
        Ok(ReturnDistribution::from_atoms(atoms).expect("enumerated mass sums to one"))
    }

    #[allow(clippy::too_many_arguments)]
    fn walk(
        &self,
        policy: &TabularPolicy,
        s: usize,
        t: usize,
        prob: f64,
        ret: f64,
        discount: f64,
        atoms: &mut Vec<(f64, f64)>,
    ) {
        for a in 0..self.n_actions {
            let pa = prob * policy.prob(s, a);
            if pa == 0.0 {
                continue;
            }
            let ret = ret + discount * self.reward(s, a);
            if t == self.horizon {
                atoms.push((ret, pa));
                continue;
            }
            for next in 0..self.n_states {
                let pn = pa * self.transition(s, a, next);
                if pn > 0.0 {
                    self.walk(policy, next, t + 1, pn, ret, discount * self.gamma, atoms);
                }
            }
        }
    }

    /// `V^{π,P}` by backward induction over the horizon.
    pub fn value(&self, policy: &TabularPolicy) -> f64 {
        let mut v = vec![0.0; self.n_states];
        for t in (0..=self.horizon).rev() {
            let mut next = vec![0.0; self.n_states];
            for (s, slot) in next.iter_mut().enumerate() {
                let mut q = 0.0;
                for a in 0..self.n_actions {
                    let mut cont = 0.0;
                    if t < self.horizon {
                        for s2 in 0..self.n_states {
                            cont += self.transition(s, a, s2) * v[s2];
                        }
                    }
                    q += policy.prob(s, a) * (self.reward(s, a) + self.gamma * cont);
                }
                *slot = q;
            }
            v = next;
        }
        (0..self.n_states).map(|s| self.initial[s] * v[s]).sum()
    }

    /// One sampled discounted return.
    pub fn sample_return(&self, policy: &TabularPolicy, rng: &mut Rng) -> f64 {
        let pick = |row: &mut dyn Iterator<Item = f64>, rng: &mut Rng| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut last = 0;
            for (i, p) in row.enumerate() {
                acc += p;
                last = i;
                if u < acc {
                    return i;
                }
            }
            last
        };
        let mut s = pick(&mut self.initial.iter().copied(), rng);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for t in 0..=self.horizon {
            let a = pick(&mut (0..self.n_actions).map(|a| policy.prob(s, a)), rng);
            ret += discount * self.reward(s, a);
            discount *= self.gamma;
            if t < self.horizon {
                s = pick(&mut (0..self.n_states).map(|n| self.transition(s, a, n)), rng);
            }
        }
        ret
    }
}
