use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::AgentError;
use crate::buffer::{ReplayBuffer, Transition};
use crate::nn::{clip_global_norm, Adam, Mlp, SquashedGaussianHead};
use crate::policy::Policy;
use crate::seed::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SacSettings {
    pub gamma: f64,
    /// Fixed entropy weight `w` in `Q − w·log π`.
    pub entropy_weight: f64,
    /// Target EMA: `target ← τ·critic + (1 − τ)·target` after every update.
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub grad_clip: f64,
}

impl Default for SacSettings {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            entropy_weight: 0.01,
            tau: 0.01,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            grad_clip: 10.0,
        }
    }
}

/// Squashed-Gaussian actor with twin critics and their EMA targets.
///
/// Critics see the action rescaled to `[-1, 1]`; the actor emits
/// `high · tanh(u)` so every action lies inside the box.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    state_dim: usize,
    action_dim: usize,
    action_high: f64,
    pub actor: Mlp,
    head: SquashedGaussianHead,
    pub critics: [Mlp; 2],
    pub targets: [Mlp; 2],
    actor_opt: Adam,
    critic_opt: [Adam; 2],
    pub settings: SacSettings,
}

/// Mean losses of the last update in a `policy_update` call.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpdateStats {
    pub updates: usize,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

fn critic_input(s: &[f64], a_unit: &[f64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(s.len() + a_unit.len());
    x.extend_from_slice(s);
    x.extend_from_slice(a_unit);
    x
}

fn std_normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `mean_i ½ (Q(s_i, a_i) − y_i)²` and its gradient. Actions are in
/// `[-1, 1]` units.
pub fn critic_objective(critic: &Mlp, batch: &[(&[f64], &[f64])], targets: &[f64]) -> Result<(f64, Vec<f64>), AgentError> {
    let mut grad = critic.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for ((s, a), y) in batch.iter().zip(targets) {
        let tape = critic.forward_tape(&critic_input(s, a))?;
        let diff = tape.output()[0] - y;
        loss += 0.5 * diff * diff * scale;
        critic.backward(&tape, &[diff * scale], &mut grad);
    }
    Ok((loss, grad))
}

/// `mean_i (w·log π(a_i|s_i) − min_j Q_j(s_i, a_i))` with `a_i` the
/// reparameterized sample for `noise[i]`, and its gradient with respect to
/// the actor parameters.
pub fn actor_objective(
    actor: &Mlp,
    head: &SquashedGaussianHead,
    critics: &[Mlp; 2],
    states: &[&[f64]],
    noise: &[Vec<f64>],
    entropy_weight: f64,
) -> Result<(f64, Vec<f64>), AgentError> {
    let mut grad = actor.zeros_like();
    let mut scratch = [critics[0].zeros_like(), critics[1].zeros_like()];
    let scale = 1.0 / states.len() as f64;
    let d_s = actor.input_dim();
    let mut loss = 0.0;
    for (s, eps) in states.iter().zip(noise) {
        let tape = actor.forward_tape(s)?;
        let sample = head.sample(tape.output(), eps);
        let x = critic_input(s, &sample.action);
        let t0 = critics[0].forward_tape(&x)?;
        let t1 = critics[1].forward_tape(&x)?;
        let (j, q) = if t0.output()[0] <= t1.output()[0] {
            (0, t0.output()[0])
        } else {
            (1, t1.output()[0])
        };
        loss += (entropy_weight * sample.log_prob - q) * scale;
        let tape_j = if j == 0 { &t0 } else { &t1 };
        let d_x = critics[j].backward(tape_j, &[-scale], &mut scratch[j]);
        let d_raw = sample.backward(&d_x[d_s..], entropy_weight * scale);
        actor.backward(&tape, &d_raw, &mut grad);
    }
    Ok((loss, grad))
}

impl PolicyParams {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        action_high: f64,
        hidden: &[usize],
        settings: SacSettings,
        seed: u64,
    ) -> Result<Self, AgentError> {
        let head = SquashedGaussianHead::new(action_dim);
        let mut rng = seed::derived_rng(seed, "agent-init", &[]);
        let widths = |input: usize, output: usize| {
            let mut w = vec![input];
            w.extend_from_slice(hidden);
            w.push(output);
            w
        };
        let actor = Mlp::new(&widths(state_dim, head.raw_dim()), 0.1, &mut rng)?;
        let c0 = Mlp::new(&widths(state_dim + action_dim, 1), 1.0, &mut rng)?;
        let c1 = Mlp::new(&widths(state_dim + action_dim, 1), 1.0, &mut rng)?;
        Ok(Self {
            state_dim,
            action_dim,
            action_high,
            actor_opt: Adam::new(actor.num_params()),
            critic_opt: [Adam::new(c0.num_params()), Adam::new(c1.num_params())],
            targets: [c0.clone(), c1.clone()],
            critics: [c0, c1],
            actor,
            head,
            settings,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn action_high(&self) -> f64 {
        self.action_high
    }

    pub fn head(&self) -> &SquashedGaussianHead {
        &self.head
    }

    /// `min_j Q_j(s, a)` for an action in environment units.
    pub fn min_q(&self, s: &[f64], a: &[f64]) -> f64 {
        let x = critic_input(s, &a.iter().map(|v| v / self.action_high).collect::<Vec<_>>());
        let q = |c: &Mlp| c.forward(&x).map(|o| o[0]).unwrap_or(f64::NAN);
        q(&self.critics[0]).min(q(&self.critics[1]))
    }

    /// `min_j Q_j(s, π_det(s))`, the value estimate used for the Lipschitz
    /// heuristic.
    pub fn state_value(&self, s: &[f64]) -> f64 {
        self.min_q(s, &self.act_deterministic(s))
    }

    fn bootstrap_targets(&self, batch: &[&Transition], noise: &[Vec<f64>]) -> Result<Vec<f64>, AgentError> {
        let SacSettings { gamma, entropy_weight, .. } = self.settings;
        batch
            .iter()
            .zip(noise)
            .map(|(t, eps)| {
                if t.terminal {
                    return Ok(t.reward);
                }
                let raw = self.actor.forward(&t.next_state)?;
                let sample = self.head.sample(&raw, eps);
                let x = critic_input(&t.next_state, &sample.action);
                let q0 = self.targets[0].forward(&x)?[0];
                let q1 = self.targets[1].forward(&x)?[0];
                Ok(t.reward + gamma * (q0.min(q1) - entropy_weight * sample.log_prob))
            })
            .collect()
    }

    /// `n_updates` steps of critic regression, actor ascent and target EMA
    /// on minibatches of `data`. Batches and noise come from streams derived
    /// from `seed` and the update index.
    pub fn policy_update(&mut self, data: &ReplayBuffer, n_updates: usize, batch_size: usize, seed: u64) -> Result<UpdateStats, AgentError> {
        let mut stats = UpdateStats::default();
        if n_updates == 0 {
            return Ok(stats);
        }
        if data.len() < batch_size {
            return Err(AgentError::NotEnoughData {
                required: batch_size,
                have: data.len(),
            });
        }
        let high = self.action_high;
        let d_a = self.action_dim;
        for u in 0..n_updates {
            let idx = data.sample_indices(batch_size, seed::derive(seed, "sac-batch", &[u as u64]))?;
            let batch: Vec<&Transition> = idx.iter().map(|&i| data.get(i).expect("index in range")).collect();
            let mut rng = seed::derived_rng(seed, "sac-noise", &[u as u64]);
            let next_noise: Vec<Vec<f64>> = (0..batch_size).map(|_| std_normals(d_a, &mut rng)).collect();
            let actor_noise: Vec<Vec<f64>> = (0..batch_size).map(|_| std_normals(d_a, &mut rng)).collect();

            let targets = self.bootstrap_targets(&batch, &next_noise)?;
            let units: Vec<Vec<f64>> = batch.iter().map(|t| t.action.iter().map(|a| a / high).collect()).collect();
            let pairs: Vec<(&[f64], &[f64])> = batch.iter().zip(&units).map(|(t, a)| (t.state.as_slice(), a.as_slice())).collect();
            let mut critic_loss = 0.0;
            for j in 0..2 {
                let (loss, mut grad) = critic_objective(&self.critics[j], &pairs, &targets)?;
                if !loss.is_finite() {
                    return Err(AgentError::NonFinite { update: u, what: "critic loss" });
                }
                clip_global_norm(&mut grad, self.settings.grad_clip);
                self.critic_opt[j].step(self.critics[j].params_mut(), &grad, self.settings.critic_lr)?;
                critic_loss += 0.5 * loss;
            }

            let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
            let (actor_loss, mut grad) = actor_objective(
                &self.actor,
                &self.head,
                &self.critics,
                &states,
                &actor_noise,
                self.settings.entropy_weight,
            )?;
            if !actor_loss.is_finite() {
                return Err(AgentError::NonFinite { update: u, what: "actor loss" });
            }
            clip_global_norm(&mut grad, self.settings.grad_clip);
            self.actor_opt.step(self.actor.params_mut(), &grad, self.settings.actor_lr)?;

            for j in 0..2 {
                self.critics[j].soft_update_into(&mut self.targets[j], self.settings.tau);
            }
            stats = UpdateStats {
                updates: u + 1,
                critic_loss,
                actor_loss,
            };
        }
        Ok(stats)
    }

    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir)?;
        self.actor.save(dir, "actor")?;
        for j in 0..2 {
            self.critics[j].save(dir, &format!("critic_{j}"))?;
            self.targets[j].save(dir, &format!("target_{j}"))?;
        }
        let meta = AgentMeta {
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            action_high: self.action_high,
            settings: self.settings,
        };
        let text = toml::to_string(&meta).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        std::fs::write(dir.join("agent.toml"), text)?;
        Ok(())
    }

    /// Restore networks from `save`. Optimizer moments are not persisted;
    /// a loaded agent is meant for evaluation.
    pub fn load(dir: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(dir.join("agent.toml"))
            .map_err(|e| AgentError::Checkpoint(format!("{}: {e}", dir.join("agent.toml").display())))?;
        let meta: AgentMeta = toml::from_str(&text).map_err(|e| AgentError::Checkpoint(e.to_string()))?;
        let actor = Mlp::load(dir, "actor")?;
        let critics = [Mlp::load(dir, "critic_0")?, Mlp::load(dir, "critic_1")?];
        let targets = [Mlp::load(dir, "target_0")?, Mlp::load(dir, "target_1")?];
        if actor.input_dim() != meta.state_dim || actor.output_dim() != 2 * meta.action_dim {
            return Err(AgentError::Checkpoint("actor shape does not match agent.toml".into()));
        }
        Ok(Self {
            state_dim: meta.state_dim,
            action_dim: meta.action_dim,
            action_high: meta.action_high,
            actor_opt: Adam::new(actor.num_params()),
            critic_opt: [Adam::new(critics[0].num_params()), Adam::new(critics[1].num_params())],
            head: SquashedGaussianHead::new(meta.action_dim),
            actor,
            critics,
            targets,
            settings: meta.settings,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct AgentMeta {
    state_dim: usize,
    action_dim: usize,
    action_high: f64,
    settings: SacSettings,
}

impl Policy for PolicyParams {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        match self.actor.forward(state) {
            Ok(raw) => {
                let eps = std_normals(self.action_dim, rng);
                let s = self.head.sample(&raw, &eps);
                s.action.iter().map(|a| a * self.action_high).collect()
            }
            Err(_) => vec![f64::NAN; self.action_dim],
        }
    }

    fn act_deterministic(&self, state: &[f64]) -> Vec<f64> {
        match self.actor.forward(state) {
            Ok(raw) => self.head.mode(&raw).iter().map(|a| a * self.action_high).collect(),
            Err(_) => vec![f64::NAN; self.action_dim],
        }
    }
}

/// Deterministic view of a policy: `act` returns the mean action.
#[derive(Debug, Clone, Copy)]
pub struct Greedy<P>(pub P);

impl<P: Policy> Policy for Greedy<P> {
    fn act(&self, state: &[f64], _rng: &mut Rng) -> Vec<f64> {
        self.0.act_deterministic(state)
    }

    fn act_deterministic(&self, state: &[f64]) -> Vec<f64> {
        self.0.act_deterministic(state)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn fd_rel_check(f: impl Fn(&[f64]) -> f64, theta: &[f64], grad: &[f64], probes: &[usize]) {
        let h = 1e-5;
        for &i in probes {
            let mut p = theta.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            let down = f(&p);
            let fd = (up - down) / (2.0 * h);
            let g = grad[i];
            if g.abs() > 1e-6 {
                assert!(((fd - g) / g).abs() < 1e-4, "param {i}: fd {fd} vs analytic {g}");
            } else {
                assert!((fd - g).abs() < 1e-8, "param {i}: fd {fd} vs analytic {g}");
            }
        }
    }

    #[test]
    fn critic_gradient_matches_fd() {
        let mut rng = seed::rng(1);
        let agent = PolicyParams::new(3, 1, 2.0, &[8, 8], SacSettings::default(), 0).unwrap();
        let states: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let acts: Vec<Vec<f64>> = (0..6).map(|_| vec![rng.random_range(-1.0..1.0)]).collect();
        let ys: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let pairs: Vec<(&[f64], &[f64])> = states.iter().zip(&acts).map(|(s, a)| (s.as_slice(), a.as_slice())).collect();
        let critic = &agent.critics[0];
        let (_, grad) = critic_objective(critic, &pairs, &ys).unwrap();
        let widths = critic.widths().to_vec();
        let f = |p: &[f64]| critic_objective(&Mlp::from_params(&widths, p.to_vec()).unwrap(), &pairs, &ys).unwrap().0;
        let probes: Vec<usize> = (0..20).map(|_| rng.random_range(0..critic.num_params())).collect();
        fd_rel_check(f, critic.params(), &grad, &probes);
    }

    #[test]
    fn actor_gradient_matches_fd() {
        let mut rng = seed::rng(2);
        let agent = PolicyParams::new(3, 2, 1.0, &[8], SacSettings::default(), 4).unwrap();
        let states: Vec<Vec<f64>> = (0..5).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let noise: Vec<Vec<f64>> = (0..5).map(|_| std_normals(2, &mut rng)).collect();
        let refs: Vec<&[f64]> = states.iter().map(Vec::as_slice).collect();
        let (_, grad) = actor_objective(&agent.actor, agent.head(), &agent.critics, &refs, &noise, 0.2).unwrap();
        let widths = agent.actor.widths().to_vec();
        let f = |p: &[f64]| {
            let a = Mlp::from_params(&widths, p.to_vec()).unwrap();
            actor_objective(&a, agent.head(), &agent.critics, &refs, &noise, 0.2).unwrap().0
        };
        let probes: Vec<usize> = (0..20).map(|_| rng.random_range(0..agent.actor.num_params())).collect();
        fd_rel_check(f, agent.actor.params(), &grad, &probes);
    }

    #[test]
    fn zero_updates_is_noop() {
        let mut agent = PolicyParams::new(2, 1, 1.0, &[4], SacSettings::default(), 0).unwrap();
        let before = agent.clone();
        let buf = ReplayBuffer::new(4).unwrap();
        agent.policy_update(&buf, 0, 64, 0).unwrap();
        assert_eq!(agent, before);
    }

    fn bandit_buffer() -> ReplayBuffer {
        let mut rng = seed::rng(5);
        let mut buf = ReplayBuffer::new(2000).unwrap();
        for _ in 0..2000 {
            let a = rng.random_range(-1.0..1.0);
            let r = -(a - 0.3) * (a - 0.3);
            buf.push(Transition::new(vec![0.0], vec![a], r, vec![0.0], true)).unwrap();
        }
        buf
    }

    #[test]
    fn bandit_reaches_optimum() {
        let settings = SacSettings {
            entropy_weight: 0.001,
            actor_lr: 3e-3,
            critic_lr: 3e-3,
            ..Default::default()
        };
        let mut agent = PolicyParams::new(1, 1, 1.0, &[16], settings, 3).unwrap();
        agent.policy_update(&bandit_buffer(), 4000, 64, 9).unwrap();
        let a = agent.act_deterministic(&[0.0])[0];
        assert!((a - 0.3).abs() < 0.1, "mean action {a}");
    }

    #[test]
    fn target_is_exact_ema() {
        let mut agent = PolicyParams::new(1, 1, 1.0, &[4], SacSettings::default(), 3).unwrap();
        let buf = bandit_buffer();
        agent.policy_update(&buf, 3, 16, 1).unwrap();
        let before = agent.clone();
        agent.policy_update(&buf, 1, 16, 2).unwrap();
        let tau = agent.settings.tau;
        for j in 0..2 {
            for ((t, c), t0) in agent.targets[j].params().iter().zip(agent.critics[j].params()).zip(before.targets[j].params()) {
                assert_eq!(*t, tau * c + (1.0 - tau) * t0);
            }
        }
    }

    #[test]
    fn actions_inside_box() {
        let agent = PolicyParams::new(2, 2, 2.0, &[8], SacSettings::default(), 0).unwrap();
        let mut rng = seed::rng(0);
        for _ in 0..500 {
            let s = [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)];
            for a in agent.act(&s, &mut rng).into_iter().chain(agent.act_deterministic(&s)) {
                assert!(a.abs() <= 2.0);
            }
        }
    }

    #[test]
    fn deterministic_updates() {
        let buf = bandit_buffer();
        let run = || {
            let mut a = PolicyParams::new(1, 1, 1.0, &[8], SacSettings::default(), 3).unwrap();
            a.policy_update(&buf, 20, 32, 7).unwrap();
            a
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let agent = PolicyParams::new(3, 1, 2.0, &[8], SacSettings::default(), 1).unwrap();
        agent.save(dir.path()).unwrap();
        let back = PolicyParams::load(dir.path()).unwrap();
        let s = [0.1, -0.2, 0.3];
        assert_eq!(back.act_deterministic(&s), agent.act_deterministic(&s));
        assert_eq!(back.min_q(&s, &[0.5]), agent.min_q(&s, &[0.5]));
        assert!(PolicyParams::load(&dir.path().join("missing")).is_err());
    }
}
