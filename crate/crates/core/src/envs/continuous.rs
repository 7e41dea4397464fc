use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use super::EnvError;
use crate::buffer::Transition;
use crate::seed::{self, Rng};

/// Toy continuous-control tasks. Each integrates its dynamics with
/// semi-implicit Euler at a fixed `dt` and reports rewards rescaled into
/// `[-R_m, R_m]` with `R_m = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    /// Swing-up; observation `(cos θ, sin θ, θ̇)`, torque in `[-2, 2]`.
    Pendulum,
    /// 2-D reach to the origin; observation `(x, y, vx, vy)`, force in `[-1, 1]²`.
    PointMass,
    /// Balance with a continuous force; observation `(x, ẋ, θ, θ̇)`, action in `[-1, 1]`.
    CartPole,
}

impl EnvKind {
    pub fn from_name(name: &str) -> Result<Self, EnvError> {
        match name {
            "pendulum" => Ok(Self::Pendulum),
            "point-mass" | "pointmass" => Ok(Self::PointMass),
            "cartpole" | "cart-pole" => Ok(Self::CartPole),
            other => Err(EnvError::UnknownEnv(other.to_string())),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pendulum => "pendulum",
            Self::PointMass => "point-mass",
            Self::CartPole => "cartpole",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Self::Pendulum => 3,
            Self::PointMass | Self::CartPole => 4,
        }
    }

    pub fn action_dim(self) -> usize {
        match self {
            Self::Pendulum | Self::CartPole => 1,
            Self::PointMass => 2,
        }
    }

    /// Symmetric action box `[-high, high]` per dimension.
    pub fn action_high(self) -> f64 {
        match self {
            Self::Pendulum => PENDULUM_MAX_TORQUE,
            Self::PointMass | Self::CartPole => 1.0,
        }
    }

    pub fn reward_sup(self) -> f64 {
        1.0
    }

    pub fn default_physics(self) -> Physics {
        match self {
            Self::Pendulum => Physics {
                mass: 1.0,
                friction: 0.05,
                dt: 0.05,
                horizon: 200,
            },
            Self::PointMass => Physics {
                mass: 1.0,
                friction: 0.5,
                dt: 0.1,
                horizon: 100,
            },
            Self::CartPole => Physics {
                mass: 1.0,
                friction: 0.1,
                dt: 0.02,
                horizon: 200,
            },
        }
    }

    /// Known reward `r(s, a)` on observations, bounded by `reward_sup`
    /// for any finite input (model-generated states included).
    pub fn reward(self, obs: &[f64], action: &[f64]) -> f64 {
        let high = self.action_high();
        match self {
            Self::Pendulum => {
                let theta = obs[1].atan2(obs[0]);
                let thdot = obs[2].clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let u = action[0].clamp(-high, high);
                -(theta * theta + 0.1 * thdot * thdot + 0.001 * u * u) / PENDULUM_REWARD_SCALE
            }
            Self::PointMass => {
                let x = obs[0].clamp(-POINT_BOUND, POINT_BOUND);
                let y = obs[1].clamp(-POINT_BOUND, POINT_BOUND);
                let fx = action[0].clamp(-high, high);
                let fy = action[1].clamp(-high, high);
                -(0.4 * (x * x + y * y) + 0.1 * (fx * fx + fy * fy))
            }
            Self::CartPole => {
                if self.is_terminal(obs) {
                    0.0
                } else {
                    1.0
                }
            }
        }
    }

    pub fn is_terminal(self, obs: &[f64]) -> bool {
        match self {
            Self::CartPole => obs[0].abs() > CART_X_LIMIT || obs[2].abs() > CART_THETA_LIMIT,
            _ => false,
        }
    }
}

const PENDULUM_MAX_TORQUE: f64 = 2.0;
const PENDULUM_MAX_SPEED: f64 = 8.0;
const PENDULUM_G: f64 = 10.0;
const PENDULUM_LEN: f64 = 1.0;
// Largest unscaled cost: θ = π, |θ̇| = 8, |u| = 2.
const PENDULUM_REWARD_SCALE: f64 = PI * PI + 0.1 * 64.0 + 0.001 * 4.0;

const POINT_BOUND: f64 = 1.0;
const POINT_MAX_SPEED: f64 = 2.0;

const CART_GRAVITY: f64 = 9.8;
const CART_POLE_MASS: f64 = 0.1;
const CART_POLE_HALF_LEN: f64 = 0.5;
const CART_FORCE_MAG: f64 = 10.0;
const CART_X_LIMIT: f64 = 2.4;
const CART_THETA_LIMIT: f64 = 12.0 * 2.0 * PI / 360.0;

/// Scalable physical parameters. `mass` is the moving body (pendulum bob,
/// point mass, cart) and `friction` the linear damping coefficient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    pub mass: f64,
    pub friction: f64,
    pub dt: f64,
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbationConfig {
    pub c_mass: f64,
    pub c_friction: f64,
}

impl PerturbationConfig {
    pub const IDENTITY: Self = Self {
        c_mass: 1.0,
        c_friction: 1.0,
    };

    pub fn new(c_mass: f64, c_friction: f64) -> Result<Self, EnvError> {
        for (name, v) in [("c_mass", c_mass), ("c_friction", c_friction)] {
            if !(0.5..=1.5).contains(&v) {
                return Err(EnvError::Perturbation { name, value: v });
            }
        }
        Ok(Self { c_mass, c_friction })
    }
}

#[derive(Debug, Clone)]
pub struct ContinuousEnv {
    kind: EnvKind,
    physics: Physics,
    /// Physical state: `(θ, θ̇)` for the pendulum, the observation otherwise.
    state: Vec<f64>,
    t: usize,
    terminal: bool,
    rng: Rng,
}

impl ContinuousEnv {
    pub fn new(kind: EnvKind, seed: u64) -> Self {
        let mut env = Self {
            kind,
            physics: kind.default_physics(),
            state: Vec::new(),
            t: 0,
            terminal: false,
            rng: seed::rng(seed),
        };
        env.reset();
        env
    }

    pub fn by_name(name: &str, seed: u64) -> Result<Self, EnvError> {
        Ok(Self::new(EnvKind::from_name(name)?, seed))
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn physics(&self) -> Physics {
        self.physics
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.kind.action_dim()
    }

    pub fn action_high(&self) -> f64 {
        self.kind.action_high()
    }

    pub fn reward_sup(&self) -> f64 {
        self.kind.reward_sup()
    }

    pub fn horizon(&self) -> usize {
        self.physics.horizon
    }

    pub fn elapsed(&self) -> usize {
        self.t
    }

    /// Episode over: terminal state reached or horizon exhausted.
    pub fn is_done(&self) -> bool {
        self.terminal || self.t >= self.physics.horizon
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = seed::rng(seed);
    }

    pub fn reset(&mut self) -> Vec<f64> {
        self.t = 0;
        self.terminal = false;
        self.state = match self.kind {
            EnvKind::Pendulum => vec![self.rng.random_range(-PI..PI), self.rng.random_range(-1.0..1.0)],
            EnvKind::PointMass => vec![
                self.rng.random_range(-POINT_BOUND..POINT_BOUND),
                self.rng.random_range(-POINT_BOUND..POINT_BOUND),
                0.0,
                0.0,
            ],
            EnvKind::CartPole => (0..4).map(|_| self.rng.random_range(-0.05..0.05)).collect(),
        };
        self.observe()
    }

    /// Overwrite the physical state (see [`ContinuousEnv::physical_state`]).
    pub fn set_physical_state(&mut self, state: &[f64]) {
        self.state = state.to_vec();
        self.t = 0;
        self.terminal = false;
    }

    pub fn physical_state(&self) -> &[f64] {
        &self.state
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.kind {
            EnvKind::Pendulum => vec![self.state[0].cos(), self.state[0].sin(), self.state[1]],
            _ => self.state.clone(),
        }
    }

    pub fn reward(&self, obs: &[f64], action: &[f64]) -> f64 {
        self.kind.reward(obs, action)
    }

    /// Copy with `mass ← mass·c_mass` and `friction ← friction·c_friction`.
    pub fn perturb(&self, p: PerturbationConfig) -> Result<Self, EnvError> {
        let p = PerturbationConfig::new(p.c_mass, p.c_friction)?;
        let mut out = self.clone();
        out.physics.mass *= p.c_mass;
        out.physics.friction *= p.c_friction;
        Ok(out)
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Transition, EnvError> {
        if self.is_done() {
            return Err(EnvError::EpisodeOver);
        }
        if action.len() != self.action_dim() {
            return Err(EnvError::ActionDim {
                expected: self.action_dim(),
                got: action.len(),
            });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::NonFiniteAction);
        }
        let high = self.action_high();
        let u: Vec<f64> = action.iter().map(|a| a.clamp(-high, high)).collect();
        let obs = self.observe();
        let reward = self.kind.reward(&obs, &u);
        let Physics { mass, friction, dt, .. } = self.physics;
        match self.kind {
            EnvKind::Pendulum => {
                let (th, thdot) = (self.state[0], self.state[1]);
                let ml2 = mass * PENDULUM_LEN * PENDULUM_LEN;
                let acc = 3.0 * PENDULUM_G / (2.0 * PENDULUM_LEN) * th.sin() + 3.0 / ml2 * (u[0] - friction * thdot);
                let thdot = (thdot + acc * dt).clamp(-PENDULUM_MAX_SPEED, PENDULUM_MAX_SPEED);
                let th = wrap_angle(th + thdot * dt);
                self.state = vec![th, thdot];
            }
            EnvKind::PointMass => {
                for axis in 0..2 {
                    let (p, v) = (self.state[axis], self.state[2 + axis]);
                    let acc = (u[axis] - friction * v) / mass;
                    let mut v = (v + acc * dt).clamp(-POINT_MAX_SPEED, POINT_MAX_SPEED);
                    let mut p = p + v * dt;
                    if p.abs() > POINT_BOUND {
                        p = p.clamp(-POINT_BOUND, POINT_BOUND);
                        v = 0.0;
                    }
                    self.state[axis] = p;
                    self.state[2 + axis] = v;
                }
            }
            EnvKind::CartPole => {
                let (x, xdot, th, thdot) = (self.state[0], self.state[1], self.state[2], self.state[3]);
                let force = u[0] * CART_FORCE_MAG - friction * xdot;
                let total = mass + CART_POLE_MASS;
                let pml = CART_POLE_MASS * CART_POLE_HALF_LEN;
                let (sin, cos) = th.sin_cos();
                let temp = (force + pml * thdot * thdot * sin) / total;
                let thacc = (CART_GRAVITY * sin - cos * temp)
                    / (CART_POLE_HALF_LEN * (4.0 / 3.0 - CART_POLE_MASS * cos * cos / total));
                let xacc = temp - pml * thacc * cos / total;
                let xdot = xdot + dt * xacc;
                let thdot = thdot + dt * thacc;
                self.state = vec![x + dt * xdot, xdot, th + dt * thdot, thdot];
            }
        }
        if self.state.iter().any(|v| !v.is_finite()) {
            self.terminal = true;
            return Err(EnvError::BlowUp { step: self.t });
        }
        self.t += 1;
        let next = self.observe();
        self.terminal = self.kind.is_terminal(&next);
        Ok(Transition::new(obs, u, reward, next, self.terminal))
    }
}

impl crate::policy::RewardModel for ContinuousEnv {
    fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        self.kind.reward(state, action)
    }

    fn is_terminal(&self, state: &[f64]) -> bool {
        self.kind.is_terminal(state)
    }
}

fn wrap_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Per-step episode record, exportable as `t, s.., a.., r` CSV.
#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub rows: Vec<(usize, Vec<f64>, Vec<f64>, f64)>,
}

impl EpisodeLog {
    pub fn record(&mut self, t: usize, tr: &Transition) {
        self.rows.push((t, tr.state.clone(), tr.action.clone(), tr.reward));
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let (ds, da) = self
            .rows
            .first()
            .map(|(_, s, a, _)| (s.len(), a.len()))
            .unwrap_or((0, 0));
        let mut header = vec!["t".to_string()];
        header.extend((0..ds).map(|i| format!("s{i}")));
        header.extend((0..da).map(|i| format!("a{i}")));
        header.push("r".into());
        writeln!(out, "{}", header.join(","))?;
        for (t, s, a, r) in &self.rows {
            let mut row = vec![t.to_string()];
            row.extend(s.iter().map(|v| v.to_string()));
            row.extend(a.iter().map(|v| v.to_string()));
            row.push(r.to_string());
            writeln!(out, "{}", row.join(","))?;
        }
        out.flush()
    }
}
