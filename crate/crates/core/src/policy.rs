//! Interfaces shared by the rollout generator, evaluation and the agent.

use rand::Rng as _;

use crate::seed::Rng;

/// Anything that maps observations to actions in the environment's box.
pub trait Policy: Sync {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64>;
    fn act_deterministic(&self, state: &[f64]) -> Vec<f64>;
}

/// The known reward and termination functions used to label model rollouts.
pub trait RewardModel: Sync {
    fn reward(&self, state: &[f64], action: &[f64]) -> f64;
    fn is_terminal(&self, state: &[f64]) -> bool;
}

/// Uniform actions over `[-high, high]^dim`.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub dim: usize,
    pub high: f64,
}

impl Policy for UniformPolicy {
    fn act(&self, _state: &[f64], rng: &mut Rng) -> Vec<f64> {
        (0..self.dim).map(|_| rng.random_range(-self.high..=self.high)).collect()
    }

    fn act_deterministic(&self, _state: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim]
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn act(&self, state: &[f64], rng: &mut Rng) -> Vec<f64> {
        (**self).act(state, rng)
    }

    fn act_deterministic(&self, state: &[f64]) -> Vec<f64> {
        (**self).act_deterministic(state)
    }
}
