//! Policy optimization on model data and the full training loop.

mod grid;
mod sac;
mod train;

pub use grid::{ablation_sweep, four_variant_grids, robustness_grid, GridResult, SweepRow, Variant};
pub use sac::{actor_objective, critic_objective, Greedy, PolicyParams, SacSettings, UpdateStats};
pub use train::{mbdp_train, metrics_columns, Stage, StageError, TrainError, TrainOptions, TrainOutcome, TrainReport};

use rayon::prelude::*;
use thiserror::Error;

use crate::buffer::BufferError;
use crate::envs::{ContinuousEnv, EnvError};
use crate::nn::NnError;
use crate::policy::Policy;
use crate::seed;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("need {required} transitions for a minibatch, have {have}")]
    NotEnoughData { required: usize, have: usize },
    #[error("non-finite {what} at update {update}")]
    NonFinite { update: usize, what: &'static str },
    #[error("at least one evaluation episode is required")]
    NoEpisodes,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Buffer(#[from] BufferError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Episode statistics from `evaluate_policy`.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    /// Undiscounted episode returns.
    pub returns: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (0 for a single episode).
    pub std: f64,
    /// Mean of `Σ γ^t r_t` over episodes.
    pub discounted_mean: f64,
    /// Episodes cut short by a physics blow-up; their partial return counts.
    pub blowups: usize,
    pub initial_observations: Vec<Vec<f64>>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Run `n_episodes` full episodes of `env` (cloned, reseeded per episode
/// from `seed`). `stochastic` selects `act` over `act_deterministic`.
pub fn run_episodes<P: Policy>(
    policy: &P,
    env: &ContinuousEnv,
    n_episodes: usize,
    gamma: f64,
    seed: u64,
    stochastic: bool,
) -> Result<EvalResult, AgentError> {
    if n_episodes == 0 {
        return Err(AgentError::NoEpisodes);
    }
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|ep| {
            let mut env = env.clone();
            env.reseed(seed::derive(seed, "episode", &[ep as u64]));
            let mut rng = seed::derived_rng(seed, "episode-actions", &[ep as u64]);
            let mut obs = env.reset();
            let first = obs.clone();
            let (mut ret, mut disc, mut discount) = (0.0, 0.0, 1.0);
            let mut blew_up = false;
            while !env.is_done() {
                let a = if stochastic {
                    policy.act(&obs, &mut rng)
                } else {
                    policy.act_deterministic(&obs)
                };
                match env.step(&a) {
                    Ok(tr) => {
                        ret += tr.reward;
                        disc += discount * tr.reward;
                        discount *= gamma;
                        obs = tr.next_state;
                    }
                    Err(EnvError::BlowUp { .. }) => {
                        blew_up = true;
                        break;
                    }
                    Err(e) => return Err(AgentError::Env(e)),
                }
            }
            Ok((ret, disc, blew_up, first))
        })
        .collect::<Result<Vec<_>, AgentError>>()?;
    let returns: Vec<f64> = episodes.iter().map(|e| e.0).collect();
    let (mean, std) = mean_std(&returns);
    Ok(EvalResult {
        mean,
        std,
        discounted_mean: episodes.iter().map(|e| e.1).sum::<f64>() / n_episodes as f64,
        blowups: episodes.iter().filter(|e| e.2).count(),
        initial_observations: episodes.into_iter().map(|e| e.3).collect(),
        returns,
    })
}

/// Mean-action rollouts of `policy` in the real environment.
pub fn evaluate_policy<P: Policy>(policy: &P, env: &ContinuousEnv, n_episodes: usize, gamma: f64, seed: u64) -> Result<EvalResult, AgentError> {
    run_episodes(policy, env, n_episodes, gamma, seed, false)
}
