//! Ground-truth dynamics: perturbable toy control tasks and an exactly
//! enumerable tabular MDP.

mod continuous;
mod discrete;

pub use continuous::{ContinuousEnv, EnvKind, EpisodeLog, PerturbationConfig, Physics};
pub use discrete::{DiscreteMdp, TabularPolicy, MAX_TRAJECTORIES};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}` (expected pendulum, point-mass or cartpole)")]
    UnknownEnv(String),
    #[error("perturbation coefficient {name} = {value} outside [0.5, 1.5]")]
    Perturbation { name: &'static str, value: f64 },
    #[error("episode is over; reset before stepping")]
    EpisodeOver,
    #[error("action has {got} components, expected {expected}")]
    ActionDim { expected: usize, got: usize },
    #[error("action is not finite")]
    NonFiniteAction,
    #[error("physics blew up at step {step}")]
    BlowUp { step: usize },
    #[error("mdp: {0}")]
    MdpShape(String),
    #[error("row {row} sums to {sum}, not 1")]
    RowSum { row: usize, sum: f64 },
    #[error("enumeration needs {required} trajectories, cap is {cap}")]
    TooManyTrajectories { required: u64, cap: u64 },
}
