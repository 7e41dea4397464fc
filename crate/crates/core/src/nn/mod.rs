//! Small feed-forward network stack with hand-written reverse-mode
//! gradients over a fixed primitive set (affine, tanh, exp, log, square,
//! mean, Gaussian log-density).

mod adam;
mod heads;
mod mlp;

pub use adam::{clip_global_norm, Adam};
pub use heads::{normal_log_pdf, soft_clamp, GaussianHead, GaussianOut, SquashedGaussianHead, SquashedSample};
pub use mlp::{param_count, Mlp, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("input dimension {got} does not match network input {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error("non-finite gradient at parameter {index}")]
    NonFiniteGradient { index: usize },
    #[error("expected {expected} parameters, got {got}")]
    ParamCount { expected: usize, got: usize },
    #[error("invalid layer widths {0:?}")]
    BadWidths(Vec<usize>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
