//! Dense linear algebra, reverse-mode gradients and first-order optimizers.

pub mod ad;
pub mod linalg;
pub mod optim;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use ad::{
    central_difference, check_gradient, eval, grad, objective, relative_error, value_and_grad, GradCheck,
    Scalar, Tape, Var, FD_STEP,
};
pub use linalg::{lstsq, LstsqFit, Mat};
pub use optim::{descend, project_box, Descent, Method, OptimizerConfig};

/// Seeded counter-based generator used for every stochastic operation.
pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream `stream` of the generator seeded with `seed`.
pub fn rng_stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumericsError {
    #[error("non-finite objective value {value}")]
    NonFiniteValue { value: f64 },
    #[error("non-finite gradient at coordinate {coord} ({value})")]
    NonFiniteGradient { coord: usize, value: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid optimizer config: {0}")]
    Config(String),
    #[error("objective increased for {steps} consecutive steps (last value {value})")]
    Diverged { steps: usize, value: f64 },
    #[error("invalid box [{lo}, {hi}]")]
    InvalidBox { lo: f64, hi: f64 },
}
