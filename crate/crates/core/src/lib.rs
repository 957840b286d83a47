//! Reward-difference-prediction finetuning of toy diffusion policies.

pub mod autodiff;
pub mod baselines;
pub mod diffusion;
pub mod error;
pub mod harness;
pub mod optim;
pub mod rdp;
pub mod rewards;
pub mod rng;
pub mod tabular;

pub use error::{Error, Result};
