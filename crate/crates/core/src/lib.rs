//! Modular recurrent policies trained with two-timescale PPO on partially
//! observed gridworlds.
//!
//! Everything numeric is generic over [`Scalar`]; the aliases below fix the
//! scalar to `f64`, which is what training and the command line use.

pub mod agent;
pub mod autodiff;
pub mod error;
pub mod gridworld;
pub mod params;
pub mod rims;
pub mod metaloop;
pub mod rl;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64<'p> = autodiff::Tape<'p, f64>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type Agent64 = agent::Agent<f64>;
