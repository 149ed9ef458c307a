//! Long-term voltage stability control laboratory.
//!
//! A quasi-steady-state grid simulator, an episodic curtailment environment
//! with uncertain demand-response capacity and price, a clipped-PPO
//! actor-critic trainer and a rule-based undervoltage load-shedding baseline.
//!
//! The numerical kernels ([`powerflow`], [`neural`]) are generic over
//! [`Scalar`]; the simulator, environment and trainer run in `f64`, exposed
//! through the aliases below.

// Validation is written `!(x > 0.0)` so that NaN is rejected as well, and
// the numerical kernels index several arrays with one loop variable.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baseline;
pub mod env;
pub mod error;
pub mod grid;
pub mod harness;
pub mod linalg;
pub mod neural;
pub mod powerflow;
pub mod ppo;
pub mod scalar;
pub mod seeding;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type PowerFlowSolution = powerflow::PowerFlowSolution<f64>;
pub type Injection = powerflow::Injection<f64>;
pub type Ybus = powerflow::Ybus<f64>;
pub type Mlp = neural::Mlp<f64>;
pub type AdamState = neural::AdamState<f64>;
