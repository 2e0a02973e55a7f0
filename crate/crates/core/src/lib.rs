//! Lyapunov barrier policy optimization (LBPO) for constrained MDPs.
//!
//! The crate is organized bottom-up:
//!
//! * [`cmdp`]: environments, trajectories and discounted-return arithmetic.
//! * [`func_approx`]: small tanh MLPs with exact reverse- and forward-mode
//!   derivatives, used for the deterministic policy and the Q-functions.
//! * [`policy_eval`]: TD(λ) targets, Q regression, and the per-step
//!   constraint budget derived from the measured discounted cost.
//! * [`safe_update`]: the barrier-augmented trust-region policy update and
//!   the cost-recovery (backtrack) rule.
//! * [`tabular_oracle`]: exact linear-algebra checks of the Lyapunov safety
//!   argument on finite CMDPs.
//! * [`harness`]: seeded experiment runner, sweeps and CSV output.
//!
//! Data-parallel loops go through [`exec::Execution`]; with the `parallel`
//! feature (on by default) they run on rayon, otherwise sequentially. Both
//! paths reduce in a fixed order, so results are bit-identical.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cmdp;
pub mod error;
pub mod exec;
pub mod func_approx;
pub mod harness;
pub mod policy_eval;
pub mod rng;
pub mod safe_update;
pub mod tabular_oracle;

pub use error::{Error, Result};
pub use exec::Execution;
