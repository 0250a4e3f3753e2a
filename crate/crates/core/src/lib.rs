//! Economic model predictive control for linear systems operated around
//! periodic steady states.
//!
//! The library covers the full pipeline for input-cost-driven EMPC of
//! periodically time-varying linear systems:
//!
//! * period lifting of a T-periodic system into a time-invariant block form,
//!   plus an input-rate augmentation for costs that penalize input moves
//!   ([`dynamics`]);
//! * optimal periodic steady-state problems, including the non-unique
//!   steady-state *set* and a state-regularized variant with a principled
//!   regularization weight ([`steady_state`]);
//! * receding-horizon controllers over the lifted system with steady-state-set
//!   or fixed-point terminal constraints ([`empc`]);
//! * dissipativity and Lyapunov-descent certification built from the
//!   steady-state problem's equality multipliers ([`certify`]);
//! * a pump-scheduling benchmark of six coupled storage tanks with
//!   time-of-use electricity tariffs ([`wdn`]);
//! * scenario configs, trace serialization, and the CLI commands behind the
//!   `empc` binary ([`config`], [`trace`], [`commands`]).
//!
//! All optimization is routed through the dense ADMM solver in [`qp`], which
//! reports equality-constraint multipliers; those multipliers are what the
//! certification layer turns into storage functions.

pub mod certify;
pub mod commands;
pub mod config;
pub mod dynamics;
pub mod empc;
pub mod qp;
pub mod steady_state;
pub mod trace;
pub mod wdn;

pub mod model;

#[cfg(test)]
mod test_fixtures;

pub use model::{compile, BoxConstraints, CompiledModel, StageCostSpec};


