//! Stochastic policy mirror descent for finite discounted MDPs.
//!
//! The crate pairs exact dynamic-programming oracles ([`mdp`]) with seeded
//! online simulation ([`trajectory`]), Monte-Carlo style policy evaluators
//! ([`evaluators`]), Bregman proximal updates ([`divergence`]) and the
//! optimization loop with its parameter schedules ([`spmd`]). [`harness`]
//! turns all of it into reproducible experiments.

// `!(x > 0.0)` style checks reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod divergence;
pub mod error;
pub mod evaluators;
pub mod harness;
pub mod mdp;
pub mod spmd;
pub mod trajectory;

pub use divergence::DivergenceKind;
pub use error::{Error, Result};
pub use evaluators::{EvalKind, EvalSpec};
pub use mdp::{Mdp, MixingProfile, Policy, QTable, VTable};
pub use spmd::{RunRecord, SpmdConfig};
pub use trajectory::{Start, Trajectory};
