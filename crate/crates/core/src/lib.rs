//! Transition path sampling by minimizing the discretized Onsager-Machlup
//! action.
//!
//! The drift of the underlying overdamped Langevin dynamics is supplied either
//! by an analytic potential ([`fields`]) or by the score extracted from a small
//! denoising-diffusion or flow-matching model ([`score`]). Optimized paths can
//! seed committor and rate estimation ([`committor`]) and are scored against a
//! Markov state model ([`msm`]).

pub mod action;
pub mod committor;
pub mod fields;
pub mod io;
pub mod langevin;
pub mod msm;
pub mod nn;
pub mod rng;
pub mod score;

pub use action::{OmParams, Path};
pub use fields::{DriftField, FieldError};
