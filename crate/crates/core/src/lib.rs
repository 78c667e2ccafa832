//! Personalized knowledge-grounded conversation.
//!
//! Two coupled categorical latent variables pick a personal-memory fragment
//! (`Z^p`) and a knowledge candidate (`Z^k`) for each dialogue turn. Five
//! scoring models (prior, posterior and auxiliary) are trained by a pseudo-label
//! warm-up followed by a closed loop of ELBO ascent, policy-gradient dual
//! learning and distillation. Everything runs on small, exactly differentiable
//! reference networks so the objectives can be checked against enumeration
//! and finite-difference oracles.

pub mod composer;
pub mod config;
pub mod corpus;
pub mod error;
pub mod inference;
pub mod latent;
pub mod metrics;
pub mod neural;
pub mod selfcheck;
pub mod training;

pub use error::{Error, Result};
