//! Entropy calibration for small, fully tabular autoregressive models.
//!
//! Every model in this crate is a complete table of next-token
//! distributions over sequences of a fixed horizon `T`, so entropies,
//! log losses and future entropies can be computed exactly by enumeration.
//! On top of that sit:
//!
//! - [`calibrate`]: future-entropy scaling, which reweights each candidate
//!   token by `(1 + alpha_t) * log p(v | prefix) - alpha_t * f(prefix, v)`
//!   where `f` predicts the entropy of the remaining generation, fitted
//!   backwards from the last step;
//! - [`oracle`]: exact joints, future entropies and the globally normalized
//!   temperature adjustment used as a reference;
//! - [`metrics`]: per-step entropy, log loss and entropy calibration error;
//! - [`truncate`]: temperature, top-k, top-p and min-p decoders;
//! - [`powerlaw`]: singleton mass of Zipf samples and the derailing model;
//! - [`analysis`]: corpus counts, rank-frequency and log-log fits.

// `!(x > 0.0)` checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod calibrate;
pub mod error;
pub mod fmt;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod powerlaw;
pub mod seed;
pub mod truncate;

pub use error::{Error, Result};
pub use model::{Autoregressive, Prompt, PromptSet, TabularModel, Tabulate};
