//! Non-autoregressive machine translation with connectionist temporal
//! classification.
//!
//! A Transformer encoder reads the source, a state-splitting layer stretches
//! its states `k`-fold, and a non-causal decoder labels every stretched
//! position at once. Output positions may emit a blank, so one parallel pass
//! yields sentences of any length up to `k · T_x`.

pub mod cli;
pub mod config;
pub mod ctc;
pub mod data;
pub mod evalbench;
pub mod gradcheck;
pub mod inference;
pub mod model;
pub mod numerics;
pub mod selfcheck;
pub mod training;

mod error;

pub use error::Error;
