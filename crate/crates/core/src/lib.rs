//! Concatenation and pasting of killed Markov processes.
//!
//! Processes are run one after another: when stage `n` dies, a transfer kernel looks at
//! the dying path and picks the point where stage `n + 1` is revived. Pasting runs
//! alternating tagged copies of two processes living on overlapping spaces and then
//! erases the tags. Every identity the construction is supposed to satisfy can be
//! checked twice: by Monte Carlo over sampled paths ([`estimate`]) and exactly for
//! finite chains through linear algebra on assembled generators ([`oracle`]).

pub mod cli;
pub mod concat;
pub mod config;
pub mod error;
pub mod estimate;
pub mod functions;
pub mod oracle;
pub mod pasting;
pub mod process;
pub mod rng;
pub mod state_space;
pub mod stats;
pub mod transfer;

pub use error::{Error, Result};
