//! Deterministic multi-car elevator simulation plus a desk-scale adversarial
//! stack that learns to imitate its logs.
//!
//! The crate is organized around the data flow of the project:
//!
//! - [`sim`] — discrete-event simulator of a multi-car elevator building;
//!   emits one `LogEvent` per call-lifecycle transition.
//! - [`codec`] — bit-exact log line grammar (format + parse), character
//!   vocabulary, batch shaping, and realism metrics over arbitrary log text.
//! - [`nn`] — minimal f64 tensor math with tape-based reverse-mode autodiff,
//!   a finite-difference gradient checker, and Adam.
//! - [`models`] — the char-level LSTM generator and the 1D-conv discriminator.
//! - [`train`] — discriminator pretraining, REINFORCE policy-gradient updates
//!   with Monte-Carlo rollout rewards, and the full adversarial loop.
//! - [`config`] — the flat `key=value` config format shared by the CLI.
//!
//! Everything is seeded explicitly: identical configs and seeds produce
//! byte-identical logs, checkpoints, samples, and history CSVs.

pub mod codec;
pub mod config;
pub mod models;
pub mod nn;
pub mod sim;
pub mod train;

pub use codec::{LogEvent, ParseError, RealismReport, SequenceBatch, Vocabulary};
pub use sim::{BuildingConfig, CarId, SimState};
