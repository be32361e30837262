//! Reproducible experiment commands for deep feature reweighting.
//!
//! Every command takes a JSON document, writes its artifacts to an output
//! directory and records a `manifest.json` with the resolved document, the
//! master seed and the SHA-256 of every input and output. Passing that
//! manifest back with `--manifest` reruns the command.

pub mod cli;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod oracle;
pub mod verify;

pub use commands::{execute, Command, Invocation, Outcome, Source};
