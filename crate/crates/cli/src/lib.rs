//! Experiment harness around `scorealign`: run configuration and the
//! `train-score`, `align`, `verify` and `sample` subcommands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use config::{RunConfig, KEYS, OUT_ROOT_ENV};

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const RUNTIME: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const VERIFY: u8 = 3;
}

/// Exit code for an error: configuration problems are 2, anything else 1.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        matches!(
            e.downcast_ref::<scorealign::Error>(),
            Some(scorealign::Error::Config { .. })
        )
    });
    if config {
        exit::CONFIG
    } else {
        exit::RUNTIME
    }
}
