//! Command-line harness around `uvtok_core`: run configuration, the batch
//! pipeline, the MC-dropout comparison, the spectrum sweep, the statistics
//! front end and the self-validation suite.

pub mod compare;
pub mod config;
pub mod pipeline;
pub mod spectrum;
pub mod stats_cmd;
pub mod validate;

use uvtok_core::Error;

/// Process exit codes.
pub mod exit {
    pub const SUCCESS: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const CONFIG: u8 = 2;
}

/// Exit code for an error raised after configuration was accepted.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => exit::CONFIG,
        _ => exit::FAILURE,
    }
}
