//! Command-line surface: on-disk formats, configuration and commands.

pub mod commands;
pub mod config;
pub mod container;
pub mod dataset;
pub mod report;

use crate::error::Error;

/// Process exit code for a failed command: 3 for numerical aborts, 2 for
/// everything else (bad configuration, grids, arguments or files).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}
