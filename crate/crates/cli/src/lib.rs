//! Library half of the `failrules` command-line tool: run configuration,
//! the subcommands as functions, and plotting.

pub mod commands;
pub mod config;
pub mod plot;

pub use commands::{
    cmd_calibrate, cmd_detect, cmd_evaluate, cmd_explain, cmd_plot, cmd_synth, cmd_train,
    Detection, Explanation, TrainReport,
};
pub use config::RunConfig;

use failrules_core::Error;

/// Process exit status for an error: 2 for configuration problems, 4 for
/// training divergence, 3 for everything data-related.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Training { .. } => 4,
        _ => 3,
    }
}
