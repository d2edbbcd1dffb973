//! Command-line driver for the duplex enhancement engine: scenario
//! rendering, pre-training, enhancement, streaming adaptation and
//! benchmarks.

pub mod commands;
pub mod config;

use duplex_core::Error;

/// Process exit status for a failed command: 3 for numerical failures,
/// 2 for everything else (configuration, missing files, bad input).
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Numerical(_)
        | Error::TrainingDivergence { .. }
        | Error::DegenerateScm { .. }
        | Error::Eigen { .. }
        | Error::InvalidSteering { .. } => 3,
        _ => 2,
    }
}
