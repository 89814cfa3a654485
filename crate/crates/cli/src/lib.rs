//! Command-line pipeline: dataset generation, training, sampling, temporal
//! composition, script editing sessions, evaluation, and ablations, plus
//! bit-exact checkpoint persistence.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod evaluate;
pub mod train;

use mogen_core::error::CoreError;

/// Process exit codes: 0 ok, 1 usage, 2 contract violation, 3 numeric
/// failure.
pub fn exit_code_for(err: &CoreError) -> i32 {
    match err {
        CoreError::Numeric { .. } => 3,
        _ => 2,
    }
}
