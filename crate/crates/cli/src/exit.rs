//! Process exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | usage or configuration error |
//! | 2 | data error (unreadable, invalid or insufficient input; failed validation) |
//! | 3 | numeric non-convergence |

use spectra_core::Error as CoreError;
use thiserror::Error;

pub const SUCCESS: i32 = 0;
pub const USAGE: i32 = 1;
pub const DATA: i32 = 2;
pub const NON_CONVERGENCE: i32 = 3;

#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// At least one validation criterion failed.
#[derive(Debug, Error)]
#[error("{failed} of {total} validation criteria failed")]
pub struct ValidationFailed {
    pub failed: usize,
    pub total: usize,
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if let Some(CoreError::NonConvergence { .. }) = cause.downcast_ref::<CoreError>() {
            return NON_CONVERGENCE;
        }
    }
    DATA
}
