//! Scenario files, the built-in gallery and the run pipeline behind the
//! `tubular` command.

pub mod error;
pub mod gallery;
pub mod run;
pub mod scenario;

pub use error::{HarnessError, Result};
pub use run::{execute, run, RunOptions, RunOutcome, Verdict, EXIT_ERROR, EXIT_FAIL, EXIT_PASS};
pub use scenario::Scenario;
