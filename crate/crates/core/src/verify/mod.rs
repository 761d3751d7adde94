//! Property checks, parameter counts and training sweeps.

pub mod report;
pub mod suites;
pub mod sweep;

pub use report::{VerifyReport, Witness};
pub use suites::{run_suite, Suite};
pub use sweep::{run_sweep, summarize, SweepAxis, SweepRow, SweepSpec, VariantSummary};
