//! Twin-experiment harness for the `dualenkf` filters: scenario files,
//! replicate and gamma sweeps, identity checks, and CSV/JSON-lines output.

pub mod error;
pub mod experiment;
pub mod records;
pub mod report;
pub mod scenario;
pub mod verify;

pub use error::{HarnessError, Result};
pub use experiment::{convergence_study, gamma_grid, run_experiment, sweep_gamma, ExperimentOutput, RunFailure};
pub use records::{read_records, write_records, RunRecord};
pub use report::summarize;
pub use scenario::{load_scenario, parse_scenario, OutputFormat, Scenario};
pub use verify::{verify_suite, VerifyReport};
