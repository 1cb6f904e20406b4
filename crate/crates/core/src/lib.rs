//! Ensemble Kalman filters for linear-Gaussian systems, derived from the
//! duality between minimum-variance estimation and linear-quadratic control.
//!
//! The stochastic EnKF, DEnKF, EnSRF, EAKF and ETKF are all instances of one
//! recursion parameterized by the noise-copy scalings `(γ1, γ2)` and a choice
//! of anomaly gain `C_t`. An exact Kalman filter ([`kalman`]) serves as the
//! oracle for every variant, and [`dual`] checks the batch/recursive and LQ
//! identities the construction rests on.

pub mod dual;
pub mod ensemble;
pub mod error;
pub mod gain;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod noise;

pub use ensemble::{
    run_filter, Application, EnsembleState, FilterRun, GainSource, InitMode, StepDiagnostics, VariantSpec,
};
pub use error::{Error, Result};
pub use gain::{CtSolution, EtkfTransform, GammaPair, SolverKind};
pub use kalman::{run_kf, GainSchedule, GaussianBelief};
pub use model::{simulate_truth, MatSeq, SystemModel, Trajectory};
pub use noise::{NoiseStreams, Substream};
