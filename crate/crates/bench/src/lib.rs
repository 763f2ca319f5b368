//! Scenario driver for the Stokes solvers: builds a geometry, applies a
//! refinement, hole addition or snapshot sequence, solves with one of the
//! strategies and reports timings, iteration counts and errors.

pub mod presets;
pub mod report;
pub mod runner;
pub mod scenario;

pub use runner::{run_any, run_scenario, run_snapshot_batch, BatchReport, BatchSummary, RunReport};
pub use scenario::{Action, GeometrySpec, Scenario, Strategy, Tolerances};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid scenario: {0}")]
    Scenario(String),

    #[error("{scenario}: {source}")]
    Solver {
        scenario: String,
        #[source]
        source: stokes_els::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl BenchError {
    /// Process exit code: 2 for solver non-convergence, 3 for geometry errors, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Solver {
                source: stokes_els::Error::NonConvergence(_),
                ..
            } => 2,
            BenchError::Solver {
                source: stokes_els::Error::Geometry(_),
                ..
            } => 3,
            _ => 1,
        }
    }
}
