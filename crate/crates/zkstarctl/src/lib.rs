//! Experiment harness behind the `zkstarctl` binary: stream replay, attack
//! injection, D/PSF sweeps and their reports.

pub mod cli;
pub mod report;
pub mod stream;
pub mod sweep;

pub use report::{compute_speedup, detection_quality_report, write_report, CellQuality, Report, SpeedupRow, TimingRow, TimingTable};
pub use stream::{inject_attack, read_csv, synthetic_stream, write_csv, AttackKind, AttackSpec, SyntheticSpec};
pub use sweep::{float_window_stats, run_cell, run_sweep, tampered_windows, CellResult, SweepConfig, WindowRow};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Csv(String),
    #[error("attack: {0}")]
    Attack(String),
    #[error("model: {0}")]
    Model(String),
    #[error("config: {0}")]
    Config(String),
    #[error("timing table has no D=1 baseline for psf {0}")]
    MissingBaseline(u8),
    #[error("prover: {0}")]
    Prover(#[from] zkstar_prover::ProverError),
    #[error("utility: {0}")]
    Client(#[from] zkstar_regulator::ClientError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
