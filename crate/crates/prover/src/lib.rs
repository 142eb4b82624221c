//! Utility-side prover: ingests a measurement stream, runs the TC/SC kernels
//! per interval and window, keeps witnesses in a bounded ledger and proves on
//! request.

mod ledger;
pub mod server;
mod session;

pub use ledger::{IntervalRecord, ProvingContext, WindowRecord};
pub use session::{initial_estimate, load_model, ProverError, ProverSession, Result, BUILTIN_REFERENCE};
