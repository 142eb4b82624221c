//! Regulator side: pin a utility's verifying keys, verify windows of TC and
//! SC artifacts against published summaries, and report suppression findings.

pub mod client;
mod compliance;
pub mod server;

pub use client::{connect, request_and_verify, ClientError, UtilityClient};
pub use compliance::{findings_jsonl, Clause, ComplianceSession, Finding, WindowVerdict};
