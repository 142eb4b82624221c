//! JSON bodies shared by the prover service, the regulator client and the CLI.

use crate::commitments::Digest;
use crate::model::WeightsFile;
use crate::proof::{ProofArtifact, VerifyingKey};
use serde::{Deserialize, Serialize};

fn default_retention() -> usize {
    64
}

fn default_eps() -> f64 {
    0.1
}

fn default_alpha() -> f64 {
    0.05
}

fn default_stream() -> String {
    "stream-0".into()
}

/// Test-only prover misbehaviour used by the tamper scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TamperMode {
    /// Stop accumulating residuals from timestamp `from_t` on, forging the TC proofs.
    ZeroResiduals { from_t: u64 },
    /// Seed each window from `from_window` on with the stale start state of the window before it.
    StateReplay { from_window: u64 },
    /// Re-run setup with perturbed parameters from `from_window` on.
    Rekey { from_window: u64, delta: f64 },
    /// Report `ρ = 0` from `from_window` on, forging the SC proof when it disagrees.
    AlarmFlip { from_window: u64 },
}

/// Prover session configuration, as read from a config file or a `POST /v1/sessions` body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Path to a weights file, or `builtin:reference` for the default synthetic system.
    #[serde(default)]
    pub model_file: Option<String>,
    /// Inline weights; takes precedence over `model_file`.
    #[serde(default)]
    pub model: Option<WeightsFile>,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "D")]
    pub d: usize,
    pub psf: u8,
    #[serde(default = "default_alpha")]
    pub ucl_alpha: f64,
    /// Defaults to the observation dimension.
    #[serde(default)]
    pub dof: Option<usize>,
    #[serde(default = "default_eps")]
    pub eps_kc: f64,
    #[serde(default = "default_eps")]
    pub eps_svd: f64,
    #[serde(default = "default_retention")]
    pub retention: usize,
    #[serde(default = "default_stream")]
    pub stream_id: String,
    /// Seeds the nonce generator; OS entropy when absent.
    #[serde(default)]
    pub nonce_seed: Option<u64>,
    /// Summaries are POSTed here as windows close.
    #[serde(default)]
    pub webhook: Option<String>,
    #[serde(default)]
    pub tamper: Option<TamperMode>,
}

impl SessionConfig {
    pub fn new(model_file: &str, w: usize, d: usize, psf: u8) -> Self {
        Self {
            model_file: Some(model_file.into()),
            model: None,
            w,
            d,
            psf,
            ucl_alpha: default_alpha(),
            dof: None,
            eps_kc: default_eps(),
            eps_svd: default_eps(),
            retention: default_retention(),
            stream_id: default_stream(),
            nonce_seed: None,
            webhook: None,
            tamper: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionOpened {
    pub session_id: String,
    pub stream_id: String,
    pub vk_tc: String,
    pub vk_sc: String,
    pub t_ucl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: u64,
    pub y: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub u: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestRequest {
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestAck {
    pub accepted: usize,
    pub next_t: u64,
    pub closed_windows: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeysResponse {
    pub stream_id: String,
    pub vk_tc: VerifyingKey,
    pub vk_sc: VerifyingKey,
    /// `(x, P, r_acc, S_acc, κ)` digests of the genesis state.
    pub genesis: Vec<Digest>,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "D")]
    pub d: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalSummary {
    pub interval: u32,
    pub first_t: u64,
    /// Input state digests `(x, P, r_acc, S_acc, κ)`.
    pub inputs: Vec<Digest>,
    /// `(y, G, H, K, u)` per timestamp.
    pub steps: Vec<Digest>,
    pub outputs: Vec<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSummary {
    pub stream_id: String,
    pub window: u64,
    pub first_t: u64,
    pub last_t: u64,
    pub intervals: Vec<IntervalSummary>,
    /// `(U, Σ^{-1/2})` digests of the decomposition witness.
    pub svd: Vec<Digest>,
    pub rho: bool,
    pub eta: bool,
    pub kappa: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ProofKind {
    TcInterval { interval: u32 },
    Sc,
    FullWindow,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofRequest {
    #[serde(flatten)]
    pub kind: ProofKind,
    #[serde(default)]
    pub requested_by: String,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofResponse {
    pub window: u64,
    pub artifacts: Vec<ProofArtifact>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMetric {
    pub window: u64,
    pub circuit: String,
    pub interval: Option<u32>,
    pub proof_bytes: usize,
    pub prove_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessMetric {
    pub window: u64,
    /// `None` for the SC witness.
    pub interval: Option<u32>,
    pub witness_bytes: usize,
    pub witness_gen_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOutcome {
    pub window: u64,
    pub rho: bool,
    pub eta: bool,
    pub kappa: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub session_id: String,
    pub vk_tc_bytes: usize,
    pub vk_sc_bytes: usize,
    pub pk_tc_bytes: usize,
    pub pk_sc_bytes: usize,
    pub proofs: Vec<ArtifactMetric>,
    pub witnesses: Vec<WitnessMetric>,
    pub windows: Vec<WindowOutcome>,
    pub peak_rss_kb: Option<u64>,
}

/// Opened witnesses for audit-mode verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditGrant {
    pub window: u64,
    pub psf: u8,
    /// Hex-encoded witness bundles, one per interval.
    pub tc_bundles: Vec<String>,
    pub sc_bundle: String,
    pub model: WeightsFile,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionList {
    pub sessions: Vec<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proof_request_shapes() {
        let r: ProofRequest = serde_json::from_str(r#"{"kind":"tc-interval","interval":2,"requested_by":"reg"}"#).unwrap();
        assert_eq!(r.kind, ProofKind::TcInterval { interval: 2 });
        let r: ProofRequest = serde_json::from_str(r#"{"kind":"full-window"}"#).unwrap();
        assert_eq!(r.kind, ProofKind::FullWindow);
        assert!(serde_json::from_str::<ProofRequest>(r#"{"kind":"everything"}"#).is_err());
    }

    #[test]
    fn config_defaults() {
        let c: SessionConfig = serde_json::from_str(r#"{"model_file":"builtin:reference","W":16,"D":4,"psf":12}"#).unwrap();
        assert_eq!(c.retention, 64);
        assert_eq!(c.eps_kc, 0.1);
        assert_eq!(c.dof, None);
        assert_eq!(c.tamper, None);
        let t: TamperMode = serde_json::from_str(r#"{"mode":"state-replay","from_window":3}"#).unwrap();
        assert_eq!(t, TamperMode::StateReplay { from_window: 3 });
    }
}
