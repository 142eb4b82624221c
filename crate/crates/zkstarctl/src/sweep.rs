//! D × PSF × seed experiment grid. Each cell runs its own prover and verifier
//! in process and carries a float EKF reference alongside.

use crate::stream::{inject_attack, synthetic_stream, AttackSpec};
use crate::HarnessError;
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use zkstar_core::model::{ekf_step, StateEstimate, StateSpaceModel};
use zkstar_core::wire::{ProofKind, Sample, SessionConfig, TamperMode};
use zkstar_prover::{initial_estimate, load_model, ProverSession, BUILTIN_REFERENCE};
use zkstar_regulator::{ComplianceSession, Finding};

fn default_d() -> Vec<usize> {
    vec![1, 4, 8, 16, 32]
}

fn default_psf() -> Vec<u8> {
    vec![8, 10, 12]
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_windows() -> usize {
    8
}

fn default_window_steps() -> usize {
    64
}

fn default_alpha() -> f64 {
    0.05
}

fn default_model() -> String {
    BUILTIN_REFERENCE.into()
}

fn default_knife_edge() -> f64 {
    0.05
}

/// Sweep description as read from `sweep.json`. Attack labels stay in the
/// harness: the prover and verifier only ever see the measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(rename = "D_values", default = "default_d")]
    pub d_values: Vec<usize>,
    #[serde(default = "default_psf")]
    pub psf_values: Vec<u8>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_windows")]
    pub windows: usize,
    /// Timestamps per detection window; `W = window_steps / D`.
    #[serde(default = "default_window_steps")]
    pub window_steps: usize,
    #[serde(default)]
    pub attack: Option<AttackSpec>,
    #[serde(default = "default_alpha")]
    pub ucl_alpha: f64,
    #[serde(default = "default_model")]
    pub model_file: String,
    /// Verify with opened witnesses.
    #[serde(default)]
    pub audit: bool,
    #[serde(default)]
    pub tamper: Option<TamperMode>,
    /// Windows with `|T_float − T_ucl| < knife_edge · T_ucl` are left out of the agreement rate.
    #[serde(default = "default_knife_edge")]
    pub knife_edge: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.d_values.is_empty() || self.psf_values.is_empty() {
            return Err(HarnessError::Config("D_values and psf_values must be non-empty".into()));
        }
        if let Some(d) = self.d_values.iter().find(|&&d| d == 0 || !self.window_steps.is_multiple_of(d)) {
            return Err(HarnessError::Config(format!("D={d} does not divide window_steps={}", self.window_steps)));
        }
        if !(self.knife_edge >= 0.0 && self.knife_edge.is_finite()) {
            return Err(HarnessError::Config("knife_edge must be a non-negative number".into()));
        }
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        self.windows * self.window_steps
    }

    /// Ground truth: the window overlaps the attack range.
    pub fn attacked(&self, first_t: u64, last_t: u64) -> bool {
        self.attack.as_ref().is_some_and(|a| first_t < a.end_t && last_t >= a.start_t)
    }

    /// Neither attacked nor inside the window that follows the attack.
    pub fn clean(&self, first_t: u64, last_t: u64) -> bool {
        match &self.attack {
            None => true,
            Some(a) => last_t < a.start_t || first_t >= a.end_t + self.window_steps as u64,
        }
    }

    pub fn attack_start_window(&self) -> Option<u64> {
        self.attack.as_ref().map(|a| a.start_t / self.window_steps as u64)
    }

    fn session_config(&self, d: usize, psf: u8, seed: u64) -> SessionConfig {
        let mut c = SessionConfig::new(&self.model_file, self.window_steps / d, d, psf);
        c.ucl_alpha = self.ucl_alpha;
        c.nonce_seed = Some(seed);
        c.retention = self.windows.max(1);
        c.stream_id = format!("d{d}-psf{psf}-seed{seed}");
        c.tamper = self.tamper;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    #[serde(rename = "D")]
    pub d: usize,
    pub psf: u8,
    pub seed: u64,
    pub window: u64,
    pub first_t: u64,
    pub last_t: u64,
    pub attacked: bool,
    pub t_fixed: f64,
    pub t_float: f64,
    pub t_ucl: f64,
    pub rho: bool,
    pub rho_float: bool,
    pub knife_edge: bool,
    pub compliant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub d: usize,
    pub psf: u8,
    pub seed: u64,
    pub t_ucl: f64,
    pub rows: Vec<WindowRow>,
    pub findings: Vec<Finding>,
    /// Windows the prover tampered with, when a tamper mode is set.
    pub tampered: Vec<u64>,
    pub tc_prove_ms: Vec<f64>,
    pub sc_prove_ms: Vec<f64>,
    pub verify_ms: Vec<f64>,
    pub tc_witness_bytes: Vec<usize>,
    pub sc_witness_bytes: Vec<usize>,
}

/// Float EKF run over `samples` from the prover's initial estimate, returning
/// the window statistic `r_Wᵀ S_W⁻¹ r_W` of each complete window.
pub fn float_window_stats(model: &StateSpaceModel, samples: &[Sample], window_steps: usize) -> Result<Vec<f64>, HarnessError> {
    let err = |e: zkstar_core::model::ModelError| HarnessError::Model(e.to_string());
    let (m, d) = (model.state_dim(), model.obs_dim());
    let (x0, p0) = initial_estimate(model);
    let mut est = StateEstimate::new(x0, p0, 0);
    let mut out = Vec::new();
    for chunk in samples.chunks_exact(window_steps) {
        let mut r = DVector::zeros(d);
        let mut s = nalgebra::DMatrix::zeros(d, d);
        for sample in chunk {
            let y = DVector::from_column_slice(&sample.y);
            let u = sample.u.as_deref().map_or_else(|| DVector::zeros(m), DVector::from_column_slice);
            let step = ekf_step(model, &est, &y, &u).map_err(err)?;
            r += &step.innovation.r;
            s += &step.innovation.s;
            est = step.posterior;
        }
        let chol = s.cholesky().ok_or_else(|| HarnessError::Model("accumulated S is not positive definite".into()))?;
        out.push(r.dot(&chol.solve(&r)));
    }
    Ok(out)
}

/// Windows a tampering prover doctored, judged from its own ledger.
pub fn tampered_windows(prover: &ProverSession) -> Vec<u64> {
    let tamper = prover.config().tamper;
    prover
        .retained()
        .filter(|r| match tamper {
            None => false,
            Some(TamperMode::StateReplay { from_window }) | Some(TamperMode::Rekey { from_window, .. }) => r.window >= from_window,
            Some(_) => r.sc_forged || r.intervals.iter().any(|i| i.forged),
        })
        .map(|r| r.window)
        .collect()
}

/// Run one (D, psf, seed) cell end to end.
pub fn run_cell(config: &SweepConfig, model: &StateSpaceModel, d: usize, psf: u8, seed: u64) -> Result<CellResult, HarnessError> {
    let clean = synthetic_stream(model, config.steps(), seed)?;
    let data = match &config.attack {
        Some(a) => inject_attack(&clean, a)?,
        None => clean,
    };
    let mut prover = ProverSession::open_with_model(config.session_config(d, psf, seed), model.clone())?;
    prover.ingest(&data)?;
    let float = float_window_stats(model, &data, config.window_steps)?;
    let t_ucl = prover.t_ucl();
    let mut reg = ComplianceSession::new(prover.id(), prover.keys()).map_err(HarnessError::Config)?;
    let keys = prover.keys();
    let mut rows = Vec::new();
    let mut verify_ms = Vec::new();
    for w in 0..prover.closed_windows() {
        let record = prover.window(w)?;
        let summary = record.summary();
        let artifacts = prover.handle_proof_request(w, ProofKind::FullWindow)?;
        let grant = if config.audit { Some(prover.audit_grant(w)?) } else { None };
        let started = Instant::now();
        let verdict = reg.verify_window(&summary, &artifacts, grant.as_ref(), Some(&keys));
        verify_ms.push(started.elapsed().as_secs_f64() * 1e3);
        reg.record_summary(&summary);
        let t_float = float[w as usize];
        rows.push(WindowRow {
            d,
            psf,
            seed,
            window: w,
            first_t: summary.first_t,
            last_t: summary.last_t,
            attacked: config.attacked(summary.first_t, summary.last_t),
            t_fixed: record.t_stat(),
            t_float,
            t_ucl,
            rho: summary.rho,
            rho_float: t_float > t_ucl,
            knife_edge: (t_float - t_ucl).abs() < config.knife_edge * t_ucl,
            compliant: verdict.compliant,
        });
    }
    let metrics = prover.metrics();
    let proof_ms = |circuit: &str| metrics.proofs.iter().filter(|p| p.circuit == circuit).map(|p| p.prove_ms).collect::<Vec<_>>();
    Ok(CellResult {
        d,
        psf,
        seed,
        t_ucl,
        rows,
        findings: reg.detect_suppression(0..=u64::MAX),
        tampered: tampered_windows(&prover),
        tc_prove_ms: proof_ms("TC"),
        sc_prove_ms: proof_ms("SC"),
        verify_ms,
        tc_witness_bytes: metrics.witnesses.iter().filter(|w| w.interval.is_some()).map(|w| w.witness_bytes).collect(),
        sc_witness_bytes: metrics.witnesses.iter().filter(|w| w.interval.is_none()).map(|w| w.witness_bytes).collect(),
    })
}

/// All cells of the grid, in `(D, psf, seed)` order, run in parallel.
pub fn run_sweep(config: &SweepConfig) -> Result<Vec<CellResult>, HarnessError> {
    config.validate()?;
    if config.windows == 0 || config.seeds.is_empty() {
        return Ok(Vec::new());
    }
    let model = load_model(&SessionConfig::new(&config.model_file, 1, 1, 8))?;
    let cells: Vec<(usize, u8, u64)> = config
        .d_values
        .iter()
        .flat_map(|&d| config.psf_values.iter().flat_map(move |&p| config.seeds.iter().map(move |&s| (d, p, s))))
        .collect();
    cells.par_iter().map(|&(d, psf, seed)| run_cell(config, &model, d, psf, seed)).collect()
}
