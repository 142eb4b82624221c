use crate::ledger::{IntervalRecord, ProvingContext, WindowRecord};
use nalgebra::{DMatrix, DVector};
use std::collections::VecDeque;
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;
use zkstar_core::commitments::{Digest, NonceAppended, NonceSource};
use zkstar_core::fixedpoint::{fx_add, FixedTensor};
use zkstar_core::kernels::{tc_kernel, FixedModel, TcIntervalState};
use zkstar_core::model::{jacobians, steady_state_covariance, StateSpaceModel, WeightsFile};
use zkstar_core::proof::{
    honest_sc_witness, honest_tc_witness, setup, CircuitDescriptor, CircuitOptions, ProofArtifact, ProofError, WitnessBundle,
    DEFAULT_SECURITY_LEVEL,
};
use zkstar_core::stats::chi2_upper_quantile;
use zkstar_core::wire::{
    IngestAck, KeysResponse, MetricsReport, ProofKind, Sample, SessionConfig, SessionOpened, TamperMode, WindowOutcome, WindowSummary,
};

pub const BUILTIN_REFERENCE: &str = "builtin:reference";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProverError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model: {0}")]
    Model(String),
    #[error("sample rejected: {0}")]
    Sample(String),
    #[error("stream halted after kernel failure: {0}")]
    Halted(String),
    #[error("unknown window {0}")]
    UnknownWindow(u64),
    #[error("window {0} is not closed yet")]
    WindowOpen(u64),
    #[error("window {0} has expired from the witness ledger")]
    Expired(u64),
    #[error("window {window} has no interval {interval}")]
    UnknownInterval { window: u64, interval: u32 },
    #[error(transparent)]
    Proof(#[from] ProofError),
}

pub type Result<T> = std::result::Result<T, ProverError>;

/// Resolve the configured model: inline weights, the builtin system, or a weights file.
pub fn load_model(config: &SessionConfig) -> Result<StateSpaceModel> {
    let err = |e: zkstar_core::model::ModelError| ProverError::Model(e.to_string());
    if let Some(w) = &config.model {
        return w.clone().into_model().map_err(err);
    }
    match config.model_file.as_deref() {
        Some(BUILTIN_REFERENCE) => Ok(StateSpaceModel::reference_nonlinear()),
        Some(path) => WeightsFile::load(std::path::Path::new(path)).map_err(err),
        None => Err(ProverError::Config("model_file or model is required".into())),
    }
}

/// Initial estimate: zero state and the steady-state posterior covariance at the origin.
pub fn initial_estimate(model: &StateSpaceModel) -> (DVector<f64>, DMatrix<f64>) {
    let m = model.state_dim();
    let x0 = DVector::zeros(m);
    let p0 = jacobians(model, &x0, &x0)
        .and_then(|(g, h)| steady_state_covariance(&g, &h, model.q(), model.r()))
        .unwrap_or_else(|_| model.q().clone());
    (x0, p0)
}

pub(crate) fn build_context(model: StateSpaceModel, config: &SessionConfig, t_ucl: f64) -> Result<ProvingContext> {
    let fixed = FixedModel::quantize(&model, config.psf).map_err(|e| ProverError::Config(format!("quantizing model: {e}")))?;
    let opts = CircuitOptions { eps_kc: config.eps_kc, eps_svd: config.eps_svd, ..CircuitOptions::default() };
    let tc_circuit = CircuitDescriptor::tc(&fixed, config.d, &opts)?;
    let sc_circuit = CircuitDescriptor::sc(&fixed, model.obs_dim(), t_ucl, &opts)?;
    let tc = setup(DEFAULT_SECURITY_LEVEL, &tc_circuit, &fixed)?;
    let sc = setup(DEFAULT_SECURITY_LEVEL, &sc_circuit, &fixed)?;
    Ok(ProvingContext { model, fixed, tc, sc })
}

/// One stream's detection pipeline and witness ledger.
pub struct ProverSession {
    config: SessionConfig,
    t_ucl: f64,
    ctx: Arc<ProvingContext>,
    nonces: NonceSource,
    genesis: TcIntervalState,
    /// Start state of the most recently started window.
    window_start: Option<TcIntervalState>,
    last_output: Option<TcIntervalState>,
    pending: Vec<(u64, FixedTensor, FixedTensor)>,
    open_intervals: Vec<IntervalRecord>,
    next_t: Option<u64>,
    next_window: u64,
    ledger: VecDeque<Arc<WindowRecord>>,
    halted: Option<String>,
    failures: Vec<(u64, String)>,
}

impl ProverSession {
    pub fn open(config: SessionConfig) -> Result<Self> {
        let model = load_model(&config)?;
        Self::open_with_model(config, model)
    }

    pub fn open_with_model(config: SessionConfig, model: StateSpaceModel) -> Result<Self> {
        if config.w == 0 || config.d == 0 {
            return Err(ProverError::Config("W and D must be at least 1".into()));
        }
        if !(config.ucl_alpha > 0.0 && config.ucl_alpha < 1.0) {
            return Err(ProverError::Config(format!("ucl_alpha must lie in (0, 1), got {}", config.ucl_alpha)));
        }
        if config.retention == 0 {
            return Err(ProverError::Config("retention must be at least 1".into()));
        }
        if config.stream_id.is_empty() || config.stream_id.contains('|') {
            return Err(ProverError::Config("stream_id must be non-empty and must not contain '|'".into()));
        }
        let dof = config.dof.unwrap_or(model.obs_dim());
        let t_ucl = chi2_upper_quantile(dof, config.ucl_alpha).map_err(|e| ProverError::Config(e.to_string()))?;
        let nonces = match config.nonce_seed {
            Some(s) => NonceSource::seeded(s),
            None => NonceSource::from_os().map_err(|e| ProverError::Config(e.to_string()))?,
        };
        let (x0, p0) = initial_estimate(&model);
        let ctx = build_context(model, &config, t_ucl)?;
        let psf = config.psf;
        let q = |e: zkstar_core::fixedpoint::FixedError| ProverError::Model(e.to_string());
        let x0 = FixedTensor::quantize_vector(&x0, psf).map_err(q)?;
        let p0 = FixedTensor::quantize_matrix(&p0, psf).map_err(q)?;
        let nonce = || nonces.gen_nonce().map_err(|e| ProverError::Config(e.to_string()));
        let genesis = TcIntervalState::genesis(&x0, &p0, ctx.model.obs_dim(), nonce()?, nonce()?)
            .map_err(|e| ProverError::Model(e.to_string()))?;
        Ok(Self {
            config,
            t_ucl,
            ctx: Arc::new(ctx),
            nonces,
            genesis,
            window_start: None,
            last_output: None,
            pending: Vec::new(),
            open_intervals: Vec::new(),
            next_t: None,
            next_window: 0,
            ledger: VecDeque::new(),
            halted: None,
            failures: Vec::new(),
        })
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn id(&self) -> &str {
        &self.config.stream_id
    }

    pub fn t_ucl(&self) -> f64 {
        self.t_ucl
    }

    pub fn model(&self) -> &StateSpaceModel {
        &self.ctx.model
    }

    pub fn opened(&self) -> SessionOpened {
        SessionOpened {
            session_id: self.config.stream_id.clone(),
            stream_id: self.config.stream_id.clone(),
            vk_tc: hex::encode(&self.ctx.tc.vk),
            vk_sc: hex::encode(&self.ctx.sc.vk),
            t_ucl: self.t_ucl,
        }
    }

    pub fn keys(&self) -> KeysResponse {
        KeysResponse {
            stream_id: self.config.stream_id.clone(),
            vk_tc: self.ctx.tc.verifying_key(),
            vk_sc: self.ctx.sc.verifying_key(),
            genesis: self.genesis.public_commitments().iter().map(|r| r.digest).collect(),
            w: self.config.w,
            d: self.config.d,
        }
    }

    /// Windows closed so far, including expired ones.
    pub fn closed_windows(&self) -> u64 {
        self.next_window
    }

    pub fn failures(&self) -> &[(u64, String)] {
        &self.failures
    }

    fn check_sample(&self, s: &Sample, expected: Option<u64>) -> Result<()> {
        if let Some(e) = expected {
            if s.t != e {
                return Err(ProverError::Sample(format!("timestamp {} out of order, expected {e}", s.t)));
            }
        }
        let (d, m) = (self.ctx.model.obs_dim(), self.ctx.model.state_dim());
        if s.y.len() != d {
            return Err(ProverError::Sample(format!("t={}: y has {} entries, expected {d}", s.t, s.y.len())));
        }
        if let Some(u) = &s.u {
            if u.len() != m {
                return Err(ProverError::Sample(format!("t={}: u has {} entries, expected {m}", s.t, u.len())));
            }
        }
        if s.y.iter().chain(s.u.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(ProverError::Sample(format!("t={}: non-finite value", s.t)));
        }
        Ok(())
    }

    /// Buffer a batch. The whole batch is validated before any sample is applied.
    pub fn ingest(&mut self, samples: &[Sample]) -> Result<IngestAck> {
        if let Some(h) = &self.halted {
            return Err(ProverError::Halted(h.clone()));
        }
        let mut expected = self.next_t;
        for s in samples {
            self.check_sample(s, expected)?;
            expected = Some(s.t + 1);
        }
        let psf = self.config.psf;
        let m = self.ctx.model.state_dim();
        let mut closed = Vec::new();
        for s in samples {
            let q = |e: zkstar_core::fixedpoint::FixedError| ProverError::Sample(format!("t={}: {e}", s.t));
            let y = FixedTensor::quantize_slice(vec![s.y.len()], &s.y, psf).map_err(q)?;
            let u = match &s.u {
                Some(u) => FixedTensor::quantize_slice(vec![m], u, psf).map_err(q)?,
                None => FixedTensor::zeros(vec![m], psf).map_err(q)?,
            };
            self.pending.push((s.t, y, u));
            self.next_t = Some(s.t + 1);
            if self.pending.len() == self.config.d {
                if let Err(e) = self.close_interval() {
                    let msg = e.to_string();
                    self.failures.push((s.t, msg.clone()));
                    self.halted = Some(msg);
                    return Err(e);
                }
                if self.open_intervals.len() == self.config.w {
                    match self.close_window() {
                        Ok(w) => closed.push(w),
                        Err(e) => {
                            let msg = e.to_string();
                            self.failures.push((s.t, msg.clone()));
                            self.halted = Some(msg);
                            return Err(e);
                        }
                    }
                }
            }
        }
        Ok(IngestAck { accepted: samples.len(), next_t: self.next_t.unwrap_or(0), closed_windows: closed })
    }

    fn begin_window(&mut self) -> Result<TcIntervalState> {
        let w = self.next_window;
        if let Some(TamperMode::Rekey { from_window, delta }) = self.config.tamper {
            if w == from_window {
                let mut theta = self.ctx.model.theta();
                theta.iter_mut().for_each(|v| *v += delta);
                let doctored = self.ctx.model.with_theta(&theta).map_err(|e| ProverError::Model(e.to_string()))?;
                self.ctx = Arc::new(build_context(doctored, &self.config, self.t_ucl)?);
            }
        }
        let kernel = |e: zkstar_core::kernels::KernelError| ProverError::Model(e.to_string());
        let honest = match &self.last_output {
            None => self.genesis.clone(),
            Some(out) => out.window_start().map_err(kernel)?,
        };
        let start = match (self.config.tamper, &self.window_start) {
            (Some(TamperMode::StateReplay { from_window }), Some(stale)) if w >= from_window => stale.window_start().map_err(kernel)?,
            _ => honest,
        };
        self.window_start = Some(start.clone());
        Ok(start)
    }

    fn close_interval(&mut self) -> Result<()> {
        let started = Instant::now();
        let prev = match self.open_intervals.last() {
            Some(r) => r.witness.output.clone(),
            None => self.begin_window()?,
        };
        let pending = std::mem::take(&mut self.pending);
        let first_t = pending[0].0;
        let ys: Vec<FixedTensor> = pending.iter().map(|p| p.1.clone()).collect();
        let us: Vec<FixedTensor> = pending.iter().map(|p| p.2.clone()).collect();
        let ctx = &self.ctx;
        let eps = ctx.tc.circuit.eps_kc();
        let krc = ctx.tc.circuit.krc_covariance;
        let mut witness = honest_tc_witness(&ctx.model, &ctx.fixed, &prev, &ys, &us, &self.nonces, &eps, krc)?;
        let mut forged = false;
        if let Some(TamperMode::ZeroResiduals { from_t }) = self.config.tamper {
            if pending.iter().any(|p| p.0 >= from_t) {
                let (_, transcript) = tc_kernel(&ctx.fixed, &prev, &witness.inputs, &eps, krc).map_err(ProofError::from)?;
                let mut r = prev.r_acc.open_tensor().map_err(|e| ProverError::Model(e.to_string()))?;
                for (p, step) in pending.iter().zip(&transcript.steps) {
                    if p.0 < from_t {
                        r = fx_add(&r, &step.r).map_err(|e| ProverError::Model(e.to_string()))?;
                    }
                }
                witness.output.r_acc = NonceAppended::tensor(&r, witness.inputs.output_nonces.r_acc);
                forged = true;
            }
        }
        let gen_ms = started.elapsed().as_secs_f64() * 1e3;
        let bundle_bytes = WitnessBundle::from_tc(&witness).size_bytes();
        let index = self.open_intervals.len() as u32;
        self.open_intervals.push(IntervalRecord { index, first_t, witness, forged, bundle_bytes, gen_ms });
        Ok(())
    }

    fn close_window(&mut self) -> Result<u64> {
        let started = Instant::now();
        let intervals = std::mem::take(&mut self.open_intervals);
        let last = intervals.last().expect("window has intervals").witness.output.clone();
        let ctx = self.ctx.clone();
        let c = &ctx.sc.circuit;
        let mut sc = honest_sc_witness(&last.residual_block(), c.p as usize, &c.t_ucl().expect("SC circuit"), &c.eps_svd(), c.sc_modes(), &self.nonces)?;
        let window = self.next_window;
        let mut sc_forged = false;
        if let Some(TamperMode::AlarmFlip { from_window }) = self.config.tamper {
            if window >= from_window && sc.output.rho {
                sc.output.rho = false;
                sc_forged = true;
            }
        }
        let sc_gen_ms = started.elapsed().as_secs_f64() * 1e3;
        let first_t = intervals[0].first_t;
        let last_t = first_t + (self.config.w * self.config.d) as u64 - 1;
        let record = WindowRecord::new(self.config.stream_id.clone(), window, first_t, last_t, intervals, sc, sc_forged, sc_gen_ms, ctx);
        self.last_output = Some(last);
        self.ledger.push_back(Arc::new(record));
        while self.ledger.len() > self.config.retention {
            self.ledger.pop_front();
        }
        self.next_window += 1;
        Ok(window)
    }

    /// Closed window still held by the ledger.
    pub fn window(&self, w: u64) -> Result<Arc<WindowRecord>> {
        if w >= self.next_window {
            return Err(if w == self.next_window { ProverError::WindowOpen(w) } else { ProverError::UnknownWindow(w) });
        }
        let oldest = self.ledger.front().map(|r| r.window).unwrap_or(self.next_window);
        if w < oldest {
            return Err(ProverError::Expired(w));
        }
        Ok(self.ledger[(w - oldest) as usize].clone())
    }

    pub fn summary(&self, w: u64) -> Result<WindowSummary> {
        Ok(self.window(w)?.summary())
    }

    /// Serve a proof request, generating and caching artifacts on first use.
    pub fn handle_proof_request(&self, w: u64, kind: ProofKind) -> Result<Vec<ProofArtifact>> {
        self.window(w)?.artifacts(kind)
    }

    pub fn audit_grant(&self, w: u64) -> Result<zkstar_core::wire::AuditGrant> {
        Ok(self.window(w)?.audit_grant())
    }

    pub fn retained(&self) -> impl Iterator<Item = &Arc<WindowRecord>> {
        self.ledger.iter()
    }

    /// Per-window view of what the ledger holds, proof bytes included.
    pub fn ledger_dump(&self) -> serde_json::Value {
        serde_json::Value::Array(self.ledger.iter().map(|r| r.dump()).collect())
    }

    pub fn metrics(&self) -> MetricsReport {
        let mut proofs = Vec::new();
        let mut witnesses = Vec::new();
        let mut windows = Vec::new();
        for r in &self.ledger {
            proofs.extend(r.proof_metrics());
            witnesses.extend(r.witness_metrics());
            let o = &r.sc.output;
            windows.push(WindowOutcome { window: r.window, rho: o.rho, eta: o.eta, kappa: o.kappa });
        }
        for i in &self.open_intervals {
            witnesses.push(zkstar_core::wire::WitnessMetric {
                window: self.next_window,
                interval: Some(i.index),
                witness_bytes: i.bundle_bytes,
                witness_gen_ms: i.gen_ms,
            });
        }
        let vk_bytes = |k: &zkstar_core::proof::KeyPair| serde_json::to_vec(&k.verifying_key()).map(|v| v.len()).unwrap_or(0);
        MetricsReport {
            session_id: self.config.stream_id.clone(),
            vk_tc_bytes: vk_bytes(&self.ctx.tc),
            vk_sc_bytes: vk_bytes(&self.ctx.sc),
            pk_tc_bytes: self.ctx.tc.pk.len(),
            pk_sc_bytes: self.ctx.sc.pk.len(),
            proofs,
            witnesses,
            windows,
            peak_rss_kb: peak_rss_kb(),
        }
    }

    /// Digests the genesis state commits to.
    pub fn genesis_digests(&self) -> Vec<Digest> {
        self.genesis.public_commitments().iter().map(|r| r.digest).collect()
    }
}

fn peak_rss_kb() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}
