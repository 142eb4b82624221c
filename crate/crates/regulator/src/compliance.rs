use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use zkstar_core::commitments::{Digest, Nonce, NonceAppended, CHAIN_LABELS};
use zkstar_core::fixedpoint::FixedTensor;
use zkstar_core::kernels::FixedModel;
use zkstar_core::proof::{
    theta_digest, verify, CircuitKind, ProofArtifact, PublicOutputs, Verdict, VerdictReason, VerifyMode, VerifyingKey, Witness,
    WitnessBundle,
};
use zkstar_core::wire::{AuditGrant, KeysResponse, WindowSummary};

/// Which part of the consistency relation a failure breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Clause {
    ModelReexecution,
    HashAlignment,
    StatisticBound,
    KeyInvariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finding {
    pub utility: String,
    pub window: u64,
    pub clause: Clause,
    pub evidence: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowVerdict {
    pub window: u64,
    /// All artifacts and summary fields were present and well shaped.
    pub complete: bool,
    pub keys_ok: bool,
    pub chain_ok: bool,
    pub tc_ok: Vec<bool>,
    pub sc_ok: bool,
    /// Per-artifact verification results, TC intervals then SC.
    pub phi: Vec<Verdict>,
    pub audited: bool,
    pub summary_rho: bool,
    pub compliant: bool,
    pub suppression_flag: bool,
    pub clauses: Vec<Clause>,
    pub reasons: Vec<String>,
    #[serde(skip)]
    evidence: Vec<(Clause, String)>,
    pub latency_ms: Option<f64>,
}

impl WindowVerdict {
    fn empty(window: u64) -> Self {
        Self {
            window,
            complete: true,
            keys_ok: true,
            chain_ok: true,
            tc_ok: Vec::new(),
            sc_ok: false,
            phi: Vec::new(),
            audited: false,
            summary_rho: false,
            compliant: false,
            suppression_flag: false,
            clauses: Vec::new(),
            reasons: Vec::new(),
            evidence: Vec::new(),
            latency_ms: None,
        }
    }

    /// Verdict for a window that could not be fully fetched; never compliant.
    pub fn incomplete(window: u64, reason: impl Into<String>) -> Self {
        let mut v = Self::empty(window);
        v.complete = false;
        v.reasons.push(reason.into());
        v
    }

    fn fail(&mut self, clause: Clause, reason: String, evidence: impl IntoIterator<Item = String>) {
        if !self.clauses.contains(&clause) {
            self.clauses.push(clause);
        }
        self.evidence.extend(evidence.into_iter().map(|e| (clause, e)));
        self.reasons.push(reason);
    }
}

fn digests_hex(ds: &[Digest]) -> Vec<String> {
    ds.iter().map(Digest::to_hex).collect()
}

fn clause_for(reason: VerdictReason, kind: CircuitKind) -> Clause {
    match (reason, kind) {
        (VerdictReason::KeyMismatch, _) => Clause::KeyInvariance,
        (VerdictReason::ReexecMismatch, _) => Clause::ModelReexecution,
        (_, CircuitKind::Tc) => Clause::HashAlignment,
        (_, CircuitKind::Sc) => Clause::StatisticBound,
    }
}

/// Decoded audit material for one window.
struct Audit {
    theta: FixedModel,
    tc: Vec<Witness>,
    sc: Witness,
}

fn decode_grant(grant: &AuditGrant, window: u64, pinned: &VerifyingKey) -> Result<Audit, String> {
    if grant.window != window {
        return Err(format!("audit grant is for window {}", grant.window));
    }
    let model = grant.model.clone().into_model().map_err(|e| format!("audit model: {e}"))?;
    let theta = FixedModel::quantize(&model, grant.psf).map_err(|e| format!("audit model: {e}"))?;
    if theta_digest(&theta) != pinned.circuit.theta_digest {
        return Err("audit parameters differ from the pinned circuit".into());
    }
    let bundle = |h: &str| -> Result<WitnessBundle, String> {
        WitnessBundle::from_bytes(&hex::decode(h).map_err(|e| format!("bundle hex: {e}"))?)
    };
    let tc = grant.tc_bundles.iter().map(|b| bundle(b)?.to_tc().map(Witness::Tc)).collect::<Result<Vec<_>, _>>()?;
    let sc = Witness::Sc(bundle(&grant.sc_bundle)?.to_sc()?);
    Ok(Audit { theta, tc, sc })
}

/// A regulator's view of one utility stream, with keys pinned at creation.
#[derive(Debug, Clone)]
pub struct ComplianceSession {
    pub utility: String,
    pinned: KeysResponse,
    reset: Vec<Digest>,
    /// Last-interval output digests per window, learned from summaries.
    outputs: BTreeMap<u64, Vec<Digest>>,
    key_changes: Vec<(u64, String, String)>,
    verdicts: BTreeMap<u64, WindowVerdict>,
}

impl ComplianceSession {
    pub fn new(utility: impl Into<String>, keys: KeysResponse) -> Result<Self, String> {
        for vk in [&keys.vk_tc, &keys.vk_sc] {
            if !vk.is_well_formed() {
                return Err("published verifying key is malformed".into());
            }
        }
        if keys.vk_tc.circuit.kind != CircuitKind::Tc || keys.vk_sc.circuit.kind != CircuitKind::Sc || keys.genesis.len() != 5 {
            return Err("published keys have the wrong shape".into());
        }
        let c = &keys.vk_tc.circuit;
        let d = c.d as usize;
        let zeros = |shape: Vec<usize>| FixedTensor::zeros(shape, c.psf).map_err(|e| e.to_string());
        let reset = vec![
            NonceAppended::tensor(&zeros(vec![d])?, Nonce::ZERO).digest(CHAIN_LABELS[2]),
            NonceAppended::tensor(&zeros(vec![d, d])?, Nonce::ZERO).digest(CHAIN_LABELS[3]),
            NonceAppended::bit(true, Nonce::ZERO).digest(CHAIN_LABELS[4]),
        ];
        Ok(Self { utility: utility.into(), pinned: keys, reset, outputs: BTreeMap::new(), key_changes: Vec::new(), verdicts: BTreeMap::new() })
    }

    pub fn pinned(&self) -> &KeysResponse {
        &self.pinned
    }

    pub fn stream_id(&self) -> &str {
        &self.pinned.stream_id
    }

    /// Compare freshly published keys with the pinned ones; any change is recorded against `window`.
    pub fn observe_keys(&mut self, keys: &KeysResponse, window: u64) -> bool {
        let same = keys.vk_tc == self.pinned.vk_tc && keys.vk_sc == self.pinned.vk_sc && keys.genesis == self.pinned.genesis;
        if !same {
            self.key_changes.push((window, self.pinned.vk_tc.digest_hex(), keys.vk_tc.digest_hex()));
        }
        same
    }

    /// Remember a window's final output digests for linking the next window.
    pub fn record_summary(&mut self, s: &WindowSummary) {
        if let Some(last) = s.intervals.last() {
            if last.outputs.len() == 5 {
                self.outputs.insert(s.window, last.outputs.clone());
            }
        }
    }

    pub fn knows_outputs(&self, window: u64) -> bool {
        self.outputs.contains_key(&window)
    }

    pub fn verdict(&self, window: u64) -> Option<&WindowVerdict> {
        self.verdicts.get(&window)
    }

    pub fn verdicts(&self) -> impl Iterator<Item = &WindowVerdict> {
        self.verdicts.values()
    }

    pub fn store(&mut self, v: WindowVerdict) {
        self.verdicts.insert(v.window, v);
    }

    /// Check one window: key invariance, commitment alignment, every proof, and the SC policy bits.
    pub fn verify_window(
        &mut self,
        summary: &WindowSummary,
        artifacts: &[ProofArtifact],
        audit: Option<&AuditGrant>,
        observed_keys: Option<&KeysResponse>,
    ) -> WindowVerdict {
        let w = summary.window;
        let mut v = WindowVerdict::empty(w);
        v.summary_rho = summary.rho;
        let (ww, dd) = (self.pinned.w, self.pinned.d);

        if let Some(k) = observed_keys {
            self.observe_keys(k, w);
        }
        if let Some((at, old, new)) = self.key_changes.iter().find(|(at, _, _)| *at <= w).cloned() {
            v.keys_ok = false;
            v.fail(Clause::KeyInvariance, format!("published keys changed at window {at}"), [old, new]);
        }

        if summary.stream_id != self.pinned.stream_id {
            v.complete = false;
            v.reasons.push(format!("summary is for stream {}", summary.stream_id));
        }
        let shaped = summary.intervals.len() == ww
            && summary.svd.len() == 2
            && summary
                .intervals
                .iter()
                .enumerate()
                .all(|(j, i)| i.interval as usize == j && i.inputs.len() == 5 && i.outputs.len() == 5 && i.steps.len() == 5 * dd);
        if !shaped {
            v.complete = false;
            v.reasons.push("summary does not match the pinned window geometry".into());
            return self.finish(v);
        }

        // Commitment alignment.
        let first = &summary.intervals[0].inputs;
        let carried: Option<Vec<Digest>> =
            if w == 0 { Some(self.pinned.genesis[..2].to_vec()) } else { self.outputs.get(&(w - 1)).map(|o| o[..2].to_vec()) };
        match carried {
            Some(c) if c[..] != first[..2] => {
                v.chain_ok = false;
                v.fail(
                    Clause::HashAlignment,
                    "window input state differs from the previous window's output".into(),
                    digests_hex(&c).into_iter().chain(digests_hex(&first[..2])),
                );
            }
            Some(_) => {}
            None => v.reasons.push("previous window unavailable; cross-window link not checked".into()),
        }
        if first[2..] != self.reset[..] {
            v.chain_ok = false;
            v.fail(Clause::HashAlignment, "window does not start from reset accumulators".into(), digests_hex(&first[2..]));
        }
        for pair in summary.intervals.windows(2) {
            if pair[0].outputs != pair[1].inputs {
                v.chain_ok = false;
                v.fail(
                    Clause::HashAlignment,
                    format!("interval {} output does not feed interval {}", pair[0].interval, pair[1].interval),
                    digests_hex(&pair[0].outputs).into_iter().chain(digests_hex(&pair[1].inputs)),
                );
            }
        }

        // Artifacts.
        let tc_arts: Vec<&ProofArtifact> = artifacts.iter().filter(|a| a.circuit_kind == CircuitKind::Tc).collect();
        let sc_arts: Vec<&ProofArtifact> = artifacts.iter().filter(|a| a.circuit_kind == CircuitKind::Sc).collect();
        if tc_arts.len() != ww || sc_arts.len() != 1 {
            v.complete = false;
            v.reasons.push(format!("expected {ww} TC and 1 SC artifacts, got {} and {}", tc_arts.len(), sc_arts.len()));
            return self.finish(v);
        }
        let decoded = match audit.map(|g| decode_grant(g, w, &self.pinned.vk_tc)) {
            Some(Ok(a)) if a.tc.len() == ww => Some(a),
            Some(Ok(_)) => {
                v.fail(Clause::ModelReexecution, "audit grant has the wrong number of interval witnesses".into(), []);
                None
            }
            Some(Err(e)) => {
                v.fail(Clause::ModelReexecution, format!("audit grant unusable: {e}"), []);
                None
            }
            None => None,
        };
        v.audited = decoded.is_some();

        let context_ok = |a: &ProofArtifact, interval: Option<u32>| a.stream_id == self.pinned.stream_id && a.window == w && a.interval == interval;
        for (j, i) in summary.intervals.iter().enumerate() {
            let a = tc_arts.iter().find(|a| a.interval == Some(j as u32)).copied().unwrap_or(tc_arts[j]);
            let public_in: Vec<Digest> = i.inputs.iter().chain(&i.steps).copied().collect();
            let public_out = PublicOutputs::Hashed(i.outputs.clone());
            let verdict = if !context_ok(a, Some(j as u32)) {
                Verdict::fail(VerdictReason::Malformed)
            } else {
                let mode = match &decoded {
                    Some(d) => VerifyMode::Audit { witness: &d.tc[j], theta: &d.theta },
                    None => VerifyMode::Commitment,
                };
                verify(&self.pinned.vk_tc, a, &public_in, &public_out, mode)
            };
            if !verdict.phi {
                v.fail(
                    clause_for(verdict.reason, CircuitKind::Tc),
                    format!("TC interval {j}: {:?}", verdict.reason),
                    [a.pi.clone(), a.transcript_digest.to_hex()],
                );
            }
            v.tc_ok.push(verdict.phi);
            v.phi.push(verdict);
        }

        let last = &summary.intervals[ww - 1].outputs;
        let sc_in: Vec<Digest> = last[2..].iter().chain(&summary.svd).copied().collect();
        let sc_out = PublicOutputs::Values { rho: summary.rho, eta: summary.eta, kappa: summary.kappa };
        let a = sc_arts[0];
        let verdict = if !context_ok(a, None) {
            Verdict::fail(VerdictReason::Malformed)
        } else {
            let mode = match &decoded {
                Some(d) => VerifyMode::Audit { witness: &d.sc, theta: &d.theta },
                None => VerifyMode::Commitment,
            };
            verify(&self.pinned.vk_sc, a, &sc_in, &sc_out, mode)
        };
        if !verdict.phi {
            v.fail(clause_for(verdict.reason, CircuitKind::Sc), format!("SC: {:?}", verdict.reason), [a.pi.clone(), a.transcript_digest.to_hex()]);
        }
        if !summary.eta || !summary.kappa {
            v.fail(Clause::StatisticBound, format!("SC reports η={} κ={}", summary.eta as u8, summary.kappa as u8), digests_hex(&sc_in));
        }
        v.phi.push(verdict);
        v.sc_ok = verdict.phi && summary.eta && summary.kappa && v.chain_ok && v.tc_ok.iter().all(|&b| b);
        self.finish(v)
    }

    fn finish(&mut self, mut v: WindowVerdict) -> WindowVerdict {
        v.compliant = v.complete && v.keys_ok && v.chain_ok && v.sc_ok && v.tc_ok.iter().all(|&b| b) && v.clauses.is_empty();
        let structural = v.clauses.iter().any(|c| matches!(c, Clause::KeyInvariance | Clause::HashAlignment | Clause::ModelReexecution));
        v.suppression_flag = !v.clauses.is_empty() && (structural || !v.summary_rho);
        self.verdicts.insert(v.window, v.clone());
        v
    }

    /// Findings for every flagged window in `range`, one per broken clause.
    pub fn detect_suppression(&self, range: std::ops::RangeInclusive<u64>) -> Vec<Finding> {
        let mut out = Vec::new();
        for v in self.verdicts.range(range).map(|(_, v)| v).filter(|v| v.suppression_flag) {
            let mut clauses = v.clauses.clone();
            clauses.sort();
            for c in clauses {
                out.push(Finding {
                    utility: self.utility.clone(),
                    window: v.window,
                    clause: c,
                    evidence: v.evidence.iter().filter(|(k, _)| *k == c).map(|(_, e)| e.clone()).collect(),
                });
            }
        }
        out
    }
}

/// Findings as JSON lines.
pub fn findings_jsonl(findings: &[Finding]) -> String {
    findings.iter().map(|f| serde_json::to_string(f).expect("finding serializes") + "\n").collect()
}
