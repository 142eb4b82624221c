//! Closed-window records. A record is immutable once closed apart from its
//! proof caches, which are filled on first request.

use crate::session::{ProverError, Result};
use std::sync::OnceLock;
use std::time::Instant;
use zkstar_core::commitments::Digest;
use zkstar_core::kernels::FixedModel;
use zkstar_core::model::StateSpaceModel;
use zkstar_core::proof::{
    fake_transcript, forge, prove, public_projection, ArtifactContext, CircuitKind, KeyPair, ProofArtifact, PublicOutputs, ScWitness,
    TcWitness, Witness, WitnessBundle,
};
use zkstar_core::wire::{ArtifactMetric, AuditGrant, IntervalSummary, ProofKind, WindowSummary, WitnessMetric};

/// Parameters and keys a window was produced under.
pub struct ProvingContext {
    pub model: StateSpaceModel,
    pub fixed: FixedModel,
    pub tc: KeyPair,
    pub sc: KeyPair,
}

pub struct IntervalRecord {
    pub index: u32,
    pub first_t: u64,
    pub witness: TcWitness,
    /// The output was doctored and can only be forged.
    pub forged: bool,
    pub bundle_bytes: usize,
    pub gen_ms: f64,
}

#[derive(Clone)]
struct Timed {
    artifact: ProofArtifact,
    prove_ms: f64,
}

pub struct WindowRecord {
    pub stream_id: String,
    pub window: u64,
    pub first_t: u64,
    pub last_t: u64,
    pub intervals: Vec<IntervalRecord>,
    pub sc: ScWitness,
    pub sc_forged: bool,
    pub sc_bundle_bytes: usize,
    pub sc_gen_ms: f64,
    pub ctx: std::sync::Arc<ProvingContext>,
    tc_proofs: Vec<OnceLock<Timed>>,
    sc_proof: OnceLock<Timed>,
}

impl WindowRecord {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn new(
        stream_id: String,
        window: u64,
        first_t: u64,
        last_t: u64,
        intervals: Vec<IntervalRecord>,
        sc: ScWitness,
        sc_forged: bool,
        sc_gen_ms: f64,
        ctx: std::sync::Arc<ProvingContext>,
    ) -> Self {
        let tc_proofs = intervals.iter().map(|_| OnceLock::new()).collect();
        let sc_bundle_bytes = WitnessBundle::from_sc(&sc).size_bytes();
        Self { stream_id, window, first_t, last_t, intervals, sc, sc_forged, sc_bundle_bytes, sc_gen_ms, ctx, tc_proofs, sc_proof: OnceLock::new() }
    }

    /// Dequantized window statistic as computed by SC.
    pub fn t_stat(&self) -> f64 {
        zkstar_core::fixedpoint::dequantize(self.sc.output.t_stat)
    }

    pub fn summary(&self) -> WindowSummary {
        let intervals = self
            .intervals
            .iter()
            .map(|i| {
                let public_in = i.witness.public_inputs();
                IntervalSummary {
                    interval: i.index,
                    first_t: i.first_t,
                    inputs: public_in[..5].to_vec(),
                    steps: public_in[5..].to_vec(),
                    outputs: digests(&i.witness.output.public_commitments()),
                }
            })
            .collect();
        let o = &self.sc.output;
        WindowSummary {
            stream_id: self.stream_id.clone(),
            window: self.window,
            first_t: self.first_t,
            last_t: self.last_t,
            intervals,
            svd: digests(&self.sc.svd.public_commitments()),
            rho: o.rho,
            eta: o.eta,
            kappa: o.kappa,
        }
    }

    fn tc_artifact(&self, j: usize) -> Result<ProofArtifact> {
        if let Some(t) = self.tc_proofs[j].get() {
            return Ok(t.artifact.clone());
        }
        let rec = &self.intervals[j];
        let ctx = ArtifactContext { stream_id: self.stream_id.clone(), window: self.window, interval: Some(rec.index) };
        let started = Instant::now();
        let witness = Witness::Tc(rec.witness.clone());
        let artifact = if rec.forged {
            let (public_in, public_out) = public_projection(&witness);
            let seed = rec.witness.output.x.as_bytes();
            forge(&self.ctx.tc.vk, CircuitKind::Tc, &ctx, public_in, public_out, fake_transcript(seed))
        } else {
            prove(&self.ctx.tc, &self.ctx.fixed, &witness, &ctx)?
        };
        let prove_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(self.tc_proofs[j].get_or_init(|| Timed { artifact, prove_ms }).artifact.clone())
    }

    fn sc_artifact(&self) -> Result<ProofArtifact> {
        if let Some(t) = self.sc_proof.get() {
            return Ok(t.artifact.clone());
        }
        let ctx = ArtifactContext { stream_id: self.stream_id.clone(), window: self.window, interval: None };
        let started = Instant::now();
        let witness = Witness::Sc(self.sc.clone());
        let artifact = if self.sc_forged {
            let (public_in, _) = public_projection(&witness);
            let o = &self.sc.output;
            let claimed = PublicOutputs::Values { rho: o.rho, eta: o.eta, kappa: o.kappa };
            forge(&self.ctx.sc.vk, CircuitKind::Sc, &ctx, public_in, claimed, fake_transcript(self.sc.svd.u.as_bytes()))
        } else {
            prove(&self.ctx.sc, &self.ctx.fixed, &witness, &ctx)?
        };
        let prove_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(self.sc_proof.get_or_init(|| Timed { artifact, prove_ms }).artifact.clone())
    }

    /// Artifacts for a request: TC intervals in order, then SC.
    pub fn artifacts(&self, kind: ProofKind) -> Result<Vec<ProofArtifact>> {
        match kind {
            ProofKind::TcInterval { interval } => {
                if interval as usize >= self.intervals.len() {
                    return Err(ProverError::UnknownInterval { window: self.window, interval });
                }
                Ok(vec![self.tc_artifact(interval as usize)?])
            }
            ProofKind::Sc => Ok(vec![self.sc_artifact()?]),
            ProofKind::FullWindow => {
                let mut out = (0..self.intervals.len()).map(|j| self.tc_artifact(j)).collect::<Result<Vec<_>>>()?;
                out.push(self.sc_artifact()?);
                Ok(out)
            }
        }
    }

    pub fn audit_grant(&self) -> AuditGrant {
        AuditGrant {
            window: self.window,
            psf: self.ctx.fixed.psf(),
            tc_bundles: self.intervals.iter().map(|i| hex::encode(WitnessBundle::from_tc(&i.witness).to_bytes())).collect(),
            sc_bundle: hex::encode(WitnessBundle::from_sc(&self.sc).to_bytes()),
            model: self.ctx.model.to_weights(serde_json::Map::new()),
        }
    }

    pub fn proof_metrics(&self) -> Vec<ArtifactMetric> {
        let metric = |t: &Timed| ArtifactMetric {
            window: self.window,
            circuit: t.artifact.circuit_kind.as_str().into(),
            interval: t.artifact.interval,
            proof_bytes: t.artifact.size_bytes(),
            prove_ms: t.prove_ms,
        };
        self.tc_proofs.iter().chain(std::iter::once(&self.sc_proof)).filter_map(|c| c.get().map(metric)).collect()
    }

    pub fn witness_metrics(&self) -> Vec<WitnessMetric> {
        let mut out: Vec<WitnessMetric> = self
            .intervals
            .iter()
            .map(|i| WitnessMetric { window: self.window, interval: Some(i.index), witness_bytes: i.bundle_bytes, witness_gen_ms: i.gen_ms })
            .collect();
        out.push(WitnessMetric { window: self.window, interval: None, witness_bytes: self.sc_bundle_bytes, witness_gen_ms: self.sc_gen_ms });
        out
    }

    /// Number of proof artifacts generated so far.
    pub fn proofs_held(&self) -> usize {
        self.tc_proofs.iter().filter(|c| c.get().is_some()).count() + self.sc_proof.get().is_some() as usize
    }

    pub fn dump(&self) -> serde_json::Value {
        serde_json::json!({
            "window": self.window,
            "first_t": self.first_t,
            "last_t": self.last_t,
            "intervals": self.intervals.len(),
            "witness_bytes": self.intervals.iter().map(|i| i.bundle_bytes).sum::<usize>() + self.sc_bundle_bytes,
            "tc_proofs": self.tc_proofs.iter().map(|c| c.get().map(|t| t.artifact.pi.clone())).collect::<Vec<_>>(),
            "sc_proof": self.sc_proof.get().map(|t| t.artifact.pi.clone()),
            "rho": self.sc.output.rho,
        })
    }
}

fn digests(records: &[zkstar_core::commitments::CommitmentRecord]) -> Vec<Digest> {
    records.iter().map(|r| r.digest).collect()
}
