//! Setup / Prove / Verify over the TC and SC circuits.
//!
//! The default backend (`transparent-v1`) binds a proof to its verification
//! key, public projections and a transcript digest, and proves by
//! deterministic re-execution of the kernel. It gives integrity binding and
//! the full interface, but is neither zero-knowledge nor succinct: anyone
//! holding a verification key can recompute `pi` for chosen public values,
//! so only `audit` verification detects a prover that lies about its
//! witness.

mod bundle;
mod honest;

pub use bundle::{BundleIndex, ScWitness, TcWitness, WitnessBundle};
pub use honest::{honest_sc_witness, honest_tc_witness};

use crate::commitments::{hash, hash_parts, Digest, Nonce, NonceAppended};
use crate::fixedpoint::{quantize, FixedScalar, FixedTensor};
use crate::kernels::{
    sc_kernel, tc_kernel, FixedModel, KernelError, KrcCovariance, ScModes, SvdCheckMode, WhiteningOrder,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BACKEND: &str = "transparent-v1";
pub const DEFAULT_SECURITY_LEVEL: u32 = 128;
const VK_TAG: &[u8] = b"zkstar/vk/transparent-v1";
const PI_TAG: &[u8] = b"zkstar/pi/transparent-v1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProofError {
    #[error("malformed circuit: {0}")]
    MalformedCircuit(String),
    #[error("proving key does not match circuit or parameters: {0}")]
    KeyMismatch(String),
    #[error("claimed output differs from re-executed kernel output: {0}")]
    ReexecutionMismatch(String),
    #[error("witness does not fit the circuit: {0}")]
    Witness(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
}

pub type Result<T> = std::result::Result<T, ProofError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CircuitKind {
    Tc,
    Sc,
}

impl CircuitKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            CircuitKind::Tc => "TC",
            CircuitKind::Sc => "SC",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exposure {
    Hash,
    Public,
    Private,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Visibility {
    pub input: Exposure,
    pub output: Exposure,
    pub params: Exposure,
}

impl Visibility {
    pub const TC: Visibility = Visibility { input: Exposure::Hash, output: Exposure::Hash, params: Exposure::Private };
    pub const SC: Visibility = Visibility { input: Exposure::Hash, output: Exposure::Public, params: Exposure::Private };
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CircuitDescriptor {
    pub kind: CircuitKind,
    pub psf: u8,
    /// Timestamps per interval (TC only).
    pub d_steps: Option<u32>,
    pub m: u32,
    pub d: u32,
    pub p: u32,
    /// Raw fixed-point thresholds at `psf`.
    pub eps_kc_raw: i64,
    pub eps_svd_raw: i64,
    pub t_ucl_raw: Option<i64>,
    pub theta_digest: Digest,
    pub visibility: Visibility,
    pub krc_covariance: KrcCovariance,
    pub svd_mode: SvdCheckMode,
    pub whitening: WhiteningOrder,
}

/// Digest of the quantized parameters (including `Q`, `R` and the tanh table).
pub fn theta_digest(model: &FixedModel) -> Digest {
    hash_parts(&[b"zkstar/theta", &model.canonical_bytes()])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitOptions {
    pub eps_kc: f64,
    pub eps_svd: f64,
    pub krc_covariance: KrcCovariance,
    pub svd_mode: SvdCheckMode,
    pub whitening: WhiteningOrder,
}

impl Default for CircuitOptions {
    fn default() -> Self {
        Self {
            eps_kc: 0.1,
            eps_svd: 0.1,
            krc_covariance: KrcCovariance::Prior,
            svd_mode: SvdCheckMode::Reconstruction,
            whitening: WhiteningOrder::Standard,
        }
    }
}

impl CircuitDescriptor {
    fn base(kind: CircuitKind, model: &FixedModel, opts: &CircuitOptions) -> Result<Self> {
        let psf = model.psf();
        let q = |v: f64, what: &str| {
            quantize(v, psf)
                .map(|s| s.raw())
                .map_err(|e| ProofError::MalformedCircuit(format!("{what}: {e}")))
        };
        Ok(Self {
            kind,
            psf,
            d_steps: None,
            m: model.state_dim() as u32,
            d: model.obs_dim() as u32,
            p: model.obs_dim() as u32,
            eps_kc_raw: q(opts.eps_kc, "eps_kc")?,
            eps_svd_raw: q(opts.eps_svd, "eps_svd")?,
            t_ucl_raw: None,
            theta_digest: theta_digest(model),
            visibility: if kind == CircuitKind::Tc { Visibility::TC } else { Visibility::SC },
            krc_covariance: opts.krc_covariance,
            svd_mode: opts.svd_mode,
            whitening: opts.whitening,
        })
    }

    pub fn tc(model: &FixedModel, d_steps: usize, opts: &CircuitOptions) -> Result<Self> {
        let mut c = Self::base(CircuitKind::Tc, model, opts)?;
        c.d_steps = Some(d_steps as u32);
        c.validate()?;
        Ok(c)
    }

    pub fn sc(model: &FixedModel, p: usize, t_ucl: f64, opts: &CircuitOptions) -> Result<Self> {
        let mut c = Self::base(CircuitKind::Sc, model, opts)?;
        c.p = p as u32;
        c.t_ucl_raw = Some(
            quantize(t_ucl, model.psf())
                .map_err(|e| ProofError::MalformedCircuit(format!("T_ucl: {e}")))?
                .raw(),
        );
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ProofError::MalformedCircuit(m.into()));
        if !(crate::fixedpoint::MIN_PSF..=crate::fixedpoint::MAX_PSF).contains(&self.psf) {
            return bad("psf out of range");
        }
        if self.m == 0 || self.d == 0 || self.p == 0 || self.p > self.d {
            return bad("dimensions must satisfy m, d ≥ 1 and 1 ≤ p ≤ d");
        }
        if self.eps_kc_raw <= 0 || self.eps_svd_raw <= 0 {
            return bad("thresholds must be positive");
        }
        match self.kind {
            CircuitKind::Tc => {
                if self.d_steps.is_none_or(|d| d == 0) || self.t_ucl_raw.is_some() {
                    return bad("TC circuits need D ≥ 1 and no UCL");
                }
                if self.visibility != Visibility::TC {
                    return bad("TC visibility must be (hash, hash, private)");
                }
            }
            CircuitKind::Sc => {
                if self.t_ucl_raw.is_none_or(|t| t <= 0) || self.d_steps.is_some() {
                    return bad("SC circuits need a positive UCL and no D");
                }
                if self.visibility != Visibility::SC {
                    return bad("SC visibility must be (hash, public, private)");
                }
            }
        }
        Ok(())
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = b"zkstar/circuit/v1".to_vec();
        out.push(match self.kind {
            CircuitKind::Tc => 0,
            CircuitKind::Sc => 1,
        });
        out.push(self.psf);
        out.extend_from_slice(&self.d_steps.unwrap_or(0).to_le_bytes());
        for v in [self.m, self.d, self.p] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.eps_kc_raw.to_le_bytes());
        out.extend_from_slice(&self.eps_svd_raw.to_le_bytes());
        out.extend_from_slice(&self.t_ucl_raw.unwrap_or(0).to_le_bytes());
        out.extend_from_slice(&self.theta_digest.0);
        let exposure = |e: Exposure| match e {
            Exposure::Hash => 0u8,
            Exposure::Public => 1,
            Exposure::Private => 2,
        };
        out.extend_from_slice(&[
            exposure(self.visibility.input),
            exposure(self.visibility.output),
            exposure(self.visibility.params),
            self.krc_covariance as u8,
            self.svd_mode as u8,
            self.whitening as u8,
        ]);
        out
    }

    pub fn eps_kc(&self) -> FixedScalar {
        FixedScalar::from_raw(self.eps_kc_raw, self.psf).expect("validated")
    }

    pub fn eps_svd(&self) -> FixedScalar {
        FixedScalar::from_raw(self.eps_svd_raw, self.psf).expect("validated")
    }

    pub fn t_ucl(&self) -> Option<FixedScalar> {
        self.t_ucl_raw.map(|r| FixedScalar::from_raw(r, self.psf).expect("validated"))
    }

    pub fn sc_modes(&self) -> ScModes {
        ScModes { svd: self.svd_mode, whitening: self.whitening }
    }
}

/// Publishable half of a key pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyingKey {
    pub backend: String,
    #[serde(with = "hex::serde")]
    pub vk: Vec<u8>,
    pub circuit: CircuitDescriptor,
    pub security_level: u32,
}

impl VerifyingKey {
    pub fn digest_hex(&self) -> String {
        hex::encode(&self.vk)
    }

    /// The key is internally consistent with its circuit description.
    pub fn is_well_formed(&self) -> bool {
        self.backend == BACKEND && self.circuit.validate().is_ok() && self.vk == derive_vk(self.security_level, &self.circuit)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyPair {
    pub pk: Vec<u8>,
    pub vk: Vec<u8>,
    pub circuit: CircuitDescriptor,
    pub security_level: u32,
    pub created_at: u64,
}

impl KeyPair {
    pub fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey { backend: BACKEND.into(), vk: self.vk.clone(), circuit: self.circuit.clone(), security_level: self.security_level }
    }

    /// The verification key embedded at the front of the proving key.
    pub fn vk_from_pk(pk: &[u8]) -> Option<&[u8]> {
        pk.get(..32)
    }
}

fn derive_vk(security_level: u32, circuit: &CircuitDescriptor) -> Vec<u8> {
    hash_parts(&[VK_TAG, &circuit.canonical_bytes(), &circuit.theta_digest.0, &security_level.to_le_bytes()])
        .0
        .to_vec()
}

pub fn setup(security_level: u32, circuit: &CircuitDescriptor, theta: &FixedModel) -> Result<KeyPair> {
    circuit.validate()?;
    if theta_digest(theta) != circuit.theta_digest {
        return Err(ProofError::MalformedCircuit("circuit does not describe these parameters".into()));
    }
    if theta.psf() != circuit.psf || theta.state_dim() as u32 != circuit.m || theta.obs_dim() as u32 != circuit.d {
        return Err(ProofError::MalformedCircuit("parameter shape or psf disagrees with circuit".into()));
    }
    let vk = derive_vk(security_level, circuit);
    let mut pk = vk.clone();
    pk.extend_from_slice(&circuit.canonical_bytes());
    let created_at = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    Ok(KeyPair { pk, vk, circuit: circuit.clone(), security_level, created_at })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PublicOutputs {
    Values { rho: bool, eta: bool, kappa: bool },
    Hashed(Vec<Digest>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProofArtifact {
    pub backend: String,
    pub circuit_kind: CircuitKind,
    pub stream_id: String,
    pub window: u64,
    /// Interval index within the window (TC only).
    pub interval: Option<u32>,
    pub vk_digest: String,
    pub public_inputs: Vec<Digest>,
    pub public_outputs: PublicOutputs,
    pub pi: String,
    pub transcript_digest: Digest,
}

impl ProofArtifact {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("artifact serializes")
    }

    pub fn size_bytes(&self) -> usize {
        self.to_json().len()
    }
}

/// Where the artifact sits in a stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArtifactContext {
    pub stream_id: String,
    pub window: u64,
    pub interval: Option<u32>,
}

/// Full witness handed to `prove`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Witness {
    Tc(TcWitness),
    Sc(ScWitness),
}

fn public_digests_out(out: &PublicOutputs) -> Vec<u8> {
    match out {
        PublicOutputs::Values { rho, eta, kappa } => vec![b'v', *rho as u8, *eta as u8, *kappa as u8],
        PublicOutputs::Hashed(ds) => {
            let mut b = vec![b'h'];
            for d in ds {
                b.extend_from_slice(&d.0);
            }
            b
        }
    }
}

fn compute_pi(vk: &[u8], kind: CircuitKind, ctx: &ArtifactContext, public_in: &[Digest], public_out: &PublicOutputs, transcript: &Digest) -> String {
    let mut ins = Vec::with_capacity(32 * public_in.len());
    for d in public_in {
        ins.extend_from_slice(&d.0);
    }
    let ctx_bytes = format!("{}|{}|{}|{}", kind.as_str(), ctx.stream_id, ctx.window, ctx.interval.map(|i| i as i64).unwrap_or(-1));
    hash_parts(&[PI_TAG, vk, ctx_bytes.as_bytes(), &(public_in.len() as u32).to_le_bytes(), &ins, &public_digests_out(public_out), &transcript.0]).to_hex()
}

/// Public projections of a witness per the circuit's visibility mode.
pub fn public_projection(witness: &Witness) -> (Vec<Digest>, PublicOutputs) {
    match witness {
        Witness::Tc(w) => (w.public_inputs(), PublicOutputs::Hashed(w.output.public_commitments().iter().map(|r| r.digest).collect())),
        Witness::Sc(w) => (
            w.public_inputs(),
            PublicOutputs::Values { rho: w.output.rho, eta: w.output.eta, kappa: w.output.kappa },
        ),
    }
}

fn salted(tag: &[u8], salt: &Nonce, inner: &Digest) -> Digest {
    hash_parts(&[tag, &salt.0, &inner.0])
}

/// Re-execute the kernel a witness claims to come from and return the transcript digest.
fn reexecute(circuit: &CircuitDescriptor, theta: &FixedModel, witness: &Witness) -> Result<Digest> {
    match (circuit.kind, witness) {
        (CircuitKind::Tc, Witness::Tc(w)) => {
            let want = circuit.d_steps.unwrap_or(0) as usize;
            if w.inputs.steps.len() != want {
                return Err(ProofError::Witness(format!("interval has {} steps, circuit expects {want}", w.inputs.steps.len())));
            }
            let (out, transcript) = tc_kernel(theta, &w.prev, &w.inputs, &circuit.eps_kc(), circuit.krc_covariance)?;
            if out != w.output {
                return Err(ProofError::ReexecutionMismatch("TC output state".into()));
            }
            Ok(salted(b"tc", &w.inputs.output_nonces.x, &transcript.digest()))
        }
        (CircuitKind::Sc, Witness::Sc(w)) => {
            let t_ucl = circuit.t_ucl().expect("validated SC circuit");
            let u = w.svd.u.open_tensor().map_err(KernelError::from)?;
            if u.rows() != circuit.d as usize || u.cols() != circuit.p as usize {
                return Err(ProofError::Witness("U shape disagrees with circuit".into()));
            }
            let out = sc_kernel(&w.block, &w.svd, &t_ucl, &circuit.eps_svd(), circuit.sc_modes())?;
            if out != w.output {
                return Err(ProofError::ReexecutionMismatch(format!(
                    "SC outputs: claimed (ρ={}, η={}, κ={}), recomputed (ρ={}, η={}, κ={})",
                    w.output.rho, w.output.eta, w.output.kappa, out.rho, out.eta, out.kappa
                )));
            }
            let salt = w.svd.u.nonce().map_err(KernelError::from)?;
            Ok(salted(b"sc", &salt, &out.transcript_digest()))
        }
        _ => Err(ProofError::Witness(format!("witness kind does not match {} circuit", circuit.kind.as_str()))),
    }
}

fn check_key(pk: &[u8], theta: &FixedModel, circuit: &CircuitDescriptor, security_level: u32) -> Result<()> {
    let vk = KeyPair::vk_from_pk(pk).ok_or_else(|| ProofError::KeyMismatch("proving key too short".into()))?;
    if &pk[32..] != circuit.canonical_bytes().as_slice() || vk != derive_vk(security_level, circuit).as_slice() {
        return Err(ProofError::KeyMismatch("proving key was generated for a different circuit".into()));
    }
    if theta_digest(theta) != circuit.theta_digest {
        return Err(ProofError::KeyMismatch("parameters differ from those bound at setup".into()));
    }
    Ok(())
}

pub fn prove(keys: &KeyPair, theta: &FixedModel, witness: &Witness, ctx: &ArtifactContext) -> Result<ProofArtifact> {
    check_key(&keys.pk, theta, &keys.circuit, keys.security_level)?;
    let transcript = reexecute(&keys.circuit, theta, witness)?;
    let (public_in, public_out) = public_projection(witness);
    Ok(assemble(&keys.vk, keys.circuit.kind, ctx, public_in, public_out, transcript))
}

fn assemble(vk: &[u8], kind: CircuitKind, ctx: &ArtifactContext, public_in: Vec<Digest>, public_out: PublicOutputs, transcript: Digest) -> ProofArtifact {
    ProofArtifact {
        backend: BACKEND.into(),
        circuit_kind: kind,
        stream_id: ctx.stream_id.clone(),
        window: ctx.window,
        interval: ctx.interval,
        vk_digest: hex::encode(vk),
        pi: compute_pi(vk, kind, ctx, &public_in, &public_out, &transcript),
        public_inputs: public_in,
        public_outputs: public_out,
        transcript_digest: transcript,
    }
}

/// Adversary path: bind arbitrary claimed public values without re-execution.
pub fn forge(vk: &[u8], kind: CircuitKind, ctx: &ArtifactContext, public_in: Vec<Digest>, public_out: PublicOutputs, transcript: Digest) -> ProofArtifact {
    assemble(vk, kind, ctx, public_in, public_out, transcript)
}

/// A plausible-looking transcript digest for a forged artifact.
pub fn fake_transcript(seed: &[u8]) -> Digest {
    hash(seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictReason {
    Ok,
    DigestMismatch,
    ReexecMismatch,
    KeyMismatch,
    Malformed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub phi: bool,
    pub reason: VerdictReason,
}

impl Verdict {
    pub const OK: Verdict = Verdict { phi: true, reason: VerdictReason::Ok };

    pub fn fail(reason: VerdictReason) -> Self {
        Verdict { phi: false, reason }
    }
}

/// Verification mode. `Audit` needs the opened witness and the parameters.
pub enum VerifyMode<'a> {
    Commitment,
    Audit { witness: &'a Witness, theta: &'a FixedModel },
}

/// Total verification: every failure is a verdict, never an error.
pub fn verify(vk: &VerifyingKey, artifact: &ProofArtifact, public_in: &[Digest], public_out: &PublicOutputs, mode: VerifyMode<'_>) -> Verdict {
    if artifact.backend != BACKEND || vk.backend != BACKEND {
        return Verdict::fail(VerdictReason::Malformed);
    }
    if artifact.circuit_kind != vk.circuit.kind || artifact.pi.len() != 64 || hex::decode(&artifact.pi).is_err() {
        return Verdict::fail(VerdictReason::Malformed);
    }
    if (artifact.circuit_kind == CircuitKind::Tc) != artifact.interval.is_some() {
        return Verdict::fail(VerdictReason::Malformed);
    }
    if !vk.is_well_formed() || artifact.vk_digest != vk.digest_hex() {
        return Verdict::fail(VerdictReason::KeyMismatch);
    }
    let shape_ok = match (&artifact.public_outputs, artifact.circuit_kind) {
        (PublicOutputs::Hashed(d), CircuitKind::Tc) => d.len() == crate::commitments::CHAIN_LABELS.len(),
        (PublicOutputs::Values { .. }, CircuitKind::Sc) => true,
        _ => false,
    };
    if !shape_ok {
        return Verdict::fail(VerdictReason::Malformed);
    }
    if artifact.public_inputs != public_in || &artifact.public_outputs != public_out {
        return Verdict::fail(VerdictReason::DigestMismatch);
    }
    let ctx = ArtifactContext { stream_id: artifact.stream_id.clone(), window: artifact.window, interval: artifact.interval };
    let expected = compute_pi(&vk.vk, artifact.circuit_kind, &ctx, public_in, public_out, &artifact.transcript_digest);
    if expected != artifact.pi {
        return Verdict::fail(VerdictReason::DigestMismatch);
    }
    if let VerifyMode::Audit { witness, theta } = mode {
        if theta_digest(theta) != vk.circuit.theta_digest {
            return Verdict::fail(VerdictReason::KeyMismatch);
        }
        let (w_in, w_out) = public_projection(witness);
        if w_in != artifact.public_inputs || w_out != artifact.public_outputs {
            return Verdict::fail(VerdictReason::ReexecMismatch);
        }
        match reexecute(&vk.circuit, theta, witness) {
            Ok(t) if t == artifact.transcript_digest => {}
            Ok(_) | Err(ProofError::ReexecutionMismatch(_)) => return Verdict::fail(VerdictReason::ReexecMismatch),
            Err(_) => return Verdict::fail(VerdictReason::Malformed),
        }
    }
    Verdict::OK
}

/// Zero-nonce commitment of a public control vector.
pub fn public_u_digest(u: &FixedTensor) -> Digest {
    NonceAppended::tensor(u, Nonce::ZERO).digest("u")
}

#[cfg(test)]
mod tests;
