//! Fixed-point detection kernels.
//!
//! * `krc_kernel` checks a Kalman gain against `K S = P Hᵀ`
//! * `ekf_kernel` runs one predict/update step
//! * `tc_kernel` chains `D` steps into one interval and accumulates the residual block
//! * `svd_kernel` checks an offline decomposition of the window covariance
//! * `sc_kernel` whitens the window residual and applies the χ² alarm test
//!
//! Heavy linear algebra (gains, decompositions) is computed outside and only
//! validated here.

mod fixed_model;
mod svd;
mod witness;

pub use fixed_model::{FixedModel, TanhLut, TANH_LUT_DENSITY, TANH_LUT_SIZE};
pub use svd::*;
pub use witness::honest_step_input;

use crate::commitments::{hash_parts, CommitError, CommitmentRecord, Digest, Nonce, NonceAppended, CHAIN_LABELS};
use crate::fixedpoint::{fx_add, fx_frob_sq, fx_matmul, fx_sub, fx_symmetrize, FixedError, FixedScalar, FixedTensor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error(transparent)]
    Fixed(#[from] FixedError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("malformed witness: {0}")]
    MalformedWitness(String),
    #[error("offline computation failed: {0}")]
    Offline(String),
}

impl From<CommitError> for KernelError {
    fn from(e: CommitError) -> Self {
        KernelError::MalformedWitness(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KernelError>;

/// Which covariance the gain check compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KrcCovariance {
    #[default]
    Prior,
    Posterior,
}

impl KrcCovariance {
    pub fn as_str(&self) -> &'static str {
        match self {
            KrcCovariance::Prior => "prior",
            KrcCovariance::Posterior => "posterior",
        }
    }
}

/// `1` iff `‖K S − P Hᵀ‖²_F < eps`.
pub fn krc_kernel(k: &FixedTensor, s: &FixedTensor, h: &FixedTensor, p: &FixedTensor, eps: &FixedScalar) -> Result<bool> {
    if eps.raw() <= 0 {
        return Err(KernelError::Dimension("eps must be positive".into()));
    }
    let err = fx_frob_sq(&fx_sub(&fx_matmul(k, s)?, &fx_matmul(p, &h.transpose())?)?)?;
    Ok(err.raw() < eps.raw() && err.psf() == eps.psf())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EkfKernelInput {
    pub x_prev: FixedTensor,
    pub p_prev: FixedTensor,
    pub y: FixedTensor,
    /// Public control input.
    pub u: FixedTensor,
    pub g: FixedTensor,
    pub h: FixedTensor,
    pub k: FixedTensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EkfKernelOutput {
    pub x_prior: FixedTensor,
    pub p_prior: FixedTensor,
    pub r: FixedTensor,
    pub s: FixedTensor,
    pub kappa: bool,
    pub x_post: FixedTensor,
    pub p_post: FixedTensor,
}

fn expect_shape(t: &FixedTensor, shape: &[usize], what: &str) -> Result<()> {
    if t.shape() != shape {
        return Err(KernelError::Dimension(format!("{what} must have shape {shape:?}, got {:?}", t.shape())));
    }
    Ok(())
}

/// `sym(G P Gᵀ + Q)` in fixed point.
pub fn fx_propagate_covariance(p: &FixedTensor, g: &FixedTensor, q: &FixedTensor) -> Result<FixedTensor> {
    Ok(fx_symmetrize(&fx_add(&fx_matmul(&fx_matmul(g, p)?, &g.transpose())?, q)?)?)
}

/// `sym(H P Hᵀ + R)` in fixed point.
pub fn fx_innovation_covariance(p: &FixedTensor, h: &FixedTensor, r: &FixedTensor) -> Result<FixedTensor> {
    Ok(fx_symmetrize(&fx_add(&fx_matmul(&fx_matmul(h, p)?, &h.transpose())?, r)?)?)
}

pub fn ekf_kernel(model: &FixedModel, input: &EkfKernelInput, eps_kc: &FixedScalar, krc: KrcCovariance) -> Result<EkfKernelOutput> {
    let (m, d) = (model.state_dim(), model.obs_dim());
    expect_shape(&input.x_prev, &[m], "x_prev")?;
    expect_shape(&input.p_prev, &[m, m], "P_prev")?;
    expect_shape(&input.y, &[d], "y")?;
    expect_shape(&input.g, &[m, m], "G")?;
    expect_shape(&input.h, &[d, m], "H")?;
    expect_shape(&input.k, &[m, d], "K")?;

    let x_prior = model.g(&input.x_prev, &input.u)?;
    let r = fx_sub(&input.y, &model.h(&x_prior)?)?;
    let p_prior = fx_propagate_covariance(&input.p_prev, &input.g, model.q())?;
    let s = fx_innovation_covariance(&p_prior, &input.h, model.r())?;
    let x_post = fx_add(&x_prior, &fx_matmul(&input.k, &r)?)?;
    let i_kh = fx_sub(&FixedTensor::identity(m, model.psf())?, &fx_matmul(&input.k, &input.h)?)?;
    let p_post = fx_symmetrize(&fx_matmul(&i_kh, &p_prior)?)?;
    let p_check = match krc {
        KrcCovariance::Prior => &p_prior,
        KrcCovariance::Posterior => &p_post,
    };
    let kappa = krc_kernel(&input.k, &s, &input.h, p_check, eps_kc)?;
    Ok(EkfKernelOutput { x_prior, p_prior, r, s, kappa, x_post, p_post })
}

/// Carried interval state: nonce-appended `(x, P, r_acc, S_acc, κ_acc)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcIntervalState {
    pub x: NonceAppended,
    pub p: NonceAppended,
    pub r_acc: NonceAppended,
    pub s_acc: NonceAppended,
    pub kappa: NonceAppended,
    /// Number of intervals processed to produce this state.
    pub interval_index: u64,
}

impl TcIntervalState {
    /// Genesis state: committed `x0`, `P0` and reset accumulators.
    pub fn genesis(x0: &FixedTensor, p0: &FixedTensor, d: usize, nonce_x: Nonce, nonce_p: Nonce) -> Result<Self> {
        let x = NonceAppended::tensor(x0, nonce_x);
        let p = NonceAppended::tensor(p0, nonce_p);
        Self::reset_accumulators(x, p, d, x0.psf(), 0)
    }

    /// Window-start state: carried `X` with the public `(0, 0, 1)` accumulator reset.
    pub fn reset_accumulators(x: NonceAppended, p: NonceAppended, d: usize, psf: u8, interval_index: u64) -> Result<Self> {
        Ok(Self {
            x,
            p,
            r_acc: NonceAppended::tensor(&FixedTensor::zeros(vec![d], psf)?, Nonce::ZERO),
            s_acc: NonceAppended::tensor(&FixedTensor::zeros(vec![d, d], psf)?, Nonce::ZERO),
            kappa: NonceAppended::bit(true, Nonce::ZERO),
            interval_index,
        })
    }

    /// Start a new window from this state's carried estimate.
    pub fn window_start(&self) -> Result<Self> {
        let s_acc = self.s_acc.open_tensor()?;
        Self::reset_accumulators(self.x.clone(), self.p.clone(), s_acc.rows(), s_acc.psf(), self.interval_index)
    }

    fn parts(&self) -> [&NonceAppended; 5] {
        [&self.x, &self.p, &self.r_acc, &self.s_acc, &self.kappa]
    }

    pub fn commitments(&self) -> Result<Vec<CommitmentRecord>> {
        CHAIN_LABELS
            .iter()
            .zip(self.parts())
            .map(|(l, v)| v.commitment(l).map_err(Into::into))
            .collect()
    }

    /// Public view: labels and digests only.
    pub fn public_commitments(&self) -> Vec<CommitmentRecord> {
        CHAIN_LABELS
            .iter()
            .zip(self.parts())
            .map(|(l, v)| CommitmentRecord { label: l.to_string(), digest: v.digest(l), opened: None })
            .collect()
    }

    pub fn residual_block(&self) -> ResidualBlock {
        ResidualBlock { r_acc: self.r_acc.clone(), s_acc: self.s_acc.clone(), kappa: self.kappa.clone() }
    }
}

/// Committed per-step witness; `u` is public.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcStepInput {
    pub y: NonceAppended,
    pub g: NonceAppended,
    pub h: NonceAppended,
    pub k: NonceAppended,
    pub u: FixedTensor,
}

pub const STEP_LABELS: [&str; 4] = ["y", "G", "H", "K"];

impl TcStepInput {
    pub fn seal(input: &EkfKernelInput, nonces: [Nonce; 4]) -> Self {
        Self {
            y: NonceAppended::tensor(&input.y, nonces[0]),
            g: NonceAppended::tensor(&input.g, nonces[1]),
            h: NonceAppended::tensor(&input.h, nonces[2]),
            k: NonceAppended::tensor(&input.k, nonces[3]),
            u: input.u.clone(),
        }
    }

    pub fn public_commitments(&self) -> Vec<CommitmentRecord> {
        STEP_LABELS
            .iter()
            .zip([&self.y, &self.g, &self.h, &self.k])
            .map(|(l, v)| CommitmentRecord { label: l.to_string(), digest: v.digest(l), opened: None })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OutputNonces {
    pub x: Nonce,
    pub p: Nonce,
    pub r_acc: Nonce,
    pub s_acc: Nonce,
    pub kappa: Nonce,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcIntervalInputs {
    pub steps: Vec<TcStepInput>,
    pub output_nonces: OutputNonces,
}

/// Per-step kernel outputs of one interval.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcTranscript {
    pub steps: Vec<EkfKernelOutput>,
}

impl TcTranscript {
    pub fn digest(&self) -> Digest {
        let mut buf = Vec::new();
        for s in &self.steps {
            for t in [&s.x_prior, &s.p_prior, &s.r, &s.s, &s.x_post, &s.p_post] {
                buf.extend_from_slice(&t.canonical_bytes());
            }
            buf.push(s.kappa as u8);
        }
        hash_parts(&[b"tc-transcript", &buf])
    }
}

pub fn tc_kernel(
    model: &FixedModel,
    prev: &TcIntervalState,
    inputs: &TcIntervalInputs,
    eps_kc: &FixedScalar,
    krc: KrcCovariance,
) -> Result<(TcIntervalState, TcTranscript)> {
    if inputs.steps.is_empty() {
        return Err(KernelError::Dimension("an interval needs at least one timestamp".into()));
    }
    let mut x = prev.x.open_tensor()?;
    let mut p = prev.p.open_tensor()?;
    let mut r_acc = prev.r_acc.open_tensor()?;
    let mut s_acc = prev.s_acc.open_tensor()?;
    let mut kappa = prev.kappa.open_bit()?;
    let mut steps = Vec::with_capacity(inputs.steps.len());
    for step in &inputs.steps {
        let input = EkfKernelInput {
            x_prev: x,
            p_prev: p,
            y: step.y.open_tensor()?,
            u: step.u.clone(),
            g: step.g.open_tensor()?,
            h: step.h.open_tensor()?,
            k: step.k.open_tensor()?,
        };
        let out = ekf_kernel(model, &input, eps_kc, krc)?;
        r_acc = fx_add(&r_acc, &out.r)?;
        s_acc = fx_add(&s_acc, &out.s)?;
        kappa &= out.kappa;
        x = out.x_post.clone();
        p = out.p_post.clone();
        steps.push(out);
    }
    let n = &inputs.output_nonces;
    let next = TcIntervalState {
        x: NonceAppended::tensor(&x, n.x),
        p: NonceAppended::tensor(&p, n.p),
        r_acc: NonceAppended::tensor(&r_acc, n.r_acc),
        s_acc: NonceAppended::tensor(&s_acc, n.s_acc),
        kappa: NonceAppended::bit(kappa, n.kappa),
        interval_index: prev.interval_index + 1,
    };
    Ok((next, TcTranscript { steps }))
}
