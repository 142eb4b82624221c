use super::{KernelError, Result};
use crate::commitments::{hash_parts, CommitmentRecord, Digest, Nonce, NonceAppended};
use crate::fixedpoint::{fx_frob_sq, fx_matmul, fx_sub, FixedError, FixedScalar, FixedTensor};
use crate::model::symmetrize;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Form of the decomposition-consistency check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SvdCheckMode {
    /// `‖U Σ Uᵀ − S‖²_F < ε`
    #[default]
    Reconstruction,
    /// `‖(U Σ^{-1/2})ᵀ (U Σ^{-1/2}) − Sᵀ S‖²_F < ε`
    Literal,
}

/// Operator order of the whitening transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WhiteningOrder {
    /// `T = ‖Σ^{-1/2} Uᵀ r‖²`, equal to `rᵀ S⁻¹ r`
    #[default]
    Standard,
    /// `T = ‖U Σ^{-1/2} r‖²`
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvdDecomposition {
    /// `d × p`, columns ordered by decreasing eigenvalue.
    pub u: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub sigma_inv_sqrt: DVector<f64>,
}

/// Eigendecomposition of a symmetric PSD matrix, truncated to its numerical rank.
pub fn svd_offline(s: &DMatrix<f64>, max_rank: Option<usize>) -> Result<SvdDecomposition> {
    if !s.is_square() || s.nrows() == 0 {
        return Err(KernelError::Dimension("S must be a non-empty square matrix".into()));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(KernelError::Offline("S has non-finite entries".into()));
    }
    let eig = symmetrize(s).symmetric_eigen();
    let mut order: Vec<usize> = (0..s.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let lmax = eig.eigenvalues[order[0]];
    let lmin = eig.eigenvalues[order[order.len() - 1]];
    if lmin < -1e-9 * lmax.abs().max(1.0) {
        return Err(KernelError::Offline(format!("S is not positive semi-definite (eigenvalue {lmin:e})")));
    }
    let mut p = order.iter().filter(|&&i| eig.eigenvalues[i] > 1e-9 * lmax).count();
    if let Some(cap) = max_rank {
        p = p.min(cap);
    }
    if p == 0 || lmax <= 0.0 {
        return Err(KernelError::Offline("S has rank zero".into()));
    }
    let u = DMatrix::from_fn(s.nrows(), p, |r, c| eig.eigenvectors[(r, order[c])]);
    let lambda = DVector::from_fn(p, |i, _| eig.eigenvalues[order[i]]);
    let gram = u.transpose() * &u;
    if (gram - DMatrix::identity(p, p)).amax() > 1e-6 {
        return Err(KernelError::Offline("eigenvectors are not orthonormal".into()));
    }
    Ok(SvdDecomposition { sigma_inv_sqrt: lambda.map(|l| 1.0 / l.sqrt()), u, lambda })
}

/// Committed decomposition witness.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SvdWitness {
    pub u: NonceAppended,
    pub sigma_inv_sqrt: NonceAppended,
}

pub const SVD_LABELS: [&str; 2] = ["U", "Sigma_inv_sqrt"];

impl SvdWitness {
    pub fn quantize(dec: &SvdDecomposition, psf: u8, nonce_u: Nonce, nonce_sigma: Nonce) -> Result<Self> {
        let u = FixedTensor::quantize_matrix(&dec.u, psf)?;
        let sigma = FixedTensor::quantize_matrix(&DMatrix::from_diagonal(&dec.sigma_inv_sqrt), psf)?;
        Ok(Self { u: NonceAppended::tensor(&u, nonce_u), sigma_inv_sqrt: NonceAppended::tensor(&sigma, nonce_sigma) })
    }

    pub fn public_commitments(&self) -> Vec<CommitmentRecord> {
        SVD_LABELS
            .iter()
            .zip([&self.u, &self.sigma_inv_sqrt])
            .map(|(l, v)| CommitmentRecord { label: l.to_string(), digest: v.digest(l), opened: None })
            .collect()
    }
}

/// Committed window residual block `(r_W, S_W, κ_W)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResidualBlock {
    pub r_acc: NonceAppended,
    pub s_acc: NonceAppended,
    pub kappa: NonceAppended,
}

pub const BLOCK_LABELS: [&str; 3] = ["r_acc", "S_acc", "kappa"];

impl ResidualBlock {
    pub fn public_commitments(&self) -> Vec<CommitmentRecord> {
        BLOCK_LABELS
            .iter()
            .zip([&self.r_acc, &self.s_acc, &self.kappa])
            .map(|(l, v)| CommitmentRecord { label: l.to_string(), digest: v.digest(l), opened: None })
            .collect()
    }
}

/// Check the witness diagonal and recover `Σ` by elementwise inverse-square.
fn sigma_from_witness(sigma_inv_sqrt: &FixedTensor, p: usize) -> Result<FixedTensor> {
    if sigma_inv_sqrt.shape() != [p, p] {
        return Err(KernelError::MalformedWitness(format!("Sigma_inv_sqrt must be {p}x{p}")));
    }
    let mut diag = FixedTensor::zeros(vec![p, p], sigma_inv_sqrt.psf())?;
    let mut raw = diag.raw().to_vec();
    for i in 0..p {
        for j in 0..p {
            let v = sigma_inv_sqrt.at(i, j);
            if i == j {
                if v.raw() <= 0 {
                    return Err(KernelError::MalformedWitness("Sigma_inv_sqrt diagonal must be positive".into()));
                }
                raw[i * p + i] = v.inv_square()?.raw();
            } else if v.raw() != 0 {
                return Err(KernelError::MalformedWitness("Sigma_inv_sqrt must be diagonal".into()));
            }
        }
    }
    diag = FixedTensor::from_raw(vec![p, p], raw, sigma_inv_sqrt.psf())?;
    Ok(diag)
}

fn check_u(u: &FixedTensor, s: &FixedTensor) -> Result<usize> {
    if u.shape().len() != 2 || s.shape().len() != 2 || s.rows() != s.cols() || u.rows() != s.rows() {
        return Err(KernelError::Dimension(format!("U {:?} does not match S {:?}", u.shape(), s.shape())));
    }
    Ok(u.cols())
}

pub fn svd_kernel(u: &FixedTensor, sigma_inv_sqrt: &FixedTensor, s: &FixedTensor, eps: &FixedScalar, mode: SvdCheckMode) -> Result<bool> {
    if eps.raw() <= 0 {
        return Err(KernelError::Dimension("eps must be positive".into()));
    }
    let p = check_u(u, s)?;
    let err = match mode {
        SvdCheckMode::Reconstruction => {
            let sigma = sigma_from_witness(sigma_inv_sqrt, p)?;
            let rec = fx_matmul(&fx_matmul(u, &sigma)?, &u.transpose())?;
            fx_frob_sq(&fx_sub(&rec, s)?)?
        }
        SvdCheckMode::Literal => {
            sigma_from_witness(sigma_inv_sqrt, p)?;
            if p != s.rows() {
                return Err(KernelError::Dimension("literal check needs a full-rank witness".into()));
            }
            let w = fx_matmul(u, sigma_inv_sqrt)?;
            let lhs = fx_matmul(&w.transpose(), &w)?;
            let rhs = fx_matmul(&s.transpose(), s)?;
            fx_frob_sq(&fx_sub(&lhs, &rhs)?)?
        }
    };
    if err.psf() != eps.psf() {
        return Err(FixedError::PsfMismatch(err.psf(), eps.psf()).into());
    }
    Ok(err.raw() < eps.raw())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScOutput {
    pub rho: bool,
    pub eta: bool,
    pub kappa: bool,
    pub t_stat: FixedScalar,
    pub t_ucl: FixedScalar,
}

impl ScOutput {
    pub fn transcript_digest(&self) -> Digest {
        hash_parts(&[
            b"sc-transcript",
            &self.t_stat.raw().to_le_bytes(),
            &self.t_ucl.raw().to_le_bytes(),
            &[self.t_stat.psf(), self.rho as u8, self.eta as u8, self.kappa as u8],
        ])
    }
}

/// Whitened statistic of `r` under the witness.
pub fn whitened_statistic_fx(u: &FixedTensor, sigma_inv_sqrt: &FixedTensor, r: &FixedTensor, order: WhiteningOrder) -> Result<FixedScalar> {
    let w = match order {
        WhiteningOrder::Standard => fx_matmul(sigma_inv_sqrt, &fx_matmul(&u.transpose(), r)?)?,
        WhiteningOrder::Literal => {
            if u.cols() != r.len() {
                return Err(KernelError::Dimension("literal whitening needs a full-rank witness".into()));
            }
            fx_matmul(&fx_matmul(u, sigma_inv_sqrt)?, r)?
        }
    };
    Ok(fx_frob_sq(&w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScModes {
    pub svd: SvdCheckMode,
    pub whitening: WhiteningOrder,
}

pub fn sc_kernel(block: &ResidualBlock, witness: &SvdWitness, t_ucl: &FixedScalar, eps_svd: &FixedScalar, modes: ScModes) -> Result<ScOutput> {
    if t_ucl.raw() <= 0 {
        return Err(KernelError::Dimension("T_ucl must be positive".into()));
    }
    let r = block.r_acc.open_tensor()?;
    let s = block.s_acc.open_tensor()?;
    let kappa = block.kappa.open_bit()?;
    let u = witness.u.open_tensor()?;
    let sigma = witness.sigma_inv_sqrt.open_tensor()?;
    if r.shape() != [s.rows()] {
        return Err(KernelError::Dimension("r_W and S_W disagree".into()));
    }
    let eta = svd_kernel(&u, &sigma, &s, eps_svd, modes.svd)?;
    let t_stat = whitened_statistic_fx(&u, &sigma, &r, modes.whitening)?;
    if t_stat.psf() != t_ucl.psf() {
        return Err(FixedError::PsfMismatch(t_stat.psf(), t_ucl.psf()).into());
    }
    Ok(ScOutput { rho: t_stat.raw() > t_ucl.raw(), eta, kappa, t_stat, t_ucl: *t_ucl })
}
