//! Honest witness construction: the prover's "offline" half.

use super::{Result, ScWitness, TcWitness};
use crate::commitments::NonceSource;
use crate::fixedpoint::{FixedScalar, FixedTensor};
use crate::kernels::{
    ekf_kernel, honest_step_input, sc_kernel, svd_offline, tc_kernel, FixedModel, KernelError, KrcCovariance, OutputNonces,
    ResidualBlock, ScModes, SvdWitness, TcIntervalInputs, TcIntervalState, TcStepInput,
};
use crate::model::StateSpaceModel;

fn nonce(src: &NonceSource) -> std::result::Result<crate::commitments::Nonce, KernelError> {
    Ok(src.gen_nonce()?)
}

/// Build and execute one TC interval from quantized observations and controls.
#[allow(clippy::too_many_arguments)]
pub fn honest_tc_witness(
    model: &StateSpaceModel,
    fixed: &FixedModel,
    prev: &TcIntervalState,
    ys: &[FixedTensor],
    us: &[FixedTensor],
    nonces: &NonceSource,
    eps_kc: &FixedScalar,
    krc: KrcCovariance,
) -> Result<TcWitness> {
    if ys.len() != us.len() {
        return Err(super::ProofError::Witness("observation and control counts differ".into()));
    }
    let mut x = prev.x.open_tensor().map_err(KernelError::from)?;
    let mut p = prev.p.open_tensor().map_err(KernelError::from)?;
    let mut steps = Vec::with_capacity(ys.len());
    for (y, u) in ys.iter().zip(us) {
        let input = honest_step_input(model, fixed, &x, &p, y, u)?;
        let out = ekf_kernel(fixed, &input, eps_kc, krc)?;
        steps.push(TcStepInput::seal(&input, [nonce(nonces)?, nonce(nonces)?, nonce(nonces)?, nonce(nonces)?]));
        x = out.x_post;
        p = out.p_post;
    }
    let output_nonces = OutputNonces {
        x: nonce(nonces)?,
        p: nonce(nonces)?,
        r_acc: nonce(nonces)?,
        s_acc: nonce(nonces)?,
        kappa: nonce(nonces)?,
    };
    let inputs = TcIntervalInputs { steps, output_nonces };
    let (output, _) = tc_kernel(fixed, prev, &inputs, eps_kc, krc)?;
    Ok(TcWitness { prev: prev.clone(), inputs, output })
}

/// Decompose the window covariance offline, commit the factors and run SC.
pub fn honest_sc_witness(
    block: &ResidualBlock,
    max_rank: usize,
    t_ucl: &FixedScalar,
    eps_svd: &FixedScalar,
    modes: ScModes,
    nonces: &NonceSource,
) -> Result<ScWitness> {
    let s = block.s_acc.open_tensor().map_err(KernelError::from)?;
    let dec = svd_offline(&s.to_matrix(), Some(max_rank))?;
    let svd = SvdWitness::quantize(&dec, s.psf(), nonce(nonces)?, nonce(nonces)?)?;
    let output = sc_kernel(block, &svd, t_ucl, eps_svd, modes)?;
    Ok(ScWitness { block: block.clone(), svd, output })
}
