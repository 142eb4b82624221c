use super::{fx_innovation_covariance, fx_propagate_covariance, FixedModel, KernelError, Result, EkfKernelInput};
use crate::fixedpoint::FixedTensor;
use crate::model::{jacobians, kalman_gain, StateSpaceModel};

/// Build the honest witness for one step: Jacobians from the float model at
/// the dequantized operating points, and a gain solved against the kernel's
/// own fixed-point covariances so the reconstruction check sees minimal error.
pub fn honest_step_input(
    model: &StateSpaceModel,
    fixed: &FixedModel,
    x_prev: &FixedTensor,
    p_prev: &FixedTensor,
    y: &FixedTensor,
    u: &FixedTensor,
) -> Result<EkfKernelInput> {
    let psf = fixed.psf();
    let offline = |e: crate::model::ModelError| KernelError::Offline(e.to_string());
    let uf = u.to_vector();
    let (g, _) = jacobians(model, &x_prev.to_vector(), &uf).map_err(offline)?;
    let x_prior = fixed.g(x_prev, u)?;
    let (_, h) = jacobians(model, &x_prior.to_vector(), &uf).map_err(offline)?;
    let g = FixedTensor::quantize_matrix(&g, psf)?;
    let h = FixedTensor::quantize_matrix(&h, psf)?;
    let p_prior = fx_propagate_covariance(p_prev, &g, fixed.q())?;
    let s = fx_innovation_covariance(&p_prior, &h, fixed.r())?;
    let k = kalman_gain(&p_prior.to_matrix(), &h.to_matrix(), &s.to_matrix()).map_err(offline)?;
    Ok(EkfKernelInput {
        x_prev: x_prev.clone(),
        p_prev: p_prev.clone(),
        y: y.clone(),
        u: u.clone(),
        g,
        h,
        k: FixedTensor::quantize_matrix(&k, psf)?,
    })
}
