use super::{KernelError, Result};
use crate::fixedpoint::{fx_add, fx_hadamard, fx_matmul, round_div, FixedError, FixedTensor};
use crate::model::{Dynamics, ModelKind, StateSpaceModel};
use std::sync::Arc;

pub const TANH_LUT_SIZE: usize = 256;
/// Grid points per unit of |x|; the table covers [0, 8).
pub const TANH_LUT_DENSITY: i128 = 32;

/// Odd-symmetric tanh table, linearly interpolated on raw values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TanhLut {
    psf: u8,
    table: Vec<i64>,
}

impl TanhLut {
    pub fn new(psf: u8) -> Result<Self> {
        let table = (0..TANH_LUT_SIZE)
            .map(|k| crate::fixedpoint::quantize((k as f64 / TANH_LUT_DENSITY as f64).tanh(), psf).map(|q| q.raw()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Self { psf, table })
    }

    pub fn eval_raw(&self, raw: i64) -> i64 {
        let scale = 1i128 << self.psf;
        let pos = raw.unsigned_abs() as i128 * TANH_LUT_DENSITY;
        let idx = (pos / scale) as usize;
        let y = if idx + 1 >= TANH_LUT_SIZE {
            self.table[TANH_LUT_SIZE - 1] as i128
        } else {
            let frac = pos - idx as i128 * scale;
            let lo = self.table[idx] as i128;
            let hi = self.table[idx + 1] as i128;
            lo + round_div((hi - lo) * frac, scale)
        };
        (if raw < 0 { -y } else { y }) as i64
    }

    pub fn eval(&self, x: &FixedTensor) -> Result<FixedTensor> {
        Ok(x.map_raw(|r| Ok(self.eval_raw(r)))?)
    }

    pub fn table(&self) -> &[i64] {
        &self.table
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum FixedDynamics {
    Linear {
        a: FixedTensor,
        bias: FixedTensor,
        c: FixedTensor,
    },
    AnalyticNonlinear {
        a: FixedTensor,
        coupling: FixedTensor,
        quad: FixedTensor,
        bias: FixedTensor,
        c: FixedTensor,
        obs_coupling: FixedTensor,
    },
    SmallMlp {
        a: FixedTensor,
        w1: FixedTensor,
        b1: FixedTensor,
        w2: FixedTensor,
        bias: FixedTensor,
        c: FixedTensor,
    },
}

/// A model with quantized parameters, evaluated under fixed-point semantics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedModel {
    kind: ModelKind,
    m: usize,
    d: usize,
    hidden: usize,
    psf: u8,
    dynamics: FixedDynamics,
    q: FixedTensor,
    r: FixedTensor,
    lut: Arc<TanhLut>,
}

impl FixedModel {
    pub fn quantize(model: &StateSpaceModel, psf: u8) -> Result<Self> {
        let qm = |m: &nalgebra::DMatrix<f64>| FixedTensor::quantize_matrix(m, psf);
        let qv = |v: &nalgebra::DVector<f64>| FixedTensor::quantize_vector(v, psf);
        let dynamics = match model.dynamics() {
            Dynamics::Linear { a, bias, c } => FixedDynamics::Linear { a: qm(a)?, bias: qv(bias)?, c: qm(c)? },
            Dynamics::AnalyticNonlinear { a, coupling, quad, bias, c, obs_coupling } => FixedDynamics::AnalyticNonlinear {
                a: qm(a)?,
                coupling: qm(coupling)?,
                quad: qv(quad)?,
                bias: qv(bias)?,
                c: qm(c)?,
                obs_coupling: qm(obs_coupling)?,
            },
            Dynamics::SmallMlp { a, w1, b1, w2, bias, c } => FixedDynamics::SmallMlp {
                a: qm(a)?,
                w1: qm(w1)?,
                b1: qv(b1)?,
                w2: qm(w2)?,
                bias: qv(bias)?,
                c: qm(c)?,
            },
        };
        Ok(Self {
            kind: model.kind(),
            m: model.state_dim(),
            d: model.obs_dim(),
            hidden: model.hidden(),
            psf,
            dynamics,
            q: qm(model.q())?,
            r: qm(model.r())?,
            lut: Arc::new(TanhLut::new(psf)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn psf(&self) -> u8 {
        self.psf
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn obs_dim(&self) -> usize {
        self.d
    }

    pub fn q(&self) -> &FixedTensor {
        &self.q
    }

    pub fn r(&self) -> &FixedTensor {
        &self.r
    }

    fn check(&self, x: &FixedTensor, n: usize, what: &str) -> Result<()> {
        if x.shape() != [n] {
            return Err(KernelError::Dimension(format!("{what} must be a vector of length {n}, got {:?}", x.shape())));
        }
        if x.psf() != self.psf {
            return Err(FixedError::PsfMismatch(x.psf(), self.psf).into());
        }
        Ok(())
    }

    pub fn g(&self, x: &FixedTensor, u: &FixedTensor) -> Result<FixedTensor> {
        self.check(x, self.m, "state")?;
        self.check(u, self.m, "control")?;
        let out = match &self.dynamics {
            FixedDynamics::Linear { a, bias, .. } => fx_add(&fx_matmul(a, x)?, bias)?,
            FixedDynamics::AnalyticNonlinear { a, coupling, quad, bias, .. } => {
                let lin = fx_matmul(a, x)?;
                let nl = fx_matmul(coupling, &self.lut.eval(x)?)?;
                let sq = fx_hadamard(quad, &fx_hadamard(x, x)?)?;
                fx_add(&fx_add(&fx_add(&lin, &nl)?, &sq)?, bias)?
            }
            FixedDynamics::SmallMlp { a, w1, b1, w2, bias, .. } => {
                let act = self.lut.eval(&fx_add(&fx_matmul(w1, x)?, b1)?)?;
                fx_add(&fx_add(&fx_matmul(a, x)?, &fx_matmul(w2, &act)?)?, bias)?
            }
        };
        Ok(fx_add(&out, u)?)
    }

    pub fn h(&self, x: &FixedTensor) -> Result<FixedTensor> {
        self.check(x, self.m, "state")?;
        Ok(match &self.dynamics {
            FixedDynamics::Linear { c, .. } | FixedDynamics::SmallMlp { c, .. } => fx_matmul(c, x)?,
            FixedDynamics::AnalyticNonlinear { c, obs_coupling, .. } => {
                fx_add(&fx_matmul(c, x)?, &fx_matmul(obs_coupling, &self.lut.eval(x)?)?)?
            }
        })
    }

    /// Deterministic encoding of everything that defines the model's circuit.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(self.kind.as_str().as_bytes());
        out.push(0);
        for v in [self.m, self.d, self.hidden] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.psf);
        let tensors: Vec<&FixedTensor> = match &self.dynamics {
            FixedDynamics::Linear { a, bias, c } => vec![a, bias, c],
            FixedDynamics::AnalyticNonlinear { a, coupling, quad, bias, c, obs_coupling } => {
                vec![a, coupling, quad, bias, c, obs_coupling]
            }
            FixedDynamics::SmallMlp { a, w1, b1, w2, bias, c } => vec![a, w1, b1, w2, bias, c],
        };
        for t in tensors.into_iter().chain([&self.q, &self.r]) {
            out.extend_from_slice(&t.canonical_bytes());
        }
        for v in self.lut.table() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}
