//! Nonlinear state-space model and the floating-point EKF reference.
//!
//! State transition `x⁺ = g(x, u) + v`, observation `y = h(x) + w`, with
//! `v ~ N(0, Q)` and `w ~ N(0, R)`. Three model families share one flat
//! parameter vector `theta`:
//!
//! * `linear`: `g = A x + b + u`, `h = C x`
//! * `analytic-nonlinear`: `g = A x + B tanh(x) + c∘x∘x + b + u`, `h = C x + E tanh(x)`
//! * `small-mlp`: `g = A x + W₂ tanh(W₁ x + b₁) + b + u`, `h = C x`

mod ekf;
mod fit;

pub use ekf::*;
pub use fit::{baseline_mse, fit_model, one_step_mse, parse_training_csv, FitConfig, TrainingSample};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("innovation covariance is singular (condition estimate {condition:e})")]
    SingularInnovation { condition: f64 },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid covariance: {0}")]
    InvalidCovariance(String),
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("training diverged: {0}")]
    Divergent(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("weights file: {0}")]
    Weights(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    AnalyticNonlinear,
    SmallMlp,
    Linear,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::AnalyticNonlinear => "analytic-nonlinear",
            ModelKind::SmallMlp => "small-mlp",
            ModelKind::Linear => "linear",
        }
    }
}

/// Structured view of `theta`.
#[derive(Debug, Clone, PartialEq)]
pub enum Dynamics {
    Linear {
        a: DMatrix<f64>,
        bias: DVector<f64>,
        c: DMatrix<f64>,
    },
    AnalyticNonlinear {
        a: DMatrix<f64>,
        coupling: DMatrix<f64>,
        quad: DVector<f64>,
        bias: DVector<f64>,
        c: DMatrix<f64>,
        obs_coupling: DMatrix<f64>,
    },
    SmallMlp {
        a: DMatrix<f64>,
        w1: DMatrix<f64>,
        b1: DVector<f64>,
        w2: DMatrix<f64>,
        bias: DVector<f64>,
        c: DMatrix<f64>,
    },
}

fn take_matrix(theta: &[f64], at: &mut usize, rows: usize, cols: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(rows, cols, &theta[*at..*at + rows * cols]);
    *at += rows * cols;
    m
}

fn take_vector(theta: &[f64], at: &mut usize, n: usize) -> DVector<f64> {
    let v = DVector::from_column_slice(&theta[*at..*at + n]);
    *at += n;
    v
}

fn push_matrix(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
}

impl Dynamics {
    pub fn kind(&self) -> ModelKind {
        match self {
            Dynamics::Linear { .. } => ModelKind::Linear,
            Dynamics::AnalyticNonlinear { .. } => ModelKind::AnalyticNonlinear,
            Dynamics::SmallMlp { .. } => ModelKind::SmallMlp,
        }
    }

    pub fn theta_len(kind: ModelKind, m: usize, d: usize, hidden: usize) -> usize {
        match kind {
            ModelKind::Linear => m * m + m + d * m,
            ModelKind::AnalyticNonlinear => 2 * m * m + 2 * m + 2 * d * m,
            ModelKind::SmallMlp => m * m + 2 * hidden * m + hidden + m + d * m,
        }
    }

    pub fn from_theta(kind: ModelKind, m: usize, d: usize, hidden: usize, theta: &[f64]) -> Result<Self> {
        let need = Self::theta_len(kind, m, d, hidden);
        if theta.len() != need {
            return Err(ModelError::Dimension(format!(
                "{} model with m={m}, d={d}, hidden={hidden} needs {need} parameters, got {}",
                kind.as_str(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("theta".into()));
        }
        let mut at = 0;
        let t = theta;
        Ok(match kind {
            ModelKind::Linear => Dynamics::Linear {
                a: take_matrix(t, &mut at, m, m),
                bias: take_vector(t, &mut at, m),
                c: take_matrix(t, &mut at, d, m),
            },
            ModelKind::AnalyticNonlinear => Dynamics::AnalyticNonlinear {
                a: take_matrix(t, &mut at, m, m),
                coupling: take_matrix(t, &mut at, m, m),
                quad: take_vector(t, &mut at, m),
                bias: take_vector(t, &mut at, m),
                c: take_matrix(t, &mut at, d, m),
                obs_coupling: take_matrix(t, &mut at, d, m),
            },
            ModelKind::SmallMlp => Dynamics::SmallMlp {
                a: take_matrix(t, &mut at, m, m),
                w1: take_matrix(t, &mut at, hidden, m),
                b1: take_vector(t, &mut at, hidden),
                w2: take_matrix(t, &mut at, m, hidden),
                bias: take_vector(t, &mut at, m),
                c: take_matrix(t, &mut at, d, m),
            },
        })
    }

    pub fn to_theta(&self) -> Vec<f64> {
        let mut out = Vec::new();
        match self {
            Dynamics::Linear { a, bias, c } => {
                push_matrix(&mut out, a);
                out.extend(bias.iter());
                push_matrix(&mut out, c);
            }
            Dynamics::AnalyticNonlinear { a, coupling, quad, bias, c, obs_coupling } => {
                push_matrix(&mut out, a);
                push_matrix(&mut out, coupling);
                out.extend(quad.iter());
                out.extend(bias.iter());
                push_matrix(&mut out, c);
                push_matrix(&mut out, obs_coupling);
            }
            Dynamics::SmallMlp { a, w1, b1, w2, bias, c } => {
                push_matrix(&mut out, a);
                push_matrix(&mut out, w1);
                out.extend(b1.iter());
                push_matrix(&mut out, w2);
                out.extend(bias.iter());
                push_matrix(&mut out, c);
            }
        }
        out
    }

    fn hidden(&self) -> usize {
        match self {
            Dynamics::SmallMlp { w1, .. } => w1.nrows(),
            _ => 0,
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            Dynamics::Linear { a, c, .. }
            | Dynamics::AnalyticNonlinear { a, c, .. }
            | Dynamics::SmallMlp { a, c, .. } => (a.nrows(), c.nrows()),
        }
    }
}

fn tanh_vec(x: &DVector<f64>) -> DVector<f64> {
    x.map(f64::tanh)
}

/// Check a covariance matrix is square, symmetric, and PSD.
pub fn validate_covariance(name: &str, m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(ModelError::Dimension(format!("{name} must be {n}x{n}, got {:?}", m.shape())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite(name.into()));
    }
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-9 * scale {
        return Err(ModelError::InvalidCovariance(format!("{name} is not symmetric")));
    }
    let eig = symmetrize(m).symmetric_eigenvalues();
    if eig.min() < -1e-9 * scale {
        return Err(ModelError::InvalidCovariance(format!(
            "{name} is not positive semi-definite (min eigenvalue {:e})",
            eig.min()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceModel {
    dynamics: Dynamics,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl StateSpaceModel {
    pub fn new(dynamics: Dynamics, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        let (m, d) = dynamics.dims();
        if m == 0 || d == 0 {
            return Err(ModelError::Dimension("m and d must be at least 1".into()));
        }
        // from_theta does the structural validation
        let dynamics = Dynamics::from_theta(dynamics.kind(), m, d, dynamics.hidden(), &dynamics.to_theta())?;
        validate_covariance("Q", &q, m)?;
        validate_covariance("R", &r, d)?;
        Ok(Self { dynamics, q: symmetrize(&q), r: symmetrize(&r) })
    }

    pub fn from_theta(
        kind: ModelKind,
        m: usize,
        d: usize,
        hidden: usize,
        theta: &[f64],
        q: DMatrix<f64>,
        r: DMatrix<f64>,
    ) -> Result<Self> {
        Self::new(Dynamics::from_theta(kind, m, d, hidden, theta)?, q, r)
    }

    /// `g = A x + u`, `h = C x`.
    pub fn linear(a: DMatrix<f64>, c: DMatrix<f64>, q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || c.ncols() != a.nrows() {
            return Err(ModelError::Dimension("A must be m×m and C d×m".into()));
        }
        let bias = DVector::zeros(a.nrows());
        Self::new(Dynamics::Linear { a, bias, c }, q, r)
    }

    /// The default desk-scale system: 4 states, 4 sensors, mild tanh coupling.
    pub fn reference_nonlinear() -> Self {
        let m = 4;
        let mut a = DMatrix::identity(m, m) * 0.8;
        let mut coupling = DMatrix::zeros(m, m);
        for i in 0..m {
            a[(i, (i + 1) % m)] = 0.05;
            coupling[(i, (i + 3) % m)] = 0.1;
        }
        let obs_coupling = DMatrix::identity(m, m) * 0.05;
        Self::new(
            Dynamics::AnalyticNonlinear {
                a,
                coupling,
                quad: DVector::zeros(m),
                bias: DVector::zeros(m),
                c: DMatrix::identity(m, m),
                obs_coupling,
            },
            DMatrix::identity(m, m) * 0.01,
            DMatrix::identity(m, m) * 0.04,
        )
        .expect("reference model is well-formed")
    }

    pub fn kind(&self) -> ModelKind {
        self.dynamics.kind()
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.dims().0
    }

    pub fn obs_dim(&self) -> usize {
        self.dynamics.dims().1
    }

    pub fn hidden(&self) -> usize {
        self.dynamics.hidden()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn theta(&self) -> Vec<f64> {
        self.dynamics.to_theta()
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        Self::from_theta(self.kind(), self.state_dim(), self.obs_dim(), self.hidden(), theta, self.q.clone(), self.r.clone())
    }

    fn check_state(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() {
            return Err(ModelError::Dimension(format!(
                "state has length {}, model expects {}",
                x.len(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// State transition map.
    pub fn g(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        if u.len() != self.state_dim() {
            return Err(ModelError::Dimension(format!("control has length {}, expected {}", u.len(), self.state_dim())));
        }
        Ok(match &self.dynamics {
            Dynamics::Linear { a, bias, .. } => a * x + bias + u,
            Dynamics::AnalyticNonlinear { a, coupling, quad, bias, .. } => {
                a * x + coupling * tanh_vec(x) + quad.component_mul(&x.component_mul(x)) + bias + u
            }
            Dynamics::SmallMlp { a, w1, b1, w2, bias, .. } => a * x + w2 * tanh_vec(&(w1 * x + b1)) + bias + u,
        })
    }

    /// Observation map.
    pub fn h(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_state(x)?;
        Ok(match &self.dynamics {
            Dynamics::Linear { c, .. } | Dynamics::SmallMlp { c, .. } => c * x,
            Dynamics::AnalyticNonlinear { c, obs_coupling, .. } => c * x + obs_coupling * tanh_vec(x),
        })
    }

    /// Simulate `steps` transitions from `x0`, returning `(x_t, y_t)` pairs.
    pub fn simulate<R: Rng + ?Sized>(
        &self,
        x0: &DVector<f64>,
        controls: Option<&[DVector<f64>]>,
        steps: usize,
        rng: &mut R,
    ) -> Result<Vec<(DVector<f64>, DVector<f64>)>> {
        let m = self.state_dim();
        let lq = noise_factor(&self.q);
        let lr = noise_factor(&self.r);
        let zero = DVector::zeros(m);
        let mut x = x0.clone();
        let mut out = Vec::with_capacity(steps);
        for t in 0..steps {
            let u = controls.and_then(|c| c.get(t)).unwrap_or(&zero);
            x = self.g(&x, u)? + &lq * gaussian(m, rng);
            let y = self.h(&x)? + &lr * gaussian(self.obs_dim(), rng);
            out.push((x.clone(), y));
        }
        Ok(out)
    }

    pub fn to_weights(&self, metadata: serde_json::Map<String, serde_json::Value>) -> WeightsFile {
        let mut metadata = metadata;
        if self.kind() == ModelKind::SmallMlp {
            metadata.insert("hidden".into(), self.hidden().into());
        }
        WeightsFile {
            kind: self.kind(),
            m: self.state_dim(),
            d: self.obs_dim(),
            theta: self.theta(),
            q: row_major(&self.q),
            r: row_major(&self.r),
            metadata,
        }
    }
}

/// Standard normal vector of length `n`.
pub fn gaussian<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Lower factor `L` with `L Lᵀ ≈ M` for a PSD matrix.
pub fn noise_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt)
}

pub fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    push_matrix(&mut out, m);
    out
}

/// On-disk model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub kind: ModelKind,
    pub m: usize,
    pub d: usize,
    pub theta: Vec<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "R")]
    pub r: Vec<f64>,
    #[serde(default)]
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl WeightsFile {
    pub fn into_model(self) -> Result<StateSpaceModel> {
        let hidden = self.metadata.get("hidden").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        if self.q.len() != self.m * self.m || self.r.len() != self.d * self.d {
            return Err(ModelError::Weights("Q must hold m*m and R d*d values".into()));
        }
        let q = DMatrix::from_row_slice(self.m, self.m, &self.q);
        let r = DMatrix::from_row_slice(self.d, self.d, &self.r);
        StateSpaceModel::from_theta(self.kind, self.m, self.d, hidden, &self.theta, q, r)
    }

    pub fn load(path: &Path) -> Result<StateSpaceModel> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Weights(format!("{}: {e}", path.display())))?;
        let file: WeightsFile = serde_json::from_str(&text).map_err(|e| ModelError::Weights(e.to_string()))?;
        file.into_model()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| ModelError::Weights(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| ModelError::Weights(format!("{}: {e}", path.display())))
    }
}
