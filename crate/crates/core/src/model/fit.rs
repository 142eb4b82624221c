//! Surrogate training: full-batch gradient descent on the one-step prediction error.
//!
//! Fitting assumes `h` is the identity (`m = d`), so measurements double as
//! state observations. Parameters are learned in standardized coordinates
//! and mapped back to engineering units exactly.

use super::{symmetrize, Dynamics, ModelError, ModelKind, Result, StateSpaceModel};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};

pub const MIN_SAMPLES: usize = 100;
pub const NOISE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub t: i64,
    pub y: DVector<f64>,
    /// Actuator values; `None` means zero control.
    pub u: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub kind: ModelKind,
    pub m: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Penalty on the distance of the parameters from the persistence model.
    pub weight_decay: f64,
    /// Shrinkage applied to the estimated `Q`: `Q / (1 + q_weight)`.
    pub q_weight: f64,
    pub r_weight: f64,
    /// Fraction of the residual covariance attributed to measurement noise.
    pub noise_split: f64,
    pub seed: u64,
}

impl FitConfig {
    pub fn new(kind: ModelKind, m: usize) -> Self {
        Self {
            kind,
            m,
            hidden: 8,
            epochs: 600,
            learning_rate: 0.02,
            weight_decay: 1e-4,
            q_weight: 0.0,
            r_weight: 0.0,
            noise_split: 0.5,
            seed: 0,
        }
    }
}

/// Parse a training series: header row, integer timestamp, then sensor columns,
/// with the last `actuator_columns` columns read as control input.
pub fn parse_training_csv(text: &str, actuator_columns: usize) -> Result<Vec<TrainingSample>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| ModelError::Weights(format!("csv row {}: {e}", line + 2)))?;
        if record.len() < 2 + actuator_columns {
            return Err(ModelError::Dimension(format!("csv row {} has too few columns", line + 2)));
        }
        let t: i64 = record[0]
            .parse()
            .map_err(|_| ModelError::Weights(format!("csv row {}: timestamp {:?} is not an integer", line + 2, &record[0])))?;
        let mut vals = Vec::with_capacity(record.len() - 1);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .parse()
                .map_err(|_| ModelError::Weights(format!("csv row {}: {field:?} is not a number", line + 2)))?;
            if !v.is_finite() {
                return Err(ModelError::NonFinite(format!("csv row {}", line + 2)));
            }
            vals.push(v);
        }
        let sensors = vals.len() - actuator_columns;
        let u = (actuator_columns > 0).then(|| DVector::from_column_slice(&vals[sensors..]));
        out.push(TrainingSample { t, y: DVector::from_column_slice(&vals[..sensors]), u });
        if out[0].y.len() != sensors {
            return Err(ModelError::Dimension(format!("csv row {} changes the column count", line + 2)));
        }
    }
    Ok(out)
}

fn control(s: &TrainingSample, m: usize) -> DVector<f64> {
    s.u.clone().unwrap_or_else(|| DVector::zeros(m))
}

/// Mean squared one-step prediction error `y_{t+1} − g(y_t, u_t)` over consecutive pairs.
pub fn one_step_mse(model: &StateSpaceModel, series: &[TrainingSample]) -> Result<f64> {
    let m = model.state_dim();
    let mut total = 0.0;
    let mut count = 0usize;
    for w in series.windows(2) {
        let pred = model.g(&w[0].y, &control(&w[0], m))?;
        total += (&w[1].y - pred).norm_squared();
        count += m;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// MSE of the persistence predictor `ŷ_{t+1} = y_t`.
pub fn baseline_mse(series: &[TrainingSample]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for w in series.windows(2) {
        total += (&w[1].y - &w[0].y).norm_squared();
        count += w[0].y.len();
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

struct Standardizer {
    mean: DVector<f64>,
    scale: DVector<f64>,
}

impl Standardizer {
    fn fit(series: &[TrainingSample]) -> Self {
        let m = series[0].y.len();
        let n = series.len() as f64;
        let mean = series.iter().fold(DVector::zeros(m), |acc, s| acc + &s.y) / n;
        let var = series.iter().fold(DVector::zeros(m), |acc, s| {
            let c = &s.y - &mean;
            acc + c.component_mul(&c)
        }) / n;
        let scale = var.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });
        Self { mean, scale }
    }

    fn z(&self, y: &DVector<f64>) -> DVector<f64> {
        (y - &self.mean).component_div(&self.scale)
    }
}

struct Pairs {
    z: Vec<DVector<f64>>,
    u: Vec<DVector<f64>>,
    target: Vec<DVector<f64>>,
}

/// Standardized-coordinate parameters and their gradients share this shape.
#[derive(Clone)]
struct Params {
    a: DMatrix<f64>,
    b: DVector<f64>,
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
}

impl Params {
    fn flatten(&self) -> Vec<f64> {
        self.a
            .iter()
            .chain(self.b.iter())
            .chain(self.w1.iter())
            .chain(self.b1.iter())
            .chain(self.w2.iter())
            .copied()
            .collect()
    }

    fn unflatten(&self, flat: &[f64]) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let s = &flat[at..at + n];
            at += n;
            s.to_vec()
        };
        let (m, hdim) = (self.a.nrows(), self.w1.nrows());
        Self {
            a: DMatrix::from_column_slice(m, m, &take(m * m)),
            b: DVector::from_column_slice(&take(m)),
            w1: DMatrix::from_column_slice(hdim, m, &take(hdim * m)),
            b1: DVector::from_column_slice(&take(hdim)),
            w2: DMatrix::from_column_slice(m, hdim, &take(m * hdim)),
        }
    }
}

fn loss_and_grad(p: &Params, data: &Pairs, decay: f64, mlp: bool) -> (f64, Params) {
    let m = p.a.nrows();
    let n = data.z.len() as f64;
    let mut g = Params {
        a: DMatrix::zeros(m, m),
        b: DVector::zeros(m),
        w1: DMatrix::zeros(p.w1.nrows(), m),
        b1: DVector::zeros(p.b1.len()),
        w2: DMatrix::zeros(m, p.w2.ncols()),
    };
    let mut loss = 0.0;
    let scale = 2.0 / (n * m as f64);
    for ((z, u), target) in data.z.iter().zip(&data.u).zip(&data.target) {
        let mut pred = &p.a * z + &p.b + u;
        let hidden = if mlp {
            let h = (&p.w1 * z + &p.b1).map(f64::tanh);
            pred += &p.w2 * &h;
            Some(h)
        } else {
            None
        };
        let e = pred - target;
        loss += e.norm_squared();
        let es = &e * scale;
        g.a += &es * z.transpose();
        g.b += &es;
        if let Some(h) = hidden {
            g.w2 += &es * h.transpose();
            let da = (p.w2.transpose() * &es).component_mul(&h.map(|v| 1.0 - v * v));
            g.w1 += &da * z.transpose();
            g.b1 += da;
        }
    }
    loss /= n * m as f64;
    let eye = DMatrix::<f64>::identity(m, m);
    let da = &p.a - &eye;
    loss += decay * (da.norm_squared() + p.b.norm_squared() + p.w1.norm_squared() + p.b1.norm_squared() + p.w2.norm_squared());
    g.a += da * (2.0 * decay);
    g.b += &p.b * (2.0 * decay);
    g.w1 += &p.w1 * (2.0 * decay);
    g.b1 += &p.b1 * (2.0 * decay);
    g.w2 += &p.w2 * (2.0 * decay);
    (loss, g)
}

fn to_dynamics(p: &Params, st: &Standardizer, kind: ModelKind) -> Dynamics {
    let m = p.a.nrows();
    let d = DMatrix::from_diagonal(&st.scale);
    let d_inv = DMatrix::from_diagonal(&st.scale.map(|v| 1.0 / v));
    let a = &d * &p.a * &d_inv;
    let bias = &st.mean - &a * &st.mean + &d * &p.b;
    let c = DMatrix::identity(m, m);
    match kind {
        ModelKind::SmallMlp => {
            let w1 = &p.w1 * &d_inv;
            let b1 = &p.b1 - &w1 * &st.mean;
            Dynamics::SmallMlp { a, w1, b1, w2: &d * &p.w2, bias, c }
        }
        _ => Dynamics::Linear { a, bias, c },
    }
}

fn identity_dynamics(kind: ModelKind, m: usize, hidden: usize) -> Dynamics {
    let n = Dynamics::theta_len(kind, m, m, hidden);
    let mut theta = vec![0.0; n];
    let a: Vec<f64> = DMatrix::<f64>::identity(m, m).iter().copied().collect();
    theta[..m * m].copy_from_slice(&a);
    let c_at = n - m * m;
    theta[c_at..].copy_from_slice(&a);
    Dynamics::from_theta(kind, m, m, hidden, &theta).expect("identity layout")
}

fn floored_covariance(sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(sigma).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(NOISE_FLOOR));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()))
}

/// Fit a model with identity observation map to a measured series.
pub fn fit_model(series: &[TrainingSample], config: &FitConfig) -> Result<StateSpaceModel> {
    if series.len() < MIN_SAMPLES {
        return Err(ModelError::InsufficientData { needed: MIN_SAMPLES, got: series.len() });
    }
    let m = config.m;
    if series.iter().any(|s| s.y.len() != m || s.u.as_ref().is_some_and(|u| u.len() != m)) {
        return Err(ModelError::Dimension(format!("fitting needs {m} sensor columns (and {m} actuator columns if any)")));
    }
    if config.kind == ModelKind::AnalyticNonlinear {
        return Err(ModelError::Unsupported("analytic-nonlinear models are specified, not fitted".into()));
    }
    if !(0.0..=1.0).contains(&config.noise_split) {
        return Err(ModelError::Dimension("noise_split must lie in [0, 1]".into()));
    }
    let mlp = config.kind == ModelKind::SmallMlp;
    let hidden = if mlp { config.hidden.max(1) } else { 0 };
    let n_train = series.len() * 4 / 5;
    let train = &series[..n_train];
    let held_out = &series[n_train - 1..];

    let st = Standardizer::fit(train);
    let mut data = Pairs { z: vec![], u: vec![], target: vec![] };
    for w in train.windows(2) {
        data.z.push(st.z(&w[0].y));
        data.u.push(control(&w[0], m).component_div(&st.scale));
        data.target.push(st.z(&w[1].y));
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(config.seed);
    let init_w = if mlp { 0.5 / (m as f64).sqrt() } else { 0.0 };
    let mut params = Params {
        a: DMatrix::identity(m, m),
        b: DVector::zeros(m),
        w1: DMatrix::from_fn(hidden, m, |_, _| rng.random_range(-init_w..=init_w)),
        b1: DVector::zeros(hidden),
        w2: DMatrix::zeros(m, hidden),
    };

    // Adam
    let (beta1, beta2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut flat = params.flatten();
    let mut mom = vec![0.0; flat.len()];
    let mut vel = vec![0.0; flat.len()];
    for epoch in 1..=config.epochs {
        let (loss, grad) = loss_and_grad(&params, &data, config.weight_decay, mlp);
        if !loss.is_finite() {
            return Err(ModelError::Divergent(format!("loss became {loss} at epoch {epoch}")));
        }
        let grad = grad.flatten();
        let c1 = 1.0 - beta1.powi(epoch as i32);
        let c2 = 1.0 - beta2.powi(epoch as i32);
        for i in 0..flat.len() {
            mom[i] = beta1 * mom[i] + (1.0 - beta1) * grad[i];
            vel[i] = beta2 * vel[i] + (1.0 - beta2) * grad[i] * grad[i];
            flat[i] -= config.learning_rate * (mom[i] / c1) / ((vel[i] / c2).sqrt() + eps);
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Divergent(format!("parameters became non-finite at epoch {epoch}")));
        }
        params = params.unflatten(&flat);
    }

    let placeholder = DMatrix::identity(m, m);
    let fitted = StateSpaceModel::new(to_dynamics(&params, &st, config.kind), placeholder.clone(), placeholder.clone())?;
    let chosen = if one_step_mse(&fitted, held_out)? <= baseline_mse(held_out) {
        fitted
    } else {
        StateSpaceModel::new(identity_dynamics(config.kind, m, hidden), placeholder.clone(), placeholder)?
    };

    // residual sample covariance on the training split
    let residuals: Vec<DVector<f64>> = train
        .windows(2)
        .map(|w| chosen.g(&w[0].y, &control(&w[0], m)).map(|p| &w[1].y - p))
        .collect::<Result<_>>()?;
    let n = residuals.len() as f64;
    let mean = residuals.iter().fold(DVector::zeros(m), |acc, e| acc + e) / n;
    let sigma = residuals.iter().fold(DMatrix::zeros(m, m), |acc, e| {
        let c = e - &mean;
        acc + &c * c.transpose()
    }) / (n - 1.0);
    let r = floored_covariance(&(&sigma * (config.noise_split / (1.0 + config.r_weight))));
    let q = floored_covariance(&(&sigma * ((1.0 - config.noise_split) / (1.0 + config.q_weight))));
    StateSpaceModel::new(chosen.dynamics().clone(), q, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn linear_series(seed: u64, n: usize, noise: f64) -> Vec<TrainingSample> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_row_slice(2, 2, &[0.7, 0.2, -0.1, 0.6]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut x = DVector::from_column_slice(&[3.0, -2.0]);
        (0..n)
            .map(|t| {
                x = &a * &x + DVector::from_fn(2, |_, _| 0.3 * normal.sample(&mut rng));
                let y = &x + DVector::from_fn(2, |_, _| noise * normal.sample(&mut rng));
                TrainingSample { t: t as i64, y, u: None }
            })
            .collect()
    }

    #[test]
    fn linear_system_beats_baseline() {
        let series = linear_series(1, 600, 0.05);
        for kind in [ModelKind::Linear, ModelKind::SmallMlp] {
            let model = fit_model(&series, &FitConfig::new(kind, 2)).unwrap();
            let held = &series[479..];
            let fitted = one_step_mse(&model, held).unwrap();
            let base = baseline_mse(held);
            assert!(fitted < base, "{kind:?}: {fitted} vs {base}");
        }
    }

    #[test]
    fn constant_series_hits_noise_floor() {
        let series: Vec<_> = (0..150)
            .map(|t| TrainingSample { t, y: DVector::from_column_slice(&[4.2, -1.0]), u: None })
            .collect();
        let model = fit_model(&series, &FitConfig::new(ModelKind::Linear, 2)).unwrap();
        assert!(one_step_mse(&model, &series).unwrap() < 1e-20);
        assert!((model.r() - DMatrix::identity(2, 2) * NOISE_FLOOR).amax() < 1e-15);
        assert!((model.q() - DMatrix::identity(2, 2) * NOISE_FLOOR).amax() < 1e-15);
    }

    #[test]
    fn white_noise_gains_nothing_worse_than_baseline() {
        for seed in 0..10 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100 + seed);
            let normal = Normal::new(0.0, 1.0).unwrap();
            let series: Vec<_> = (0..500)
                .map(|t| TrainingSample { t, y: DVector::from_fn(2, |_, _| normal.sample(&mut rng)), u: None })
                .collect();
            let model = fit_model(&series, &FitConfig::new(ModelKind::Linear, 2)).unwrap();
            let held = &series[399..];
            let fitted = one_step_mse(&model, held).unwrap();
            assert!(fitted <= 1.05 * baseline_mse(held), "seed {seed}");
        }
    }

    #[test]
    fn fitting_error_paths() {
        let short = linear_series(2, 99, 0.1);
        assert!(matches!(
            fit_model(&short, &FitConfig::new(ModelKind::Linear, 2)),
            Err(ModelError::InsufficientData { needed: 100, got: 99 })
        ));
        let series = linear_series(2, 200, 0.1);
        let mut cfg = FitConfig::new(ModelKind::Linear, 2);
        cfg.learning_rate = f64::INFINITY;
        assert!(matches!(fit_model(&series, &cfg), Err(ModelError::Divergent(_))));
        assert!(fit_model(&series, &FitConfig::new(ModelKind::Linear, 3)).is_err());
    }

    #[test]
    fn csv_series_parses_sensors_and_actuators() {
        let text = "t,s1,s2,a1,a2\n0,1.0,2.0,0.1,0.2\n1,1.5,2.5,0.0,0.0\n";
        let rows = parse_training_csv(text, 2).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].t, 1);
        assert_eq!(rows[0].y, DVector::from_column_slice(&[1.0, 2.0]));
        assert_eq!(rows[0].u.as_ref().unwrap(), &DVector::from_column_slice(&[0.1, 0.2]));
        assert!(parse_training_csv("t,s\nx,1\n", 0).is_err());
        assert!(parse_training_csv("t,s\n0,abc\n", 0).is_err());
    }
}
