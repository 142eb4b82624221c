use super::{ModelError, Result, StateSpaceModel};
use nalgebra::{DMatrix, DVector};

/// Condition estimates at or above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct StateEstimate {
    pub x: DVector<f64>,
    pub p: DMatrix<f64>,
    pub t: u64,
}

impl StateEstimate {
    pub fn new(x: DVector<f64>, p: DMatrix<f64>, t: u64) -> Self {
        Self { x, p, t }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Jacobians {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub k: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Innovation {
    pub r: DVector<f64>,
    pub s: DMatrix<f64>,
}

/// Everything produced by one predict/update cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct EkfStep {
    pub x_prior: DVector<f64>,
    pub p_prior: DMatrix<f64>,
    pub jacobians: Jacobians,
    pub innovation: Innovation,
    pub posterior: StateEstimate,
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn conformable(what: &str, ok: bool) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(ModelError::Dimension(what.into()))
    }
}

pub fn predict_state(est: &StateEstimate, u: &DVector<f64>, model: &StateSpaceModel) -> Result<DVector<f64>> {
    model.g(&est.x, u)
}

pub fn compute_residual(y: &DVector<f64>, x_prior: &DVector<f64>, model: &StateSpaceModel) -> Result<DVector<f64>> {
    conformable("measurement length must equal d", y.len() == model.obs_dim())?;
    Ok(y - model.h(x_prior)?)
}

pub fn propagate_covariance(p_post: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = p_post.nrows();
    conformable(
        "P, G and Q must all be m×m",
        p_post.is_square() && g.shape() == (m, m) && q.shape() == (m, m),
    )?;
    Ok(symmetrize(&(g * p_post * g.transpose() + q)))
}

pub fn innovation_covariance(p_prior: &DMatrix<f64>, h: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = p_prior.nrows();
    let d = h.nrows();
    conformable(
        "P must be m×m, H d×m and R d×d",
        p_prior.is_square() && h.ncols() == m && r.shape() == (d, d),
    )?;
    Ok(symmetrize(&(h * p_prior * h.transpose() + r)))
}

/// Ratio of extreme singular values; infinite for an exactly singular matrix.
pub fn condition_estimate(s: &DMatrix<f64>) -> f64 {
    let sv = s.singular_values();
    let max = sv.max();
    let min = sv.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Solve `K S = P Hᵀ` for `K`.
pub fn kalman_gain(p_prior: &DMatrix<f64>, h: &DMatrix<f64>, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = p_prior.nrows();
    let d = h.nrows();
    conformable(
        "P must be m×m, H d×m and S d×d",
        p_prior.is_square() && h.ncols() == m && s.shape() == (d, d),
    )?;
    let condition = condition_estimate(s);
    if condition.is_nan() || condition >= MAX_CONDITION {
        return Err(ModelError::SingularInnovation { condition });
    }
    // K S = P Hᵀ  ⇔  Sᵀ Kᵀ = H Pᵀ
    let rhs = h * p_prior.transpose();
    let kt = s
        .transpose()
        .lu()
        .solve(&rhs)
        .ok_or(ModelError::SingularInnovation { condition })?;
    let k = kt.transpose();
    if k.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("Kalman gain".into()));
    }
    Ok(k)
}

pub fn update_state(x_prior: &DVector<f64>, k: &DMatrix<f64>, r: &DVector<f64>) -> Result<DVector<f64>> {
    conformable("K must be m×d", k.nrows() == x_prior.len() && k.ncols() == r.len())?;
    Ok(x_prior + k * r)
}

pub fn update_covariance(p_prior: &DMatrix<f64>, k: &DMatrix<f64>, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = p_prior.nrows();
    conformable(
        "K must be m×d and H d×m",
        p_prior.is_square() && k.nrows() == m && h.ncols() == m && k.ncols() == h.nrows(),
    )?;
    let i = DMatrix::identity(m, m);
    Ok(symmetrize(&((i - k * h) * p_prior)))
}

fn fd_step(v: f64) -> f64 {
    (1e-6 * v.abs()).max(1e-6)
}

fn finite_difference<F>(x: &DVector<f64>, rows: usize, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut out = DMatrix::zeros(rows, x.len());
    for j in 0..x.len() {
        let h = fd_step(x[j]);
        let mut hi = x.clone();
        let mut lo = x.clone();
        hi[j] += h;
        lo[j] -= h;
        let col = (f(&hi)? - f(&lo)?) / (2.0 * h);
        out.set_column(j, &col);
    }
    Ok(out)
}

/// `(G, H)` at the operating point `x`.
pub fn jacobians(model: &StateSpaceModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    use super::Dynamics;
    model.g(x, u)?;
    let sech2 = |x: &DVector<f64>| x.map(|v| 1.0 - v.tanh().powi(2));
    let (g, h) = match model.dynamics() {
        Dynamics::Linear { a, c, .. } => (a.clone(), c.clone()),
        Dynamics::AnalyticNonlinear { a, coupling, quad, c, obs_coupling, .. } => {
            let dt = DMatrix::from_diagonal(&sech2(x));
            let dq = DMatrix::from_diagonal(&(quad.component_mul(x) * 2.0));
            (a + coupling * &dt + dq, c + obs_coupling * &dt)
        }
        Dynamics::SmallMlp { .. } => (
            finite_difference(x, model.state_dim(), |p| model.g(p, u))?,
            finite_difference(x, model.obs_dim(), |p| model.h(p))?,
        ),
    };
    if g.iter().chain(h.iter()).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("Jacobian".into()));
    }
    Ok((g, h))
}

/// One full predict/update cycle. `G` is taken at the previous posterior, `H` at the prior.
pub fn ekf_step(
    model: &StateSpaceModel,
    est: &StateEstimate,
    y: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<EkfStep> {
    let x_prior = predict_state(est, u, model)?;
    let (g, _) = jacobians(model, &est.x, u)?;
    let (_, h) = jacobians(model, &x_prior, u)?;
    let p_prior = propagate_covariance(&est.p, &g, model.q())?;
    let r = compute_residual(y, &x_prior, model)?;
    let s = innovation_covariance(&p_prior, &h, model.r())?;
    let k = kalman_gain(&p_prior, &h, &s)?;
    let x_post = update_state(&x_prior, &k, &r)?;
    let p_post = update_covariance(&p_prior, &k, &h)?;
    Ok(EkfStep {
        x_prior,
        p_prior,
        jacobians: Jacobians { g, h, k },
        innovation: Innovation { r, s },
        posterior: StateEstimate::new(x_post, p_post, est.t + 1),
    })
}

/// Normalized innovation statistic `rᵀ S⁻¹ r`, via a Cholesky solve.
pub fn whitened_statistic(innovation: &Innovation) -> Result<f64> {
    let chol = innovation
        .s
        .clone()
        .cholesky()
        .ok_or(ModelError::SingularInnovation { condition: condition_estimate(&innovation.s) })?;
    let z = chol.solve(&innovation.r);
    Ok(innovation.r.dot(&z))
}

/// Iterate the discrete Riccati recursion at a fixed linearization until it settles.
pub fn steady_state_covariance(g: &DMatrix<f64>, h: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut p = q.clone();
    for _ in 0..10_000 {
        let prior = propagate_covariance(&p, g, q)?;
        let s = innovation_covariance(&prior, h, r)?;
        let k = kalman_gain(&prior, h, &s)?;
        let next = update_covariance(&prior, &k, h)?;
        let delta = (&next - &p).amax();
        p = next;
        if delta < 1e-14 {
            break;
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::super::{Dynamics, ModelKind};
    use super::*;
    use approx::assert_relative_eq;

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn v(vals: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(vals)
    }

    fn identity_linear(n: usize) -> StateSpaceModel {
        StateSpaceModel::linear(DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::identity(n, n), DMatrix::identity(n, n)).unwrap()
    }

    #[test]
    fn predict_examples() {
        let model = identity_linear(1);
        let est = StateEstimate::new(v(&[2.0]), m1(1.0), 0);
        assert_eq!(predict_state(&est, &v(&[3.0]), &model).unwrap(), v(&[5.0]));
        let est = StateEstimate::new(v(&[1.5]), m1(1.0), 0);
        assert_eq!(predict_state(&est, &v(&[0.0]), &model).unwrap(), v(&[1.5]));

        let a = DMatrix::from_row_slice(2, 2, &[0.9, 0.1, 0.1, 0.9]);
        let model = StateSpaceModel::linear(a, DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let est = StateEstimate::new(v(&[1.0, 0.0]), DMatrix::identity(2, 2), 0);
        let x = predict_state(&est, &DVector::zeros(2), &model).unwrap();
        assert_relative_eq!(x, v(&[0.9, 0.1]), epsilon = 1e-15);

        let bad = StateEstimate::new(v(&[1.0]), m1(1.0), 0);
        assert!(matches!(predict_state(&bad, &DVector::zeros(2), &model), Err(ModelError::Dimension(_))));
    }

    #[test]
    fn residual_examples() {
        let model = identity_linear(2);
        assert_eq!(compute_residual(&v(&[1.0, 1.0]), &v(&[1.0, 1.0]), &model).unwrap(), v(&[0.0, 0.0]));
        let model = identity_linear(1);
        assert_eq!(compute_residual(&v(&[3.0]), &v(&[1.0]), &model).unwrap(), v(&[2.0]));
        let model = StateSpaceModel::linear(m1(1.0), m1(2.0), m1(1.0), m1(1.0)).unwrap();
        assert_eq!(compute_residual(&v(&[5.0]), &v(&[2.0]), &model).unwrap(), v(&[1.0]));
        assert!(compute_residual(&v(&[5.0, 1.0]), &v(&[2.0]), &model).is_err());
    }

    #[test]
    fn covariance_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(propagate_covariance(&i2, &i2, &DMatrix::zeros(2, 2)).unwrap(), i2);
        assert_eq!(propagate_covariance(&m1(1.0), &m1(2.0), &m1(1.0)).unwrap(), m1(5.0));
        assert_eq!(propagate_covariance(&m1(7.0), &m1(0.0), &m1(0.3)).unwrap(), m1(0.3));
        assert!(propagate_covariance(&i2, &m1(1.0), &i2).is_err());

        assert_eq!(innovation_covariance(&i2, &i2, &DMatrix::zeros(2, 2)).unwrap(), i2);
        assert_eq!(innovation_covariance(&m1(1.0), &m1(2.0), &m1(1.0)).unwrap(), m1(5.0));
        let h = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
        assert_eq!(innovation_covariance(&i2, &h, &m1(0.5)).unwrap(), m1(1.5));
    }

    #[test]
    fn gain_examples() {
        assert_eq!(kalman_gain(&m1(1.0), &m1(1.0), &m1(2.0)).unwrap(), m1(0.5));
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_relative_eq!(kalman_gain(&i2, &i2, &(&i2 * 2.0)).unwrap(), &i2 * 0.5, epsilon = 1e-15);
        assert_relative_eq!(kalman_gain(&m1(2.0), &m1(3.0), &m1(10.0)).unwrap()[(0, 0)], 0.6, epsilon = 1e-15);
        let singular = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match kalman_gain(&i2, &i2, &singular) {
            Err(ModelError::SingularInnovation { condition }) => assert!(condition >= MAX_CONDITION),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn gain_solve_residual_is_tiny() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = rng.random_range(1..6);
            let d = rng.random_range(1..6);
            let a = DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0));
            let p = &a * a.transpose() + DMatrix::identity(m, m) * 0.1;
            let h = DMatrix::from_fn(d, m, |_, _| rng.random_range(-2.0..2.0));
            let s = innovation_covariance(&p, &h, &(DMatrix::identity(d, d) * 0.05)).unwrap();
            let k = kalman_gain(&p, &h, &s).unwrap();
            let pht = &p * h.transpose();
            let rel = (&k * &s - &pht).norm() / pht.norm().max(1.0);
            assert!(rel < 1e-10, "{rel}");
        }
    }

    #[test]
    fn update_examples() {
        let x = v(&[1.0]);
        assert_eq!(update_state(&x, &m1(0.5), &v(&[0.0])).unwrap(), x);
        assert_eq!(update_state(&x, &m1(0.5), &v(&[2.0])).unwrap(), v(&[2.0]));
        assert_eq!(update_state(&x, &m1(0.0), &v(&[9.0])).unwrap(), x);

        assert_eq!(update_covariance(&m1(2.0), &m1(0.0), &m1(1.0)).unwrap(), m1(2.0));
        assert_eq!(update_covariance(&m1(2.0), &m1(0.5), &m1(1.0)).unwrap(), m1(1.0));
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(update_covariance(&(&i2 * 3.0), &i2, &i2).unwrap(), DMatrix::zeros(2, 2));
    }

    fn fd_oracle<F: Fn(&DVector<f64>) -> DVector<f64>>(x: &DVector<f64>, f: F) -> DMatrix<f64> {
        // forward-backward with a coarser step than the implementation
        let h = 1e-5;
        let fx = f(x);
        let mut out = DMatrix::zeros(fx.len(), x.len());
        for j in 0..x.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a[j] += h;
            b[j] -= h;
            out.set_column(j, &((f(&a) - f(&b)) / (2.0 * h)));
        }
        out
    }

    fn close_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-4 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn jacobian_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[0.3, -0.2, 0.5, 0.9]);
        let model = StateSpaceModel::linear(a.clone(), DMatrix::identity(2, 2), DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let (g, h) = jacobians(&model, &v(&[1.0, 2.0]), &DVector::zeros(2)).unwrap();
        assert_eq!(g, a);
        assert_eq!(h, DMatrix::identity(2, 2));

        // g(x) = [x₁², x₂]
        let quad = Dynamics::AnalyticNonlinear {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]),
            coupling: DMatrix::zeros(2, 2),
            quad: v(&[1.0, 0.0]),
            bias: DVector::zeros(2),
            c: DMatrix::identity(2, 2),
            obs_coupling: DMatrix::zeros(2, 2),
        };
        let model = StateSpaceModel::new(quad, DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let (g, _) = jacobians(&model, &v(&[3.0, 0.0]), &DVector::zeros(2)).unwrap();
        assert!((g[(0, 0)] - 6.0).abs() < 1e-4);
    }

    #[test]
    fn jacobians_match_oracle_for_all_kinds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for kind in [ModelKind::Linear, ModelKind::AnalyticNonlinear, ModelKind::SmallMlp] {
            for _ in 0..20 {
                let (m, d, hidden) = (3, 2, 4);
                let n = Dynamics::theta_len(kind, m, d, hidden);
                let theta: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let model = StateSpaceModel::from_theta(kind, m, d, hidden, &theta, DMatrix::identity(m, m), DMatrix::identity(d, d)).unwrap();
                let x = DVector::from_fn(m, |_, _| rng.random_range(-2.0..2.0));
                let u = DVector::from_fn(m, |_, _| rng.random_range(-1.0..1.0));
                let (g, h) = jacobians(&model, &x, &u).unwrap();
                close_rel(&g, &fd_oracle(&x, |p| model.g(p, &u).unwrap()));
                close_rel(&h, &fd_oracle(&x, |p| model.h(p).unwrap()));
            }
        }
    }

    #[test]
    fn step_advances_time_and_symmetry() {
        let model = StateSpaceModel::reference_nonlinear();
        let est = StateEstimate::new(DVector::zeros(4), DMatrix::identity(4, 4) * 0.02, 7);
        let step = ekf_step(&model, &est, &v(&[0.1, -0.2, 0.3, 0.0]), &DVector::zeros(4)).unwrap();
        assert_eq!(step.posterior.t, 8);
        assert_eq!(step.posterior.p, step.posterior.p.transpose());
        assert!(whitened_statistic(&step.innovation).unwrap() >= 0.0);
    }
}
