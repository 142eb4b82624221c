//! χ² distribution helpers for the upper control limit.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("significance level {0} must lie strictly inside (0, 1)")]
    InvalidAlpha(f64),
    #[error("degrees of freedom must be positive, got {0}")]
    InvalidDof(usize),
}

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, n = 9
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, &c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let gln = ln_gamma(a);
    if x < a + 1.0 {
        // series
        let mut ap = a;
        let mut sum = 1.0 / a;
        let mut del = sum;
        for _ in 0..1000 {
            ap += 1.0;
            del *= x / ap;
            sum += del;
            if del.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        (sum * (-x + a * x.ln() - gln).exp()).clamp(0.0, 1.0)
    } else {
        // Lentz continued fraction for Q(a, x)
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..1000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-16 {
                break;
            }
        }
        (1.0 - (-x + a * x.ln() - gln).exp() * h).clamp(0.0, 1.0)
    }
}

pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    regularized_gamma_p(dof as f64 / 2.0, x / 2.0)
}

/// Upper-tail quantile: the `x` with `P(χ²_dof > x) = alpha`.
pub fn chi2_upper_quantile(dof: usize, alpha: f64) -> Result<f64, StatsError> {
    if dof == 0 {
        return Err(StatsError::InvalidDof(dof));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    let target = 1.0 - alpha;
    let mut lo = 0.0;
    let mut hi = (dof as f64).max(1.0);
    while chi2_cdf(hi, dof) < target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_cdf(mid, dof) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn cdf_matches_independent_implementation() {
        for dof in [1usize, 2, 3, 4, 7, 12, 30] {
            let oracle = ChiSquared::new(dof as f64).unwrap();
            for x in [0.01, 0.5, 1.0, 3.0, 7.5, 15.0, 40.0, 90.0] {
                let diff = (chi2_cdf(x, dof) - oracle.cdf(x)).abs();
                assert!(diff < 1e-10, "dof {dof} x {x}: {diff}");
            }
        }
    }

    #[test]
    fn quantile_reference_values() {
        // published table values
        assert!((chi2_upper_quantile(1, 0.05).unwrap() - 3.841_458_820_694_124).abs() < 1e-6);
        assert!((chi2_upper_quantile(4, 0.05).unwrap() - 9.487_729_036_781_154).abs() < 1e-6);
        assert!((chi2_upper_quantile(2, 0.01).unwrap() - 9.210_340_371_976_182).abs() < 1e-6);
    }

    #[test]
    fn quantile_inverts_oracle_cdf() {
        for dof in [1usize, 3, 4, 8] {
            let oracle = ChiSquared::new(dof as f64).unwrap();
            for alpha in [0.005, 0.02, 0.05, 0.2] {
                let q = chi2_upper_quantile(dof, alpha).unwrap();
                assert!((1.0 - oracle.cdf(q) - alpha).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn quantile_rejects_bad_inputs() {
        assert!(chi2_upper_quantile(1, 0.0).is_err());
        assert!(chi2_upper_quantile(1, 1.0).is_err());
        assert!(chi2_upper_quantile(1, -0.5).is_err());
        assert!(chi2_upper_quantile(0, 0.05).is_err());
    }
}
