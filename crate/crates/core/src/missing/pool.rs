//! Rubin's rules.

use crate::model::Interval;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PoolError {
    #[error("pooling needs at least two imputations, got {0}")]
    TooFew(usize),
    #[error("variance {0} is negative or not finite")]
    BadVariance(f64),
    #[error("estimate {0} is not finite")]
    BadEstimate(f64),
    #[error("estimates and variances differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("all estimates are identical and every variance is zero")]
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PooledEstimate {
    pub estimate: f64,
    /// Mean within-imputation variance.
    pub within: f64,
    /// Between-imputation variance of the point estimates.
    pub between: f64,
    pub total: f64,
    /// Small-sample degrees of freedom; infinite when `between == 0`.
    pub df: f64,
    pub m: usize,
}

impl PooledEstimate {
    pub fn se(&self) -> f64 {
        self.total.sqrt()
    }

    /// 95% interval from the t reference distribution.
    pub fn ci(&self) -> Interval {
        let q = t_975(self.df);
        Interval::new(self.estimate - q * self.se(), self.estimate + q * self.se())
    }
}

/// Above this many degrees of freedom statrs' t quantile loses accuracy (and
/// eventually stops terminating), so an expansion around the normal is used.
const LARGE_DF: f64 = 1e4;

/// 97.5% quantile of Student's t.
fn t_975(df: f64) -> f64 {
    let z = crate::model::Z_975;
    if df <= LARGE_DF {
        return StudentsT::new(0.0, 1.0, df).map(|t| t.inverse_cdf(0.975)).unwrap_or(z);
    }
    if !df.is_finite() {
        return z;
    }
    // Cornish-Fisher terms to order 1/df^2
    let (z3, z5) = (z.powi(3), z.powi(5));
    z + (z3 + z) / (4.0 * df) + (5.0 * z5 + 16.0 * z3 + 3.0 * z) / (96.0 * df * df)
}

pub fn rubin_pool(estimates: &[f64], variances: &[f64]) -> Result<PooledEstimate, PoolError> {
    let m = estimates.len();
    if m != variances.len() {
        return Err(PoolError::LengthMismatch(m, variances.len()));
    }
    if m < 2 {
        return Err(PoolError::TooFew(m));
    }
    if let Some(&v) = variances.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(PoolError::BadVariance(v));
    }
    if let Some(&e) = estimates.iter().find(|e| !e.is_finite()) {
        return Err(PoolError::BadEstimate(e));
    }
    let mf = m as f64;
    let estimate = estimates.iter().sum::<f64>() / mf;
    let within = variances.iter().sum::<f64>() / mf;
    let between = estimates.iter().map(|e| (e - estimate).powi(2)).sum::<f64>() / (mf - 1.0);
    if between == 0.0 && within == 0.0 {
        return Err(PoolError::Degenerate);
    }
    let inflated = (1.0 + 1.0 / mf) * between;
    let df = if between > 0.0 {
        (mf - 1.0) * (1.0 + within / inflated).powi(2)
    } else {
        f64::INFINITY
    };
    Ok(PooledEstimate {
        estimate,
        within,
        between,
        total: within + inflated,
        df,
        m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn hand_example() {
        let p = rubin_pool(&[0.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!((p.estimate, p.within, p.between, p.total), (1.0, 1.0, 2.0, 4.0));
        // df = 1 * (1 + 1/3)^2
        assert!((p.df - 16.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn huge_df_uses_normal_quantile() {
        let p = rubin_pool(&[1.0, 1.0 + 1e-12], &[0.25, 0.25]).unwrap();
        assert!(p.df > 1e20 && p.df.is_finite());
        let ci = p.ci();
        assert!((ci.upper - 1.0 - crate::model::Z_975 * 0.5).abs() < 1e-9);
        // the expansion and statrs agree where both are valid
        let below = t_975(LARGE_DF);
        let above = t_975(LARGE_DF * (1.0 + 1e-12));
        assert!((below - above).abs() < 1e-8, "{below} {above}");
        // scipy.stats.t.ppf(0.975, df)
        for (df, q) in [
            (1e5, 1.959_987_707_534_609_3),
            (1e6, 1.959_966_356_814_106_6),
            (1e8, 1.959_964_008_262_766_3),
        ] {
            assert!((t_975(df) - q).abs() < 1e-10, "{df}");
        }
    }

    #[test]
    fn identical_estimates() {
        let p = rubin_pool(&[3.0; 5], &[0.5; 5]).unwrap();
        assert_eq!(p.between, 0.0);
        assert_eq!(p.total, 0.5);
        assert_eq!(p.estimate, 3.0);
        assert!(p.df.is_infinite());
        assert_eq!(rubin_pool(&[1.0, 1.0], &[0.0, 0.0]), Err(PoolError::Degenerate));
    }

    #[test]
    fn errors() {
        assert_eq!(rubin_pool(&[1.0], &[1.0]), Err(PoolError::TooFew(1)));
        assert_eq!(rubin_pool(&[1.0, 2.0], &[1.0, -1.0]), Err(PoolError::BadVariance(-1.0)));
        assert!(matches!(
            rubin_pool(&[1.0, 2.0], &[1.0]),
            Err(PoolError::LengthMismatch(2, 1))
        ));
    }

    #[test]
    fn matches_formula_oracle_and_is_permutation_invariant() {
        let mut rng = seeded(4);
        for _ in 0..200 {
            let m = rng.random_range(2..30);
            let est: Vec<f64> = (0..m).map(|_| rng.random_range(-5.0..5.0)).collect();
            let var: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..3.0)).collect();
            let p = rubin_pool(&est, &var).unwrap();
            // Two-pass oracle on sorted copies.
            let mut e2 = est.clone();
            e2.sort_by(f64::total_cmp);
            let q = e2.iter().sum::<f64>() / m as f64;
            let u = var.iter().rev().sum::<f64>() / m as f64;
            let b = e2.iter().map(|x| (x - q) * (x - q)).sum::<f64>() / (m as f64 - 1.0);
            let t = u + b + b / m as f64;
            assert!((p.estimate - q).abs() < 1e-12);
            assert!((p.within - u).abs() < 1e-12);
            assert!((p.between - b).abs() < 1e-12);
            assert!((p.total - t).abs() < 1e-12);
            assert!(p.total >= p.within);
            let mut idx: Vec<usize> = (0..m).collect();
            idx.reverse();
            let perm = rubin_pool(
                &idx.iter().map(|&i| est[i]).collect::<Vec<_>>(),
                &idx.iter().map(|&i| var[i]).collect::<Vec<_>>(),
            )
            .unwrap();
            assert!((perm.total - p.total).abs() < 1e-12);
        }
    }

    #[test]
    fn t_interval_wider_than_normal() {
        let p = rubin_pool(&[0.0, 1.0, 2.0], &[0.1, 0.1, 0.1]).unwrap();
        let ci = p.ci();
        assert!(ci.width() > 2.0 * crate::model::Z_975 * p.se());
    }
}
