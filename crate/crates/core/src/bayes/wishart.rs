//! Wishart draws and the correlation transform.

use crate::linalg::{cholesky, LinalgError};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

/// Draws `W ~ Wishart(df, scale)` (mean `df * scale`) by the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(
    df: f64,
    scale: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DMatrix<f64>, LinalgError> {
    let p = scale.nrows();
    if !(df > (p - 1) as f64) {
        return Err(LinalgError::Dimension(format!("Wishart df {df} below dimension {p}")));
    }
    let l = cholesky(scale)?;
    let mut a = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let chi = ChiSquared::new(df - i as f64).map_err(|_| LinalgError::NotPositiveDefinite)?;
        a[(i, i)] = chi.sample(rng).sqrt();
        for j in 0..i {
            a[(i, j)] = StandardNormal.sample(rng);
        }
    }
    let la = l * a;
    Ok(&la * la.transpose())
}

/// Conjugate update of a precision matrix: prior `Wishart(df0, prior_scale)`,
/// Gaussian residual cross-products `sscp` over `n` rows.
pub fn wishart_posterior(
    df0: f64,
    prior_scale: &DMatrix<f64>,
    sscp: &DMatrix<f64>,
    n: usize,
) -> Result<(f64, DMatrix<f64>), LinalgError> {
    let prior_inv = prior_scale
        .clone()
        .try_inverse()
        .ok_or(LinalgError::NotPositiveDefinite)?;
    let post = (prior_inv + sscp)
        .try_inverse()
        .ok_or(LinalgError::NotPositiveDefinite)?;
    Ok((df0 + n as f64, crate::linalg::symmetrize(post)))
}

/// Fisher z-transform of a correlation.
pub fn fisher_z(rho: f64) -> f64 {
    rho.atanh()
}

pub fn inverse_fisher_z(z: f64) -> f64 {
    z.tanh()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn fisher_round_trip() {
        let lo = -1.0 + 1e-6;
        let hi = 1.0 - 1e-6;
        for i in 0..=2000 {
            let rho = lo + (hi - lo) * i as f64 / 2000.0;
            assert!((inverse_fisher_z(fisher_z(rho)) - rho).abs() < 1e-12, "{rho}");
        }
        assert!((inverse_fisher_z(fisher_z(hi)) - hi).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_update_keeps_identity_scale() {
        let id = DMatrix::<f64>::identity(3, 3);
        let (df, scale) = wishart_posterior(3.0, &id, &DMatrix::zeros(3, 3), 5).unwrap();
        assert_eq!(df, 8.0);
        assert_eq!(scale, id);
        // Moments of Wishart(df, I): E W_ij = df d_ij, Var W_ii = 2 df, Var W_ij = df.
        let mut rng = seeded(11);
        let reps = 20_000;
        let mut sum = DMatrix::<f64>::zeros(3, 3);
        let mut sq = DMatrix::<f64>::zeros(3, 3);
        for _ in 0..reps {
            let w = sample_wishart(df, &scale, &mut rng).unwrap();
            assert!(w.clone().cholesky().is_some());
            sum += &w;
            sq += w.component_mul(&w);
        }
        for i in 0..3 {
            for j in 0..3 {
                let m = sum[(i, j)] / reps as f64;
                let v = sq[(i, j)] / reps as f64 - m * m;
                let (em, ev) = if i == j { (df, 2.0 * df) } else { (0.0, df) };
                let se = (ev / reps as f64).sqrt();
                assert!((m - em).abs() < 4.0 * se, "mean[{i},{j}] = {m}");
                assert!((v - ev).abs() < 0.1 * ev, "var[{i},{j}] = {v}");
            }
        }
    }

    #[test]
    fn rejects_low_df() {
        let id = DMatrix::<f64>::identity(3, 3);
        assert!(sample_wishart(1.5, &id, &mut seeded(1)).is_err());
    }
}
