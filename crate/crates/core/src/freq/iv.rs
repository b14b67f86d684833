use super::{
    causal_estimate, columns, cross_moments, gls_system, ols, robust_system_covariance, sur_fgls_impl, system_labels,
    FreqError, FreqOptions, RegressionFit,
};
use crate::linalg::{least_squares, symmetrize, DesignMatrix};
use crate::model::{CausalEstimate, Method, Outcome, TrialDataset};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// First-stage coefficients smaller than this are treated as a failed instrument.
const WEAK_TOL: f64 = 1e-10;

fn design(intercept_and: &[(&str, &[f64])]) -> Result<DesignMatrix, FreqError> {
    Ok(DesignMatrix::with_intercept(intercept_and)?)
}

struct FirstStage {
    fitted: Vec<f64>,
}

fn first_stage(z: &[f64], d: &[f64], x: Option<&[f64]>) -> Result<FirstStage, FreqError> {
    let mut cols: Vec<(&str, &[f64])> = vec![("z", z)];
    if let Some(x) = x {
        cols.push(("x_base", x));
    }
    let fit = ols(&design(&cols)?, d)?;
    let pi_z = fit.coef("z").expect("z column");
    if pi_z.abs() < WEAK_TOL {
        return Err(FreqError::WeakInstrument(pi_z));
    }
    let fitted = d
        .iter()
        .zip(fit.residuals.column(0).iter())
        .map(|(a, r)| a - r)
        .collect();
    Ok(FirstStage { fitted })
}

/// Second-stage designs: with fitted receipt, and with actual receipt.
fn stage_designs(d_hat: &[f64], d: &[f64], x: Option<&[f64]>) -> Result<(DesignMatrix, DesignMatrix), FreqError> {
    let mut fitted: Vec<(&str, &[f64])> = vec![("d", d_hat)];
    let mut actual: Vec<(&str, &[f64])> = vec![("d", d)];
    if let Some(x) = x {
        fitted.push(("x_base", x));
        actual.push(("x_base", x));
    }
    Ok((design(&fitted)?, design(&actual)?))
}

fn two_stage_columns(
    d_hat: &[f64],
    d: &[f64],
    y: &[f64],
    x: Option<&[f64]>,
    robust: bool,
) -> Result<RegressionFit, FreqError> {
    let (xh, xa) = stage_designs(d_hat, d, x)?;
    let yv = DVector::from_column_slice(y);
    let ls = least_squares(xh.matrix(), &yv, xh.labels())?;
    let resid = &yv - xa.matrix() * &ls.coefficients;
    let n = y.len() as f64;
    let s2 = resid.norm_squared() / n;
    let covariance = if robust {
        let mut meat = DMatrix::zeros(xh.ncols(), xh.ncols());
        for (i, e) in resid.iter().enumerate() {
            let row = xh.matrix().row(i).transpose();
            meat.ger(e * e, &row, &row, 1.0);
        }
        symmetrize(&ls.xtx_inv * meat * &ls.xtx_inv)
    } else {
        &ls.xtx_inv * s2
    };
    Ok(RegressionFit {
        coefficients: ls.coefficients,
        residuals: DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()),
        covariance,
        sigma: DMatrix::from_element(1, 1, s2),
        labels: xh.labels().to_vec(),
    })
}

/// Two-stage least squares for one outcome. The coefficient labelled `d` is
/// the complier-average effect; its standard error uses residuals evaluated
/// at the actual receipt.
pub fn two_stage_ls(data: &TrialDataset, outcome: Outcome, opts: &FreqOptions) -> Result<RegressionFit, FreqError> {
    let cols = columns(data, &[outcome], opts.covariate)?;
    let y = match outcome {
        Outcome::Cost => cols.cost.as_deref(),
        Outcome::Effect => cols.effect.as_deref(),
    }
    .expect("requested outcome");
    let fs = first_stage(&cols.z, &cols.d, cols.x.as_deref())?;
    two_stage_columns(&fs.fitted, &cols.d, y, cols.x.as_deref(), opts.robust)
}

/// Difference in outcome means across arms over the difference in receipt rates.
pub fn wald_ratio(data: &TrialDataset, outcome: Outcome) -> Result<f64, FreqError> {
    let cols = columns(data, &[outcome], false)?;
    let y = match outcome {
        Outcome::Cost => cols.cost.expect("requested"),
        Outcome::Effect => cols.effect.expect("requested"),
    };
    let mut sums = [[0.0f64; 3]; 2];
    for ((&yi, &zi), &di) in y.iter().zip(&cols.z).zip(&cols.d) {
        let arm = zi as usize;
        sums[arm][0] += 1.0;
        sums[arm][1] += yi;
        sums[arm][2] += di;
    }
    let mean = |arm: usize, k: usize| sums[arm][k] / sums[arm][0];
    let denom = mean(1, 2) - mean(0, 2);
    if denom.abs() < WEAK_TOL {
        return Err(FreqError::WeakInstrument(denom));
    }
    Ok((mean(1, 1) - mean(0, 1)) / denom)
}

/// Per-outcome 2sls packaged as an estimate; the cost-effect covariance is zero.
pub fn two_stage_estimate(data: &TrialDataset, opts: &FreqOptions) -> Result<CausalEstimate, FreqError> {
    let cost = two_stage_ls(data, Outcome::Cost, opts)?;
    let effect = two_stage_ls(data, Outcome::Effect, opts)?;
    let vc = cost.se("d").unwrap().powi(2);
    let ve = effect.se("d").unwrap().powi(2);
    Ok(causal_estimate(
        Method::TwoSls,
        [cost.coef("d").unwrap(), effect.coef("d").unwrap()],
        [[vc, 0.0], [0.0, ve]],
        data,
        opts.lambda,
    ))
}

/// Joint fit of both outcome equations: first stage, per-outcome second stage,
/// then GLS with the cross-equation residual covariance.
pub fn three_stage_ls_fit(data: &TrialDataset, opts: &FreqOptions) -> Result<RegressionFit, FreqError> {
    let cols = columns(data, &[Outcome::Cost, Outcome::Effect], opts.covariate)?;
    let x = cols.x.as_deref();
    let fs = first_stage(&cols.z, &cols.d, x)?;
    let y1 = DVector::from_column_slice(cols.cost.as_deref().unwrap());
    let y2 = DVector::from_column_slice(cols.effect.as_deref().unwrap());
    let (xh, xa) = stage_designs(&fs.fitted, &cols.d, x)?;
    let n = y1.len();

    let mut stage2 = DMatrix::zeros(n, 2);
    for (j, y) in [&y1, &y2].into_iter().enumerate() {
        let ls = least_squares(xh.matrix(), y, xh.labels())?;
        stage2.set_column(j, &(y - xa.matrix() * &ls.coefficients));
    }
    let sigma = cross_moments(&stage2);

    let labels = system_labels(&[("cost", xh.labels()), ("effect", xh.labels())]);
    let (beta, bread) = gls_system(&[xh.matrix(), xh.matrix()], &[&y1, &y2], &sigma, &labels)?;
    let k = xh.ncols();
    let mut resid = DMatrix::zeros(n, 2);
    resid.set_column(0, &(&y1 - xa.matrix() * beta.rows(0, k)));
    resid.set_column(1, &(&y2 - xa.matrix() * beta.rows(k, k)));
    let covariance = if opts.robust {
        robust_system_covariance(&[xh.matrix(), xh.matrix()], &resid, &sigma, &bread)?
    } else {
        bread
    };
    Ok(RegressionFit {
        coefficients: beta,
        residuals: resid,
        covariance,
        sigma,
        labels,
    })
}

pub fn three_stage_ls(data: &TrialDataset, opts: &FreqOptions) -> Result<CausalEstimate, FreqError> {
    let fit = three_stage_ls_fit(data, opts)?;
    Ok(joint_estimate(Method::ThreeSls, &fit, "cost:d", "effect:d", data, opts))
}

fn joint_estimate(
    method: Method,
    fit: &RegressionFit,
    cost: &str,
    effect: &str,
    data: &TrialDataset,
    opts: &FreqOptions,
) -> CausalEstimate {
    let c = fit.index(cost).expect("cost label");
    let e = fit.index(effect).expect("effect label");
    let cov = &fit.covariance;
    causal_estimate(
        method,
        [fit.coefficients[c], fit.coefficients[e]],
        [[cov[(c, c)], cov[(c, e)]], [cov[(e, c)], cov[(e, e)]]],
        data,
        opts.lambda,
    )
}

/// Intention-to-treat increments from a SUR of both outcomes on assignment.
pub fn itt_sur(data: &TrialDataset, opts: &FreqOptions) -> Result<CausalEstimate, FreqError> {
    let cols = columns(data, &[Outcome::Cost, Outcome::Effect], opts.covariate)?;
    let mut spec: Vec<(&str, &[f64])> = vec![("z", &cols.z)];
    if let Some(x) = cols.x.as_deref() {
        spec.push(("x_base", x));
    }
    let x = design(&spec)?;
    let fit = sur_fgls_impl(
        &x,
        cols.cost.as_deref().unwrap(),
        &x,
        cols.effect.as_deref().unwrap(),
        opts.robust,
    )?;
    Ok(joint_estimate(Method::Itt, &fit, "eq1:z", "eq2:z", data, opts))
}

/// F test of the instrument in the first-stage regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStageF {
    pub f: f64,
    pub df_num: usize,
    pub df_den: usize,
    /// Receipt is an exact linear function of the regressors; `f` is then `f64::MAX`.
    pub perfect_fit: bool,
}

impl FirstStageF {
    pub fn is_weak(&self) -> bool {
        self.f < 10.0
    }
}

pub fn first_stage_f(data: &TrialDataset, covariate: bool) -> Result<FirstStageF, FreqError> {
    let cols = columns(data, &[], covariate)?;
    let mut spec: Vec<(&str, &[f64])> = vec![("z", &cols.z)];
    if let Some(x) = cols.x.as_deref() {
        spec.push(("x_base", x));
    }
    let x = design(&spec)?;
    let fit = ols(&x, &cols.d)?;
    let df_den = x.nrows() - x.ncols();
    let coef = fit.coef("z").unwrap();
    let rss: f64 = fit.residuals.iter().map(|r| r * r).sum();
    let tss_scale: f64 = cols.d.iter().map(|v| v * v).sum::<f64>().max(1.0);
    if rss <= 1e-24 * tss_scale {
        return Ok(FirstStageF {
            f: f64::MAX,
            df_num: 1,
            df_den,
            perfect_fit: true,
        });
    }
    let se = fit.se("z").unwrap();
    Ok(FirstStageF {
        f: (coef / se).powi(2),
        df_num: 1,
        df_den,
        perfect_fit: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_trial, DgpConfig};
    use crate::dist::CostDistribution;

    fn toy() -> TrialDataset {
        // arm means: y 1.0 vs 1.28, d 0 vs 0.7
        let z = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1];
        let d = vec![0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let mut y = vec![0.9, 1.1, 1.0, 0.8, 1.2, 1.05, 0.95, 1.0, 1.0, 1.0];
        y.extend([1.4, 1.3, 1.5, 1.2, 1.35, 1.4, 1.45, 1.0, 1.1, 1.1]);
        let e: Vec<f64> = y.iter().map(|v| v * 0.5).collect();
        TrialDataset::complete(z, d, y, e).unwrap()
    }

    #[test]
    fn wald_arithmetic() {
        let ds = toy();
        let w = wald_ratio(&ds, Outcome::Cost).unwrap();
        assert!((w - 0.4).abs() < 1e-12, "{w}");
    }

    #[test]
    fn two_stage_equals_wald() {
        let ds = toy();
        let fit = two_stage_ls(&ds, Outcome::Cost, &FreqOptions::default()).unwrap();
        assert!((fit.coef("d").unwrap() - wald_ratio(&ds, Outcome::Cost).unwrap()).abs() < 1e-10);
    }

    #[test]
    fn perfect_compliance_is_ols() {
        let mut ds = toy();
        ds = TrialDataset::complete(
            ds.z().to_vec(),
            ds.z().to_vec(),
            ds.observed(Outcome::Cost).unwrap(),
            ds.observed(Outcome::Effect).unwrap(),
        )
        .unwrap();
        let fit = two_stage_ls(&ds, Outcome::Cost, &FreqOptions::default()).unwrap();
        let z: Vec<f64> = ds.z().iter().map(|&v| f64::from(v)).collect();
        let o = ols(
            &DesignMatrix::with_intercept(&[("d", &z)]).unwrap(),
            &ds.observed(Outcome::Cost).unwrap(),
        )
        .unwrap();
        assert!((fit.coef("d").unwrap() - o.coef("d").unwrap()).abs() < 1e-12);
        let f = first_stage_f(&ds, false).unwrap();
        assert!(f.perfect_fit);
        assert_eq!(f.f, f64::MAX);
    }

    #[test]
    fn weak_instrument_rejected() {
        let z = vec![0, 0, 1, 1, 0, 1];
        let d = vec![0, 1, 0, 1, 1, 1];
        let d2 = vec![1, 0, 1, 0, 0, 0];
        let ds = TrialDataset::complete(z.clone(), d, vec![1.0; 6], vec![1.0; 6]).unwrap();
        // receipt rates: arm 0 = 2/3, arm 1 = 2/3
        assert!(matches!(
            wald_ratio(&ds, Outcome::Cost),
            Err(FreqError::WeakInstrument(_))
        ));
        assert!(matches!(
            two_stage_ls(&ds, Outcome::Cost, &FreqOptions::default()),
            Err(FreqError::WeakInstrument(_))
        ));
        let ds2 = TrialDataset::complete(vec![1; 6], d2, vec![1.0; 6], vec![1.0; 6]).unwrap();
        assert_eq!(
            wald_ratio(&ds2, Outcome::Cost).unwrap_err(),
            FreqError::NoInstrumentVariation
        );
    }

    #[test]
    fn missing_values_are_refused() {
        let ds = TrialDataset::new(
            vec![0, 1, 0, 1],
            vec![0, 1, 0, 1],
            vec![Some(1.0), None, Some(1.0), Some(2.0)],
            vec![Some(1.0); 4],
            None,
        )
        .unwrap();
        assert_eq!(
            two_stage_ls(&ds, Outcome::Cost, &FreqOptions::default()).unwrap_err(),
            FreqError::MissingValues("y_cost")
        );
        let opts = FreqOptions {
            covariate: true,
            ..FreqOptions::default()
        };
        assert_eq!(
            two_stage_ls(&ds, Outcome::Effect, &opts).unwrap_err(),
            FreqError::NoCovariate
        );
    }

    #[test]
    fn three_stage_matches_two_stage_points() {
        let ds = simulate_trial(&DgpConfig::new(400, 0.3, CostDistribution::Gamma, 0.8, 21)).unwrap();
        let opts = FreqOptions::default();
        let three = three_stage_ls(&ds, &opts).unwrap();
        let two = two_stage_estimate(&ds, &opts).unwrap();
        assert!((three.beta_cost - two.beta_cost).abs() < 1e-8 * ds.scale_cost());
        assert!((three.beta_effect - two.beta_effect).abs() < 1e-8);
        // same marginal standard errors: both use divisor n and the actual-receipt residuals
        assert!((three.se_cost() - two.se_cost()).abs() < 1e-8 * two.se_cost());
    }

    #[test]
    fn joint_inb_se_below_independence_for_positive_correlation() {
        let ds = simulate_trial(&DgpConfig::new(500, 0.3, CostDistribution::Normal, 0.4, 5)).unwrap();
        let est = three_stage_ls(&ds, &FreqOptions::default()).unwrap();
        assert!(est.cov[0][1] > 0.0);
        assert!(est.inb().se < est.inb_se_independent());
        let neg = simulate_trial(&DgpConfig::new(500, 0.3, CostDistribution::Normal, -0.4, 5)).unwrap();
        let est = three_stage_ls(&neg, &FreqOptions::default()).unwrap();
        assert!(est.inb().se > est.inb_se_independent());
    }

    #[test]
    fn robust_covariance_is_close_under_homoskedasticity() {
        let ds = simulate_trial(&DgpConfig::new(4000, 0.3, CostDistribution::Normal, 0.4, 9)).unwrap();
        let plain = three_stage_ls(&ds, &FreqOptions::default()).unwrap();
        let robust = three_stage_ls(
            &ds,
            &FreqOptions {
                robust: true,
                ..FreqOptions::default()
            },
        )
        .unwrap();
        assert_eq!(plain.beta_cost, robust.beta_cost);
        assert!((robust.se_cost() / plain.se_cost() - 1.0).abs() < 0.1);
    }

    #[test]
    fn covariate_enters_all_stages() {
        let base = simulate_trial(&DgpConfig::new(300, 0.3, CostDistribution::Normal, 0.4, 77)).unwrap();
        let x: Vec<Option<f64>> = (0..base.len()).map(|i| Some((i % 7) as f64 / 7.0)).collect();
        let ds = base.with_covariate(x).unwrap();
        let opts = FreqOptions {
            covariate: true,
            ..FreqOptions::default()
        };
        let fit = three_stage_ls_fit(&ds, &opts).unwrap();
        assert!(fit.index("cost:x_base").is_some() && fit.index("effect:x_base").is_some());
        let two = two_stage_ls(&ds, Outcome::Cost, &opts).unwrap();
        assert!((fit.coef("cost:d").unwrap() - two.coef("d").unwrap()).abs() < 1e-8);
    }

    #[test]
    fn itt_attenuates_cace() {
        let ds = simulate_trial(&DgpConfig::new(20_000, 0.3, CostDistribution::Normal, 0.4, 3)).unwrap();
        let itt = itt_sur(&ds, &FreqOptions::default()).unwrap();
        // cost ITT = 0.4 * 0.7 in working units
        let working = itt.beta_cost / ds.scale_cost();
        assert!(
            (working - 0.28).abs() < 4.0 * itt.se_cost() / ds.scale_cost(),
            "{working}"
        );
    }

    #[test]
    fn equivariance_in_cost_scale() {
        let ds = simulate_trial(&DgpConfig::new(200, 0.3, CostDistribution::Gamma, 0.4, 8)).unwrap();
        let scaled = ds.map_costs(|v| v * 3.0);
        let opts = FreqOptions::default();
        let a = two_stage_ls(&ds, Outcome::Cost, &opts).unwrap();
        let b = two_stage_ls(&scaled, Outcome::Cost, &opts).unwrap();
        assert!((b.coef("d").unwrap() - 3.0 * a.coef("d").unwrap()).abs() < 1e-10);
        assert!((b.se("d").unwrap() - 3.0 * a.se("d").unwrap()).abs() < 1e-10);
    }

    #[test]
    fn first_stage_strength() {
        let ds = simulate_trial(&DgpConfig::new(1000, 0.7, CostDistribution::Normal, 0.4, 14)).unwrap();
        let f = first_stage_f(&ds, false).unwrap();
        assert!(f.f > 10.0 && !f.is_weak());
    }
}
