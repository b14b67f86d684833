//! Least-squares estimators: OLS, two-step FGLS for seemingly unrelated
//! regressions, and the instrumental-variable family built on them.

mod iv;

pub use iv::{
    first_stage_f, itt_sur, three_stage_ls, three_stage_ls_fit, two_stage_estimate, two_stage_ls, wald_ratio,
    FirstStageF,
};

use crate::linalg::{cholesky, least_squares, symmetrize, DesignMatrix, LinalgError};
use crate::model::{CausalEstimate, Lambda, Method, ModelError, Outcome, TrialDataset};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FreqError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("estimated error covariance is singular")]
    DegenerateSystem,
    #[error("instrument is weak or degenerate (first-stage difference {0:e})")]
    WeakInstrument(f64),
    #[error("assignment does not vary: both arms must be non-empty")]
    NoInstrumentVariation,
    #[error("column `{0}` has missing values; impute or drop incomplete rows first")]
    MissingValues(&'static str),
    #[error("covariate adjustment requested but the dataset has no baseline covariate")]
    NoCovariate,
    #[error("equations have different numbers of rows ({0} vs {1})")]
    RowMismatch(usize, usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Options shared by the estimators that take a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreqOptions {
    pub covariate: bool,
    pub robust: bool,
    pub lambda: Lambda,
}

impl Default for FreqOptions {
    fn default() -> Self {
        Self {
            covariate: false,
            robust: false,
            lambda: Lambda::DEFAULT,
        }
    }
}

/// Coefficients, residuals and covariances of a single- or multi-equation fit.
///
/// For systems the coefficient vector stacks equations in order and labels
/// read `equation:regressor`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionFit {
    pub coefficients: DVector<f64>,
    /// One column per equation.
    pub residuals: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    /// Residual variance (single equation) or cross-equation covariance.
    pub sigma: DMatrix<f64>,
    pub labels: Vec<String>,
}

impl RegressionFit {
    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn coef(&self, label: &str) -> Option<f64> {
        self.index(label).map(|i| self.coefficients[i])
    }

    pub fn se(&self, label: &str) -> Option<f64> {
        self.index(label).map(|i| self.covariance[(i, i)].max(0.0).sqrt())
    }

    pub fn cov(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.covariance[(self.index(a)?, self.index(b)?)])
    }
}

/// Ordinary least squares with homoskedastic covariance `s^2 (X'X)^{-1}`, `s^2 = RSS / (n - k)`.
pub fn ols(x: &DesignMatrix, y: &[f64]) -> Result<RegressionFit, FreqError> {
    if y.len() != x.nrows() {
        return Err(FreqError::RowMismatch(y.len(), x.nrows()));
    }
    let yv = DVector::from_column_slice(y);
    let ls = least_squares(x.matrix(), &yv, x.labels())?;
    let resid = &yv - x.matrix() * &ls.coefficients;
    let dof = (x.nrows() - x.ncols()) as f64;
    let s2 = resid.norm_squared() / dof;
    Ok(RegressionFit {
        covariance: &ls.xtx_inv * s2,
        coefficients: ls.coefficients,
        residuals: DMatrix::from_column_slice(resid.len(), 1, resid.as_slice()),
        sigma: DMatrix::from_element(1, 1, s2),
        labels: x.labels().to_vec(),
    })
}

/// Residual cross-moment matrix with divisor `n`.
pub(crate) fn cross_moments(residuals: &DMatrix<f64>) -> DMatrix<f64> {
    let n = residuals.nrows() as f64;
    symmetrize(residuals.transpose() * residuals / n)
}

/// GLS solution of a stacked system with error covariance `sigma ⊗ I`.
///
/// Returns the coefficients and `(X' (sigma^{-1} ⊗ I) X)^{-1}`.
pub(crate) fn gls_system(
    designs: &[&DMatrix<f64>],
    responses: &[&DVector<f64>],
    sigma: &DMatrix<f64>,
    labels: &[String],
) -> Result<(DVector<f64>, DMatrix<f64>), FreqError> {
    let m = designs.len();
    let n = designs[0].nrows();
    let chol = cholesky(sigma).map_err(|_| FreqError::DegenerateSystem)?;
    let l_inv = chol
        .solve_lower_triangular(&DMatrix::identity(m, m))
        .ok_or(FreqError::DegenerateSystem)?;
    let offsets: Vec<usize> = designs
        .iter()
        .scan(0, |acc, d| {
            let o = *acc;
            *acc += d.ncols();
            Some(o)
        })
        .collect();
    let k: usize = designs.iter().map(|d| d.ncols()).sum();
    let mut xw = DMatrix::zeros(m * n, k);
    let mut yw = DVector::zeros(m * n);
    for i in 0..m {
        for j in 0..=i {
            let w = l_inv[(i, j)];
            if w == 0.0 {
                continue;
            }
            let mut block = xw.view_mut((i * n, offsets[j]), (n, designs[j].ncols()));
            block += designs[j] * w;
            let mut ys = yw.rows_mut(i * n, n);
            ys += responses[j] * w;
        }
    }
    let ls = least_squares(&xw, &yw, labels)?;
    Ok((ls.coefficients, ls.xtx_inv))
}

/// Heteroskedasticity-robust sandwich for a GLS system.
pub(crate) fn robust_system_covariance(
    designs: &[&DMatrix<f64>],
    residuals: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    bread: &DMatrix<f64>,
) -> Result<DMatrix<f64>, FreqError> {
    let m = designs.len();
    let n = residuals.nrows();
    let sigma_inv = sigma.clone().try_inverse().ok_or(FreqError::DegenerateSystem)?;
    let k = bread.nrows();
    let mut meat = DMatrix::zeros(k, k);
    let mut g = DVector::zeros(k);
    for i in 0..n {
        let e = residuals.row(i).transpose();
        let w = &sigma_inv * e;
        let mut off = 0;
        for j in 0..m {
            let p = designs[j].ncols();
            for c in 0..p {
                g[off + c] = designs[j][(i, c)] * w[j];
            }
            off += p;
        }
        meat.ger(1.0, &g, &g, 1.0);
    }
    Ok(symmetrize(bread * meat * bread))
}

/// Two-step FGLS for a two-equation system of seemingly unrelated regressions.
pub fn sur_fgls(x1: &DesignMatrix, y1: &[f64], x2: &DesignMatrix, y2: &[f64]) -> Result<RegressionFit, FreqError> {
    sur_fgls_impl(x1, y1, x2, y2, false)
}

pub(crate) fn sur_fgls_impl(
    x1: &DesignMatrix,
    y1: &[f64],
    x2: &DesignMatrix,
    y2: &[f64],
    robust: bool,
) -> Result<RegressionFit, FreqError> {
    if x1.nrows() != x2.nrows() {
        return Err(FreqError::RowMismatch(x1.nrows(), x2.nrows()));
    }
    let n = x1.nrows();
    let first = ols(x1, y1)?;
    let second = ols(x2, y2)?;
    let mut ols_resid = DMatrix::zeros(n, 2);
    ols_resid.set_column(0, &first.residuals.column(0));
    ols_resid.set_column(1, &second.residuals.column(0));
    let sigma = cross_moments(&ols_resid);

    let labels = system_labels(&[("eq1", x1.labels()), ("eq2", x2.labels())]);
    let yv1 = DVector::from_column_slice(y1);
    let yv2 = DVector::from_column_slice(y2);
    let (beta, bread) = gls_system(&[x1.matrix(), x2.matrix()], &[&yv1, &yv2], &sigma, &labels)?;

    let k1 = x1.ncols();
    let mut resid = DMatrix::zeros(n, 2);
    resid.set_column(0, &(&yv1 - x1.matrix() * beta.rows(0, k1)));
    resid.set_column(1, &(&yv2 - x2.matrix() * beta.rows(k1, x2.ncols())));
    let covariance = if robust {
        robust_system_covariance(&[x1.matrix(), x2.matrix()], &resid, &sigma, &bread)?
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

pub(crate) fn system_labels(eqs: &[(&str, &[String])]) -> Vec<String> {
    eqs.iter()
        .flat_map(|(eq, ls)| ls.iter().map(move |l| format!("{eq}:{l}")))
        .collect()
}

/// Complete numeric columns pulled from a dataset for least-squares work.
pub(crate) struct Columns {
    pub z: Vec<f64>,
    pub d: Vec<f64>,
    pub cost: Option<Vec<f64>>,
    pub effect: Option<Vec<f64>>,
    pub x: Option<Vec<f64>>,
}

pub(crate) fn columns(data: &TrialDataset, outcomes: &[Outcome], covariate: bool) -> Result<Columns, FreqError> {
    let z: Vec<f64> = data.z().iter().map(|&v| f64::from(v)).collect();
    if z.iter().all(|&v| v == z[0]) {
        return Err(FreqError::NoInstrumentVariation);
    }
    let pull = |o: Outcome| -> Result<Option<Vec<f64>>, FreqError> {
        if !outcomes.contains(&o) {
            return Ok(None);
        }
        data.observed(o).map(Some).ok_or(match o {
            Outcome::Cost => FreqError::MissingValues("y_cost"),
            Outcome::Effect => FreqError::MissingValues("y_effect"),
        })
    };
    let x = if covariate {
        if data.x_base().is_none() {
            return Err(FreqError::NoCovariate);
        }
        Some(data.observed_covariate().ok_or(FreqError::MissingValues("x_base"))?)
    } else {
        None
    };
    Ok(Columns {
        d: data.d().iter().map(|&v| f64::from(v)).collect(),
        cost: pull(Outcome::Cost)?,
        effect: pull(Outcome::Effect)?,
        z,
        x,
    })
}

/// Builds a raw-unit estimate from working-unit increments and their covariance.
pub(crate) fn causal_estimate(
    method: Method,
    beta: [f64; 2],
    cov: [[f64; 2]; 2],
    data: &TrialDataset,
    lambda: Lambda,
) -> CausalEstimate {
    let (sc, se) = (data.scale_cost(), data.scale_effect());
    CausalEstimate {
        method,
        beta_cost: beta[0] * sc,
        beta_effect: beta[1] * se,
        cov: [
            [cov[0][0] * sc * sc, cov[0][1] * sc * se],
            [cov[1][0] * sc * se, cov[1][1] * se * se],
        ],
        lambda,
        scale_cost: sc,
        scale_effect: se,
        posterior: None,
    }
}
