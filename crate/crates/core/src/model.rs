//! Trial data model and the cost-effectiveness composite measures.
//!
//! Outcomes are stored in *working units*: the values the estimators see.
//! `scale_cost` and `scale_effect` convert working units back to raw
//! currency and QALYs (`raw = working * scale`).

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Smallest incremental effect (working units) for which an ICER is reported.
pub const ICER_EPSILON: f64 = 1e-9;

/// Two-sided 97.5% standard normal quantile used for Wald intervals.
pub const Z_975: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dataset must contain at least one subject")]
    Empty,
    #[error("column `{column}` has length {len}, expected {expected}")]
    LengthMismatch {
        column: &'static str,
        len: usize,
        expected: usize,
    },
    #[error("column `{column}` must be binary (0/1); found {value} at row {row}")]
    NonBinary {
        column: &'static str,
        row: usize,
        value: u8,
    },
    #[error("scale factor `{0}` must be strictly positive and finite")]
    InvalidScale(&'static str),
    #[error("willingness to pay must be finite and non-negative, got {0}")]
    InvalidLambda(f64),
    #[error("invalid covariance: variance of the linear combination is negative ({0})")]
    InvalidCovariance(f64),
    #[error("incremental effect {0} is too close to zero for an ICER")]
    DegenerateDenominator(f64),
    #[error("non-finite value in `{column}` at row {row}")]
    NonFinite { column: &'static str, row: usize },
}

/// Willingness to pay per unit of effect (currency per QALY).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Lambda(f64);

impl Lambda {
    pub const DEFAULT: Lambda = Lambda(30_000.0);

    pub fn new(value: f64) -> Result<Self, ModelError> {
        if value.is_finite() && value >= 0.0 {
            Ok(Self(value))
        } else {
            Err(ModelError::InvalidLambda(value))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Default for Lambda {
    fn default() -> Self {
        Self::DEFAULT
    }
}

impl TryFrom<f64> for Lambda {
    type Error = ModelError;
    fn try_from(value: f64) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Lambda> for f64 {
    fn from(l: Lambda) -> f64 {
        l.0
    }
}

/// Incremental net benefit `lambda * beta_effect - beta_cost`.
pub fn inb(beta_cost: f64, beta_effect: f64, lambda: Lambda) -> f64 {
    lambda.0 * beta_effect - beta_cost
}

/// Standard error of the INB from the component standard errors and their covariance.
pub fn inb_se(se_cost: f64, se_effect: f64, cov_ce: f64, lambda: Lambda) -> Result<f64, ModelError> {
    let l = lambda.0;
    let var = l * l * se_effect * se_effect + se_cost * se_cost - 2.0 * l * cov_ce;
    let bound = se_cost * se_effect;
    // tolerate rounding in covariance matrices built from products of SEs
    let slack = 1e-12 * (l * l * se_effect * se_effect + se_cost * se_cost).max(f64::MIN_POSITIVE);
    if se_cost < 0.0 || se_effect < 0.0 || cov_ce.abs() > bound * (1.0 + 1e-9) + 1e-300 || var < -slack {
        return Err(ModelError::InvalidCovariance(var));
    }
    Ok(var.max(0.0).sqrt())
}

/// Incremental cost-effectiveness ratio. Rejects effects within [`ICER_EPSILON`] of zero.
pub fn icer(beta_cost: f64, beta_effect: f64) -> Result<f64, ModelError> {
    if !(beta_effect.abs() > ICER_EPSILON) {
        return Err(ModelError::DegenerateDenominator(beta_effect));
    }
    Ok(beta_cost / beta_effect)
}

/// Which outcome an estimator targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Cost,
    Effect,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Cost => "cost",
            Outcome::Effect => "effect",
        })
    }
}

/// Per-subject trial records. Missing values are `None` and are never read by estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDataset {
    z: Vec<u8>,
    d: Vec<u8>,
    y_cost: Vec<Option<f64>>,
    y_effect: Vec<Option<f64>>,
    x_base: Option<Vec<Option<f64>>>,
    scale_cost: f64,
    scale_effect: f64,
}

impl TrialDataset {
    pub fn new(
        z: Vec<u8>,
        d: Vec<u8>,
        y_cost: Vec<Option<f64>>,
        y_effect: Vec<Option<f64>>,
        x_base: Option<Vec<Option<f64>>>,
    ) -> Result<Self, ModelError> {
        let n = z.len();
        if n == 0 {
            return Err(ModelError::Empty);
        }
        let check_len = |column, len| {
            if len != n {
                Err(ModelError::LengthMismatch {
                    column,
                    len,
                    expected: n,
                })
            } else {
                Ok(())
            }
        };
        check_len("d", d.len())?;
        check_len("y_cost", y_cost.len())?;
        check_len("y_effect", y_effect.len())?;
        if let Some(x) = &x_base {
            check_len("x_base", x.len())?;
        }
        for (column, v) in [("z", &z), ("d", &d)] {
            if let Some((row, &value)) = v.iter().enumerate().find(|(_, &x)| x > 1) {
                return Err(ModelError::NonBinary { column, row, value });
            }
        }
        let columns: [(&'static str, Option<&Vec<Option<f64>>>); 3] = [
            ("y_cost", Some(&y_cost)),
            ("y_effect", Some(&y_effect)),
            ("x_base", x_base.as_ref()),
        ];
        for (column, col) in columns {
            if let Some(col) = col {
                if let Some(row) = col.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
                    return Err(ModelError::NonFinite { column, row });
                }
            }
        }
        Ok(Self {
            z,
            d,
            y_cost,
            y_effect,
            x_base,
            scale_cost: 1.0,
            scale_effect: 1.0,
        })
    }

    /// Builds a dataset with every outcome observed and no covariate.
    pub fn complete(z: Vec<u8>, d: Vec<u8>, y_cost: Vec<f64>, y_effect: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(
            z,
            d,
            y_cost.into_iter().map(Some).collect(),
            y_effect.into_iter().map(Some).collect(),
            None,
        )
    }

    pub fn with_scales(mut self, scale_cost: f64, scale_effect: f64) -> Result<Self, ModelError> {
        if !(scale_cost.is_finite() && scale_cost > 0.0) {
            return Err(ModelError::InvalidScale("scale_cost"));
        }
        if !(scale_effect.is_finite() && scale_effect > 0.0) {
            return Err(ModelError::InvalidScale("scale_effect"));
        }
        self.scale_cost = scale_cost;
        self.scale_effect = scale_effect;
        Ok(self)
    }

    pub fn with_covariate(mut self, x_base: Vec<Option<f64>>) -> Result<Self, ModelError> {
        if x_base.len() != self.len() {
            return Err(ModelError::LengthMismatch {
                column: "x_base",
                len: x_base.len(),
                expected: self.len(),
            });
        }
        if let Some(row) = x_base.iter().position(|v| matches!(v, Some(x) if !x.is_finite())) {
            return Err(ModelError::NonFinite { column: "x_base", row });
        }
        self.x_base = Some(x_base);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    pub fn z(&self) -> &[u8] {
        &self.z
    }

    pub fn d(&self) -> &[u8] {
        &self.d
    }

    pub fn y_cost(&self) -> &[Option<f64>] {
        &self.y_cost
    }

    pub fn y_effect(&self) -> &[Option<f64>] {
        &self.y_effect
    }

    pub fn outcome(&self, outcome: Outcome) -> &[Option<f64>] {
        match outcome {
            Outcome::Cost => &self.y_cost,
            Outcome::Effect => &self.y_effect,
        }
    }

    pub fn x_base(&self) -> Option<&[Option<f64>]> {
        self.x_base.as_deref()
    }

    pub fn scale_cost(&self) -> f64 {
        self.scale_cost
    }

    pub fn scale_effect(&self) -> f64 {
        self.scale_effect
    }

    pub fn scale(&self, outcome: Outcome) -> f64 {
        match outcome {
            Outcome::Cost => self.scale_cost,
            Outcome::Effect => self.scale_effect,
        }
    }

    pub fn miss_cost(&self) -> Vec<bool> {
        self.y_cost.iter().map(Option::is_none).collect()
    }

    pub fn miss_effect(&self) -> Vec<bool> {
        self.y_effect.iter().map(Option::is_none).collect()
    }

    pub fn miss_base(&self) -> Option<Vec<bool>> {
        self.x_base.as_ref().map(|x| x.iter().map(Option::is_none).collect())
    }

    /// True when no outcome or covariate value is missing.
    pub fn is_complete(&self) -> bool {
        self.y_cost.iter().all(Option::is_some)
            && self.y_effect.iter().all(Option::is_some)
            && self.x_base.as_ref().is_none_or(|x| x.iter().all(Option::is_some))
    }

    pub fn has_missing(&self) -> bool {
        !self.is_complete()
    }

    /// Observed outcome values, or `None` when any entry is missing.
    pub fn observed(&self, outcome: Outcome) -> Option<Vec<f64>> {
        self.outcome(outcome).iter().copied().collect()
    }

    /// Observed covariate values, `None` when absent or partially missing.
    pub fn observed_covariate(&self) -> Option<Vec<f64>> {
        self.x_base.as_ref().and_then(|x| x.iter().copied().collect())
    }

    /// Subset of rows where every present column is observed.
    pub fn complete_cases(&self) -> Self {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| {
                self.y_cost[i].is_some()
                    && self.y_effect[i].is_some()
                    && self.x_base.as_ref().is_none_or(|x| x[i].is_some())
            })
            .collect();
        self.select(&keep)
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            z: rows.iter().map(|&i| self.z[i]).collect(),
            d: rows.iter().map(|&i| self.d[i]).collect(),
            y_cost: rows.iter().map(|&i| self.y_cost[i]).collect(),
            y_effect: rows.iter().map(|&i| self.y_effect[i]).collect(),
            x_base: self.x_base.as_ref().map(|x| rows.iter().map(|&i| x[i]).collect()),
            scale_cost: self.scale_cost,
            scale_effect: self.scale_effect,
        }
    }

    /// Replaces outcome and covariate columns, keeping assignment, receipt and scales.
    pub(crate) fn with_columns(
        &self,
        y_cost: Vec<Option<f64>>,
        y_effect: Vec<Option<f64>>,
        x_base: Option<Vec<Option<f64>>>,
    ) -> Self {
        debug_assert_eq!(y_cost.len(), self.len());
        Self {
            z: self.z.clone(),
            d: self.d.clone(),
            y_cost,
            y_effect,
            x_base,
            scale_cost: self.scale_cost,
            scale_effect: self.scale_effect,
        }
    }

    /// Multiplies cost values (working units) by `c`, leaving scales untouched.
    pub fn map_costs(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.y_cost = self.y_cost.iter().map(|v| v.map(&f)).collect();
        out
    }
}

/// Estimation method tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
pub enum Method {
    #[serde(rename = "ITT")]
    Itt,
    #[serde(rename = "2sls")]
    TwoSls,
    #[serde(rename = "3sls")]
    ThreeSls,
    #[serde(rename = "uBN")]
    Ubn,
    #[serde(rename = "uBGN")]
    Ubgn,
    #[serde(rename = "BFL")]
    Bfl,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Itt,
        Method::TwoSls,
        Method::ThreeSls,
        Method::Ubn,
        Method::Ubgn,
        Method::Bfl,
    ];

    pub fn is_bayesian(self) -> bool {
        matches!(self, Method::Ubn | Method::Ubgn | Method::Bfl)
    }

    pub fn label(self) -> &'static str {
        match self {
            Method::Itt => "ITT",
            Method::TwoSls => "2sls",
            Method::ThreeSls => "3sls",
            Method::Ubn => "uBN",
            Method::Ubgn => "uBGN",
            Method::Bfl => "BFL",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "itt" => Ok(Method::Itt),
            "2sls" => Ok(Method::TwoSls),
            "3sls" => Ok(Method::ThreeSls),
            "ubn" => Ok(Method::Ubn),
            "ubgn" => Ok(Method::Ubgn),
            "bfl" => Ok(Method::Bfl),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

/// Closed interval `[lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn wald(estimate: f64, se: f64) -> Self {
        Self::new(estimate - Z_975 * se, estimate + Z_975 * se)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueSe {
    pub value: f64,
    pub se: f64,
}

/// Posterior intervals carried by Bayesian estimates (raw units).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorIntervals {
    pub cost: Interval,
    pub effect: Interval,
    pub inb: Interval,
    pub inb_median: f64,
    pub inb_sd: f64,
}

/// Incremental cost and effect with their joint covariance, in raw units.
///
/// INB and ICER are always derived from the stored increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEstimate {
    pub method: Method,
    pub beta_cost: f64,
    pub beta_effect: f64,
    /// Covariance of `(beta_cost, beta_effect)`.
    pub cov: [[f64; 2]; 2],
    pub lambda: Lambda,
    /// Working-to-raw factors, used for the ICER degeneracy threshold.
    pub scale_cost: f64,
    pub scale_effect: f64,
    /// Present for Bayesian estimates; frequentist intervals are Wald intervals.
    pub posterior: Option<PosteriorIntervals>,
}

impl CausalEstimate {
    pub fn se_cost(&self) -> f64 {
        self.cov[0][0].max(0.0).sqrt()
    }

    pub fn se_effect(&self) -> f64 {
        self.cov[1][1].max(0.0).sqrt()
    }

    pub fn inb(&self) -> ValueSe {
        self.inb_at(self.lambda)
    }

    pub fn inb_at(&self, lambda: Lambda) -> ValueSe {
        let value = inb(self.beta_cost, self.beta_effect, lambda);
        let se = inb_se(self.se_cost(), self.se_effect(), self.cov[0][1], lambda).unwrap_or(f64::NAN);
        ValueSe { value, se }
    }

    /// INB standard error ignoring the cost-effect covariance.
    pub fn inb_se_independent(&self) -> f64 {
        let l = self.lambda.value();
        (l * l * self.cov[1][1] + self.cov[0][0]).max(0.0).sqrt()
    }

    pub fn icer(&self) -> Result<f64, ModelError> {
        if !(self.beta_effect.abs() / self.scale_effect > ICER_EPSILON) {
            return Err(ModelError::DegenerateDenominator(self.beta_effect));
        }
        Ok(self.beta_cost / self.beta_effect)
    }

    pub fn ci_cost(&self) -> Interval {
        match &self.posterior {
            Some(p) => p.cost,
            None => Interval::wald(self.beta_cost, self.se_cost()),
        }
    }

    pub fn ci_effect(&self) -> Interval {
        match &self.posterior {
            Some(p) => p.effect,
            None => Interval::wald(self.beta_effect, self.se_effect()),
        }
    }

    pub fn ci_inb(&self) -> Interval {
        match &self.posterior {
            Some(p) => p.inb,
            None => {
                let v = self.inb();
                Interval::wald(v.value, v.se)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn l(v: f64) -> Lambda {
        Lambda::new(v).unwrap()
    }

    #[test]
    fn inb_examples() {
        assert_eq!(inb(400.0, 0.02, l(30000.0)), 200.0);
        assert_eq!(inb(0.0, 0.0, l(30000.0)), 0.0);
        assert_relative_eq!(inb(1899.0, 0.516, l(30000.0)), 13581.0, epsilon = 1e-9);
    }

    #[test]
    fn inb_se_examples() {
        assert_eq!(inb_se(1.0, 0.0, 0.0, l(30000.0)).unwrap(), 1.0);
        assert_eq!(inb_se(3.0, 4.0, 0.0, l(1.0)).unwrap(), 5.0);
    }

    #[test]
    fn inb_se_rejects_invalid_covariance() {
        assert!(matches!(
            inb_se(1.0, 1.0, 2.0, l(1.0)),
            Err(ModelError::InvalidCovariance(_))
        ));
        assert!(inb_se(-1.0, 1.0, 0.0, l(1.0)).is_err());
    }

    #[test]
    fn inb_se_at_perfect_correlation() {
        // var = (l*se_e - se_c)^2 when the correlation is one
        let se = inb_se(2.0, 1.0, 2.0, l(2.0)).unwrap();
        assert!(se.abs() < 1e-12);
    }

    #[test]
    fn icer_examples() {
        assert_relative_eq!(icer(400.0, 0.02).unwrap(), 20000.0, epsilon = 1e-9);
        assert_eq!(icer(0.0, 0.5).unwrap(), 0.0);
        assert_relative_eq!(icer(1899.0, 0.516).unwrap(), 3680.232558, epsilon = 1e-5);
        assert!(matches!(icer(1.0, 0.0), Err(ModelError::DegenerateDenominator(_))));
        assert!(icer(1.0, 1e-10).is_err());
    }

    #[test]
    fn lambda_rejects_negative() {
        assert!(Lambda::new(-1.0).is_err());
        assert!(Lambda::new(f64::NAN).is_err());
        assert_eq!(Lambda::default().value(), 30000.0);
    }

    #[test]
    fn dataset_validation() {
        assert_eq!(
            TrialDataset::complete(vec![], vec![], vec![], vec![]).unwrap_err(),
            ModelError::Empty
        );
        assert!(matches!(
            TrialDataset::complete(vec![0, 2], vec![0, 0], vec![1.0, 1.0], vec![1.0, 1.0]),
            Err(ModelError::NonBinary { column: "z", .. })
        ));
        assert!(matches!(
            TrialDataset::complete(vec![0, 1], vec![0], vec![1.0, 1.0], vec![1.0, 1.0]),
            Err(ModelError::LengthMismatch { column: "d", .. })
        ));
        let ds = TrialDataset::complete(vec![0, 1], vec![0, 1], vec![1.0, 2.0], vec![0.1, 0.2]).unwrap();
        assert!(ds.clone().with_scales(0.0, 1.0).is_err());
        assert!(ds.with_scales(1000.0, 0.1).is_ok());
    }

    #[test]
    fn complete_cases_drop_masked_rows() {
        let ds = TrialDataset::new(
            vec![0, 1, 1],
            vec![0, 1, 0],
            vec![Some(1.0), None, Some(3.0)],
            vec![Some(0.1), Some(0.2), Some(0.3)],
            Some(vec![Some(0.5), Some(0.6), None]),
        )
        .unwrap();
        assert!(ds.has_missing());
        assert_eq!(ds.miss_cost(), vec![false, true, false]);
        let cc = ds.complete_cases();
        assert_eq!(cc.len(), 1);
        assert_eq!(cc.y_cost()[0], Some(1.0));
        assert!(ds.observed(Outcome::Cost).is_none());
    }

    #[test]
    fn estimate_derives_inb_lazily() {
        let est = CausalEstimate {
            method: Method::ThreeSls,
            beta_cost: 400.0,
            beta_effect: 0.02,
            cov: [[100.0, 0.05], [0.05, 0.0001]],
            lambda: Lambda::default(),
            scale_cost: 1000.0,
            scale_effect: 0.1,
            posterior: None,
        };
        let v = est.inb();
        assert_eq!(v.value, 30000.0 * 0.02 - 400.0);
        let expected = (30000.0f64.powi(2) * 0.0001 + 100.0 - 2.0 * 30000.0 * 0.05).sqrt();
        assert_relative_eq!(v.se, expected, epsilon = 1e-9);
        assert!(est.ci_cost().contains(est.beta_cost));
        assert!(est.ci_inb().contains(v.value));
        assert_relative_eq!(est.icer().unwrap(), 20000.0, epsilon = 1e-9);
    }
}

#[cfg(test)]
mod proptests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn inb_is_linear(a in -1e4..1e4f64, b in -10.0..10.0f64, c in -1e4..1e4f64, d in -10.0..10.0f64, lam in 0.0..1e5f64) {
            let lam = Lambda::new(lam).unwrap();
            let lhs = inb(a + c, b + d, lam);
            let rhs = inb(a, b, lam) + inb(c, d, lam);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs() + rhs.abs()));
        }

        #[test]
        fn inb_se_sign_flip_invariant(sc in 0.0..100.0f64, se in 0.0..1.0f64, r in -1.0..1.0f64, lam in 0.0..1e5f64) {
            let lam = Lambda::new(lam).unwrap();
            let cov = r * sc * se;
            // flip the effect sign: se unchanged, covariance changes sign, and so does the lambda term
            let a = inb_se(sc, se, cov, lam).unwrap();
            let b = inb_se(sc, se, -cov, lam).unwrap();
            let a2 = (lam.value().powi(2) * se * se + sc * sc - 2.0 * lam.value() * cov).max(0.0).sqrt();
            let b2 = (lam.value().powi(2) * se * se + sc * sc + 2.0 * lam.value() * cov).max(0.0).sqrt();
            prop_assert!((a - a2).abs() <= 1e-9 * (1.0 + a2));
            prop_assert!((b - b2).abs() <= 1e-9 * (1.0 + b2));
            // negating both the covariance and lambda*effect leaves the variance unchanged
            let neg = (lam.value().powi(2) * se * se + sc * sc - 2.0 * (-lam.value()) * (-cov)).max(0.0).sqrt();
            prop_assert!((a - neg).abs() <= 1e-9 * (1.0 + a));
        }

        #[test]
        fn rescaling_reproduces_raw_inb(c in -1e4..1e4f64, e in -2.0..2.0f64, lam in 0.0..1e5f64) {
            let raw = inb(c, e, Lambda::new(lam).unwrap());
            // costs / 1000 and effects / 10: lambda in working units is lam * 10 / 1000
            let working = inb(c / 1000.0, e / 10.0, Lambda::new(lam * 10.0 / 1000.0).unwrap());
            prop_assert!((working * 1000.0 - raw).abs() <= 1e-9 * (1.0 + raw.abs()));
        }
    }
}
