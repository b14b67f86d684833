//! Bayesian CACE estimators fitted by Metropolis-within-Gibbs sampling.
//!
//! * [`fit_ubn`]: normal treatment-received and outcome equations with
//!   outcome errors independent of the treatment-received error.
//! * [`fit_ubgn`]: logistic treatment received, Gamma costs and conditionally
//!   normal effects, with first-stage residuals in both outcome means.
//! * [`fit_bfl`]: trivariate normal system with a free 3x3 covariance.
//!
//! Outcomes are centred (costs only when modelled as normal) and costs are
//! rescaled before sampling; reported increments are in raw units.

mod data;
pub mod diagnostics;
pub mod mcmc;
mod normal;
pub mod summary;
mod ubgn;
pub mod wishart;

pub use diagnostics::{ess, geweke_z, quantile, DiagnosticError};
pub use mcmc::{mcmc_run, Block, BlockReport, McmcOutput, Model, State};
pub use summary::{summarize_posterior, ParamSummary, PosteriorSummary};

use crate::linalg::LinalgError;
use crate::model::{CausalEstimate, Lambda, Method, ModelError, TrialDataset};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BayesError {
    #[error("chain {chain}: log density {log_density} at the initial point")]
    Initialization { chain: usize, log_density: f64 },
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error("invalid prior: {0}")]
    Prior(String),
    #[error("{0}")]
    Domain(String),
    #[error("assignment does not vary: both arms must be non-empty")]
    NoInstrumentVariation,
    #[error("treatment received is an exact function of assignment; the first-stage variance is zero")]
    DeterministicReceipt,
    #[error("covariate adjustment requested but the dataset has no baseline covariate")]
    NoCovariate,
    #[error("{0} is not a Bayesian method")]
    NotBayesian(Method),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientPrior {
    Normal {
        sd: f64,
    },
    /// `Uniform(-half_width, half_width)`.
    Uniform {
        half_width: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariancePrior {
    /// Wishart prior on the precision matrix with identity scale.
    Wishart { df: f64 },
    /// `Sigma = S R S` with half-normal scales and uniform correlations.
    Structured { scale_sd: f64 },
}

/// `Gamma(shape, rate)` hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub shape: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn log_density(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * x.ln() - self.rate * x
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    /// Structural regression coefficients.
    pub coefficient: CoefficientPrior,
    /// SD of the normal prior on covariate coefficients.
    pub adjustment_sd: f64,
    /// Upper end of the `Uniform(0, upper)` prior on standard deviations.
    pub sd_upper: f64,
    /// SD of the normal prior on the Fisher z of a correlation.
    pub fisher_z_sd: f64,
    /// Gamma-cost shape and cost intercept.
    pub shape: GammaPrior,
    pub cost_intercept: GammaPrior,
    /// Added to the sampled Gamma shape.
    pub shape_offset: f64,
    pub covariance: CovariancePrior,
    /// Baseline covariate model: uniform mean prior and normal prior on the log SD.
    pub covariate_mean: (f64, f64),
    pub covariate_log_sd_sd: f64,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self {
            coefficient: CoefficientPrior::Normal { sd: 10.0 },
            adjustment_sd: 10.0,
            sd_upper: 10.0,
            fisher_z_sd: 10.0,
            shape: GammaPrior {
                shape: 0.01,
                rate: 0.01,
            },
            cost_intercept: GammaPrior {
                shape: 0.01,
                rate: 0.01,
            },
            shape_offset: 0.01,
            covariance: CovariancePrior::Wishart { df: 3.0 },
            covariate_mean: (-0.5, 1.0),
            covariate_log_sd_sd: 10.0,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self) -> Result<(), BayesError> {
        let bad = |what: &str| Err(BayesError::Prior(what.to_string()));
        let pos = |v: f64| v.is_finite() && v > 0.0;
        match self.coefficient {
            CoefficientPrior::Normal { sd } if !pos(sd) => return bad("coefficient sd must be positive"),
            CoefficientPrior::Uniform { half_width } if !pos(half_width) => {
                return bad("coefficient half-width must be positive")
            }
            _ => {}
        }
        match self.covariance {
            CovariancePrior::Wishart { df } if !(df.is_finite() && df >= 3.0) => {
                return bad("Wishart df must be at least the dimension (3)")
            }
            CovariancePrior::Structured { scale_sd } if !pos(scale_sd) => return bad("scale sd must be positive"),
            _ => {}
        }
        for (v, what) in [
            (self.adjustment_sd, "adjustment sd"),
            (self.sd_upper, "sd upper bound"),
            (self.fisher_z_sd, "Fisher z sd"),
            (self.shape.shape, "shape prior shape"),
            (self.shape.rate, "shape prior rate"),
            (self.cost_intercept.shape, "intercept prior shape"),
            (self.cost_intercept.rate, "intercept prior rate"),
            (self.covariate_log_sd_sd, "covariate log-sd sd"),
        ] {
            if !pos(v) {
                return bad(&format!("{what} must be positive"));
            }
        }
        if !(self.shape_offset >= 0.0) {
            return bad("shape offset must be non-negative");
        }
        if !(self.covariate_mean.0 < self.covariate_mean.1) {
            return bad("covariate mean bounds must be increasing");
        }
        Ok(())
    }

    pub(crate) fn log_coefficient(&self, b: f64) -> f64 {
        match self.coefficient {
            CoefficientPrior::Normal { sd } => -0.5 * (b / sd).powi(2),
            CoefficientPrior::Uniform { half_width } => {
                if b.abs() <= half_width {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub(crate) fn log_adjustment(&self, b: f64) -> f64 {
        -0.5 * (b / self.adjustment_sd).powi(2)
    }

    /// `Uniform(0, upper)` prior on `sigma`, as a density on `log sigma`.
    pub(crate) fn log_sd_on_log_scale(&self, log_sigma: f64) -> f64 {
        if log_sigma.exp() < self.sd_upper {
            log_sigma
        } else {
            f64::NEG_INFINITY
        }
    }

    pub(crate) fn log_fisher_z(&self, z: f64) -> f64 {
        -0.5 * (z / self.fisher_z_sd).powi(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    pub chains: usize,
    pub initial_iterations: usize,
    pub burn_in: usize,
    pub extension: usize,
    pub max_extensions: usize,
    pub geweke_threshold: f64,
    pub geweke_first: f64,
    pub geweke_last: f64,
    /// Iterations per chain after the gate; kept draws are `final_run / thin`.
    pub final_run: usize,
    /// Total kept draws over all chains.
    pub target_kept: usize,
    pub thin: usize,
    /// Burn-in iterations between proposal-covariance refreshes.
    pub adapt_interval: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            chains: 2,
            initial_iterations: 5000,
            burn_in: 1000,
            extension: 1000,
            max_extensions: 20,
            geweke_threshold: 2.5,
            geweke_first: 0.1,
            geweke_last: 0.5,
            final_run: 5000,
            target_kept: 10_000,
            thin: 1,
            adapt_interval: 50,
        }
    }
}

impl McmcConfig {
    /// Shorter chains for simulation studies.
    pub fn shortened() -> Self {
        Self {
            initial_iterations: 2000,
            burn_in: 500,
            extension: 500,
            final_run: 2000,
            target_kept: 4000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BayesError> {
        let bad = |m: &str| Err(BayesError::Config(m.to_string()));
        if self.chains == 0 {
            return bad("at least one chain is required");
        }
        if self.burn_in >= self.initial_iterations {
            return bad("burn-in must be shorter than the initial run");
        }
        if self.initial_iterations - self.burn_in < diagnostics::MIN_GEWEKE_LEN {
            return bad("post-burn-in window is too short for the Geweke gate");
        }
        if !(self.geweke_threshold > 0.0) {
            return bad("Geweke threshold must be positive");
        }
        if !(self.geweke_first > 0.0 && self.geweke_last > 0.0 && self.geweke_first + self.geweke_last <= 1.0) {
            return bad("Geweke fractions must be positive and sum to at most 1");
        }
        if self.thin == 0 || self.adapt_interval == 0 || self.extension == 0 {
            return bad("thinning, extension and adaptation interval must be positive");
        }
        if self.final_run / self.thin * self.chains != self.target_kept {
            return bad("final run length, thinning and chains do not give the target kept sample");
        }
        Ok(())
    }
}

/// Divisor applied to working-unit costs before sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostRescale {
    /// Divide by 1000 when costs are supplied in raw currency (`scale_cost == 1`).
    #[default]
    Auto,
    Divisor(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BayesOptions {
    pub priors: PriorSpec,
    pub mcmc: McmcConfig,
    pub covariate: bool,
    pub lambda: Lambda,
    pub rescale: CostRescale,
}

impl Default for BayesOptions {
    fn default() -> Self {
        Self {
            priors: PriorSpec::default(),
            mcmc: McmcConfig::default(),
            covariate: false,
            lambda: Lambda::DEFAULT,
            rescale: CostRescale::Auto,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BayesFit {
    pub summary: PosteriorSummary,
    pub estimate: CausalEstimate,
    pub draws: McmcOutput,
}

fn finish<M: Model>(
    model: &M,
    method: Method,
    data: &TrialDataset,
    opts: &BayesOptions,
    rng: &mut StreamRng,
) -> Result<BayesFit, BayesError> {
    let draws = mcmc_run(model, &opts.mcmc, rng)?;
    let summary = summarize_posterior(&draws, method, opts.lambda);
    let estimate = summary.to_estimate(data.scale_cost(), data.scale_effect());
    Ok(BayesFit {
        summary,
        estimate,
        draws,
    })
}

pub fn fit_ubn(data: &TrialDataset, opts: &BayesOptions, rng: &mut StreamRng) -> Result<BayesFit, BayesError> {
    opts.priors.validate()?;
    let model = normal::NormalModel::new(data, normal::Variant::Ubn, opts)?;
    finish(&model, Method::Ubn, data, opts, rng)
}

pub fn fit_bfl(data: &TrialDataset, opts: &BayesOptions, rng: &mut StreamRng) -> Result<BayesFit, BayesError> {
    opts.priors.validate()?;
    let model = normal::NormalModel::new(data, normal::Variant::Bfl, opts)?;
    finish(&model, Method::Bfl, data, opts, rng)
}

pub fn fit_ubgn(data: &TrialDataset, opts: &BayesOptions, rng: &mut StreamRng) -> Result<BayesFit, BayesError> {
    opts.priors.validate()?;
    let model = ubgn::GammaNormalModel::new(data, opts)?;
    finish(&model, Method::Ubgn, data, opts, rng)
}

pub fn fit_bayes(
    method: Method,
    data: &TrialDataset,
    opts: &BayesOptions,
    rng: &mut StreamRng,
) -> Result<BayesFit, BayesError> {
    match method {
        Method::Ubn => fit_ubn(data, opts, rng),
        Method::Bfl => fit_bfl(data, opts, rng),
        Method::Ubgn => fit_ubgn(data, opts, rng),
        other => Err(BayesError::NotBayesian(other)),
    }
}
