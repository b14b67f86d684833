//! One-call estimation: optional imputation, any method, and a flat report.

use crate::bayes::{fit_bayes, BayesError, BayesOptions, McmcConfig, McmcOutput, PriorSpec};
use crate::freq::{first_stage_f, itt_sur, three_stage_ls, two_stage_estimate, FreqError, FreqOptions};
use crate::missing::{pmm_impute, pool_estimates, ImputationConfig, ImputeError, PoolError, PooledEstimate};
use crate::model::{CausalEstimate, Interval, Lambda, Method, TrialDataset};
use crate::rng::{child, seeded, StreamRng};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Freq(#[from] FreqError),
    #[error(transparent)]
    Bayes(#[from] BayesError),
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("imputation {index}: {message}")]
    Imputation { index: usize, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRequest {
    pub method: Method,
    pub lambda: Lambda,
    pub covariate: bool,
    pub robust: bool,
    pub imputation: Option<ImputationConfig>,
    pub mcmc: McmcConfig,
    pub priors: PriorSpec,
    pub seed: u64,
}

impl EstimateRequest {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            lambda: Lambda::DEFAULT,
            covariate: false,
            robust: false,
            imputation: None,
            mcmc: McmcConfig::default(),
            priors: PriorSpec::default(),
            seed,
        }
    }
}

/// Point estimate and 95% interval in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QuantityReport {
    pub estimate: f64,
    pub se: f64,
    pub lower: f64,
    pub upper: f64,
    /// Degrees of freedom of the pooled t interval.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
}

impl QuantityReport {
    fn new(estimate: f64, se: f64, ci: Interval) -> Self {
        Self {
            estimate,
            se,
            lower: ci.lower,
            upper: ci.upper,
            df: None,
        }
    }

    fn pooled(p: &PooledEstimate) -> Self {
        let ci = p.ci();
        Self {
            estimate: p.estimate,
            se: p.se(),
            lower: ci.lower,
            upper: ci.upper,
            df: Some(p.df),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McmcReport {
    pub converged: bool,
    pub degenerate: bool,
    pub weak_first_stage: bool,
    pub extensions: usize,
    pub kept: usize,
    pub min_ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport {
    pub method: Method,
    pub lambda: Lambda,
    pub seed: u64,
    pub n: usize,
    pub complete_cases: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub imputations: Option<usize>,
    pub cost: QuantityReport,
    pub effect: QuantityReport,
    pub inb: QuantityReport,
    /// Omitted when the effect increment is too close to zero.
    pub icer: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_stage_f: Option<f64>,
    /// MCMC diagnostics; for imputed data, the worst over imputations.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcReport>,
}

impl EstimateReport {
    pub fn quantities(&self) -> [(&'static str, &QuantityReport); 3] {
        [("cost", &self.cost), ("effect", &self.effect), ("inb", &self.inb)]
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["method", "quantity", "estimate", "se", "lower", "upper"])?;
        for (name, q) in self.quantities() {
            w.write_record([
                self.method.label().to_string(),
                name.to_string(),
                q.estimate.to_string(),
                q.se.to_string(),
                q.lower.to_string(),
                q.upper.to_string(),
            ])?;
        }
        if let Some(icer) = self.icer {
            let e = String::new();
            w.write_record([
                self.method.label().to_string(),
                "icer".into(),
                icer.to_string(),
                e.clone(),
                e.clone(),
                e,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EstimateOutput {
    pub report: EstimateReport,
    /// Draws of a single MCMC fit.
    pub trace: Option<McmcOutput>,
    pub imputed: Option<Vec<TrialDataset>>,
}

struct Fitted {
    estimate: CausalEstimate,
    icer: Option<f64>,
    mcmc: Option<McmcReport>,
    draws: Option<McmcOutput>,
}

fn fit_one(data: &TrialDataset, req: &EstimateRequest, rng: &mut StreamRng) -> Result<Fitted, PipelineError> {
    let fopts = FreqOptions {
        covariate: req.covariate,
        robust: req.robust,
        lambda: req.lambda,
    };
    let freq = |estimate: CausalEstimate| Fitted {
        icer: estimate.icer().ok(),
        estimate,
        mcmc: None,
        draws: None,
    };
    Ok(match req.method {
        Method::Itt => freq(itt_sur(data, &fopts)?),
        Method::TwoSls => freq(two_stage_estimate(data, &fopts)?),
        Method::ThreeSls => freq(three_stage_ls(data, &fopts)?),
        m => {
            let opts = BayesOptions {
                priors: req.priors,
                mcmc: req.mcmc,
                covariate: req.covariate,
                lambda: req.lambda,
                ..BayesOptions::default()
            };
            let fit = fit_bayes(m, data, &opts, rng)?;
            let s = &fit.summary;
            Fitted {
                icer: s.icer.as_ref().map(|p| p.median),
                mcmc: Some(McmcReport {
                    converged: s.converged,
                    degenerate: s.degenerate,
                    weak_first_stage: s.weak_first_stage,
                    extensions: s.extensions,
                    kept: s.kept,
                    min_ess: s.params.iter().map(|p| p.ess).fold(f64::INFINITY, f64::min),
                }),
                estimate: fit.estimate,
                draws: Some(fit.draws),
            }
        }
    })
}

fn single_report(e: &CausalEstimate) -> [QuantityReport; 3] {
    let (inb, inb_se) = match &e.posterior {
        Some(p) => (p.inb_median, p.inb_sd),
        None => {
            let v = e.inb();
            (v.value, v.se)
        }
    };
    [
        QuantityReport::new(e.beta_cost, e.se_cost(), e.ci_cost()),
        QuantityReport::new(e.beta_effect, e.se_effect(), e.ci_effect()),
        QuantityReport::new(inb, inb_se, e.ci_inb()),
    ]
}

fn worst(reports: impl Iterator<Item = McmcReport>) -> Option<McmcReport> {
    reports.reduce(|a, b| McmcReport {
        converged: a.converged && b.converged,
        degenerate: a.degenerate || b.degenerate,
        weak_first_stage: a.weak_first_stage || b.weak_first_stage,
        extensions: a.extensions.max(b.extensions),
        kept: a.kept.min(b.kept),
        min_ess: a.min_ess.min(b.min_ess),
    })
}

/// Fits `req.method` to `data`, imputing first when requested. Costs and
/// effects are reported in the dataset's raw units.
pub fn estimate(data: &TrialDataset, req: &EstimateRequest) -> Result<EstimateOutput, PipelineError> {
    let mut rng = seeded(req.seed);
    let complete_cases = data.complete_cases().len();
    let first_stage = if req.method.is_bayesian() {
        None
    } else {
        first_stage_f(&data.complete_cases(), req.covariate).ok().map(|f| f.f)
    };
    let Some(icfg) = req.imputation else {
        let fit = fit_one(data, req, &mut rng)?;
        let [cost, effect, inb] = single_report(&fit.estimate);
        return Ok(EstimateOutput {
            report: EstimateReport {
                method: req.method,
                lambda: req.lambda,
                seed: req.seed,
                n: data.len(),
                complete_cases,
                imputations: None,
                cost,
                effect,
                inb,
                icer: fit.icer,
                first_stage_f: first_stage,
                mcmc: fit.mcmc,
            },
            trace: fit.draws,
            imputed: None,
        });
    };
    let copies = pmm_impute(data, &icfg, &mut rng)?;
    let mut streams: Vec<StreamRng> = (0..copies.len()).map(|i| child(&mut rng, i as u64)).collect();
    let fits = copies
        .par_iter()
        .zip(streams.par_iter_mut())
        .enumerate()
        .map(|(index, (d, r))| {
            fit_one(d, req, r).map_err(|e| PipelineError::Imputation {
                index,
                message: e.to_string(),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let estimates: Vec<CausalEstimate> = fits.iter().map(|f| f.estimate.clone()).collect();
    let pooled = pool_estimates(&estimates)?;
    let icer = if req.method.is_bayesian() {
        let v: Option<Vec<f64>> = fits.iter().map(|f| f.icer).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    } else {
        pooled.icer
    };
    Ok(EstimateOutput {
        report: EstimateReport {
            method: req.method,
            lambda: req.lambda,
            seed: req.seed,
            n: data.len(),
            complete_cases,
            imputations: Some(copies.len()),
            cost: QuantityReport::pooled(&pooled.cost),
            effect: QuantityReport::pooled(&pooled.effect),
            inb: QuantityReport::pooled(&pooled.inb),
            icer,
            first_stage_f: first_stage,
            mcmc: worst(fits.iter().filter_map(|f| f.mcmc)),
        },
        trace: None,
        imputed: Some(copies),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_trial, DgpConfig};
    use crate::dist::CostDistribution;

    fn data() -> TrialDataset {
        simulate_trial(&DgpConfig::new(400, 0.3, CostDistribution::Normal, 0.4, 5)).unwrap()
    }

    #[test]
    fn frequentist_report_matches_estimator() {
        let d = data();
        let out = estimate(&d, &EstimateRequest::new(Method::ThreeSls, 1)).unwrap();
        let direct = three_stage_ls(&d, &FreqOptions::default()).unwrap();
        assert_eq!(out.report.cost.estimate, direct.beta_cost);
        assert_eq!(out.report.inb.estimate, direct.inb().value);
        assert_eq!(out.report.icer, direct.icer().ok());
        assert!(out.report.first_stage_f.unwrap() > 10.0);
        assert!(out.trace.is_none() && out.imputed.is_none());

        let mut buf = Vec::new();
        out.report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("method,quantity,estimate,se,lower,upper\n3sls,cost,"));
    }

    #[test]
    fn bayesian_report_has_trace() {
        let mut req = EstimateRequest::new(Method::Ubn, 3);
        req.mcmc = McmcConfig::shortened();
        let out = estimate(&data(), &req).unwrap();
        assert!(out.trace.is_some());
        let m = out.report.mcmc.unwrap();
        assert_eq!(m.kept, 4000);
        assert!(out.report.cost.lower < out.report.cost.estimate);
    }

    #[test]
    fn imputation_is_reproducible() {
        let d = data();
        let cost = d
            .y_cost()
            .iter()
            .enumerate()
            .map(|(i, v)| if i % 7 == 3 { None } else { *v })
            .collect();
        let holed = TrialDataset::new(d.z().to_vec(), d.d().to_vec(), cost, d.y_effect().to_vec(), None)
            .unwrap()
            .with_scales(d.scale_cost(), d.scale_effect())
            .unwrap();
        let mut req = EstimateRequest::new(Method::TwoSls, 9);
        req.imputation = Some(ImputationConfig::with_m(5));
        let a = estimate(&holed, &req).unwrap();
        let b = estimate(&holed, &req).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.imputations, Some(5));
        assert!(a.report.cost.df.is_some());
        assert_eq!(a.imputed.unwrap().len(), 5);

        req.imputation = None;
        assert!(matches!(
            estimate(&holed, &req),
            Err(PipelineError::Freq(FreqError::MissingValues(_)))
        ));
    }
}
