//! Posterior summaries: medians, SDs, equal-tailed intervals and derived INB/ICER.

use super::diagnostics::{ess, quantile_in_place};
use super::mcmc::{BlockReport, McmcOutput};
use crate::model::{CausalEstimate, Interval, Lambda, Method, PosteriorIntervals};
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
    /// Geweke z per chain at the last gate; `None` where undefined or derived.
    pub geweke: Vec<Option<f64>>,
}

impl ParamSummary {
    fn from_chains(name: &str, chains: &[&[f64]], geweke: Vec<Option<f64>>) -> Self {
        let mut pooled: Vec<f64> = chains.iter().flat_map(|c| c.iter().copied()).collect();
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let sd = if pooled.len() > 1 {
            (pooled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let median = quantile_in_place(&mut pooled, 0.5);
        let q025 = quantile_in_place(&mut pooled, 0.025);
        let q975 = quantile_in_place(&mut pooled, 0.975);
        Self {
            name: name.to_string(),
            mean,
            median,
            sd,
            q025,
            q975,
            ess: ess(chains),
            geweke,
        }
    }

    pub fn interval(&self) -> Interval {
        Interval::new(self.q025, self.q975)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub method: Method,
    pub lambda: Lambda,
    pub params: Vec<ParamSummary>,
    pub inb: ParamSummary,
    /// Present only when the effect posterior is clearly away from zero.
    pub icer: Option<ParamSummary>,
    /// Posterior covariance of the cost and effect increments.
    pub cov: [[f64; 2]; 2],
    pub blocks: Vec<BlockReport>,
    pub kept: usize,
    pub extensions: usize,
    pub converged: bool,
    pub degenerate: bool,
    /// First-stage coefficient interval covers zero: CACE posteriors are heavy tailed.
    pub weak_first_stage: bool,
}

pub const COST: &str = "beta_cost";
pub const EFFECT: &str = "beta_effect";
pub const FIRST_STAGE: &str = "first_stage";

impl PosteriorSummary {
    pub fn param(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn cost(&self) -> &ParamSummary {
        self.param(COST).expect("cost increment is always recorded")
    }

    pub fn effect(&self) -> &ParamSummary {
        self.param(EFFECT).expect("effect increment is always recorded")
    }

    /// Point estimates are posterior medians; intervals are the 2.5%/97.5% quantiles.
    pub fn to_estimate(&self, scale_cost: f64, scale_effect: f64) -> CausalEstimate {
        let (c, e) = (self.cost(), self.effect());
        CausalEstimate {
            method: self.method,
            beta_cost: c.median,
            beta_effect: e.median,
            cov: self.cov,
            lambda: self.lambda,
            scale_cost,
            scale_effect,
            posterior: Some(PosteriorIntervals {
                cost: c.interval(),
                effect: e.interval(),
                inb: self.inb.interval(),
                inb_median: self.inb.median,
                inb_sd: self.inb.sd,
            }),
        }
    }
}

/// Summarises every recorded quantity plus per-draw INB and ICER.
///
/// The output must record `beta_cost` and `beta_effect` in raw units.
pub fn summarize_posterior(out: &McmcOutput, method: Method, lambda: Lambda) -> PosteriorSummary {
    let col = |i: usize| -> Vec<&[f64]> { out.chains.iter().map(|c| c.columns[i].as_slice()).collect() };
    let params: Vec<ParamSummary> = out
        .names
        .iter()
        .enumerate()
        .map(|(i, name)| ParamSummary::from_chains(name, &col(i), out.geweke.iter().map(|g| g[i]).collect()))
        .collect();
    let ic = out.index(COST).expect("cost increment recorded");
    let ie = out.index(EFFECT).expect("effect increment recorded");
    let l = lambda.value();
    let derived = |f: &dyn Fn(f64, f64) -> f64| -> Vec<Vec<f64>> {
        out.chains
            .iter()
            .map(|c| {
                c.columns[ic]
                    .iter()
                    .zip(&c.columns[ie])
                    .map(|(&bc, &be)| f(bc, be))
                    .collect()
            })
            .collect()
    };
    let inb_draws = derived(&|bc, be| l * be - bc);
    let refs: Vec<&[f64]> = inb_draws.iter().map(Vec::as_slice).collect();
    let inb = ParamSummary::from_chains("inb", &refs, vec![None; out.chains.len()]);

    let effect = &params[ie];
    let icer = (effect.median.abs() > 2.0 * effect.sd).then(|| {
        let draws = derived(&|bc, be| bc / be);
        let refs: Vec<&[f64]> = draws.iter().map(Vec::as_slice).collect();
        ParamSummary::from_chains("icer", &refs, vec![None; out.chains.len()])
    });

    let pc = out.pooled(ic);
    let pe = out.pooled(ie);
    let n = pc.len() as f64;
    let (mc, me) = (params[ic].mean, params[ie].mean);
    let denom = (n - 1.0).max(1.0);
    let cce = pc.iter().zip(&pe).map(|(a, b)| (a - mc) * (b - me)).sum::<f64>() / denom;
    let cov = [[params[ic].sd.powi(2), cce], [cce, params[ie].sd.powi(2)]];

    let weak_first_stage = out
        .index(FIRST_STAGE)
        .map(|i| {
            let p = &params[i];
            p.q025 <= 0.0 && 0.0 <= p.q975
        })
        .unwrap_or(false);

    PosteriorSummary {
        method,
        lambda,
        inb,
        icer,
        cov,
        kept: pc.len(),
        extensions: out.extensions,
        converged: out.converged,
        degenerate: out.degenerate(),
        blocks: out.blocks.clone(),
        weak_first_stage,
        params,
    }
}
