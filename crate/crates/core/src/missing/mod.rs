//! Multiple imputation by predictive mean matching and Rubin's-rules pooling.

mod pmm;
mod pool;

pub use pmm::{pmm_impute, ImputeError};
pub use pool::{rubin_pool, PoolError, PooledEstimate};

use crate::model::{CausalEstimate, Lambda, Method, TrialDataset};
use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputationConfig {
    pub m: usize,
    pub knn: usize,
    pub cycles: usize,
    pub stratify_by_arm: bool,
}

impl Default for ImputationConfig {
    fn default() -> Self {
        Self {
            m: 50,
            knn: 5,
            cycles: 10,
            stratify_by_arm: true,
        }
    }
}

impl ImputationConfig {
    pub fn with_m(m: usize) -> Self {
        Self { m, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), ImputeError> {
        if self.m < 2 {
            return Err(ImputeError::Config(format!("m = {} (need at least 2)", self.m)));
        }
        if self.knn == 0 || self.cycles == 0 {
            return Err(ImputeError::Config("knn and cycles must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rubin-pooled cost, effect and INB from per-imputation estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledCausal {
    pub method: Method,
    pub lambda: Lambda,
    pub cost: PooledEstimate,
    pub effect: PooledEstimate,
    /// INB pooled from each imputation's INB and its joint-covariance variance.
    pub inb: PooledEstimate,
    /// Mean of per-imputation ICERs; no variance is pooled for the ratio.
    pub icer: Option<f64>,
}

pub fn pool_estimates(estimates: &[CausalEstimate]) -> Result<PooledCausal, PoolError> {
    let first = estimates.first().ok_or(PoolError::TooFew(0))?;
    let collect =
        |f: &dyn Fn(&CausalEstimate) -> (f64, f64)| -> (Vec<f64>, Vec<f64>) { estimates.iter().map(f).unzip() };
    let (c, cv) = collect(&|e| (e.beta_cost, e.cov[0][0]));
    let (q, qv) = collect(&|e| (e.beta_effect, e.cov[1][1]));
    let (b, bv) = collect(&|e| {
        let v = e.inb();
        (v.value, v.se * v.se)
    });
    let icers: Option<Vec<f64>> = estimates.iter().map(|e| e.icer().ok()).collect();
    Ok(PooledCausal {
        method: first.method,
        lambda: first.lambda,
        cost: rubin_pool(&c, &cv)?,
        effect: rubin_pool(&q, &qv)?,
        inb: rubin_pool(&b, &bv)?,
        icer: icers.map(|v| v.iter().sum::<f64>() / v.len() as f64),
    })
}

#[derive(Debug, thiserror::Error)]
pub enum MiError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Impute(#[from] ImputeError),
    #[error("imputation {index}: {source}")]
    Estimate { index: usize, source: E },
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// Imputes, fits `estimator` on every completed copy, and pools.
pub fn impute_and_pool<E, F>(
    data: &TrialDataset,
    cfg: &ImputationConfig,
    rng: &mut StreamRng,
    estimator: F,
) -> Result<(PooledCausal, Vec<TrialDataset>), MiError<E>>
where
    E: std::error::Error + Send + 'static,
    F: Fn(&TrialDataset) -> Result<CausalEstimate, E> + Sync,
{
    use rayon::prelude::*;
    let copies = pmm_impute(data, cfg, rng)?;
    let fits = copies
        .par_iter()
        .enumerate()
        .map(|(index, d)| estimator(d).map_err(|source| MiError::Estimate { index, source }))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((pool_estimates(&fits)?, copies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_trial, DgpConfig};
    use crate::dist::CostDistribution;
    use crate::freq::{three_stage_ls, FreqOptions};
    use crate::rng::seeded;
    use rand::Rng;

    #[test]
    fn config_validation() {
        assert!(ImputationConfig::with_m(1).validate().is_err());
        assert!(ImputationConfig {
            knn: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        ImputationConfig::default().validate().unwrap();
    }

    #[test]
    fn mcar_costs_recovered_by_pooled_3sls() {
        let full = simulate_trial(&DgpConfig::new(1000, 0.3, CostDistribution::Normal, 0.4, 77)).unwrap();
        let opts = FreqOptions::default();
        let complete = three_stage_ls(&full, &opts).unwrap();
        let mut rng = seeded(78);
        let cost = full
            .y_cost()
            .iter()
            .map(|v| if rng.random::<f64>() < 0.2 { None } else { *v })
            .collect();
        let holed = TrialDataset::new(
            full.z().to_vec(),
            full.d().to_vec(),
            cost,
            full.y_effect().to_vec(),
            None,
        )
        .unwrap()
        .with_scales(full.scale_cost(), full.scale_effect())
        .unwrap();
        let (pooled, copies) = impute_and_pool(&holed, &ImputationConfig::with_m(10), &mut seeded(79), |d| {
            three_stage_ls(d, &opts)
        })
        .unwrap();
        assert_eq!(copies.len(), 10);
        assert!(pooled.cost.between > 0.0);
        let gap = (pooled.cost.estimate - complete.beta_cost).abs();
        assert!(gap < 3.0 * pooled.cost.se(), "gap {gap}, se {}", pooled.cost.se());
        assert!(pooled.inb.total >= pooled.inb.within);
    }

    #[test]
    fn inb_pooled_per_imputation() {
        let mk = |c: f64, e: f64| CausalEstimate {
            method: Method::ThreeSls,
            beta_cost: c,
            beta_effect: e,
            cov: [[100.0, 0.1], [0.1, 0.0001]],
            lambda: Lambda::DEFAULT,
            scale_cost: 1000.0,
            scale_effect: 0.1,
            posterior: None,
        };
        let ests = [mk(400.0, 0.02), mk(420.0, 0.018)];
        let p = pool_estimates(&ests).unwrap();
        let inb: Vec<f64> = ests.iter().map(|e| e.inb().value).collect();
        let var: Vec<f64> = ests.iter().map(|e| e.inb().se.powi(2)).collect();
        assert_eq!(p.inb, rubin_pool(&inb, &var).unwrap());
        assert!((p.icer.unwrap() - (20_000.0 + 420.0 / 0.018) / 2.0).abs() < 1e-9);
    }
}
