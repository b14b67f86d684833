//! Per-cell performance metrics.

use super::{Quantity, Record};
use crate::bayes::quantile;
use crate::dgp::DgpTruth;
use crate::model::Method;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const NOMINAL_COVERAGE: f64 = 0.95;
pub const MAX_PCT_BIAS: f64 = 5.0;
pub const MAX_COVERAGE_GAP: f64 = 0.025;

/// Metrics of one scenario, method and quantity. Metric fields are `None`
/// when the cell has no successful replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scenario: usize,
    pub method: Method,
    pub quantity: Quantity,
    pub truth: f64,
    /// Successful replications entering the metrics.
    pub replications: usize,
    pub failures: usize,
    /// Successful MCMC fits whose convergence gate did not pass.
    pub nonconverged: usize,
    pub median_bias: Option<f64>,
    pub pct_bias: Option<f64>,
    pub coverage: Option<f64>,
    pub coverage_mcse: Option<f64>,
    pub median_width: Option<f64>,
    pub rmse: Option<f64>,
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn cell(scenario: usize, method: Method, quantity: Quantity, truth: f64, recs: &[&Record]) -> MetricsRow {
    let ok: Vec<&Record> = recs.iter().copied().filter(|r| r.is_ok()).collect();
    let k = ok.len();
    let mut row = MetricsRow {
        scenario,
        method,
        quantity,
        truth,
        replications: k,
        failures: recs.len() - k,
        nonconverged: ok.iter().filter(|r| r.converged == Some(false)).count(),
        median_bias: None,
        pct_bias: None,
        coverage: None,
        coverage_mcse: None,
        median_width: None,
        rmse: None,
    };
    if k == 0 {
        return row;
    }
    let est = sorted(ok.iter().map(|r| r.estimate.unwrap()).collect());
    let bias = quantile(&est, 0.5) - truth;
    row.median_bias = Some(bias);
    row.pct_bias = (truth != 0.0).then(|| 100.0 * bias / truth.abs());
    let hits = ok.iter().filter(|r| r.interval().unwrap().contains(truth)).count();
    let cov = hits as f64 / k as f64;
    row.coverage = Some(cov);
    row.coverage_mcse = Some((cov * (1.0 - cov) / k as f64).sqrt());
    let widths = sorted(ok.iter().map(|r| r.interval().unwrap().width()).collect());
    row.median_width = Some(quantile(&widths, 0.5));
    // summed in sorted order so the result does not depend on record order
    let sq = sorted(est.iter().map(|e| (e - truth).powi(2)).collect());
    row.rmse = Some((sq.iter().sum::<f64>() / k as f64).sqrt());
    row
}

/// Aggregates records by scenario, method and quantity.
pub fn compute_metrics(records: &[Record], truth: &DgpTruth) -> Vec<MetricsRow> {
    let mut cells: BTreeMap<(usize, Method, Quantity), Vec<&Record>> = BTreeMap::new();
    for r in records {
        cells.entry((r.scenario, r.method, r.quantity)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|((s, m, q), recs)| cell(s, m, q, q.truth(truth), &recs))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adequacy {
    Adequate,
    Inadequate,
    /// No successful replication, or bias is undefined.
    Missing,
}

/// Adequate when the median bias is within 5% of the truth and coverage is
/// within 2.5 points of nominal.
pub fn adequacy_flag(row: &MetricsRow) -> Adequacy {
    match (row.pct_bias, row.coverage) {
        (Some(b), Some(c)) => {
            if b.abs() <= MAX_PCT_BIAS && (c - NOMINAL_COVERAGE).abs() <= MAX_COVERAGE_GAP + 1e-12 {
                Adequacy::Adequate
            } else {
                Adequacy::Inadequate
            }
        }
        _ => Adequacy::Missing,
    }
}
