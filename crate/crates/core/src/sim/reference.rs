//! Published coverage, width and RMSE values for the study grid.

use super::{MetricsRow, Quantity, ScenarioConfig};
use crate::model::Method;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::OnceLock;

const REFERENCE_CSV: &str = include_str!("reference_metrics.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceMetric {
    Coverage,
    Width,
    Rmse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ReferenceKey {
    pub scenario: usize,
    pub method: Method,
    pub quantity: Quantity,
    pub metric: ReferenceMetric,
}

#[derive(Deserialize)]
struct Row {
    p_noncomp: f64,
    n: usize,
    cost_dist: String,
    rho: f64,
    method: String,
    quantity: Quantity,
    metric: ReferenceMetric,
    value: f64,
}

fn load() -> BTreeMap<ReferenceKey, f64> {
    let mut rdr = csv::Reader::from_reader(REFERENCE_CSV.as_bytes());
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<Row>() {
        let row = row.expect("embedded reference table is well formed");
        let method: Method = row.method.parse().expect("known method");
        let cfg = ScenarioConfig {
            p_noncomp: row.p_noncomp,
            cost_dist: row.cost_dist.parse().expect("known distribution"),
            rho: row.rho,
            n: row.n,
            replications: 1,
            methods: vec![method],
            lambda: crate::Lambda::DEFAULT,
            seed: 0,
            chains: Default::default(),
        };
        let key = ReferenceKey {
            scenario: cfg.id(),
            method,
            quantity: row.quantity,
            metric: row.metric,
        };
        out.insert(key, row.value);
    }
    out
}

/// Reference values keyed by grid id; cost and effect in working units,
/// INB in currency.
pub fn reference_table() -> &'static BTreeMap<ReferenceKey, f64> {
    static TABLE: OnceLock<BTreeMap<ReferenceKey, f64>> = OnceLock::new();
    TABLE.get_or_init(load)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: usize,
    pub method: Method,
    pub quantity: Quantity,
    pub metric: ReferenceMetric,
    pub ours: Option<f64>,
    pub reference: f64,
    /// Monte Carlo standard error of our coverage (the larger of the values
    /// at our estimate and at the reference).
    pub mcse: Option<f64>,
    /// Coverage only: whether the two agree within three MC standard errors.
    pub within_band: Option<bool>,
}

impl Comparison {
    pub fn difference(&self) -> Option<f64> {
        self.ours.map(|o| o - self.reference)
    }

    pub fn relative_difference(&self) -> Option<f64> {
        self.difference().map(|d| d / self.reference.abs())
    }
}

/// Pairs each metric with its reference value, where one exists.
pub fn compare_to_reference(rows: &[MetricsRow]) -> Vec<Comparison> {
    let table = reference_table();
    let mut out = Vec::new();
    for row in rows {
        for (metric, ours) in [
            (ReferenceMetric::Coverage, row.coverage),
            (ReferenceMetric::Width, row.median_width),
            (ReferenceMetric::Rmse, row.rmse),
        ] {
            let key = ReferenceKey {
                scenario: row.scenario,
                method: row.method,
                quantity: row.quantity,
                metric,
            };
            let Some(&reference) = table.get(&key) else { continue };
            let (mcse, within_band) = if metric == ReferenceMetric::Coverage && row.replications > 0 {
                let m = row.replications as f64;
                let at_ref = (reference * (1.0 - reference) / m).sqrt();
                let se = row.coverage_mcse.unwrap_or(0.0).max(at_ref);
                (Some(se), ours.map(|o| (o - reference).abs() <= 3.0 * se))
            } else {
                (None, None)
            };
            out.push(Comparison {
                scenario: row.scenario,
                method: row.method,
                quantity: row.quantity,
                metric,
                ours,
                reference,
                mcse,
                within_band,
            });
        }
    }
    out
}
