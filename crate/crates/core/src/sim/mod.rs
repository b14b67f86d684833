//! Factorial Monte Carlo study over the 48-point scenario grid.

mod metrics;
mod reference;
mod run;

pub use metrics::{adequacy_flag, compute_metrics, Adequacy, MetricsRow};
pub use reference::{compare_to_reference, reference_table, Comparison, ReferenceKey, ReferenceMetric};
pub use run::{
    read_records, read_records_file, run_grid, run_scenario, run_scenario_to, workers_from_env, GridRun, Record,
    RecordWriter, ScenarioRun, ScenarioSummary, RECORD_SCHEMA_VERSION, WORKERS_ENV,
};

use crate::bayes::McmcConfig;
use crate::dgp::{DgpConfig, DgpTruth};
use crate::dist::CostDistribution;
use crate::model::{Lambda, Method};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const NONCOMPLIANCE_LEVELS: [f64; 2] = [0.3, 0.7];
pub const CORRELATION_LEVELS: [f64; 4] = [0.4, -0.4, 0.8, -0.8];
pub const SAMPLE_SIZES: [usize; 2] = [100, 1000];
pub const GRID_SIZE: usize = 48;

/// Replications when only frequentist methods run.
pub const DEFAULT_REPLICATIONS: usize = 500;
/// Replications when any Bayesian method runs.
pub const DEFAULT_BAYES_REPLICATIONS: usize = 200;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("record file: {0}")]
    Records(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(String),
}

fn bad<T>(msg: impl Into<String>) -> Result<T, SimError> {
    Err(SimError::Config(msg.into()))
}

/// Output quantity of a replication.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quantity {
    Cost,
    Effect,
    Inb,
}

impl Quantity {
    pub const ALL: [Quantity; 3] = [Quantity::Cost, Quantity::Effect, Quantity::Inb];

    pub fn label(self) -> &'static str {
        match self {
            Quantity::Cost => "cost",
            Quantity::Effect => "effect",
            Quantity::Inb => "inb",
        }
    }

    /// True value; cost and effect in working units, INB in currency.
    pub fn truth(self, truth: &DgpTruth) -> f64 {
        match self {
            Quantity::Cost => truth.beta_cost,
            Quantity::Effect => truth.beta_effect,
            Quantity::Inb => truth.inb,
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// MCMC length used for Bayesian methods inside the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainPreset {
    #[default]
    Shortened,
    Full,
}

impl ChainPreset {
    pub fn config(self) -> McmcConfig {
        match self {
            ChainPreset::Shortened => McmcConfig::shortened(),
            ChainPreset::Full => McmcConfig::default(),
        }
    }
}

/// One cell of the design plus run settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub p_noncomp: f64,
    pub cost_dist: CostDistribution,
    pub rho: f64,
    pub n: usize,
    pub replications: usize,
    pub methods: Vec<Method>,
    pub lambda: Lambda,
    pub seed: u64,
    #[serde(default)]
    pub chains: ChainPreset,
}

/// Flat key-value scenario file; `replications` and `lambda` may be omitted.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    p_noncomp: f64,
    cost_dist: String,
    rho: f64,
    n: usize,
    replications: Option<usize>,
    methods: Vec<String>,
    lambda: Option<f64>,
    seed: u64,
    chains: Option<ChainPreset>,
}

pub fn parse_methods<S: AsRef<str>>(names: &[S]) -> Result<Vec<Method>, SimError> {
    let mut out = Vec::new();
    for name in names {
        let m: Method = name.as_ref().trim().parse().map_err(SimError::Config)?;
        if !out.contains(&m) {
            out.push(m);
        }
    }
    Ok(out)
}

pub fn default_replications(methods: &[Method]) -> usize {
    if methods.iter().any(|m| m.is_bayesian()) {
        DEFAULT_BAYES_REPLICATIONS
    } else {
        DEFAULT_REPLICATIONS
    }
}

fn on_level(x: f64, levels: &[f64]) -> Option<usize> {
    levels.iter().position(|&l| (x - l).abs() < 1e-12)
}

impl ScenarioConfig {
    pub fn new(
        p_noncomp: f64,
        cost_dist: CostDistribution,
        rho: f64,
        n: usize,
        methods: Vec<Method>,
        seed: u64,
    ) -> Result<Self, SimError> {
        let cfg = Self {
            p_noncomp,
            cost_dist,
            rho,
            n,
            replications: default_replications(&methods),
            methods,
            lambda: Lambda::DEFAULT,
            seed,
            chains: ChainPreset::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_replications(mut self, m: usize) -> Self {
        self.replications = m;
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self, SimError> {
        let raw: ScenarioFile = toml::from_str(text)?;
        let cost_dist = raw
            .cost_dist
            .parse::<CostDistribution>()
            .map_err(|e| SimError::Config(e.to_string()))?;
        let methods = parse_methods(&raw.methods)?;
        let lambda = match raw.lambda {
            Some(l) => Lambda::new(l).map_err(|e| SimError::Config(e.to_string()))?,
            None => Lambda::DEFAULT,
        };
        let cfg = Self {
            p_noncomp: raw.p_noncomp,
            cost_dist,
            rho: raw.rho,
            n: raw.n,
            replications: raw.replications.unwrap_or_else(|| default_replications(&methods)),
            methods,
            lambda,
            seed: raw.seed,
            chains: raw.chains.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if on_level(self.p_noncomp, &NONCOMPLIANCE_LEVELS).is_none() {
            return bad(format!(
                "p_noncomp must be one of {NONCOMPLIANCE_LEVELS:?}, got {}",
                self.p_noncomp
            ));
        }
        if on_level(self.rho, &CORRELATION_LEVELS).is_none() {
            return bad(format!("rho must be one of {CORRELATION_LEVELS:?}, got {}", self.rho));
        }
        if !SAMPLE_SIZES.contains(&self.n) {
            return bad(format!("n must be one of {SAMPLE_SIZES:?}, got {}", self.n));
        }
        if self.replications == 0 {
            return bad("at least one replication is required");
        }
        if self.replications >= 1 << 32 {
            return bad("too many replications");
        }
        if self.methods.is_empty() {
            return bad("no methods requested");
        }
        for &m in &self.methods {
            if m == Method::Itt {
                return bad("ITT does not estimate the complier effect and cannot be scored");
            }
            if m == Method::Ubgn && self.cost_dist == CostDistribution::Normal {
                return bad("uBGN needs positive costs and is not run with normal costs");
            }
        }
        Ok(())
    }

    /// Position in the design grid, ordered by non-compliance, cost
    /// distribution, correlation and sample size (slowest to fastest).
    pub fn id(&self) -> usize {
        let p = on_level(self.p_noncomp, &NONCOMPLIANCE_LEVELS).expect("validated");
        let c = CostDistribution::ALL.iter().position(|&d| d == self.cost_dist).unwrap();
        let r = on_level(self.rho, &CORRELATION_LEVELS).expect("validated");
        let n = SAMPLE_SIZES.iter().position(|&s| s == self.n).expect("validated");
        ((p * 3 + c) * 4 + r) * 2 + n
    }

    pub fn dgp(&self) -> DgpConfig {
        DgpConfig::new(self.n, self.p_noncomp, self.cost_dist, self.rho, self.seed)
    }

    pub fn truth(&self) -> DgpTruth {
        truth_at(self.lambda)
    }
}

/// Study truth with INB evaluated at `lambda`.
pub fn truth_at(lambda: Lambda) -> DgpTruth {
    let mut t = DgpTruth::STUDY;
    t.lambda = lambda;
    t.inb = crate::model::inb(t.beta_cost * t.scale_cost, t.beta_effect * t.scale_effect, lambda);
    t
}

/// Design point `(p_noncomp, cost_dist, rho, n)` of a grid id.
pub fn grid_point(id: usize) -> Option<(f64, CostDistribution, f64, usize)> {
    if id >= GRID_SIZE {
        return None;
    }
    let n = SAMPLE_SIZES[id % 2];
    let r = CORRELATION_LEVELS[(id / 2) % 4];
    let c = CostDistribution::ALL[(id / 8) % 3];
    let p = NONCOMPLIANCE_LEVELS[id / 24];
    Some((p, c, r, n))
}

/// All 48 scenarios sharing the run settings of `base`. uBGN is dropped from
/// scenarios with normal costs.
pub fn grid(base: &ScenarioConfig) -> Vec<ScenarioConfig> {
    (0..GRID_SIZE)
        .map(|id| {
            let (p_noncomp, cost_dist, rho, n) = grid_point(id).unwrap();
            let methods = base
                .methods
                .iter()
                .copied()
                .filter(|&m| !(m == Method::Ubgn && cost_dist == CostDistribution::Normal))
                .collect();
            ScenarioConfig {
                p_noncomp,
                cost_dist,
                rho,
                n,
                methods,
                ..base.clone()
            }
        })
        .filter(|c| !c.methods.is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ScenarioConfig {
        ScenarioConfig::new(0.3, CostDistribution::Normal, 0.4, 100, vec![Method::TwoSls], 1).unwrap()
    }

    #[test]
    fn grid_ids_are_a_bijection() {
        let g = grid(&base());
        assert_eq!(g.len(), GRID_SIZE);
        for (i, c) in g.iter().enumerate() {
            assert_eq!(c.id(), i);
            assert_eq!(grid_point(i), Some((c.p_noncomp, c.cost_dist, c.rho, c.n)));
            c.validate().unwrap();
        }
        assert_eq!(grid_point(GRID_SIZE), None);
    }

    #[test]
    fn grid_drops_gamma_model_for_normal_costs() {
        let mut b = base();
        b.methods = vec![Method::ThreeSls, Method::Ubgn];
        for c in grid(&b) {
            let has = c.methods.contains(&Method::Ubgn);
            assert_eq!(has, c.cost_dist != CostDistribution::Normal);
        }
    }

    #[test]
    fn rejects_off_grid_values() {
        let b = base();
        for cfg in [
            ScenarioConfig {
                p_noncomp: 0.5,
                ..b.clone()
            },
            ScenarioConfig { rho: 0.3, ..b.clone() },
            ScenarioConfig { n: 200, ..b.clone() },
            ScenarioConfig {
                replications: 0,
                ..b.clone()
            },
            ScenarioConfig {
                methods: vec![],
                ..b.clone()
            },
            ScenarioConfig {
                methods: vec![Method::Itt],
                ..b.clone()
            },
            ScenarioConfig {
                methods: vec![Method::Ubgn],
                ..b.clone()
            },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn parses_flat_file() {
        let cfg = ScenarioConfig::from_toml_str(
            "p_noncomp = 0.7\ncost_dist = \"ig\"\nrho = -0.8\nn = 1000\nmethods = [\"3sls\", \"uBGN\"]\nseed = 9\n",
        )
        .unwrap();
        assert_eq!(cfg.cost_dist, CostDistribution::InvGaussian);
        assert_eq!(cfg.methods, vec![Method::ThreeSls, Method::Ubgn]);
        assert_eq!(cfg.replications, DEFAULT_BAYES_REPLICATIONS);
        assert_eq!(cfg.lambda, Lambda::DEFAULT);
        assert_eq!(cfg.chains, ChainPreset::Shortened);
        assert_eq!(cfg.id(), GRID_SIZE - 1);

        let err = ScenarioConfig::from_toml_str(
            "p_noncomp = 0.3\ncost_dist = \"normal\"\nrho = 0.4\nn = 100\nmethods = [\"2sls\"]\n",
        );
        assert!(err.is_err(), "seed is required");
        let err = ScenarioConfig::from_toml_str(
            "p_noncomp = 0.3\ncost_dist = \"normal\"\nrho = 0.4\nn = 100\nmethods = [\"2sls\"]\nseed = 1\nextra = 2\n",
        );
        assert!(err.is_err());
    }

    #[test]
    fn truth_follows_lambda() {
        assert!((truth_at(Lambda::DEFAULT).inb - 200.0).abs() < 1e-9);
        let t = truth_at(Lambda::new(20_000.0).unwrap());
        assert!((t.inb - 0.0).abs() < 1e-9);
    }
}
