//! Replication loop and record persistence.

use super::{compute_metrics, MetricsRow, Quantity, ScenarioConfig, SimError};
use crate::bayes::{fit_bayes, BayesOptions};
use crate::dgp::simulate_trial_with;
use crate::freq::{three_stage_ls, two_stage_estimate, FreqOptions};
use crate::model::{CausalEstimate, Interval, Lambda, Method, TrialDataset};
use crate::rng::{stream, PURPOSE_DATA};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const RECORD_SCHEMA_VERSION: u32 = 1;
/// Environment variable bounding the worker pool.
pub const WORKERS_ENV: &str = "CACE_WORKERS";

/// One method and quantity of one replication. Failed fits carry a tag and
/// no numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub scenario: usize,
    pub replication: u64,
    pub method: Method,
    pub quantity: Quantity,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    /// Gate outcome for MCMC fits; empty for closed-form estimators.
    pub converged: Option<bool>,
    pub failure: Option<String>,
}

impl Record {
    pub fn is_ok(&self) -> bool {
        self.failure.is_none() && self.estimate.is_some() && self.interval().is_some()
    }

    pub fn interval(&self) -> Option<Interval> {
        Some(Interval::new(self.lower?, self.upper?))
    }
}

/// Header metadata of a record file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordMeta {
    pub schema_version: u32,
    pub scenario: usize,
    pub seed: u64,
    pub lambda: Lambda,
}

impl RecordMeta {
    fn line(&self) -> String {
        format!(
            "#schema_version={},scenario={},seed={},lambda={}",
            self.schema_version,
            self.scenario,
            self.seed,
            self.lambda.value()
        )
    }

    fn parse(line: &str) -> Result<Self, SimError> {
        let err = || SimError::Records(format!("bad metadata line `{}`", line.trim()));
        let body = line.trim().strip_prefix('#').ok_or_else(err)?;
        let (mut version, mut scenario, mut seed, mut lambda) = (None, None, None, None);
        for kv in body.split(',') {
            let (k, v) = kv.split_once('=').ok_or_else(err)?;
            match k.trim() {
                "schema_version" => version = v.trim().parse().ok(),
                "scenario" => scenario = v.trim().parse().ok(),
                "seed" => seed = v.trim().parse().ok(),
                "lambda" => lambda = v.trim().parse::<f64>().ok().and_then(|l| Lambda::new(l).ok()),
                _ => {}
            }
        }
        let meta = RecordMeta {
            schema_version: version.ok_or_else(err)?,
            scenario: scenario.ok_or_else(err)?,
            seed: seed.ok_or_else(err)?,
            lambda: lambda.ok_or_else(err)?,
        };
        if meta.schema_version != RECORD_SCHEMA_VERSION {
            return Err(SimError::Records(format!(
                "schema version {} is not supported (expected {RECORD_SCHEMA_VERSION})",
                meta.schema_version
            )));
        }
        Ok(meta)
    }
}

/// Append-only record sink; every appended batch is flushed.
pub struct RecordWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(mut writer: W, cfg: &ScenarioConfig) -> Result<Self, SimError> {
        let meta = RecordMeta {
            schema_version: RECORD_SCHEMA_VERSION,
            scenario: cfg.id(),
            seed: cfg.seed,
            lambda: cfg.lambda,
        };
        writeln!(writer, "{}", meta.line())?;
        Ok(Self {
            inner: csv::Writer::from_writer(writer),
        })
    }

    pub fn append(&mut self, records: &[Record]) -> Result<(), SimError> {
        for r in records {
            self.inner.serialize(r)?;
        }
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_records<R: Read>(reader: R) -> Result<(RecordMeta, Vec<Record>), SimError> {
    let mut buf = BufReader::new(reader);
    let mut first = String::new();
    buf.read_line(&mut first)?;
    let meta = RecordMeta::parse(&first)?;
    let mut rdr = csv::Reader::from_reader(buf);
    let records = rdr.deserialize().collect::<Result<Vec<Record>, _>>()?;
    Ok((meta, records))
}

pub fn read_records_file(path: impl AsRef<Path>) -> Result<(RecordMeta, Vec<Record>), SimError> {
    read_records(File::open(path)?)
}

/// Worker count from the environment, if set.
pub fn workers_from_env() -> Result<Option<usize>, SimError> {
    match std::env::var(WORKERS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(SimError::Config(format!(
                "{WORKERS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(None),
    }
}

fn build_pool() -> Result<rayon::ThreadPool, SimError> {
    let workers = workers_from_env()?.unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))
}

/// Variant name of an error, used as a failure tag.
fn tag(e: &impl Debug) -> String {
    let s = format!("{e:?}");
    s.chars().take_while(|c| c.is_alphanumeric() || *c == '_').collect()
}

/// Stream purpose of a method, fixed by its position in `Method::ALL` so that
/// adding or reordering methods leaves the others' draws unchanged.
fn purpose(m: Method) -> u64 {
    1 + Method::ALL.iter().position(|&x| x == m).unwrap() as u64
}

fn fit(
    cfg: &ScenarioConfig,
    id: usize,
    r: u64,
    m: Method,
    data: &TrialDataset,
) -> Result<(CausalEstimate, Option<bool>), String> {
    let fopts = FreqOptions {
        lambda: cfg.lambda,
        ..FreqOptions::default()
    };
    match m {
        Method::TwoSls => two_stage_estimate(data, &fopts).map(|e| (e, None)).map_err(|e| tag(&e)),
        Method::ThreeSls => three_stage_ls(data, &fopts).map(|e| (e, None)).map_err(|e| tag(&e)),
        _ => {
            let opts = BayesOptions {
                mcmc: cfg.chains.config(),
                lambda: cfg.lambda,
                ..BayesOptions::default()
            };
            let mut rng = stream(cfg.seed, id as u64, r, purpose(m));
            fit_bayes(m, data, &opts, &mut rng)
                .map(|f| (f.estimate, Some(f.summary.converged)))
                .map_err(|e| tag(&e))
        }
    }
}

fn scaled(i: Interval, s: f64) -> Interval {
    Interval::new(i.lower / s, i.upper / s)
}

/// Cost and effect in working units, INB in currency.
fn quantities(e: &CausalEstimate) -> [(Quantity, f64, f64, Interval); 3] {
    let (sc, se) = (e.scale_cost, e.scale_effect);
    let (inb, inb_se) = match &e.posterior {
        Some(p) => (p.inb_median, p.inb_sd),
        None => {
            let v = e.inb();
            (v.value, v.se)
        }
    };
    [
        (
            Quantity::Cost,
            e.beta_cost / sc,
            e.se_cost() / sc,
            scaled(e.ci_cost(), sc),
        ),
        (
            Quantity::Effect,
            e.beta_effect / se,
            e.se_effect() / se,
            scaled(e.ci_effect(), se),
        ),
        (Quantity::Inb, inb, inb_se, e.ci_inb()),
    ]
}

fn replicate(cfg: &ScenarioConfig, id: usize, r: u64) -> Vec<Record> {
    let mut rng = stream(cfg.seed, id as u64, r, PURPOSE_DATA);
    let data = simulate_trial_with(&cfg.dgp(), &mut rng);
    let mut out = Vec::with_capacity(cfg.methods.len() * 3);
    for &m in &cfg.methods {
        let base = Record {
            scenario: id,
            replication: r,
            method: m,
            quantity: Quantity::Cost,
            estimate: None,
            se: None,
            lower: None,
            upper: None,
            converged: None,
            failure: None,
        };
        let fitted = match &data {
            Ok(d) => fit(cfg, id, r, m, d),
            Err(e) => Err(format!("dgp_{}", tag(e))),
        };
        match fitted {
            Ok((est, converged)) => {
                for (q, v, s, ci) in quantities(&est) {
                    let finite = v.is_finite() && ci.lower.is_finite() && ci.upper.is_finite();
                    out.push(Record {
                        quantity: q,
                        estimate: finite.then_some(v),
                        se: (finite && s.is_finite()).then_some(s),
                        lower: finite.then_some(ci.lower),
                        upper: finite.then_some(ci.upper),
                        converged,
                        failure: (!finite).then(|| "NonFinite".to_string()),
                        ..base.clone()
                    });
                }
            }
            Err(t) => {
                for q in Quantity::ALL {
                    out.push(Record {
                        quantity: q,
                        failure: Some(t.clone()),
                        ..base.clone()
                    });
                }
            }
        }
    }
    out
}

/// Runs replications in fixed-size chunks on a bounded pool; chunks reach the
/// sink in replication order whatever the schedule.
fn drive(cfg: &ScenarioConfig, mut sink: impl FnMut(&[Record]) -> Result<(), SimError>) -> Result<(), SimError> {
    cfg.validate()?;
    let pool = build_pool()?;
    let id = cfg.id();
    let chunk = pool.current_num_threads().max(1) * 4;
    let mut start = 0;
    while start < cfg.replications {
        let end = (start + chunk).min(cfg.replications);
        let batch: Vec<Vec<Record>> = pool.install(|| {
            (start..end)
                .into_par_iter()
                .map(|r| replicate(cfg, id, r as u64))
                .collect()
        });
        for recs in &batch {
            sink(recs)?;
        }
        start = end;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub config: ScenarioConfig,
    pub records: Vec<Record>,
}

impl ScenarioRun {
    pub fn id(&self) -> usize {
        self.config.id()
    }

    pub fn metrics(&self) -> Vec<MetricsRow> {
        compute_metrics(&self.records, &self.config.truth())
    }
}

/// Runs a scenario, keeping records in memory.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, SimError> {
    let mut records = Vec::with_capacity(cfg.replications * cfg.methods.len() * 3);
    drive(cfg, |r| {
        records.extend_from_slice(r);
        Ok(())
    })?;
    Ok(ScenarioRun {
        config: cfg.clone(),
        records,
    })
}

pub fn records_path(dir: &Path, id: usize) -> PathBuf {
    dir.join(format!("scenario_{id:02}.csv"))
}

/// Runs a scenario, appending records to `scenario_<id>.csv` in `dir` as
/// chunks complete.
pub fn run_scenario_to(cfg: &ScenarioConfig, dir: &Path) -> Result<ScenarioRun, SimError> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut writer = RecordWriter::new(BufWriter::new(File::create(records_path(dir, cfg.id()))?), cfg)?;
    let mut records = Vec::new();
    drive(cfg, |r| {
        writer.append(r)?;
        records.extend_from_slice(r);
        Ok(())
    })?;
    Ok(ScenarioRun {
        config: cfg.clone(),
        records,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSummary {
    pub id: usize,
    pub config: ScenarioConfig,
    pub records_file: String,
    pub failures: usize,
    pub elapsed_secs: f64,
    pub metrics: Vec<MetricsRow>,
}

/// Structured summary of a run, written as `summary.json`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRun {
    pub schema_version: u32,
    pub master_seed: u64,
    pub workers: Option<usize>,
    pub scenarios: Vec<ScenarioSummary>,
}

/// Runs each scenario in turn into `dir` and writes the run summary.
pub fn run_grid(configs: &[ScenarioConfig], dir: &Path) -> Result<GridRun, SimError> {
    let seeds: Vec<u64> = configs.iter().map(|c| c.seed).collect();
    if seeds.windows(2).any(|w| w[0] != w[1]) {
        return Err(SimError::Config("scenarios in one run must share a master seed".into()));
    }
    let mut run = GridRun {
        schema_version: RECORD_SCHEMA_VERSION,
        master_seed: seeds.first().copied().unwrap_or_default(),
        workers: workers_from_env()?,
        scenarios: Vec::new(),
    };
    for cfg in configs {
        let start = Instant::now();
        let out = run_scenario_to(cfg, dir)?;
        run.scenarios.push(ScenarioSummary {
            id: out.id(),
            config: cfg.clone(),
            records_file: records_path(Path::new(""), out.id()).display().to_string(),
            failures: out.records.iter().filter(|r| r.failure.is_some()).count(),
            elapsed_secs: start.elapsed().as_secs_f64(),
            metrics: out.metrics(),
        });
        let f = BufWriter::new(File::create(dir.join("summary.json"))?);
        serde_json::to_writer_pretty(f, &run)?;
    }
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::CostDistribution;

    fn cfg(methods: Vec<Method>, m: usize) -> ScenarioConfig {
        ScenarioConfig::new(0.3, CostDistribution::Gamma, -0.4, 100, methods, 11)
            .unwrap()
            .with_replications(m)
    }

    #[test]
    fn smoke_one_replication() {
        let c = cfg(vec![Method::TwoSls, Method::ThreeSls, Method::Ubgn], 1);
        let run = run_scenario(&c).unwrap();
        assert_eq!(run.records.len(), 3 * 3);
        for m in &c.methods {
            for q in Quantity::ALL {
                let n = run.records.iter().filter(|r| r.method == *m && r.quantity == q).count();
                assert_eq!(n, 1);
            }
        }
        assert!(run.records.iter().all(Record::is_ok));
        let bayes = run.records.iter().find(|r| r.method == Method::Ubgn).unwrap();
        assert!(bayes.converged.is_some());
    }

    #[test]
    fn reruns_are_bit_identical_and_persisted() {
        let c = cfg(vec![Method::TwoSls, Method::ThreeSls], 37);
        let dir = tempfile::tempdir().unwrap();
        let a = run_scenario_to(&c, dir.path()).unwrap();
        let first = std::fs::read(records_path(dir.path(), c.id())).unwrap();
        let b = run_scenario(&c).unwrap();
        assert_eq!(a.records, b.records);
        run_scenario_to(&c, dir.path()).unwrap();
        assert_eq!(std::fs::read(records_path(dir.path(), c.id())).unwrap(), first);

        let (meta, back) = read_records(first.as_slice()).unwrap();
        assert_eq!(meta.scenario, c.id());
        assert_eq!(meta.seed, 11);
        assert_eq!(meta.lambda, c.lambda);
        assert_eq!(back, a.records);
        assert!(String::from_utf8(first).unwrap().starts_with("#schema_version=1,"));
    }

    #[test]
    fn records_do_not_depend_on_other_methods() {
        let alone = run_scenario(&cfg(vec![Method::ThreeSls], 5)).unwrap();
        let both = run_scenario(&cfg(vec![Method::TwoSls, Method::ThreeSls], 5)).unwrap();
        let pick: Vec<_> = both
            .records
            .into_iter()
            .filter(|r| r.method == Method::ThreeSls)
            .collect();
        assert_eq!(alone.records, pick);
    }

    #[test]
    fn failures_are_tagged_not_dropped() {
        let r = Record {
            scenario: 0,
            replication: 0,
            method: Method::TwoSls,
            quantity: Quantity::Cost,
            estimate: None,
            se: None,
            lower: None,
            upper: None,
            converged: None,
            failure: Some(tag(&crate::freq::FreqError::WeakInstrument(0.0))),
        };
        assert_eq!(r.failure.as_deref(), Some("WeakInstrument"));
        assert!(!r.is_ok());
    }

    #[test]
    fn rejects_unknown_schema() {
        let text = "#schema_version=2,scenario=0,seed=1,lambda=30000\nscenario\n";
        assert!(matches!(read_records(text.as_bytes()), Err(SimError::Records(_))));
    }
}
