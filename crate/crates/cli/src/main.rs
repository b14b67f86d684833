use anyhow::{bail, Context, Result};
use cace_core::bayes::McmcConfig;
use cace_core::dist::CostDistribution;
use cace_core::io::{read_dataset_file, write_imputed};
use cace_core::missing::ImputationConfig;
use cace_core::pipeline::{estimate, EstimateRequest};
use cace_core::sim::{
    adequacy_flag, compare_to_reference, compute_metrics, grid, grid_point, parse_methods, read_records_file, run_grid,
    truth_at, Adequacy, ChainPreset, MetricsRow, ReferenceMetric, ScenarioConfig,
};
use cace_core::{Lambda, Method};
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "cace",
    version,
    about = "Complier-average causal effects for cost-effectiveness trials"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate incremental cost, effect and INB from a trial dataset.
    Estimate(EstimateArgs),
    /// Run simulation scenarios and write replication records.
    Simulate(SimulateArgs),
    /// Summarise replication records.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Csv,
}

#[derive(Args)]
struct EstimateArgs {
    /// Delimited dataset with columns id,z,d,y_cost,y_effect[,x_base].
    #[arg(long)]
    data: PathBuf,
    /// itt, 2sls, 3sls, ubn, ubgn or bfl.
    #[arg(long)]
    method: Method,
    /// Willingness to pay per QALY.
    #[arg(long, default_value_t = 30_000.0)]
    lambda: f64,
    /// Adjust for the baseline covariate `x_base`.
    #[arg(long)]
    covariate: bool,
    /// Raw units per unit of `y_cost`.
    #[arg(long, default_value_t = 1.0)]
    scale_cost: f64,
    /// Raw units per unit of `y_effect`.
    #[arg(long, default_value_t = 1.0)]
    scale_effect: f64,
    /// Multiply impute before fitting; `M` or `m=M` copies.
    #[arg(long, value_parser = parse_impute)]
    impute: Option<usize>,
    /// Donor pool size for predictive mean matching.
    #[arg(long, default_value_t = 5)]
    knn: usize,
    /// Heteroskedasticity-robust covariances for the least-squares methods.
    #[arg(long)]
    robust: bool,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Write MCMC draws (iteration,chain,parameter,value) here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Write the completed datasets, stacked with an imputation_id column.
    #[arg(long)]
    imputed_out: Option<PathBuf>,
    /// MCMC length for the Bayesian methods.
    #[arg(long, value_enum, default_value_t = Chains::Full)]
    chains: Chains,
}

#[derive(Clone, Copy, ValueEnum)]
enum Chains {
    Full,
    Shortened,
}

fn parse_impute(s: &str) -> Result<usize, String> {
    let v = s.trim().strip_prefix("m=").unwrap_or(s.trim());
    v.parse().map_err(|_| format!("expected M or m=M, got `{s}`"))
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (flat TOML); inline flags are ignored when given.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Run every grid point with the run settings of the scenario.
    #[arg(long)]
    grid: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    p_noncomp: Option<f64>,
    #[arg(long)]
    cost_dist: Option<CostDistribution>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<f64>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    replications: Option<usize>,
    /// Comma-separated methods.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    chains: Option<Chains>,
}

#[derive(Args)]
struct ReportArgs {
    /// Records directory or a single records file.
    #[arg(long)]
    records: PathBuf,
    /// Show reference coverage, width and RMSE with MC-SE bands.
    #[arg(long)]
    against_paper: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
    format: ReportFormat,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Estimate(a) => cmd_estimate(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    }
}

fn cmd_estimate(a: EstimateArgs) -> Result<()> {
    let data = read_dataset_file(&a.data)
        .with_context(|| format!("reading {}", a.data.display()))?
        .with_scales(a.scale_cost, a.scale_effect)?;
    let mut req = EstimateRequest::new(a.method, a.seed);
    req.lambda = Lambda::new(a.lambda)?;
    req.covariate = a.covariate;
    req.robust = a.robust;
    req.mcmc = match a.chains {
        Chains::Full => McmcConfig::default(),
        Chains::Shortened => McmcConfig::shortened(),
    };
    req.imputation = a.impute.map(|m| ImputationConfig {
        m,
        knn: a.knn,
        ..ImputationConfig::default()
    });
    if a.trace.is_some() && (!a.method.is_bayesian() || a.impute.is_some()) {
        bail!("--trace needs a Bayesian method without --impute");
    }
    let out = estimate(&data, &req)?;
    if let (Some(path), Some(draws)) = (&a.trace, &out.trace) {
        draws.write_trace(BufWriter::new(File::create(path)?))?;
    }
    if let (Some(path), Some(copies)) = (&a.imputed_out, &out.imputed) {
        write_imputed(BufWriter::new(File::create(path)?), copies)?;
    }
    let stdout = std::io::stdout();
    match a.format {
        Format::Csv => out.report.write_csv(stdout.lock())?,
        Format::Json => {
            serde_json::to_writer_pretty(stdout.lock(), &out.report)?;
            println!();
        }
    }
    if let Some(m) = &out.report.mcmc {
        if !m.converged {
            eprintln!("warning: convergence gate not passed after {} extensions", m.extensions);
        }
        if m.weak_first_stage {
            eprintln!("warning: first-stage interval covers zero; CACE posteriors are heavy tailed");
        }
    }
    Ok(())
}

fn scenario_from_args(a: &SimulateArgs) -> Result<ScenarioConfig> {
    if let Some(path) = &a.scenario {
        return ScenarioConfig::from_file(path).with_context(|| format!("reading {}", path.display()));
    }
    let Some(seed) = a.seed else {
        bail!("a master seed is required (--seed or a scenario file)");
    };
    if a.methods.is_empty() {
        bail!("--methods is required");
    }
    let methods = parse_methods(&a.methods)?;
    let need = |v: Option<f64>, name: &str| v.with_context(|| format!("--{name} is required without --grid"));
    let (p, dist, rho, n) = if a.grid {
        // grid point values are overridden per scenario
        let (p, d, r, n) = grid_point(a.grid_base_id(&methods)).unwrap();
        (p, d, r, n)
    } else {
        (
            need(a.p_noncomp, "p-noncomp")?,
            a.cost_dist.context("--cost-dist is required without --grid")?,
            need(a.rho, "rho")?,
            a.n.context("--n is required without --grid")?,
        )
    };
    let mut cfg = ScenarioConfig::new(p, dist, rho, n, methods, seed)?;
    if let Some(m) = a.replications {
        cfg.replications = m;
    }
    if let Some(l) = a.lambda {
        cfg.lambda = Lambda::new(l)?;
    }
    if let Some(c) = a.chains {
        cfg.chains = match c {
            Chains::Full => ChainPreset::Full,
            Chains::Shortened => ChainPreset::Shortened,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

impl SimulateArgs {
    /// A grid point on which the requested methods are valid.
    fn grid_base_id(&self, methods: &[Method]) -> usize {
        if methods.contains(&Method::Ubgn) {
            8
        } else {
            0
        }
    }
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let base = scenario_from_args(&a)?;
    let configs = if a.grid { grid(&base) } else { vec![base] };
    std::fs::create_dir_all(&a.out)?;
    let run = run_grid(&configs, &a.out)?;
    eprintln!(
        "{} scenario(s), master seed {}, records in {}",
        run.scenarios.len(),
        run.master_seed,
        a.out.display()
    );
    for s in &run.scenarios {
        eprintln!(
            "scenario {:2}: {} replications, {} failed records, {:.1}s",
            s.id, s.config.replications, s.failures, s.elapsed_secs
        );
    }
    Ok(())
}

fn record_files(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("scenario_") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("no scenario_*.csv files in {}", path.display());
    }
    Ok(files)
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "NA".into())
}

fn adequacy_label(a: Adequacy) -> &'static str {
    match a {
        Adequacy::Adequate => "yes",
        Adequacy::Inadequate => "no",
        Adequacy::Missing => "NA",
    }
}

fn prec(row: &MetricsRow) -> usize {
    if row.quantity == cace_core::sim::Quantity::Inb {
        1
    } else {
        4
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for f in record_files(&a.records)? {
        let (meta, records) = read_records_file(&f).with_context(|| format!("reading {}", f.display()))?;
        rows.extend(compute_metrics(&records, &truth_at(meta.lambda)));
    }
    let refs: BTreeMap<_, _> = if a.against_paper {
        compare_to_reference(&rows)
            .into_iter()
            .map(|c| ((c.scenario, c.method, c.quantity, c.metric), c))
            .collect()
    } else {
        BTreeMap::new()
    };
    let reference = |r: &MetricsRow, m: ReferenceMetric| refs.get(&(r.scenario, r.method, r.quantity, m));

    let mut header = vec![
        "scenario",
        "p_noncomp",
        "n",
        "cost_dist",
        "rho",
        "method",
        "quantity",
        "replications",
        "failures",
        "nonconverged",
        "truth",
        "median_bias",
        "pct_bias",
        "coverage",
        "coverage_mcse",
        "median_width",
        "rmse",
        "adequate",
    ];
    if a.against_paper {
        header.extend(["ref_coverage", "coverage_within_3mcse", "ref_width", "ref_rmse"]);
    }
    let mut table: Vec<Vec<String>> = Vec::new();
    for r in &rows {
        let (p, d, rho, n) = grid_point(r.scenario).context("scenario id outside the grid")?;
        let k = prec(r);
        let mut line = vec![
            r.scenario.to_string(),
            p.to_string(),
            n.to_string(),
            d.label().to_string(),
            rho.to_string(),
            r.method.label().to_string(),
            r.quantity.label().to_string(),
            r.replications.to_string(),
            r.failures.to_string(),
            r.nonconverged.to_string(),
            opt(Some(r.truth), k),
            opt(r.median_bias, k),
            opt(r.pct_bias, 2),
            opt(r.coverage, 3),
            opt(r.coverage_mcse, 3),
            opt(r.median_width, k),
            opt(r.rmse, k),
            adequacy_label(adequacy_flag(r)).to_string(),
        ];
        if a.against_paper {
            let cov = reference(r, ReferenceMetric::Coverage);
            line.push(opt(cov.map(|c| c.reference), 3));
            line.push(match cov.and_then(|c| c.within_band) {
                Some(true) => "yes".into(),
                Some(false) => "no".into(),
                None => "NA".into(),
            });
            line.push(opt(reference(r, ReferenceMetric::Width).map(|c| c.reference), k));
            line.push(opt(reference(r, ReferenceMetric::Rmse).map(|c| c.reference), k));
        }
        table.push(line);
    }

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match a.format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(&header)?;
            for line in &table {
                w.write_record(line)?;
            }
            w.flush()?;
        }
        ReportFormat::Text => {
            let widths: Vec<usize> = (0..header.len())
                .map(|j| table.iter().map(|l| l[j].len()).chain([header[j].len()]).max().unwrap())
                .collect();
            let fmt = |cells: Vec<&str>| -> String {
                cells
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:>w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
            };
            writeln!(out, "{}", fmt(header.clone()))?;
            for line in &table {
                writeln!(out, "{}", fmt(line.iter().map(String::as_str).collect()))?;
            }
            writeln!(
                out,
                "\ncost and effect in working units (thousands, tenths of a QALY); INB in currency"
            )?;
        }
    }
    Ok(())
}
