//! Metropolis-within-Gibbs engine with the chain protocol used by the fits:
//! adaptive burn-in, a Geweke gate with extension runs, then a final kept run.

use super::diagnostics::{geweke_z, DiagnosticError};
use super::{BayesError, McmcConfig};
use crate::linalg::cholesky;
use crate::rng::{child, StreamRng};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use std::collections::VecDeque;
use std::io::Write;

/// Sampler state: coordinates touched by random-walk blocks plus
/// model-specific auxiliary state (latent values, sufficient statistics).
#[derive(Debug, Clone)]
pub struct State<A> {
    pub theta: Vec<f64>,
    pub aux: A,
}

#[derive(Debug, Clone)]
pub enum Block {
    /// Gaussian random-walk Metropolis on `theta[indices]`.
    RandomWalk {
        name: String,
        indices: Vec<usize>,
        /// Starting proposal covariance.
        proposal: DMatrix<f64>,
    },
    /// Update delegated to [`Model::exact`] (Gibbs or independence proposals).
    Exact { name: String, id: usize },
}

impl Block {
    pub fn random_walk(name: &str, indices: Vec<usize>, sds: &[f64]) -> Self {
        assert_eq!(indices.len(), sds.len());
        let proposal = DMatrix::from_diagonal(&DVector::from_iterator(sds.len(), sds.iter().map(|s| s * s)));
        Block::RandomWalk {
            name: name.to_string(),
            indices,
            proposal,
        }
    }

    pub fn exact(name: &str, id: usize) -> Self {
        Block::Exact {
            name: name.to_string(),
            id,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            Block::RandomWalk { name, .. } | Block::Exact { name, .. } => name,
        }
    }
}

pub trait Model: Sync {
    type Aux: Clone + Send;

    /// Names of the recorded quantities.
    fn record_names(&self) -> Vec<String>;

    /// Recorded quantities checked by the convergence gate.
    fn gated(&self) -> Vec<usize> {
        (0..self.record_names().len()).collect()
    }

    fn blocks(&self) -> Vec<Block>;

    fn initial(&self, chain: usize, rng: &mut StreamRng) -> Result<State<Self::Aux>, BayesError>;

    /// Unnormalised log posterior; `-inf` outside the support.
    fn log_post(&self, state: &State<Self::Aux>) -> f64;

    /// Runs exact block `id`; returns whether the state moved (for acceptance rates).
    fn exact(&self, id: usize, _state: &mut State<Self::Aux>, _rng: &mut StreamRng) -> Result<bool, BayesError> {
        unreachable!("model declares no exact block {id}")
    }

    fn record(&self, state: &State<Self::Aux>, out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct BlockReport {
    pub name: String,
    /// Acceptance rate over the kept run, averaged across chains.
    pub acceptance: f64,
    /// Final proposal scale relative to the starting one (random-walk blocks).
    pub scale: Option<f64>,
    /// No accepted move, or a proposal scale that collapsed, in some chain.
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct ChainDraws {
    /// `columns[record][draw]`.
    pub columns: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct McmcOutput {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
    /// Geweke z at the last gate, `[chain][record]`; `None` where undefined.
    pub geweke: Vec<Vec<Option<f64>>>,
    pub extensions: usize,
    pub converged: bool,
    pub blocks: Vec<BlockReport>,
    /// Iterations run per chain, burn-in included.
    pub iterations: usize,
}

impl McmcOutput {
    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Kept draws of one quantity, chains concatenated.
    pub fn pooled(&self, idx: usize) -> Vec<f64> {
        self.chains
            .iter()
            .flat_map(|c| c.columns[idx].iter().copied())
            .collect()
    }

    pub fn kept_per_chain(&self) -> usize {
        self.chains
            .first()
            .map(|c| c.columns.first().map_or(0, Vec::len))
            .unwrap_or(0)
    }

    pub fn degenerate(&self) -> bool {
        self.blocks.iter().any(|b| b.degenerate)
    }

    /// Long-format dump: `iteration,chain,parameter,value`.
    pub fn write_trace<W: Write>(&self, writer: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "chain", "parameter", "value"])?;
        for (c, chain) in self.chains.iter().enumerate() {
            for t in 0..self.kept_per_chain() {
                for (p, name) in self.names.iter().enumerate() {
                    w.write_record([
                        (t + 1).to_string(),
                        (c + 1).to_string(),
                        name.clone(),
                        chain.columns[p][t].to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

const MIN_SCALE: f64 = 1e-10;

struct RwRuntime {
    indices: Vec<usize>,
    chol: DMatrix<f64>,
    log_scale: f64,
    target: f64,
    swapped: bool,
    // Running moments of the block's coordinates during burn-in.
    count: f64,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl RwRuntime {
    fn new(indices: Vec<usize>, proposal: &DMatrix<f64>) -> Result<Self, BayesError> {
        let d = indices.len();
        Ok(Self {
            chol: cholesky(proposal)?,
            target: if d == 1 { 0.44 } else { 0.30 },
            swapped: false,
            log_scale: 0.0,
            count: 0.0,
            mean: DVector::zeros(d),
            comoment: DMatrix::zeros(d, d),
            indices,
        })
    }

    fn observe(&mut self, theta: &[f64]) {
        let x = DVector::from_iterator(self.indices.len(), self.indices.iter().map(|&i| theta[i]));
        self.count += 1.0;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count;
        let delta2 = &x - &self.mean;
        self.comoment += &delta * delta2.transpose();
    }

    fn refresh(&mut self) {
        let d = self.indices.len();
        if self.count < (20 * d).max(100) as f64 {
            return;
        }
        let cov = &self.comoment / (self.count - 1.0);
        let ridge = 1e-10 * cov.diagonal().max().max(1e-300);
        let prop = cov * (2.38 * 2.38 / d as f64) + DMatrix::identity(d, d) * ridge;
        if let Ok(l) = cholesky(&prop) {
            self.chol = l;
            if !self.swapped {
                self.log_scale = 0.0;
                self.swapped = true;
            }
        }
    }
}

enum Runtime {
    Rw(RwRuntime),
    Exact(usize),
}

struct BlockRt {
    rt: Runtime,
    accepted: u64,
    proposed: u64,
}

struct Chain<'m, M: Model> {
    model: &'m M,
    state: State<M::Aux>,
    logp: f64,
    rng: StreamRng,
    blocks: Vec<BlockRt>,
    adapt_iter: usize,
    adapt_interval: usize,
    buf: Vec<f64>,
    window: Vec<VecDeque<f64>>,
    window_len: usize,
    kept: Vec<Vec<f64>>,
}

#[derive(Clone, Copy, PartialEq)]
enum Phase {
    BurnIn,
    Window,
    Keep { thin: usize },
}

fn finite_or_neg_inf(v: f64) -> f64 {
    if v.is_nan() {
        f64::NEG_INFINITY
    } else {
        v
    }
}

impl<'m, M: Model> Chain<'m, M> {
    fn new(model: &'m M, idx: usize, mut rng: StreamRng, cfg: &McmcConfig) -> Result<Self, BayesError> {
        let state = model.initial(idx, &mut rng)?;
        let logp = model.log_post(&state);
        if !logp.is_finite() {
            return Err(BayesError::Initialization {
                chain: idx,
                log_density: logp,
            });
        }
        let blocks = model
            .blocks()
            .into_iter()
            .map(|b| {
                let rt = match b {
                    Block::RandomWalk { indices, proposal, .. } => Runtime::Rw(RwRuntime::new(indices, &proposal)?),
                    Block::Exact { id, .. } => Runtime::Exact(id),
                };
                Ok(BlockRt {
                    rt,
                    accepted: 0,
                    proposed: 0,
                })
            })
            .collect::<Result<Vec<_>, BayesError>>()?;
        let n_rec = model.record_names().len();
        Ok(Self {
            model,
            state,
            logp,
            rng,
            blocks,
            adapt_iter: 0,
            adapt_interval: cfg.adapt_interval,
            buf: vec![0.0; n_rec],
            window: vec![VecDeque::new(); n_rec],
            window_len: cfg.initial_iterations - cfg.burn_in,
            kept: vec![Vec::new(); n_rec],
        })
    }

    fn sweep(&mut self, adapt: bool) -> Result<(), BayesError> {
        let gamma = ((self.adapt_iter + 1) as f64).powf(-0.6);
        for b in &mut self.blocks {
            b.proposed += 1;
            match &mut b.rt {
                Runtime::Rw(rw) => {
                    let d = rw.indices.len();
                    let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut self.rng)));
                    let step = &rw.chol * z * rw.log_scale.exp();
                    let old: Vec<f64> = rw.indices.iter().map(|&i| self.state.theta[i]).collect();
                    for (k, &i) in rw.indices.iter().enumerate() {
                        self.state.theta[i] += step[k];
                    }
                    let proposed = finite_or_neg_inf(self.model.log_post(&self.state));
                    let log_ratio = proposed - self.logp;
                    let accept = log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio;
                    if accept {
                        self.logp = proposed;
                        b.accepted += 1;
                    } else {
                        for (k, &i) in rw.indices.iter().enumerate() {
                            self.state.theta[i] = old[k];
                        }
                    }
                    if adapt {
                        let alpha = if log_ratio.is_nan() {
                            0.0
                        } else {
                            log_ratio.min(0.0).exp()
                        };
                        rw.log_scale = (rw.log_scale + gamma * (alpha - rw.target)).max(MIN_SCALE.ln() - 5.0);
                        rw.observe(&self.state.theta);
                    }
                }
                Runtime::Exact(id) => {
                    if self.model.exact(*id, &mut self.state, &mut self.rng)? {
                        b.accepted += 1;
                    }
                    self.logp = finite_or_neg_inf(self.model.log_post(&self.state));
                }
            }
        }
        if adapt {
            self.adapt_iter += 1;
            if self.adapt_iter.is_multiple_of(self.adapt_interval) {
                for b in &mut self.blocks {
                    if let Runtime::Rw(rw) = &mut b.rt {
                        rw.refresh();
                    }
                }
            }
        }
        Ok(())
    }

    fn advance(&mut self, iterations: usize, phase: Phase) -> Result<(), BayesError> {
        for t in 0..iterations {
            self.sweep(phase == Phase::BurnIn)?;
            match phase {
                Phase::BurnIn => {}
                Phase::Window => {
                    self.model.record(&self.state, &mut self.buf);
                    for (w, &v) in self.window.iter_mut().zip(&self.buf) {
                        w.push_back(v);
                        if w.len() > self.window_len {
                            w.pop_front();
                        }
                    }
                }
                Phase::Keep { thin } => {
                    if (t + 1) % thin == 0 {
                        self.model.record(&self.state, &mut self.buf);
                        for (k, &v) in self.kept.iter_mut().zip(&self.buf) {
                            k.push(v);
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn reset_counters(&mut self) {
        for b in &mut self.blocks {
            b.accepted = 0;
            b.proposed = 0;
        }
    }

    fn geweke(&self, cfg: &McmcConfig) -> Vec<Option<f64>> {
        self.window
            .iter()
            .map(|w| {
                let (a, b) = w.as_slices();
                let v: Vec<f64> = a.iter().chain(b).copied().collect();
                match geweke_z(&v, cfg.geweke_first, cfg.geweke_last) {
                    Ok(z) => Some(z),
                    Err(DiagnosticError::ZeroVariance) => None,
                    Err(_) => None,
                }
            })
            .collect()
    }
}

fn gate_passes(z: &[Vec<Option<f64>>], gated: &[usize], threshold: f64) -> bool {
    z.iter()
        .all(|chain| gated.iter().all(|&i| chain[i].is_none_or(|v| v.abs() < threshold)))
}

/// Runs `cfg.chains` chains of `model` under the configured protocol.
///
/// Chains that never pass the gate are still returned, with `converged` unset.
pub fn mcmc_run<M: Model>(model: &M, cfg: &McmcConfig, rng: &mut StreamRng) -> Result<McmcOutput, BayesError> {
    cfg.validate()?;
    let mut chains = (0..cfg.chains)
        .map(|c| Chain::new(model, c, child(rng, c as u64), cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let run_all = |chains: &mut Vec<Chain<'_, M>>, n: usize, phase: Phase| -> Result<(), BayesError> {
        chains.par_iter_mut().try_for_each(|c| c.advance(n, phase))
    };
    run_all(&mut chains, cfg.burn_in, Phase::BurnIn)?;
    run_all(&mut chains, cfg.initial_iterations - cfg.burn_in, Phase::Window)?;
    let gated = model.gated();
    let mut iterations = cfg.initial_iterations;
    let mut extensions = 0;
    let mut geweke: Vec<Vec<Option<f64>>> = chains.iter().map(|c| c.geweke(cfg)).collect();
    let mut converged = gate_passes(&geweke, &gated, cfg.geweke_threshold);
    while !converged && extensions < cfg.max_extensions {
        run_all(&mut chains, cfg.extension, Phase::Window)?;
        extensions += 1;
        iterations += cfg.extension;
        geweke = chains.iter().map(|c| c.geweke(cfg)).collect();
        converged = gate_passes(&geweke, &gated, cfg.geweke_threshold);
    }
    for c in &mut chains {
        c.reset_counters();
    }
    run_all(&mut chains, cfg.final_run, Phase::Keep { thin: cfg.thin })?;
    iterations += cfg.final_run;

    let names = model.record_names();
    let blocks = model
        .blocks()
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let rates: Vec<f64> = chains
                .iter()
                .map(|c| c.blocks[j].accepted as f64 / c.blocks[j].proposed.max(1) as f64)
                .collect();
            let scale = match &chains[0].blocks[j].rt {
                Runtime::Rw(_) => Some(
                    chains
                        .iter()
                        .map(|c| match &c.blocks[j].rt {
                            Runtime::Rw(rw) => rw.log_scale.exp() * rw.chol.diagonal().max(),
                            Runtime::Exact(_) => f64::NAN,
                        })
                        .fold(f64::INFINITY, f64::min),
                ),
                Runtime::Exact(_) => None,
            };
            BlockReport {
                name: b.name().to_string(),
                acceptance: rates.iter().sum::<f64>() / rates.len() as f64,
                scale,
                degenerate: rates.contains(&0.0) || scale.is_some_and(|s| s < MIN_SCALE),
            }
        })
        .collect();
    Ok(McmcOutput {
        names,
        chains: chains.into_iter().map(|c| ChainDraws { columns: c.kept }).collect(),
        geweke,
        extensions,
        converged,
        blocks,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bayes::diagnostics::quantile;
    use crate::rng::seeded;

    /// Independent normal target with the given means and sds, sampled by one block.
    struct Gaussian {
        mean: Vec<f64>,
        sd: Vec<f64>,
    }

    impl Model for Gaussian {
        type Aux = ();
        fn record_names(&self) -> Vec<String> {
            (0..self.mean.len()).map(|i| format!("x{i}")).collect()
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::random_walk(
                "x",
                (0..self.mean.len()).collect(),
                &vec![1.0; self.mean.len()],
            )]
        }
        fn initial(&self, _chain: usize, _rng: &mut StreamRng) -> Result<State<()>, BayesError> {
            Ok(State {
                theta: vec![0.0; self.mean.len()],
                aux: (),
            })
        }
        fn log_post(&self, s: &State<()>) -> f64 {
            s.theta
                .iter()
                .zip(self.mean.iter().zip(&self.sd))
                .map(|(x, (m, sd))| -0.5 * ((x - m) / sd).powi(2))
                .sum()
        }
        fn record(&self, s: &State<()>, out: &mut [f64]) {
            out.copy_from_slice(&s.theta);
        }
    }

    fn test_config() -> McmcConfig {
        McmcConfig::default()
    }

    #[test]
    fn standard_normal_target() {
        let model = Gaussian {
            mean: vec![0.0],
            sd: vec![1.0],
        };
        let cfg = McmcConfig {
            final_run: 20_000,
            target_kept: 40_000,
            ..test_config()
        };
        let out = mcmc_run(&model, &cfg, &mut seeded(5)).unwrap();
        assert_eq!(out.kept_per_chain(), 20_000);
        let x = out.pooled(0);
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1.0);
        let ess = crate::bayes::diagnostics::ess(&[&out.chains[0].columns[0], &out.chains[1].columns[0]]);
        assert!(m.abs() < 4.0 / ess.sqrt(), "mean {m}, ess {ess}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");
        let rate = out.blocks[0].acceptance;
        assert!((0.2..=0.6).contains(&rate), "{rate}");
        assert!(out.converged && !out.degenerate());
    }

    /// y_i ~ N(mu, 1) with mu ~ N(0, 10^2): closed-form normal posterior.
    struct NormalNormal {
        sum: f64,
        n: f64,
    }

    impl Model for NormalNormal {
        type Aux = ();
        fn record_names(&self) -> Vec<String> {
            vec!["mu".into()]
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::random_walk("mu", vec![0], &[0.5])]
        }
        fn initial(&self, chain: usize, _rng: &mut StreamRng) -> Result<State<()>, BayesError> {
            Ok(State {
                theta: vec![chain as f64 * 3.0 - 1.5],
                aux: (),
            })
        }
        fn log_post(&self, s: &State<()>) -> f64 {
            let mu = s.theta[0];
            -0.5 * (self.n * mu * mu - 2.0 * mu * self.sum) - 0.5 * mu * mu / 100.0
        }
        fn record(&self, s: &State<()>, out: &mut [f64]) {
            out[0] = s.theta[0];
        }
    }

    #[test]
    fn conjugate_normal_posterior() {
        let model = NormalNormal { sum: 21.0, n: 20.0 };
        let prec = model.n + 0.01;
        let post_mean = model.sum / prec;
        let post_sd = prec.recip().sqrt();
        let out = mcmc_run(&model, &test_config(), &mut seeded(8)).unwrap();
        let x = out.pooled(0);
        let ess = crate::bayes::diagnostics::ess(&[&out.chains[0].columns[0], &out.chains[1].columns[0]]);
        for (p, zq) in [
            (0.025, -1.959_963_984_540_054),
            (0.5, 0.0),
            (0.975, 1.959_963_984_540_054),
        ] {
            let exact = post_mean + zq * post_sd;
            // Quantile MC error is roughly sqrt(p(1-p)/ess)/density; use a loose 5-sigma bound.
            let dens = (-0.5 * zq * zq).exp() / (2.0 * std::f64::consts::PI).sqrt() / post_sd;
            let se = (p * (1.0 - p) / ess).sqrt() / dens;
            let got = quantile(&x, p);
            assert!((got - exact).abs() < 5.0 * se, "p={p}: {got} vs {exact} (se {se})");
        }
    }

    /// Density concentrated on a single point.
    struct PointMass;

    impl Model for PointMass {
        type Aux = ();
        fn record_names(&self) -> Vec<String> {
            vec!["x".into()]
        }
        fn blocks(&self) -> Vec<Block> {
            vec![Block::random_walk("x", vec![0], &[1.0])]
        }
        fn initial(&self, _chain: usize, _rng: &mut StreamRng) -> Result<State<()>, BayesError> {
            Ok(State {
                theta: vec![1.0],
                aux: (),
            })
        }
        fn log_post(&self, s: &State<()>) -> f64 {
            if s.theta[0] == 1.0 {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
        fn record(&self, s: &State<()>, out: &mut [f64]) {
            out[0] = s.theta[0];
        }
    }

    #[test]
    fn point_mass_is_flagged() {
        let out = mcmc_run(&PointMass, &McmcConfig::shortened(), &mut seeded(1)).unwrap();
        assert!(out.degenerate());
        assert!(out.pooled(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_finite_start_is_an_error() {
        struct Bad;
        impl Model for Bad {
            type Aux = ();
            fn record_names(&self) -> Vec<String> {
                vec!["x".into()]
            }
            fn blocks(&self) -> Vec<Block> {
                vec![]
            }
            fn initial(&self, _c: usize, _r: &mut StreamRng) -> Result<State<()>, BayesError> {
                Ok(State {
                    theta: vec![0.0],
                    aux: (),
                })
            }
            fn log_post(&self, _s: &State<()>) -> f64 {
                f64::NEG_INFINITY
            }
            fn record(&self, _s: &State<()>, out: &mut [f64]) {
                out[0] = 0.0;
            }
        }
        let err = mcmc_run(&Bad, &test_config(), &mut seeded(1)).unwrap_err();
        assert!(matches!(err, BayesError::Initialization { chain: 0, .. }));
    }

    #[test]
    fn protocol_lengths_and_reproducibility() {
        let model = Gaussian {
            mean: vec![1.0, -2.0],
            sd: vec![0.5, 3.0],
        };
        let cfg = McmcConfig::shortened();
        let a = mcmc_run(&model, &cfg, &mut seeded(3)).unwrap();
        let b = mcmc_run(&model, &cfg, &mut seeded(3)).unwrap();
        assert_eq!(a.chains.len(), cfg.chains);
        for c in &a.chains {
            assert_eq!(c.columns[0].len(), cfg.target_kept / cfg.chains);
        }
        assert_eq!(a.pooled(1), b.pooled(1));
        assert_eq!(
            a.iterations,
            cfg.initial_iterations + a.extensions * cfg.extension + cfg.final_run
        );
        let mut buf = Vec::new();
        a.write_trace(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iteration,chain,parameter,value\n1,1,x0,"));
        assert_eq!(text.lines().count(), 1 + 2 * cfg.target_kept);
    }

    #[test]
    fn gate_checks_listed_quantities() {
        let z = vec![vec![Some(0.5), Some(3.0)], vec![Some(-1.0), None]];
        assert!(!gate_passes(&z, &[0, 1], 2.5));
        assert!(gate_passes(&z, &[0], 2.5));
    }
}
