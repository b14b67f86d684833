//! Gamma costs with conditionally normal effects (uBGN).
//!
//! Treatment received follows a logistic model in assignment; its raw
//! residual `r = d - pi` enters both outcome means. Costs are Gamma with
//! mean `mu_cost` and shape `nu + offset`; effects given costs are normal
//! with slope `rho * sd_effect / sd_cost_i`, where `sd_cost_i = mu_cost_i / sqrt(shape)`.
//! Subjects sharing `(z, d, x)` share a mean, so complete data without a
//! covariate reduce to four groups of sufficient statistics.

use super::data::Prepared;
use super::mcmc::{Block, Model, State};
use super::summary::{COST, EFFECT, FIRST_STAGE};
use super::{BayesError, BayesOptions, PriorSpec};
use crate::linalg::{least_squares, DesignMatrix};
use crate::model::TrialDataset;
use crate::rng::StreamRng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

/// Coefficients, residuals and coefficient covariance.
type OlsParts = (Vec<f64>, Vec<f64>, DMatrix<f64>);

const LATENT: usize = 0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy)]
struct Layout {
    alpha: usize,
    cost: usize,
    log_shape: usize,
    effect: usize,
    log_sd: usize,
    fisher_z: usize,
    covariate_model: Option<usize>,
    /// Coefficients per outcome mean: intercept, received, residual and optionally covariate.
    k: usize,
}

#[derive(Debug, Clone, Copy, Default)]
struct GroupStats {
    z: usize,
    d: f64,
    x: f64,
    m: f64,
    log_y1: f64,
    y1: f64,
    y1_sq: f64,
    y2: f64,
    y2_sq: f64,
    y1_y2: f64,
}

impl GroupStats {
    fn add(&mut self, y1: f64, y2: f64) {
        self.m += 1.0;
        self.log_y1 += y1.ln();
        self.y1 += y1;
        self.y1_sq += y1 * y1;
        self.y2 += y2;
        self.y2_sq += y2 * y2;
        self.y1_y2 += y1 * y2;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Aux {
    cost: Vec<f64>,
    effect: Vec<f64>,
    x: Vec<f64>,
    groups: Vec<GroupStats>,
    sum_x: f64,
    sum_x_sq: f64,
}

/// Parameter values decoded from the state vector.
struct Params {
    pi: [f64; 2],
    cost: [f64; 4],
    effect: [f64; 4],
    shape: f64,
    sd_effect: f64,
    rho: f64,
}

impl Params {
    fn mean_cost(&self, z: usize, d: f64, x: f64) -> f64 {
        let r = d - self.pi[z];
        self.cost[0] + self.cost[1] * d + self.cost[2] * r + self.cost[3] * x
    }

    fn mean_effect(&self, z: usize, d: f64, x: f64) -> f64 {
        let r = d - self.pi[z];
        self.effect[0] + self.effect[1] * d + self.effect[2] * r + self.effect[3] * x
    }

    fn cond_var(&self) -> f64 {
        self.sd_effect * self.sd_effect * (1.0 - self.rho * self.rho)
    }

    /// Mean and slope of the effect given the cost.
    fn effect_given_cost(&self, z: usize, d: f64, x: f64, mu1: f64) -> (f64, f64) {
        let slope = self.rho * self.sd_effect * self.shape.sqrt() / mu1;
        (self.mean_effect(z, d, x) - slope * mu1, slope)
    }

    /// Log-likelihood of one subject's outcomes.
    fn subject(&self, z: usize, d: f64, x: f64, y1: f64, y2: f64) -> f64 {
        let mu1 = self.mean_cost(z, d, x);
        if !(mu1 > 0.0 && y1 > 0.0) {
            return f64::NEG_INFINITY;
        }
        let k = self.shape;
        let rate = k / mu1;
        let (a, b) = self.effect_given_cost(z, d, x, mu1);
        let v = self.cond_var();
        k * rate.ln() - ln_gamma(k) + (k - 1.0) * y1.ln()
            - rate * y1
            - 0.5 * (LN_2PI + v.ln())
            - (y2 - a - b * y1).powi(2) / (2.0 * v)
    }
}

fn log_sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        -(-t).exp().ln_1p()
    } else {
        t - t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

pub(crate) struct GammaNormalModel {
    data: Prepared,
    priors: PriorSpec,
    layout: Layout,
    /// Subject to group index.
    group_of: Vec<usize>,
    n_groups: usize,
    /// `counts[z][d]`.
    counts: [[f64; 2]; 2],
    latent: Vec<usize>,
    start: Vec<f64>,
    start_sd: Vec<f64>,
    proposals: Vec<(String, Vec<usize>, DMatrix<f64>)>,
}

impl GammaNormalModel {
    pub fn new(data: &TrialDataset, opts: &BayesOptions) -> Result<Self, BayesError> {
        if let Some(i) = data.y_cost().iter().position(|v| v.is_some_and(|c| !(c > 0.0))) {
            return Err(BayesError::Domain(format!(
                "Gamma cost model needs strictly positive costs (row {})",
                i + 1
            )));
        }
        let data = Prepared::new(data, opts, false)?;
        let has_x = data.covariate.is_some();
        let k = if has_x { 4 } else { 3 };
        let cost = 2;
        let log_shape = cost + k;
        let effect = log_shape + 1;
        let log_sd = effect + k;
        let fisher_z = log_sd + 1;
        let covariate_model = (!data.miss_covariate.is_empty()).then_some(fisher_z + 1);
        let layout = Layout {
            alpha: 0,
            cost,
            log_shape,
            effect,
            log_sd,
            fisher_z,
            covariate_model,
            k,
        };
        let mut latent: Vec<usize> = data
            .miss_cost
            .iter()
            .chain(&data.miss_effect)
            .chain(&data.miss_covariate)
            .copied()
            .collect();
        latent.sort_unstable();
        latent.dedup();
        let (group_of, n_groups) = if has_x || data.has_missing() {
            ((0..data.n).collect(), data.n)
        } else {
            (
                (0..data.n)
                    .map(|i| 2 * data.z[i] as usize + data.d[i] as usize)
                    .collect(),
                4,
            )
        };
        let mut counts = [[0.0; 2]; 2];
        for i in 0..data.n {
            counts[data.z[i] as usize][data.d[i] as usize] += 1.0;
        }
        let mut model = Self {
            data,
            priors: opts.priors,
            layout,
            group_of,
            n_groups,
            counts,
            latent,
            start: Vec::new(),
            start_sd: Vec::new(),
            proposals: Vec::new(),
        };
        model.fit_start()?;
        Ok(model)
    }

    fn dim(&self) -> usize {
        self.layout.fisher_z + 1 + if self.layout.covariate_model.is_some() { 2 } else { 0 }
    }

    fn aux0(&self) -> Aux {
        let mut aux = Aux {
            cost: self.data.cost.clone(),
            effect: self.data.effect.clone(),
            x: (0..self.data.n).map(|i| self.data.x(i)).collect(),
            groups: Vec::new(),
            sum_x: 0.0,
            sum_x_sq: 0.0,
        };
        self.rebuild(&mut aux);
        aux
    }

    fn rebuild(&self, aux: &mut Aux) {
        let mut groups = vec![GroupStats::default(); self.n_groups];
        for i in 0..self.data.n {
            let g = &mut groups[self.group_of[i]];
            g.z = self.data.z[i] as usize;
            g.d = self.data.d[i];
            g.x = aux.x[i];
            g.add(aux.cost[i], aux.effect[i]);
        }
        aux.groups = groups;
        aux.sum_x = aux.x.iter().sum();
        aux.sum_x_sq = aux.x.iter().map(|v| v * v).sum();
    }

    fn params(&self, theta: &[f64]) -> Params {
        let l = &self.layout;
        let a0 = theta[l.alpha];
        let a1 = theta[l.alpha + 1];
        let coef = |at: usize| {
            let mut c = [0.0; 4];
            c[..l.k].copy_from_slice(&theta[at..at + l.k]);
            c
        };
        Params {
            pi: [sigmoid(a0), sigmoid(a0 + a1)],
            cost: coef(l.cost),
            effect: coef(l.effect),
            shape: theta[l.log_shape].exp() + self.priors.shape_offset,
            sd_effect: theta[l.log_sd].exp(),
            rho: theta[l.fisher_z].tanh(),
        }
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        let l = &self.layout;
        let p = &self.priors;
        let mut lp = p.log_coefficient(theta[l.alpha]) + p.log_coefficient(theta[l.alpha + 1]);
        lp += p.cost_intercept.log_density(theta[l.cost]);
        for j in 1..3 {
            lp += p.log_coefficient(theta[l.cost + j]);
        }
        for j in 0..3 {
            lp += p.log_coefficient(theta[l.effect + j]);
        }
        if l.k == 4 {
            lp += p.log_adjustment(theta[l.cost + 3]) + p.log_adjustment(theta[l.effect + 3]);
        }
        let log_nu = theta[l.log_shape];
        lp += p.shape.log_density(log_nu.exp()) + log_nu;
        lp += p.log_sd_on_log_scale(theta[l.log_sd]) + p.log_fisher_z(theta[l.fisher_z]);
        lp
    }

    fn covariate_params(&self, theta: &[f64]) -> Option<(f64, f64)> {
        self.layout.covariate_model.map(|m| (theta[m], theta[m + 1].exp()))
    }

    fn fit_start(&mut self) -> Result<(), BayesError> {
        let data = &self.data;
        let n = data.n;
        let l = self.layout;
        let mut theta = vec![0.0; self.dim()];
        let mut sd = vec![0.0; self.dim()];
        let mut proposals = Vec::new();

        // Per-arm receipt rates, kept off the boundary.
        let mut p = [0.0; 2];
        let mut arm_n = [0.0; 2];
        for z in 0..2 {
            arm_n[z] = self.counts[z][0] + self.counts[z][1];
            p[z] = (self.counts[z][1] / arm_n[z]).clamp(0.5 / arm_n[z], 1.0 - 0.5 / arm_n[z]);
        }
        let logit = |q: f64| (q / (1.0 - q)).ln();
        theta[l.alpha] = logit(p[0]);
        theta[l.alpha + 1] = logit(p[1]) - logit(p[0]);
        let v0 = 1.0 / (arm_n[0] * p[0] * (1.0 - p[0]));
        let v1 = 1.0 / (arm_n[1] * p[1] * (1.0 - p[1]));
        proposals.push((
            "treatment".to_string(),
            vec![l.alpha, l.alpha + 1],
            DMatrix::from_row_slice(2, 2, &[v0, -v0, -v0, v0 + v1]),
        ));

        let r: Vec<f64> = (0..n).map(|i| data.d[i] - p[data.z[i] as usize]).collect();
        let x: Vec<f64> = (0..n).map(|i| data.x(i)).collect();
        let mut cols: Vec<(&str, &[f64])> = vec![("d", &data.d), ("residual", &r)];
        if l.k == 4 {
            cols.push(("x", &x));
        }
        let design = DesignMatrix::with_intercept(&cols)?;
        let ols = |y: &[f64]| -> Result<OlsParts, BayesError> {
            let fit = least_squares(design.matrix(), &DVector::from_column_slice(y), design.labels())?;
            let fitted = design.matrix() * &fit.coefficients;
            let resid: Vec<f64> = y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect();
            let s2 = resid.iter().map(|e| e * e).sum::<f64>() / (n - l.k) as f64;
            Ok((fit.coefficients.iter().copied().collect(), resid, fit.xtx_inv * s2))
        };
        let (mut bc, rc, cov_c) = ols(&data.cost)?;
        let fitted_c: Vec<f64> = data.cost.iter().zip(&rc).map(|(y, e)| y - e).collect();
        if bc[0] <= 0.0 || fitted_c.iter().any(|&m| m <= 0.0) {
            let mean = data.cost.iter().sum::<f64>() / n as f64;
            bc = vec![0.0; l.k];
            bc[0] = mean;
        }
        theta[l.cost..l.cost + l.k].copy_from_slice(&bc);
        proposals.push(("cost_mean".to_string(), (l.cost..l.cost + l.k).collect(), cov_c));

        let var_c = rc.iter().map(|e| e * e).sum::<f64>() / n as f64;
        let mean_sq = fitted_c.iter().map(|m| m.max(1e-8).powi(2)).sum::<f64>() / n as f64;
        let shape = (mean_sq / var_c.max(1e-12)).max(0.1);
        theta[l.log_shape] = (shape - self.priors.shape_offset).max(0.05).ln();
        sd[l.log_shape] = 1.5 / (n as f64).sqrt();

        let (be, re, cov_e) = ols(&data.effect)?;
        theta[l.effect..l.effect + l.k].copy_from_slice(&be);
        let var_e = re.iter().map(|e| e * e).sum::<f64>() / n as f64;
        let cov_ce = rc.iter().zip(&re).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let rho = (cov_ce / (var_c * var_e).sqrt()).clamp(-0.95, 0.95);
        proposals.push((
            "effect_mean".to_string(),
            (l.effect..l.effect + l.k).collect(),
            cov_e * (1.0 - rho * rho),
        ));
        theta[l.log_sd] = 0.5 * var_e.max(1e-12).ln();
        theta[l.fisher_z] = rho.atanh();
        sd[l.log_sd] = (2.0 * n as f64).sqrt().recip();
        sd[l.fisher_z] = (n as f64).sqrt().recip();

        if let Some(m) = l.covariate_model {
            let observed: Vec<f64> = (0..n)
                .filter(|i| !data.miss_covariate.contains(i))
                .map(|i| x[i])
                .collect();
            let k = observed.len() as f64;
            let mean = observed.iter().sum::<f64>() / k;
            let var = observed.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            let (lo, hi) = self.priors.covariate_mean;
            let margin = 1e-3 * (hi - lo);
            theta[m] = mean.clamp(lo + margin, hi - margin);
            theta[m + 1] = 0.5 * var.max(1e-8).ln();
            sd[m] = (var / k).sqrt().max(1e-6);
            sd[m + 1] = (2.0 * k).sqrt().recip();
        }
        for (_, idx, cov) in &proposals {
            for (a, &i) in idx.iter().enumerate() {
                sd[i] = cov[(a, a)].sqrt();
            }
        }
        self.start = theta;
        self.start_sd = sd;
        self.proposals = proposals;
        Ok(())
    }

    fn update_latent(&self, state: &mut State<Aux>, rng: &mut StreamRng) -> Result<bool, BayesError> {
        let p = self.params(&state.theta);
        let xm = self.covariate_params(&state.theta);
        let data = &self.data;
        let aux = &mut state.aux;
        let v = p.cond_var();
        let normal = |rng: &mut StreamRng| -> f64 { StandardNormal.sample(rng) };
        for &i in &self.latent {
            let z = data.z[i] as usize;
            let d = data.d[i];
            let mc = data.miss_cost.binary_search(&i).is_ok();
            let me = data.miss_effect.binary_search(&i).is_ok();
            if data.miss_covariate.binary_search(&i).is_ok() {
                if let Some((qm, qs)) = xm {
                    let log_target =
                        |x: f64| p.subject(z, d, x, aux.cost[i], aux.effect[i]) - 0.5 * ((x - qm) / qs).powi(2);
                    let cur = aux.x[i];
                    let prop = cur + qs * normal(rng);
                    let ratio = log_target(prop) - log_target(cur);
                    if ratio >= 0.0 || rng.random::<f64>().ln() < ratio {
                        aux.x[i] = prop;
                    }
                }
            }
            let x = aux.x[i];
            let mu1 = p.mean_cost(z, d, x);
            if mu1 > 0.0 && mc {
                if me {
                    let g = Gamma::new(p.shape, mu1 / p.shape).map_err(|e| BayesError::Domain(e.to_string()))?;
                    aux.cost[i] = g.sample(rng).max(f64::MIN_POSITIVE);
                } else {
                    let step = 1.0 / p.shape.sqrt();
                    let cur = aux.cost[i];
                    let prop = cur * (step * normal(rng)).exp();
                    let y2 = aux.effect[i];
                    let ratio = p.subject(z, d, x, prop, y2) + prop.ln() - p.subject(z, d, x, cur, y2) - cur.ln();
                    if ratio >= 0.0 || rng.random::<f64>().ln() < ratio {
                        aux.cost[i] = prop;
                    }
                }
            }
            if me && mu1 > 0.0 {
                let (a, b) = p.effect_given_cost(z, d, x, mu1);
                aux.effect[i] = a + b * aux.cost[i] + v.sqrt() * normal(rng);
            }
        }
        self.rebuild(aux);
        Ok(true)
    }
}

impl Model for GammaNormalModel {
    type Aux = Aux;

    fn record_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            COST,
            EFFECT,
            FIRST_STAGE,
            "alpha0",
            "alpha1",
            "intercept_cost",
            "resid_cost",
            "intercept_effect",
            "resid_effect",
            "shape",
            "sigma_effect",
            "rho_cost_effect",
        ]
        .map(String::from)
        .to_vec();
        if self.layout.k == 4 {
            names.extend(["adj_cost", "adj_effect"].map(String::from));
        }
        if self.layout.covariate_model.is_some() {
            names.extend(["x_mean", "x_sd"].map(String::from));
        }
        names
    }

    fn gated(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn blocks(&self) -> Vec<Block> {
        let l = &self.layout;
        let mut blocks = Vec::new();
        if !self.latent.is_empty() {
            blocks.push(Block::exact("latent", LATENT));
        }
        for (name, idx, cov) in &self.proposals {
            blocks.push(Block::RandomWalk {
                name: name.clone(),
                indices: idx.clone(),
                proposal: cov.clone(),
            });
        }
        blocks.push(Block::random_walk(
            "shape",
            vec![l.log_shape],
            &[self.start_sd[l.log_shape]],
        ));
        blocks.push(Block::random_walk(
            "effect_scale",
            vec![l.log_sd, l.fisher_z],
            &[self.start_sd[l.log_sd], self.start_sd[l.fisher_z]],
        ));
        if let Some(m) = l.covariate_model {
            blocks.push(Block::random_walk(
                "covariate_model",
                vec![m, m + 1],
                &self.start_sd[m..m + 2],
            ));
        }
        blocks
    }

    fn initial(&self, chain: usize, rng: &mut StreamRng) -> Result<State<Aux>, BayesError> {
        let aux = self.aux0();
        let mut theta = self.start.clone();
        if chain > 0 {
            // Jitter, retrying until the start is inside the support.
            for _ in 0..100 {
                let mut t = self.start.clone();
                for (v, sd) in t.iter_mut().zip(&self.start_sd) {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += 2.0 * sd * e;
                }
                let s = State {
                    theta: t,
                    aux: aux.clone(),
                };
                if self.log_post(&s).is_finite() {
                    theta = s.theta;
                    break;
                }
            }
        }
        Ok(State { theta, aux })
    }

    fn log_post(&self, state: &State<Aux>) -> f64 {
        let theta = &state.theta;
        let mut lp = self.log_prior(theta);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let a0 = theta[self.layout.alpha];
        let a1 = theta[self.layout.alpha + 1];
        for z in 0..2 {
            let t = a0 + a1 * z as f64;
            lp += self.counts[z][1] * log_sigmoid(t) + self.counts[z][0] * log_sigmoid(-t);
        }
        let p = self.params(theta);
        let k = p.shape;
        let lgk = ln_gamma(k);
        let v = p.cond_var();
        let log_v = v.ln();
        for g in &state.aux.groups {
            if g.m == 0.0 {
                continue;
            }
            let mu1 = p.mean_cost(g.z, g.d, g.x);
            if !(mu1 > 0.0) {
                return f64::NEG_INFINITY;
            }
            let rate = k / mu1;
            lp += g.m * (k * rate.ln() - lgk) + (k - 1.0) * g.log_y1 - rate * g.y1;
            let (a, b) = p.effect_given_cost(g.z, g.d, g.x, mu1);
            let ss = g.y2_sq - 2.0 * a * g.y2 - 2.0 * b * g.y1_y2 + g.m * a * a + 2.0 * a * b * g.y1 + b * b * g.y1_sq;
            lp -= 0.5 * g.m * (LN_2PI + log_v) + ss / (2.0 * v);
        }
        if let Some((qm, qs)) = self.covariate_params(theta) {
            let (lo, hi) = self.priors.covariate_mean;
            if !(lo < qm && qm < hi) {
                return f64::NEG_INFINITY;
            }
            let n = self.data.n as f64;
            let aux = &state.aux;
            let log_sd = qs.ln();
            let ss = aux.sum_x_sq - 2.0 * qm * aux.sum_x + n * qm * qm;
            lp += -n * log_sd - 0.5 * ss / (qs * qs) - 0.5 * (log_sd / self.priors.covariate_log_sd_sd).powi(2);
        }
        lp
    }

    fn exact(&self, id: usize, state: &mut State<Aux>, rng: &mut StreamRng) -> Result<bool, BayesError> {
        match id {
            LATENT => self.update_latent(state, rng),
            _ => unreachable!("unknown block {id}"),
        }
    }

    fn record(&self, state: &State<Aux>, out: &mut [f64]) {
        let theta = &state.theta;
        let l = &self.layout;
        let p = self.params(theta);
        let mut vals = vec![
            p.cost[1] * self.data.cost_to_raw,
            p.effect[1] * self.data.effect_to_raw,
            p.pi[1] - p.pi[0],
            theta[l.alpha],
            theta[l.alpha + 1],
            p.cost[0],
            p.cost[2],
            p.effect[0],
            p.effect[2],
            p.shape,
            p.sd_effect,
            p.rho,
        ];
        if l.k == 4 {
            vals.extend([p.cost[3], p.effect[3]]);
        }
        if let Some((qm, qs)) = self.covariate_params(theta) {
            vals.extend([qm, qs]);
        }
        out.copy_from_slice(&vals);
    }
}
