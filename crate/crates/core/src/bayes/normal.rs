//! Normal-outcome models sharing one parameterisation: uBN (outcome errors
//! independent of the treatment-received error) and BFL (free 3x3 covariance).
//!
//! Coefficients are sampled on the reduced form
//! `(a_d, a_cost, a_effect)`, where the assignment slope of each outcome
//! equation is `first_stage * cace`. Given the covariance, the likelihood in
//! the reduced form is exactly Gaussian, so it serves as an independence
//! proposal corrected by the structural prior and the Jacobian
//! `1 / first_stage^2`. All likelihood terms go through the 6x6 Gram matrix of
//! `(1, z, x, d, cost, effect)`.

use super::data::Prepared;
use super::mcmc::{Block, Model, State};
use super::summary::{COST, EFFECT, FIRST_STAGE};
use super::wishart::sample_wishart;
use super::{BayesError, BayesOptions, CovariancePrior, PriorSpec};
use crate::linalg::LinalgError;
use crate::rng::StreamRng;
use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, SMatrix, Vector3, Vector6};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const ONE: usize = 0;
const Z: usize = 1;
const X: usize = 2;
const D: usize = 3;
const RESPONSE: [usize; 3] = [D, 4, 5];

const LATENT: usize = 0;
const COEF: usize = 1;
const PRECISION: usize = 2;

/// Full Gram rebuild interval for latent sweeps, bounding rounding drift.
const GRAM_REFRESH: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Variant {
    Ubn,
    Bfl,
}

#[derive(Debug, Clone, Copy)]
enum Cov {
    /// `(log s_d, log s_cost, log s_effect, atanh rho)`.
    Unadjusted,
    /// Precision matrix stored as its lower triangle.
    Wishart { df: f64 },
    /// `(log s_0, log s_1, log s_2, atanh r_01, atanh r_02, atanh r_12)`.
    Structured { scale_sd: f64 },
}

impl Cov {
    fn len(self) -> usize {
        match self {
            Cov::Unadjusted => 4,
            Cov::Wishart { .. } | Cov::Structured { .. } => 6,
        }
    }
}

const LOWER: [(usize, usize); 6] = [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)];
const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

#[derive(Debug, Clone)]
pub(crate) struct Aux {
    cost: Vec<f64>,
    effect: Vec<f64>,
    x: Vec<f64>,
    gram: Matrix6<f64>,
    sweeps: usize,
}

impl Aux {
    fn row(&self, data: &Prepared, i: usize) -> Vector6<f64> {
        Vector6::new(1.0, data.z[i], self.x[i], data.d[i], self.cost[i], self.effect[i])
    }

    fn rebuild(&mut self, data: &Prepared) {
        let mut g = Matrix6::zeros();
        for i in 0..data.n {
            let u = self.row(data, i);
            g += u * u.transpose();
        }
        self.gram = g;
    }
}

pub(crate) struct NormalModel {
    data: Prepared,
    variant: Variant,
    cov: Cov,
    priors: PriorSpec,
    /// Regressors (Gram indices) of the treatment-received and outcome equations.
    regressors: [Vec<usize>; 3],
    offsets: [usize; 3],
    n_coef: usize,
    cov_at: usize,
    covariate_model_at: Option<usize>,
    start: Vec<f64>,
    start_sd: Vec<f64>,
}

fn symmetric_from_lower(v: &[f64]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for (k, &(i, j)) in LOWER.iter().enumerate() {
        m[(i, j)] = v[k];
        m[(j, i)] = v[k];
    }
    m
}

impl NormalModel {
    pub fn new(data: &crate::model::TrialDataset, variant: Variant, opts: &BayesOptions) -> Result<Self, BayesError> {
        let data = Prepared::new(data, opts, true)?;
        let cov = match (variant, opts.priors.covariance) {
            (Variant::Ubn, _) => Cov::Unadjusted,
            (Variant::Bfl, CovariancePrior::Wishart { df }) => Cov::Wishart { df },
            (Variant::Bfl, CovariancePrior::Structured { scale_sd }) => Cov::Structured { scale_sd },
        };
        let mut outcome_regs = vec![ONE, Z];
        if data.covariate.is_some() {
            outcome_regs.push(X);
        }
        let ky = outcome_regs.len();
        let n_coef = 2 + 2 * ky;
        let cov_at = n_coef;
        let covariate_model_at = (!data.miss_covariate.is_empty()).then_some(cov_at + cov.len());
        let mut model = Self {
            regressors: [vec![ONE, Z], outcome_regs.clone(), outcome_regs],
            offsets: [0, 2, 2 + ky],
            n_coef,
            cov_at,
            covariate_model_at,
            variant,
            cov,
            priors: opts.priors,
            data,
            start: Vec::new(),
            start_sd: Vec::new(),
        };
        model.fit_start()?;
        Ok(model)
    }

    fn aux0(&self) -> Aux {
        let mut aux = Aux {
            cost: self.data.cost.clone(),
            effect: self.data.effect.clone(),
            x: (0..self.data.n).map(|i| self.data.x(i)).collect(),
            gram: Matrix6::zeros(),
            sweeps: 0,
        };
        aux.rebuild(&self.data);
        aux
    }

    /// Equation-by-equation least squares on the filled data.
    fn fit_start(&mut self) -> Result<(), BayesError> {
        let aux = self.aux0();
        let g = &aux.gram;
        let n = self.data.n as f64;
        let mut theta = vec![0.0; self.dim()];
        let mut xtx_inv_diag = vec![0.0; self.n_coef];
        for eq in 0..3 {
            let regs = &self.regressors[eq];
            let k = regs.len();
            let xtx = DMatrix::from_fn(k, k, |a, b| g[(regs[a], regs[b])]);
            let xty = DVector::from_fn(k, |a, _| g[(regs[a], RESPONSE[eq])]);
            let chol = xtx.cholesky().ok_or(LinalgError::Singular {
                column: "outcome regressors".into(),
            })?;
            let coef = chol.solve(&xty);
            let inv = chol.inverse();
            for a in 0..k {
                theta[self.offsets[eq] + a] = coef[a];
                xtx_inv_diag[self.offsets[eq] + a] = inv[(a, a)];
            }
        }
        if theta[1].abs() < 1e-12 {
            return Err(BayesError::Domain(
                "treatment received does not depend on assignment".into(),
            ));
        }
        let resid = self.residual_map(&theta);
        let e = resid * g * resid.transpose() / n;
        if e[(0, 0)] <= 1e-12 {
            return Err(BayesError::DeterministicReceipt);
        }
        let mut sd = vec![0.0; self.dim()];
        for k in 0..self.n_coef {
            let eq = (0..3).rev().find(|&q| k >= self.offsets[q]).unwrap();
            sd[k] = (xtx_inv_diag[k] * e[(eq, eq)]).sqrt();
        }
        let corr = |i: usize, j: usize| (e[(i, j)] / (e[(i, i)] * e[(j, j)]).sqrt()).clamp(-0.95, 0.95);
        let c = self.cov_at;
        let step_log_sd = (2.0 * n).sqrt().recip();
        let step_z = n.sqrt().recip();
        match self.cov {
            Cov::Unadjusted => {
                for j in 0..3 {
                    theta[c + j] = 0.5 * e[(j, j)].ln();
                    sd[c + j] = step_log_sd;
                }
                theta[c + 3] = corr(1, 2).atanh();
                sd[c + 3] = step_z;
            }
            Cov::Wishart { .. } => {
                let omega = e.try_inverse().ok_or(BayesError::DeterministicReceipt)?;
                for (k, &(i, j)) in LOWER.iter().enumerate() {
                    theta[c + k] = omega[(i, j)];
                }
            }
            Cov::Structured { .. } => {
                for j in 0..3 {
                    theta[c + j] = 0.5 * e[(j, j)].ln();
                    sd[c + j] = step_log_sd;
                }
                for (k, &(i, j)) in PAIRS.iter().enumerate() {
                    theta[c + 3 + k] = corr(i, j).atanh();
                    sd[c + 3 + k] = step_z;
                }
            }
        }
        if let Some(m) = self.covariate_model_at {
            let x = self.data.covariate.as_ref().expect("covariate model implies covariate");
            let observed: Vec<f64> = (0..self.data.n)
                .filter(|i| !self.data.miss_covariate.contains(i))
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
        self.start = theta;
        self.start_sd = sd;
        Ok(())
    }

    fn dim(&self) -> usize {
        self.cov_at + self.cov.len() + if self.covariate_model_at.is_some() { 2 } else { 0 }
    }

    fn ky(&self) -> usize {
        self.regressors[1].len()
    }

    /// `C` with rows mapping a Gram row to the three residuals.
    fn residual_map(&self, theta: &[f64]) -> SMatrix<f64, 3, 6> {
        let mut c = SMatrix::<f64, 3, 6>::zeros();
        for eq in 0..3 {
            c[(eq, RESPONSE[eq])] = 1.0;
            for (a, &r) in self.regressors[eq].iter().enumerate() {
                c[(eq, r)] -= theta[self.offsets[eq] + a];
            }
        }
        c
    }

    /// Covariance and precision of `(d, cost, effect)` errors, with `log det precision`.
    fn covariance(&self, theta: &[f64]) -> Option<(Matrix3<f64>, Matrix3<f64>, f64)> {
        let c = self.cov_at;
        let sigma = match self.cov {
            Cov::Unadjusted => {
                let s: Vec<f64> = (0..3).map(|j| theta[c + j].exp()).collect();
                let rho = theta[c + 3].tanh();
                Matrix3::new(
                    s[0] * s[0],
                    0.0,
                    0.0,
                    0.0,
                    s[1] * s[1],
                    rho * s[1] * s[2],
                    0.0,
                    rho * s[1] * s[2],
                    s[2] * s[2],
                )
            }
            Cov::Wishart { .. } => {
                let omega = symmetric_from_lower(&theta[c..c + 6]);
                let chol = omega.cholesky()?;
                let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                return Some((chol.inverse(), omega, logdet));
            }
            Cov::Structured { .. } => {
                let s: Vec<f64> = (0..3).map(|j| theta[c + j].exp()).collect();
                let mut m = Matrix3::from_diagonal(&Vector3::new(s[0] * s[0], s[1] * s[1], s[2] * s[2]));
                for (k, &(i, j)) in PAIRS.iter().enumerate() {
                    let v = theta[c + 3 + k].tanh() * s[i] * s[j];
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
                m
            }
        };
        let chol = sigma.cholesky()?;
        let logdet_sigma = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        if !logdet_sigma.is_finite() {
            return None;
        }
        Some((sigma, chol.inverse(), -logdet_sigma))
    }

    /// Structural coefficients `(b00, b10, b01, b11, b02, b12)` and covariate slopes.
    fn structural(&self, theta: &[f64]) -> ([f64; 6], [f64; 2]) {
        let ky = self.ky();
        let (b00, b10) = (theta[0], theta[1]);
        let (a1, a2) = (&theta[2..2 + ky], &theta[2 + ky..2 + 2 * ky]);
        let (b11, b12) = (a1[1] / b10, a2[1] / b10);
        let (b01, b02) = match self.variant {
            Variant::Bfl => (a1[0], a2[0]),
            Variant::Ubn => (a1[0] - b11 * b00, a2[0] - b12 * b00),
        };
        let adj = if ky == 3 { [a1[2], a2[2]] } else { [0.0, 0.0] };
        ([b00, b10, b01, b11, b02, b12], adj)
    }

    /// Coefficient prior as a density on the reduced form.
    fn log_coef_prior(&self, theta: &[f64]) -> f64 {
        let (b, adj) = self.structural(theta);
        if !(b[1].abs() > 0.0) {
            return f64::NEG_INFINITY;
        }
        let mut lp: f64 = b.iter().map(|&v| self.priors.log_coefficient(v)).sum();
        if self.ky() == 3 {
            lp += adj.iter().map(|&v| self.priors.log_adjustment(v)).sum::<f64>();
        }
        lp - 2.0 * b[1].abs().ln()
    }

    fn log_cov_prior(&self, theta: &[f64], omega: &Matrix3<f64>, logdet_omega: f64) -> f64 {
        let c = self.cov_at;
        match self.cov {
            Cov::Unadjusted => {
                (0..3)
                    .map(|j| self.priors.log_sd_on_log_scale(theta[c + j]))
                    .sum::<f64>()
                    + self.priors.log_fisher_z(theta[c + 3])
            }
            Cov::Wishart { df } => 0.5 * (df - 4.0) * logdet_omega - 0.5 * omega.trace(),
            Cov::Structured { scale_sd } => {
                let scales: f64 = (0..3)
                    .map(|j| -0.5 * (theta[c + j].exp() / scale_sd).powi(2) + theta[c + j])
                    .sum();
                let corr: f64 = (0..3).map(|k| (1.0 - theta[c + 3 + k].tanh().powi(2)).ln()).sum();
                scales + corr
            }
        }
    }

    fn covariate_params(&self, theta: &[f64]) -> Option<(f64, f64)> {
        self.covariate_model_at.map(|m| (theta[m], theta[m + 1].exp()))
    }

    fn update_coefficients(&self, state: &mut State<Aux>, rng: &mut StreamRng) -> Result<bool, BayesError> {
        let Some((_, omega, _)) = self.covariance(&state.theta) else {
            return Ok(false);
        };
        let g = &state.aux.gram;
        let k = self.n_coef;
        let mut prec = DMatrix::<f64>::zeros(k, k);
        let mut rhs = DVector::<f64>::zeros(k);
        for j in 0..3 {
            for (a, &p) in self.regressors[j].iter().enumerate() {
                let row = self.offsets[j] + a;
                for l in 0..3 {
                    let w = omega[(j, l)];
                    rhs[row] += w * g[(p, RESPONSE[l])];
                    for (b, &q) in self.regressors[l].iter().enumerate() {
                        prec[(row, self.offsets[l] + b)] = w * g[(p, q)];
                    }
                }
            }
        }
        let chol = prec.cholesky().ok_or(LinalgError::NotPositiveDefinite)?;
        let mean = chol.solve(&rhs);
        let noise = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
        let step = chol
            .l()
            .transpose()
            .solve_upper_triangular(&noise)
            .ok_or(LinalgError::NotPositiveDefinite)?;
        let proposal: Vec<f64> = (&mean + step).iter().copied().collect();
        let mut candidate = state.theta.clone();
        candidate[..k].copy_from_slice(&proposal);
        let log_ratio = self.log_coef_prior(&candidate) - self.log_coef_prior(&state.theta);
        if log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio {
            state.theta[..k].copy_from_slice(&proposal);
            Ok(true)
        } else {
            Ok(false)
        }
    }

    fn update_precision(&self, state: &mut State<Aux>, rng: &mut StreamRng, df: f64) -> Result<bool, BayesError> {
        let c = self.residual_map(&state.theta);
        let e = c * state.aux.gram * c.transpose();
        let scale = (Matrix3::identity() + e)
            .try_inverse()
            .ok_or(LinalgError::NotPositiveDefinite)?;
        let scale = DMatrix::from_fn(3, 3, |i, j| 0.5 * (scale[(i, j)] + scale[(j, i)]));
        let w = sample_wishart(df + self.data.n as f64, &scale, rng)?;
        for (k, &(i, j)) in LOWER.iter().enumerate() {
            state.theta[self.cov_at + k] = w[(i, j)];
        }
        Ok(true)
    }

    fn update_latent(&self, state: &mut State<Aux>, rng: &mut StreamRng) -> Result<bool, BayesError> {
        let Some((_, omega, _)) = self.covariance(&state.theta) else {
            return Ok(false);
        };
        let theta = &state.theta;
        let ky = self.ky();
        let slope_x = if ky == 3 {
            Vector3::new(0.0, theta[2 + 2], theta[2 + ky + 2])
        } else {
            Vector3::zeros()
        };
        let data = &self.data;
        let aux = &mut state.aux;
        let mut touched: Vec<usize> = data
            .miss_cost
            .iter()
            .chain(&data.miss_effect)
            .chain(&data.miss_covariate)
            .copied()
            .collect();
        touched.sort_unstable();
        touched.dedup();
        let normal = |rng: &mut StreamRng| -> f64 { StandardNormal.sample(rng) };
        for i in touched {
            let old = aux.row(data, i);
            let mc = data.miss_cost.binary_search(&i).is_ok();
            let me = data.miss_effect.binary_search(&i).is_ok();
            let mean_at = |x: f64| -> Vector3<f64> {
                let mut m = Vector3::zeros();
                let u = Vector6::new(1.0, data.z[i], x, 0.0, 0.0, 0.0);
                for eq in 0..3 {
                    for (a, &r) in self.regressors[eq].iter().enumerate() {
                        m[eq] += theta[self.offsets[eq] + a] * u[r];
                    }
                }
                m
            };
            if mc || me {
                let mu = mean_at(aux.x[i]);
                let e = Vector3::new(data.d[i] - mu[0], aux.cost[i] - mu[1], aux.effect[i] - mu[2]);
                let missing: Vec<usize> = [(1, mc), (2, me)].iter().filter(|m| m.1).map(|m| m.0).collect();
                let observed: Vec<usize> = (0..3).filter(|j| !missing.contains(j)).collect();
                let om = DMatrix::from_fn(missing.len(), missing.len(), |a, b| omega[(missing[a], missing[b])]);
                let chol = om.cholesky().ok_or(LinalgError::NotPositiveDefinite)?;
                let cross = DVector::from_fn(missing.len(), |a, _| {
                    observed.iter().map(|&o| omega[(missing[a], o)] * e[o]).sum::<f64>()
                });
                let cond_mean = -chol.solve(&cross);
                let noise = DVector::from_fn(missing.len(), |_, _| normal(rng));
                let step = chol
                    .l()
                    .transpose()
                    .solve_upper_triangular(&noise)
                    .ok_or(LinalgError::NotPositiveDefinite)?;
                for (a, &j) in missing.iter().enumerate() {
                    let v = mu[j] + cond_mean[a] + step[a];
                    if j == 1 {
                        aux.cost[i] = v;
                    } else {
                        aux.effect[i] = v;
                    }
                }
            }
            if let (true, Some((qm, qs))) = (
                data.miss_covariate.binary_search(&i).is_ok(),
                self.covariate_params(theta),
            ) {
                let mu0 = mean_at(0.0);
                let e0 = Vector3::new(data.d[i] - mu0[0], aux.cost[i] - mu0[1], aux.effect[i] - mu0[2]);
                let ob = omega * slope_x;
                let prec = slope_x.dot(&ob) + 1.0 / (qs * qs);
                let mean = (ob.dot(&e0) + qm / (qs * qs)) / prec;
                aux.x[i] = mean + normal(rng) / prec.sqrt();
            }
            let new = aux.row(data, i);
            aux.gram += new * new.transpose() - old * old.transpose();
        }
        aux.sweeps += 1;
        if aux.sweeps.is_multiple_of(GRAM_REFRESH) {
            aux.rebuild(data);
        }
        Ok(true)
    }
}

impl Model for NormalModel {
    type Aux = Aux;

    fn record_names(&self) -> Vec<String> {
        let mut names: Vec<String> = [
            COST,
            EFFECT,
            FIRST_STAGE,
            "intercept_d",
            "intercept_cost",
            "intercept_effect",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        if self.ky() == 3 {
            names.extend(["adj_cost".into(), "adj_effect".into()]);
        }
        names.extend(["sigma_d", "sigma_cost", "sigma_effect", "rho_cost_effect"].map(String::from));
        if self.variant == Variant::Bfl {
            names.extend(["rho_d_cost", "rho_d_effect"].map(String::from));
        }
        if self.covariate_model_at.is_some() {
            names.extend(["x_mean", "x_sd"].map(String::from));
        }
        names
    }

    fn gated(&self) -> Vec<usize> {
        vec![0, 1]
    }

    fn blocks(&self) -> Vec<Block> {
        let mut blocks = Vec::new();
        if self.data.has_missing() {
            blocks.push(Block::exact("latent", LATENT));
        }
        blocks.push(Block::exact("coefficients", COEF));
        let c = self.cov_at;
        match self.cov {
            Cov::Unadjusted => {
                blocks.push(Block::random_walk("sigma_d", vec![c], &self.start_sd[c..c + 1]));
                blocks.push(Block::random_walk(
                    "outcome_covariance",
                    vec![c + 1, c + 2, c + 3],
                    &self.start_sd[c + 1..c + 4],
                ));
            }
            Cov::Wishart { .. } => blocks.push(Block::exact("precision", PRECISION)),
            Cov::Structured { .. } => blocks.push(Block::random_walk(
                "covariance",
                (c..c + 6).collect(),
                &self.start_sd[c..c + 6],
            )),
        }
        if let Some(m) = self.covariate_model_at {
            blocks.push(Block::random_walk(
                "covariate_model",
                vec![m, m + 1],
                &self.start_sd[m..m + 2],
            ));
        }
        blocks
    }

    fn initial(&self, chain: usize, rng: &mut StreamRng) -> Result<State<Aux>, BayesError> {
        let mut theta = self.start.clone();
        if chain > 0 {
            for (t, sd) in theta.iter_mut().zip(&self.start_sd) {
                let e: f64 = StandardNormal.sample(rng);
                *t += 2.0 * sd * e;
            }
        }
        Ok(State {
            theta,
            aux: self.aux0(),
        })
    }

    fn log_post(&self, state: &State<Aux>) -> f64 {
        let theta = &state.theta;
        let Some((_, omega, logdet)) = self.covariance(theta) else {
            return f64::NEG_INFINITY;
        };
        let g = &state.aux.gram;
        let n = g[(ONE, ONE)];
        let c = self.residual_map(theta);
        let e = c * g * c.transpose();
        let mut lp = 0.5 * n * logdet - 0.5 * (omega * e).trace();
        lp += self.log_coef_prior(theta) + self.log_cov_prior(theta, &omega, logdet);
        if let Some((qm, qs)) = self.covariate_params(theta) {
            let (lo, hi) = self.priors.covariate_mean;
            if !(lo < qm && qm < hi) {
                return f64::NEG_INFINITY;
            }
            let log_sd = theta[self.covariate_model_at.unwrap() + 1];
            let ss = g[(X, X)] - 2.0 * qm * g[(ONE, X)] + n * qm * qm;
            lp += -n * log_sd - 0.5 * ss / (qs * qs) - 0.5 * (log_sd / self.priors.covariate_log_sd_sd).powi(2);
        }
        lp
    }

    fn exact(&self, id: usize, state: &mut State<Aux>, rng: &mut StreamRng) -> Result<bool, BayesError> {
        match (id, self.cov) {
            (LATENT, _) => self.update_latent(state, rng),
            (COEF, _) => self.update_coefficients(state, rng),
            (PRECISION, Cov::Wishart { df }) => self.update_precision(state, rng, df),
            _ => unreachable!("unknown block {id}"),
        }
    }

    fn record(&self, state: &State<Aux>, out: &mut [f64]) {
        let theta = &state.theta;
        let (b, adj) = self.structural(theta);
        let mut k = 0;
        let mut push = |v: f64| {
            out[k] = v;
            k += 1;
        };
        push(b[3] * self.data.cost_to_raw);
        push(b[5] * self.data.effect_to_raw);
        push(b[1]);
        push(b[0]);
        push(b[2]);
        push(b[4]);
        if self.ky() == 3 {
            push(adj[0]);
            push(adj[1]);
        }
        let (sigma, _, _) = self
            .covariance(theta)
            .unwrap_or((Matrix3::from_element(f64::NAN), Matrix3::zeros(), 0.0));
        let sd = |j: usize| sigma[(j, j)].sqrt();
        push(sd(0));
        push(sd(1));
        push(sd(2));
        push(sigma[(1, 2)] / (sd(1) * sd(2)));
        if self.variant == Variant::Bfl {
            push(sigma[(0, 1)] / (sd(0) * sd(1)));
            push(sigma[(0, 2)] / (sd(0) * sd(2)));
        }
        if let Some((qm, qs)) = self.covariate_params(theta) {
            push(qm);
            push(qs);
        }
    }
}
