//! Synthetic trials with an unobserved confounder, one-sided non-compliance
//! and copula-linked cost and effect outcomes.
//!
//! Outcomes are produced in working units: costs in thousands and effects in
//! tenths of a QALY, so generated datasets carry `scale_cost = 1000` and
//! `scale_effect = 0.1`.

use crate::dist::{normal_cdf, CostDistribution, DistError, Marginal};
use crate::model::{Lambda, ModelError, TrialDataset};
use crate::rng::{seeded, StreamRng};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CONFOUNDER_MEAN: f64 = 0.5;
pub const CONFOUNDER_SD: f64 = 0.25;
/// Shift in switching probability above and below the confounder median.
pub const SWITCH_SHIFT: f64 = 0.1;

#[derive(Debug, Error)]
pub enum DgpError {
    #[error("non-compliance probability {0} must lie strictly inside (0.1, 0.9)")]
    NonCompliance(f64),
    #[error("copula correlation {0} must lie strictly inside (-1, 1)")]
    Correlation(f64),
    #[error("vectors have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fixed constants of the simulation design.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpTruth {
    /// Incremental cost in working units.
    pub beta_cost: f64,
    /// Incremental effect in working units.
    pub beta_effect: f64,
    /// INB in currency at the reference willingness to pay.
    pub inb: f64,
    pub sd_cost: f64,
    pub sd_effect: f64,
    pub shape: f64,
    pub scale_cost: f64,
    pub scale_effect: f64,
    pub lambda: Lambda,
}

impl DgpTruth {
    pub const STUDY: DgpTruth = DgpTruth {
        beta_cost: 0.4,
        beta_effect: 0.2,
        inb: 200.0,
        sd_cost: 0.2,
        sd_effect: 0.1,
        shape: 4.0,
        scale_cost: 1000.0,
        scale_effect: 0.1,
        lambda: crate::model::Lambda::DEFAULT,
    };

    /// Truth implied by an outcome model at the study scales.
    pub fn for_model(model: &OutcomeModel) -> Self {
        let mut t = Self::STUDY;
        t.beta_cost = model.cost_effect;
        t.beta_effect = model.effect_effect;
        t.inb = crate::model::inb(t.beta_cost * t.scale_cost, t.beta_effect * t.scale_effect, t.lambda);
        t
    }
}

/// Linear outcome means and marginal settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeModel {
    pub cost_intercept: f64,
    pub cost_effect: f64,
    pub cost_confounding: f64,
    pub effect_intercept: f64,
    pub effect_effect: f64,
    pub effect_confounding: f64,
    pub sd_cost: f64,
    pub sd_effect: f64,
    pub shape: f64,
}

impl Default for OutcomeModel {
    fn default() -> Self {
        Self {
            cost_intercept: 1.2,
            cost_effect: 0.4,
            cost_confounding: 0.16,
            effect_intercept: 0.5,
            effect_effect: 0.2,
            effect_confounding: 0.04,
            sd_cost: 0.2,
            sd_effect: 0.1,
            shape: 4.0,
        }
    }
}

impl OutcomeModel {
    /// Confounder removed from both outcome means.
    pub fn unconfounded() -> Self {
        Self {
            cost_confounding: 0.0,
            effect_confounding: 0.0,
            ..Self::default()
        }
    }

    /// Receipt has no effect on either outcome.
    pub fn null_effect() -> Self {
        Self {
            cost_effect: 0.0,
            effect_effect: 0.0,
            ..Self::default()
        }
    }

    pub fn cost_mean(&self, d: u8, u: f64) -> f64 {
        self.cost_intercept + self.cost_effect * f64::from(d) + self.cost_confounding * (u - CONFOUNDER_MEAN)
    }

    pub fn effect_mean(&self, d: u8, u: f64) -> f64 {
        self.effect_intercept + self.effect_effect * f64::from(d) + self.effect_confounding * (u - CONFOUNDER_MEAN)
    }

    pub fn cost_marginal(&self, dist: CostDistribution, mean: f64) -> Marginal {
        match dist {
            CostDistribution::Normal => Marginal::Normal { mean, sd: self.sd_cost },
            CostDistribution::Gamma => Marginal::Gamma {
                mean,
                shape: self.shape,
            },
            CostDistribution::InvGaussian => Marginal::InvGaussian {
                mean,
                shape: self.shape,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub p_noncomp: f64,
    pub cost_dist: CostDistribution,
    pub rho: f64,
    pub seed: u64,
    #[serde(default)]
    pub outcome: OutcomeModel,
}

impl DgpConfig {
    pub fn new(n: usize, p_noncomp: f64, cost_dist: CostDistribution, rho: f64, seed: u64) -> Self {
        Self {
            n,
            p_noncomp,
            cost_dist,
            rho,
            seed,
            outcome: OutcomeModel::default(),
        }
    }

    pub fn validate(&self) -> Result<(), DgpError> {
        check_noncompliance(self.p_noncomp)?;
        if !(self.rho.abs() < 1.0) {
            return Err(DgpError::Correlation(self.rho));
        }
        Ok(())
    }
}

fn check_noncompliance(p: f64) -> Result<(), DgpError> {
    if p > SWITCH_SHIFT && p < 1.0 - SWITCH_SHIFT {
        Ok(())
    } else {
        Err(DgpError::NonCompliance(p))
    }
}

pub fn gen_confounder<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let dist = Normal::new(CONFOUNDER_MEAN, CONFOUNDER_SD).expect("constant parameters");
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Probability of switching away from an offered intervention.
pub fn switch_probability(u: f64, p: f64) -> f64 {
    if u > CONFOUNDER_MEAN {
        p + SWITCH_SHIFT
    } else {
        p - SWITCH_SHIFT
    }
}

pub fn gen_compliance<R: Rng + ?Sized>(u: &[f64], p: f64, rng: &mut R) -> Result<Vec<u8>, DgpError> {
    check_noncompliance(p)?;
    Ok(u.iter()
        .map(|&ui| u8::from(rng.random_bool(switch_probability(ui, p))))
        .collect())
}

/// Receipt under one-sided non-compliance: only offered subjects may switch.
pub fn assign_received(z: &[u8], s: &[u8]) -> Result<Vec<u8>, DgpError> {
    if z.len() != s.len() {
        return Err(DgpError::LengthMismatch(z.len(), s.len()));
    }
    Ok(z.iter()
        .zip(s)
        .map(|(&zi, &si)| if zi == 1 && si == 1 { 0 } else { zi })
        .collect())
}

/// Cost and effect outcomes through a Gaussian copula with latent correlation `rho`.
pub fn gen_outcomes<R: Rng + ?Sized>(
    model: &OutcomeModel,
    d: &[u8],
    u: &[f64],
    rho: f64,
    dist: CostDistribution,
    rng: &mut R,
) -> Result<(Vec<f64>, Vec<f64>), DgpError> {
    if d.len() != u.len() {
        return Err(DgpError::LengthMismatch(d.len(), u.len()));
    }
    if !(rho.abs() < 1.0) {
        return Err(DgpError::Correlation(rho));
    }
    let tail = (1.0 - rho * rho).sqrt();
    let mut cost = Vec::with_capacity(d.len());
    let mut effect = Vec::with_capacity(d.len());
    for (&di, &ui) in d.iter().zip(u) {
        let z1: f64 = StandardNormal.sample(rng);
        let z2: f64 = StandardNormal.sample(rng);
        let latent_effect = rho * z1 + tail * z2;
        let mean_cost = model.cost_mean(di, ui);
        let y1 = match dist {
            CostDistribution::Normal => mean_cost + model.sd_cost * z1,
            _ => {
                let p = normal_cdf(z1).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                model.cost_marginal(dist, mean_cost).quantile(p)?
            }
        };
        cost.push(y1);
        effect.push(model.effect_mean(di, ui) + model.sd_effect * latent_effect);
    }
    Ok((cost, effect))
}

/// Full trial: fair-coin assignment, confounder, switching, receipt, outcomes.
pub fn simulate_trial_with<R: Rng + ?Sized>(cfg: &DgpConfig, rng: &mut R) -> Result<TrialDataset, DgpError> {
    cfg.validate()?;
    let z: Vec<u8> = (0..cfg.n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    let u = gen_confounder(cfg.n, rng);
    let s = gen_compliance(&u, cfg.p_noncomp, rng)?;
    let d = assign_received(&z, &s)?;
    let (cost, effect) = gen_outcomes(&cfg.outcome, &d, &u, cfg.rho, cfg.cost_dist, rng)?;
    let truth = DgpTruth::STUDY;
    Ok(TrialDataset::complete(z, d, cost, effect)?.with_scales(truth.scale_cost, truth.scale_effect)?)
}

pub fn simulate_trial(cfg: &DgpConfig) -> Result<TrialDataset, DgpError> {
    let mut rng: StreamRng = seeded(cfg.seed);
    simulate_trial_with(cfg, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn mean_var(x: &[f64]) -> (f64, f64) {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn confounder_moments() {
        let mut rng = seeded(1);
        assert!(gen_confounder(0, &mut rng).is_empty());
        let u = gen_confounder(1_000_000, &mut rng);
        let (m, v) = mean_var(&u);
        assert!((m - 0.5).abs() < 3.0 * 0.25 / 1000.0);
        assert!((v.sqrt() - 0.25).abs() < 0.001);
    }

    #[test]
    fn confounder_is_deterministic() {
        let a = gen_confounder(50, &mut seeded(9));
        let b = gen_confounder(50, &mut seeded(9));
        assert_eq!(a, b);
    }

    #[test]
    fn switch_probabilities() {
        assert!((switch_probability(0.7, 0.3) - 0.4).abs() < 1e-15);
        assert!((switch_probability(0.2, 0.7) - 0.6).abs() < 1e-15);
        assert!(gen_compliance(&[0.5], 0.05, &mut seeded(0)).is_err());
        assert!(gen_compliance(&[0.5], 0.9, &mut seeded(0)).is_err());
    }

    #[test]
    fn receipt_rules() {
        assert_eq!(assign_received(&[1, 1, 0, 0], &[0, 1, 1, 0]).unwrap(), vec![1, 0, 0, 0]);
        assert!(assign_received(&[1], &[0, 0]).is_err());
    }

    #[test]
    fn marginal_switch_rate_is_p() {
        let mut rng = seeded(3);
        let u = gen_confounder(200_000, &mut rng);
        let s = gen_compliance(&u, 0.3, &mut rng).unwrap();
        let rate = s.iter().map(|&v| f64::from(v)).sum::<f64>() / s.len() as f64;
        assert!((rate - 0.3).abs() < 4.0 * (0.21f64 / 200_000.0).sqrt());
    }

    #[test]
    fn normal_copula_is_bivariate_normal() {
        let model = OutcomeModel::default();
        let n = 200_000;
        let d = vec![1u8; n];
        let u = vec![0.5; n];
        let (c, e) = gen_outcomes(&model, &d, &u, -0.4, CostDistribution::Normal, &mut seeded(5)).unwrap();
        let (mc, vc) = mean_var(&c);
        let (me, ve) = mean_var(&e);
        let cov = c.iter().zip(&e).map(|(a, b)| (a - mc) * (b - me)).sum::<f64>() / (n as f64 - 1.0);
        let r = cov / (vc * ve).sqrt();
        assert!((r + 0.4).abs() < 4.0 * (1.0 - 0.16) / (n as f64).sqrt());
        assert!((mc - 1.6).abs() < 0.002);
        assert!((me - 0.7).abs() < 0.001);
    }

    #[test]
    fn gamma_intervention_variance() {
        let model = OutcomeModel::default();
        let n = 200_000;
        let (c, _) = gen_outcomes(
            &model,
            &vec![1; n],
            &vec![0.5; n],
            0.4,
            CostDistribution::Gamma,
            &mut seeded(8),
        )
        .unwrap();
        let (m, v) = mean_var(&c);
        assert!((m - 1.6).abs() < 0.01);
        assert!((v - 0.64).abs() / 0.64 < 0.02);
    }

    #[test]
    fn control_arm_never_receives() {
        let cfg = DgpConfig::new(5_000, 0.7, CostDistribution::InvGaussian, 0.8, 4);
        let ds = simulate_trial(&cfg).unwrap();
        assert!(ds.z().iter().zip(ds.d()).all(|(&z, &d)| z == 1 || d == 0));
        assert!(ds.is_complete());
        assert_eq!(ds.scale_cost(), 1000.0);
        assert!(ds.y_cost().iter().all(|v| v.unwrap() > 0.0));
    }

    #[test]
    fn observed_noncompliance_matches_p() {
        let cfg = DgpConfig::new(100_000, 0.3, CostDistribution::Normal, 0.4, 12);
        let ds = simulate_trial(&cfg).unwrap();
        let (mut offered, mut switched) = (0.0, 0.0);
        for (&z, &d) in ds.z().iter().zip(ds.d()) {
            if z == 1 {
                offered += 1.0;
                switched += f64::from(1 - d);
            }
        }
        let rate = switched / offered;
        assert!((rate - 0.3).abs() < 4.0 * (0.21 / offered).sqrt());
    }

    #[test]
    fn validation_errors() {
        assert!(DgpConfig::new(10, 0.3, CostDistribution::Normal, 1.0, 0)
            .validate()
            .is_err());
        assert!(DgpConfig::new(10, 0.95, CostDistribution::Normal, 0.0, 0)
            .validate()
            .is_err());
    }

    #[test]
    fn truth_constants() {
        let t = DgpTruth::STUDY;
        let inb = crate::model::inb(t.beta_cost * t.scale_cost, t.beta_effect * t.scale_effect, t.lambda);
        assert!((inb - 200.0).abs() < 1e-9);
        assert_eq!(DgpTruth::for_model(&OutcomeModel::null_effect()).inb, 0.0);
    }
}
