//! Predictive mean matching by chained equations.

use super::ImputationConfig;
use crate::model::TrialDataset;
use crate::rng::{child, StreamRng};
use nalgebra::{DMatrix, DVector};
use rand::seq::IndexedRandom;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

/// Added to the diagonal of `X'X`, relative to its entries.
const RIDGE: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImputeError {
    #[error("stratum {stratum}: `{variable}` has {available} observed donors, {needed} needed")]
    InsufficientDonors {
        stratum: String,
        variable: &'static str,
        available: usize,
        needed: usize,
    },
    #[error("invalid imputation settings: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Var {
    Cost,
    Effect,
    Covariate,
}

impl Var {
    fn label(self) -> &'static str {
        match self {
            Var::Cost => "y_cost",
            Var::Effect => "y_effect",
            Var::Covariate => "x_base",
        }
    }
}

struct Column {
    var: Var,
    observed: Vec<Option<f64>>,
    current: Vec<f64>,
}

/// Rows of one stratum and, per incomplete variable, its donor and recipient rows.
struct Stratum {
    label: String,
    rows: Vec<usize>,
}

fn strata(data: &TrialDataset, by_arm: bool) -> Vec<Stratum> {
    if by_arm {
        (0..2u8)
            .map(|arm| Stratum {
                label: format!("z={arm}"),
                rows: (0..data.len()).filter(|&i| data.z()[i] == arm).collect(),
            })
            .filter(|s| !s.rows.is_empty())
            .collect()
    } else {
        vec![Stratum {
            label: "all".into(),
            rows: (0..data.len()).collect(),
        }]
    }
}

/// Regression draw and matching for one variable within one stratum.
fn impute_column(
    target: usize,
    columns: &mut [Column],
    extra: &[Vec<f64>],
    rows: &[usize],
    knn: usize,
    rng: &mut StreamRng,
) {
    let (donors, recipients): (Vec<usize>, Vec<usize>) =
        rows.iter().partition(|&&i| columns[target].observed[i].is_some());
    if recipients.is_empty() {
        return;
    }
    // Predictors: intercept, other variables, extra columns; constant ones dropped.
    let mut preds: Vec<Vec<f64>> = columns
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != target)
        .map(|(_, c)| c.current.clone())
        .chain(extra.iter().cloned())
        .collect();
    preds.retain(|p| {
        let first = p[rows[0]];
        rows.iter().any(|&i| p[i] != first)
    });
    let k = preds.len() + 1;
    let design = |i: usize| -> DVector<f64> {
        DVector::from_iterator(k, std::iter::once(1.0).chain(preds.iter().map(|p| p[i])))
    };
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    for &i in &donors {
        let x = design(i);
        let y = columns[target].observed[i].expect("donor is observed");
        xtx += &x * x.transpose();
        xty += &x * y;
    }
    for j in 0..k {
        xtx[(j, j)] += RIDGE * xtx[(j, j)].max(1.0);
    }
    let Some(chol) = xtx.clone().cholesky() else {
        return;
    };
    let beta_hat = chol.solve(&xty);
    let ssr: f64 = donors
        .iter()
        .map(|&i| (columns[target].observed[i].unwrap() - design(i).dot(&beta_hat)).powi(2))
        .sum();
    let dof = (donors.len() as f64 - k as f64).max(1.0);
    let chi: f64 = ChiSquared::new(dof).expect("positive dof").sample(rng);
    let sigma = (ssr / chi).sqrt();
    // beta* = beta_hat + sigma * L^{-T} z, with (X'X) = L L^T.
    let z = DVector::from_fn(k, |_, _| StandardNormal.sample(rng));
    let step = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .unwrap_or_else(|| DVector::zeros(k));
    let beta_star = &beta_hat + step * sigma;

    let donor_pred: Vec<f64> = donors.iter().map(|&i| design(i).dot(&beta_hat)).collect();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(donors.len());
    for &r in &recipients {
        let target_pred = design(r).dot(&beta_star);
        dist.clear();
        dist.extend(donor_pred.iter().enumerate().map(|(j, p)| ((p - target_pred).abs(), j)));
        let kk = knn.min(dist.len());
        if kk < dist.len() {
            dist.select_nth_unstable_by(kk - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let &(_, j) = dist[..kk].choose(rng).expect("at least one donor");
        columns[target].current[r] = columns[target].observed[donors[j]].expect("donor is observed");
    }
}

fn impute_once(data: &TrialDataset, cfg: &ImputationConfig, groups: &[Stratum], mut rng: StreamRng) -> TrialDataset {
    let mut columns: Vec<Column> = vec![
        Column {
            var: Var::Cost,
            observed: data.y_cost().to_vec(),
            current: vec![0.0; data.len()],
        },
        Column {
            var: Var::Effect,
            observed: data.y_effect().to_vec(),
            current: vec![0.0; data.len()],
        },
    ];
    if let Some(x) = data.x_base() {
        columns.push(Column {
            var: Var::Covariate,
            observed: x.to_vec(),
            current: vec![0.0; data.len()],
        });
    }
    let mut extra = vec![data.d().iter().map(|&v| v as f64).collect::<Vec<f64>>()];
    if !cfg.stratify_by_arm {
        extra.push(data.z().iter().map(|&v| v as f64).collect());
    }
    // Start from random draws of observed values in the same stratum.
    for g in groups {
        for c in &mut columns {
            let pool: Vec<f64> = g.rows.iter().filter_map(|&i| c.observed[i]).collect();
            for &i in &g.rows {
                c.current[i] = c.observed[i].unwrap_or_else(|| *pool.choose(&mut rng).expect("donors checked"));
            }
        }
    }
    for _ in 0..cfg.cycles {
        for target in 0..columns.len() {
            for g in groups {
                impute_column(target, &mut columns, &extra, &g.rows, cfg.knn, &mut rng);
            }
        }
    }
    let find = |v: Var| {
        columns
            .iter()
            .find(|c| c.var == v)
            .map(|c| c.current.iter().map(|&x| Some(x)).collect())
    };
    data.with_columns(
        find(Var::Cost).expect("cost column"),
        find(Var::Effect).expect("effect column"),
        find(Var::Covariate),
    )
}

/// `cfg.m` completed copies of `data`.
///
/// Imputed values are always observed values of the same variable, taken from
/// the same stratum. Copy `k` uses its own child stream of `rng`.
pub fn pmm_impute(
    data: &TrialDataset,
    cfg: &ImputationConfig,
    rng: &mut StreamRng,
) -> Result<Vec<TrialDataset>, ImputeError> {
    cfg.validate()?;
    let groups = strata(data, cfg.stratify_by_arm);
    let mut vars: Vec<(&'static str, &[Option<f64>])> = vec![
        (Var::Cost.label(), data.y_cost()),
        (Var::Effect.label(), data.y_effect()),
    ];
    if let Some(x) = data.x_base() {
        vars.push((Var::Covariate.label(), x));
    }
    for g in &groups {
        for (name, col) in &vars {
            let missing = g.rows.iter().any(|&i| col[i].is_none());
            let available = g.rows.iter().filter(|&&i| col[i].is_some()).count();
            if missing && available < cfg.knn {
                return Err(ImputeError::InsufficientDonors {
                    stratum: g.label.clone(),
                    variable: name,
                    available,
                    needed: cfg.knn,
                });
            }
        }
    }
    let streams: Vec<StreamRng> = (0..cfg.m).map(|k| child(rng, k as u64)).collect();
    Ok(streams
        .into_par_iter()
        .map(|r| {
            if data.has_missing() {
                impute_once(data, cfg, &groups, r)
            } else {
                data.clone()
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate_trial, DgpConfig};
    use crate::dist::CostDistribution;
    use crate::rng::seeded;
    use rand::Rng;
    use std::collections::HashSet;

    fn with_holes(n: usize, seed: u64) -> TrialDataset {
        let base = simulate_trial(&DgpConfig::new(n, 0.3, CostDistribution::Gamma, 0.4, seed)).unwrap();
        let mut rng = seeded(seed + 100);
        let mut hole = |v: &Option<f64>, p: f64| if rng.random::<f64>() < p { None } else { *v };
        let cost = base.y_cost().iter().map(|v| hole(v, 0.2)).collect();
        let effect = base.y_effect().iter().map(|v| hole(v, 0.1)).collect();
        let x = (0..n).map(|i| hole(&Some(0.5 + 0.01 * (i % 17) as f64), 0.1)).collect();
        TrialDataset::new(base.z().to_vec(), base.d().to_vec(), cost, effect, Some(x))
            .unwrap()
            .with_scales(1000.0, 0.1)
            .unwrap()
    }

    #[test]
    fn complete_data_copied() {
        let data = simulate_trial(&DgpConfig::new(50, 0.3, CostDistribution::Normal, 0.4, 1)).unwrap();
        let copies = pmm_impute(&data, &ImputationConfig::with_m(3), &mut seeded(2)).unwrap();
        assert_eq!(copies.len(), 3);
        assert!(copies.iter().all(|c| *c == data));
    }

    #[test]
    fn hot_deck_within_arm() {
        let data = with_holes(300, 4);
        let cfg = ImputationConfig::with_m(5);
        let copies = pmm_impute(&data, &cfg, &mut seeded(5)).unwrap();
        type Column = fn(&TrialDataset) -> Vec<Option<f64>>;
        let cols: [Column; 3] = [
            |d| d.y_cost().to_vec(),
            |d| d.y_effect().to_vec(),
            |d| d.x_base().unwrap().to_vec(),
        ];
        for get in cols {
            let orig = get(&data);
            for arm in 0..2u8 {
                let pool: HashSet<u64> = (0..data.len())
                    .filter(|&i| data.z()[i] == arm)
                    .filter_map(|i| orig[i].map(f64::to_bits))
                    .collect();
                for c in &copies {
                    assert!(c.is_complete());
                    let filled = get(c);
                    for i in (0..data.len()).filter(|&i| data.z()[i] == arm) {
                        let v = filled[i].unwrap();
                        match orig[i] {
                            Some(o) => assert_eq!(v, o),
                            None => assert!(pool.contains(&v.to_bits()), "row {i} arm {arm}"),
                        }
                    }
                }
            }
        }
        assert_ne!(copies[0], copies[1]);
    }

    #[test]
    fn reproducible() {
        let data = with_holes(200, 6);
        let a = pmm_impute(&data, &ImputationConfig::with_m(3), &mut seeded(9)).unwrap();
        let b = pmm_impute(&data, &ImputationConfig::with_m(3), &mut seeded(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn insufficient_donors() {
        let data = TrialDataset::new(
            vec![0, 0, 0, 1, 1, 1],
            vec![0, 0, 0, 1, 1, 0],
            vec![Some(1.0), Some(2.0), None, Some(1.0), Some(2.0), Some(3.0)],
            vec![Some(0.1); 6],
            None,
        )
        .unwrap();
        let err = pmm_impute(&data, &ImputationConfig::with_m(2), &mut seeded(1)).unwrap_err();
        assert_eq!(
            err,
            ImputeError::InsufficientDonors {
                stratum: "z=0".into(),
                variable: "y_cost",
                available: 2,
                needed: 5
            }
        );
    }
}
