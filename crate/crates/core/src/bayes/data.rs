//! Sampler-scale view of a trial dataset.

use super::{BayesError, BayesOptions, CostRescale};
use crate::model::TrialDataset;

#[derive(Debug, Clone)]
pub(crate) struct Prepared {
    pub n: usize,
    pub z: Vec<f64>,
    pub d: Vec<f64>,
    /// Outcomes on the sampler scale, missing entries filled with the observed mean.
    pub cost: Vec<f64>,
    pub effect: Vec<f64>,
    pub covariate: Option<Vec<f64>>,
    pub miss_cost: Vec<usize>,
    pub miss_effect: Vec<usize>,
    pub miss_covariate: Vec<usize>,
    /// Raw units per sampler unit.
    pub cost_to_raw: f64,
    pub effect_to_raw: f64,
}

impl Prepared {
    pub fn new(data: &TrialDataset, opts: &BayesOptions, center_cost: bool) -> Result<Self, BayesError> {
        let n = data.len();
        let z: Vec<f64> = data.z().iter().map(|&v| v as f64).collect();
        let treated = z.iter().filter(|&&v| v == 1.0).count();
        if treated == 0 || treated == n {
            return Err(BayesError::NoInstrumentVariation);
        }
        let divisor = match opts.rescale {
            CostRescale::Auto if data.scale_cost() == 1.0 => 1000.0,
            CostRescale::Auto => 1.0,
            CostRescale::Divisor(v) if v.is_finite() && v > 0.0 => v,
            CostRescale::Divisor(v) => return Err(BayesError::Domain(format!("cost divisor {v} must be positive"))),
        };
        let (cost, miss_cost) = fill(data.y_cost(), |v| v / divisor, center_cost)?;
        let (effect, miss_effect) = fill(data.y_effect(), |v| v, true)?;
        let (covariate, miss_covariate) = if opts.covariate {
            let x = data.x_base().ok_or(BayesError::NoCovariate)?;
            let (x, m) = fill(x, |v| v, false)?;
            (Some(x), m)
        } else {
            (None, Vec::new())
        };
        Ok(Self {
            n,
            z,
            d: data.d().iter().map(|&v| v as f64).collect(),
            cost,
            effect,
            covariate,
            miss_cost,
            miss_effect,
            miss_covariate,
            cost_to_raw: divisor * data.scale_cost(),
            effect_to_raw: data.scale_effect(),
        })
    }

    pub fn has_missing(&self) -> bool {
        !(self.miss_cost.is_empty() && self.miss_effect.is_empty() && self.miss_covariate.is_empty())
    }

    pub fn x(&self, i: usize) -> f64 {
        self.covariate.as_ref().map_or(0.0, |x| x[i])
    }
}

fn fill(values: &[Option<f64>], f: impl Fn(f64) -> f64, center: bool) -> Result<(Vec<f64>, Vec<usize>), BayesError> {
    let observed: Vec<f64> = values.iter().flatten().map(|&v| f(v)).collect();
    if observed.is_empty() {
        return Err(BayesError::Domain("a variable has no observed values".into()));
    }
    let mean = observed.iter().sum::<f64>() / observed.len() as f64;
    let shift = if center { mean } else { 0.0 };
    let missing = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_none())
        .map(|(i, _)| i)
        .collect();
    let filled = values.iter().map(|v| v.map_or(mean, &f) - shift).collect();
    Ok((filled, missing))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centres_and_rescales() {
        let ds = TrialDataset::new(
            vec![0, 0, 1, 1],
            vec![0, 0, 1, 0],
            vec![Some(1000.0), Some(3000.0), None, Some(2000.0)],
            vec![Some(1.0), Some(2.0), Some(3.0), Some(4.0)],
            None,
        )
        .unwrap();
        let p = Prepared::new(&ds, &BayesOptions::default(), true).unwrap();
        assert_eq!(p.cost, vec![-1.0, 1.0, 0.0, 0.0]);
        assert_eq!(p.miss_cost, vec![2]);
        assert_eq!(p.effect, vec![-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(p.cost_to_raw, 1000.0);
        let q = Prepared::new(&ds, &BayesOptions::default(), false).unwrap();
        assert_eq!(q.cost, vec![1.0, 3.0, 2.0, 2.0]);
    }

    #[test]
    fn needs_both_arms_and_covariate() {
        let ds = TrialDataset::complete(vec![1, 1, 1], vec![1, 0, 1], vec![1.0; 3], vec![1.0; 3]).unwrap();
        assert_eq!(
            Prepared::new(&ds, &BayesOptions::default(), true).unwrap_err(),
            BayesError::NoInstrumentVariation
        );
        let ds = TrialDataset::complete(vec![0, 1, 1], vec![0, 0, 1], vec![1.0; 3], vec![1.0; 3]).unwrap();
        let opts = BayesOptions {
            covariate: true,
            ..BayesOptions::default()
        };
        assert_eq!(Prepared::new(&ds, &opts, true).unwrap_err(), BayesError::NoCovariate);
    }
}
