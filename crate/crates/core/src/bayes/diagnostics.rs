//! Convergence and precision diagnostics on scalar chains.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticError {
    #[error("chain has {0} draws; at least {MIN_GEWEKE_LEN} are needed")]
    TooShort(usize),
    #[error("statistic undefined: chain segments have zero variance")]
    ZeroVariance,
    #[error("fractions must satisfy 0 < a, 0 < b and a + b <= 1")]
    Fractions,
}

pub const MIN_GEWEKE_LEN: usize = 100;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Autocovariances at lags `0..=max_lag` (divisor `n`).
pub fn autocovariance(x: &[f64], max_lag: usize) -> Vec<f64> {
    let n = x.len();
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
        .collect()
}

/// Spectral density at frequency zero from a Bartlett-windowed autocovariance
/// sum with bandwidth `floor(2 n^{1/3})`. `var(mean) ~ S(0) / n`.
pub fn spectral_variance(x: &[f64]) -> f64 {
    let n = x.len();
    let lag = ((2.0 * (n as f64).cbrt()).floor() as usize).min(n.saturating_sub(1));
    let acov = autocovariance(x, lag);
    let mut s = acov[0];
    for (k, g) in acov.iter().enumerate().skip(1) {
        s += 2.0 * (1.0 - k as f64 / (lag as f64 + 1.0)) * g;
    }
    s.max(0.0)
}

/// Geweke z-score comparing the first `frac_a` and the last `frac_b` of a chain.
pub fn geweke_z(chain: &[f64], frac_a: f64, frac_b: f64) -> Result<f64, DiagnosticError> {
    if !(frac_a > 0.0 && frac_b > 0.0 && frac_a + frac_b <= 1.0) {
        return Err(DiagnosticError::Fractions);
    }
    let n = chain.len();
    if n < MIN_GEWEKE_LEN {
        return Err(DiagnosticError::TooShort(n));
    }
    let na = (frac_a * n as f64).floor() as usize;
    let nb = (frac_b * n as f64).floor() as usize;
    let a = &chain[..na];
    let b = &chain[n - nb..];
    let var = spectral_variance(a) / na as f64 + spectral_variance(b) / nb as f64;
    if !(var > 0.0) {
        return Err(DiagnosticError::ZeroVariance);
    }
    Ok((mean(a) - mean(b)) / var.sqrt())
}

/// Effective sample size of one chain by Geyer's initial monotone sequence.
pub fn ess_single(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = mean(x);
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let acov = |k: usize| c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let g0 = acov(0);
    if !(g0 > 0.0) {
        return n as f64;
    }
    // Sums of adjacent autocorrelation pairs, truncated at the first
    // non-positive pair and forced monotone.
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut k = 0;
    while k + 1 < n {
        let pair = (if k == 0 { g0 } else { acov(k) } + acov(k + 1)) / g0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        k += 2;
    }
    (n as f64 / tau.max(1e-12)).min(n as f64)
}

/// Effective sample size summed over chains, capped at the number of draws.
pub fn ess(chains: &[&[f64]]) -> f64 {
    let total: usize = chains.iter().map(|c| c.len()).sum();
    let sum: f64 = chains.iter().map(|c| ess_single(c)).sum();
    sum.min(total as f64)
}

/// Empirical quantile, linear interpolation between order statistics
/// (`h = (n - 1) p`).
pub fn quantile(x: &[f64], p: f64) -> f64 {
    assert!(!x.is_empty(), "quantile of empty sample");
    let mut v = x.to_vec();
    quantile_in_place(&mut v, p)
}

pub(crate) fn quantile_in_place(v: &mut [f64], p: f64) -> f64 {
    let n = v.len();
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let (_, x_lo, upper) = v.select_nth_unstable_by(lo, f64::total_cmp);
    let x_lo = *x_lo;
    if lo + 1 >= n {
        return x_lo;
    }
    let x_hi = upper.iter().copied().fold(f64::INFINITY, f64::min);
    x_lo + (h - lo as f64) * (x_hi - x_lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_chain(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = seeded(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    #[test]
    fn geweke_null_pass_rate() {
        let reps = 1000;
        let pass = (0..reps)
            .filter(|&r| geweke_z(&normal_chain(10_000, 500 + r), 0.1, 0.5).unwrap().abs() < 2.5)
            .count();
        assert!(pass as f64 / reps as f64 >= 0.98, "pass rate {pass}/{reps}");
    }

    #[test]
    fn geweke_detects_shift() {
        let mut x = normal_chain(2000, 1);
        for v in &mut x[1000..] {
            *v += 5.0;
        }
        assert!(geweke_z(&x, 0.1, 0.5).unwrap().abs() > 10.0);
    }

    #[test]
    fn geweke_errors() {
        assert_eq!(geweke_z(&[1.0; 500], 0.1, 0.5), Err(DiagnosticError::ZeroVariance));
        assert_eq!(geweke_z(&[1.0; 50], 0.1, 0.5), Err(DiagnosticError::TooShort(50)));
        assert_eq!(geweke_z(&[1.0; 500], 0.6, 0.5), Err(DiagnosticError::Fractions));
    }

    #[test]
    fn ess_of_iid_and_ar1() {
        let x = normal_chain(20_000, 3);
        let e = ess_single(&x);
        assert!(e > 15_000.0 && e <= 20_000.0, "{e}");
        // AR(1) with phi = 0.9: ESS / n = (1 - phi) / (1 + phi).
        let mut y = vec![0.0; 50_000];
        for t in 1..y.len() {
            y[t] = 0.9 * y[t - 1] + x[t % x.len()] * (1.0f64 - 0.81).sqrt();
        }
        let ratio = ess_single(&y) / y.len() as f64;
        assert!((ratio - 0.1 / 1.9).abs() < 0.015, "{ratio}");
        assert!(ess(&[&x, &x]) <= 40_000.0);
    }

    #[test]
    fn quantiles_match_sort_oracle() {
        let x = normal_chain(10_000, 9);
        let mut sorted = x.clone();
        sorted.sort_by(f64::total_cmp);
        for p in [0.0, 0.025, 0.1, 0.5, 0.9, 0.975, 1.0] {
            let h = (sorted.len() - 1) as f64 * p;
            let lo = h.floor() as usize;
            let hi = (lo + 1).min(sorted.len() - 1);
            let oracle = sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]);
            assert_eq!(quantile(&x, p), oracle, "p = {p}");
        }
        assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
    }
}
