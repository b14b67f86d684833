//! Cost marginals used by the copula generator and their quantile functions.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use statrs::function::gamma::{gamma_lr, ln_gamma};
use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

pub const QUANTILE_TOL: f64 = 1e-10;
pub const QUANTILE_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("invalid distribution parameter: {0}")]
    InvalidParameter(String),
    #[error("probability {0} outside (0, 1)")]
    InvalidProbability(f64),
    #[error(
        "quantile inversion did not converge for p={p} after {iterations} iterations \
         (last x={last}, cdf={cdf}, bracket=[{lo}, {hi}])"
    )]
    NoConvergence {
        p: f64,
        iterations: usize,
        last: f64,
        cdf: f64,
        lo: f64,
        hi: f64,
    },
}

/// Family of the cost marginal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum CostDistribution {
    Normal,
    Gamma,
    #[serde(alias = "ig")]
    InvGaussian,
}

impl CostDistribution {
    pub const ALL: [CostDistribution; 3] = [
        CostDistribution::Normal,
        CostDistribution::Gamma,
        CostDistribution::InvGaussian,
    ];

    pub fn label(self) -> &'static str {
        match self {
            CostDistribution::Normal => "normal",
            CostDistribution::Gamma => "gamma",
            CostDistribution::InvGaussian => "inv_gaussian",
        }
    }
}

impl fmt::Display for CostDistribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for CostDistribution {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" | "n" => Ok(Self::Normal),
            "gamma" | "g" => Ok(Self::Gamma),
            "inv_gaussian" | "invgaussian" | "inverse_gaussian" | "ig" => Ok(Self::InvGaussian),
            other => Err(format!("unknown cost distribution `{other}`")),
        }
    }
}

/// A fully parameterised marginal. Gamma uses rate `shape / mean`; the inverse
/// Gaussian uses mean and shape with variance `mean^3 / shape`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Marginal {
    Normal { mean: f64, sd: f64 },
    Gamma { mean: f64, shape: f64 },
    InvGaussian { mean: f64, shape: f64 },
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `ln(erfc(x))`, stable for large positive `x`.
fn ln_erfc(x: f64) -> f64 {
    if x < 25.0 {
        erfc(x).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / (2.0 * x2) + 3.0 / (4.0 * x2 * x2) - 15.0 / (8.0 * x2 * x2 * x2);
        -x2 - x.ln() - 0.5 * PI.ln() + series.ln()
    }
}

impl Marginal {
    pub fn validate(&self) -> Result<(), DistError> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        match *self {
            Marginal::Normal { mean, sd } if mean.is_finite() && ok(sd) => Ok(()),
            Marginal::Gamma { mean, shape } | Marginal::InvGaussian { mean, shape } if ok(mean) && ok(shape) => Ok(()),
            other => Err(DistError::InvalidParameter(format!("{other:?}"))),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Normal { mean, .. } | Marginal::Gamma { mean, .. } | Marginal::InvGaussian { mean, .. } => mean,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Marginal::Normal { sd, .. } => sd * sd,
            Marginal::Gamma { mean, shape } => mean * mean / shape,
            Marginal::InvGaussian { mean, shape } => mean.powi(3) / shape,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, sd } => std_normal_cdf((x - mean) / sd),
            Marginal::Gamma { mean, shape } => {
                if x <= 0.0 {
                    0.0
                } else {
                    gamma_lr(shape, x * shape / mean)
                }
            }
            Marginal::InvGaussian { mean, shape } => {
                if x <= 0.0 {
                    return 0.0;
                }
                let r = (shape / x).sqrt();
                let first = std_normal_cdf(r * (x / mean - 1.0));
                // exp(2 shape / mean) * Phi(-r (x / mean + 1)), in log space
                let b = r * (x / mean + 1.0) / SQRT_2;
                let second = (2.0 * shape / mean + ln_erfc(b) - std::f64::consts::LN_2).exp();
                (first + second).min(1.0)
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match *self {
            Marginal::Normal { mean, sd } => {
                let z = (x - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
            }
            Marginal::Gamma { mean, shape } => {
                if x <= 0.0 {
                    return 0.0;
                }
                let rate = shape / mean;
                (shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x).exp()
            }
            Marginal::InvGaussian { mean, shape } => {
                if x <= 0.0 {
                    return 0.0;
                }
                (shape / (2.0 * PI * x.powi(3))).sqrt() * (-shape * (x - mean).powi(2) / (2.0 * mean * mean * x)).exp()
            }
        }
    }

    /// Value `q` with `cdf(q) = p`.
    pub fn quantile(&self, p: f64) -> Result<f64, DistError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistError::InvalidProbability(p));
        }
        self.validate()?;
        if let Marginal::Normal { mean, sd } = *self {
            return Ok(mean + sd * std_normal_quantile(p));
        }
        self.invert_positive(p)
    }

    fn invert_positive(&self, p: f64) -> Result<f64, DistError> {
        let mean = self.mean();
        let sd = self.variance().sqrt();
        // Cornish-Fisher-free start: normal approximation clipped to the support
        let mut x = (mean + sd * std_normal_quantile(p)).max(mean * 1e-3);

        let mut lo = 0.0_f64;
        let mut hi = mean.max(x);
        while self.cdf(hi) < p {
            lo = hi;
            hi *= 2.0;
            if !hi.is_finite() {
                return Err(DistError::NoConvergence {
                    p,
                    iterations: 0,
                    last: hi,
                    cdf: 1.0,
                    lo,
                    hi,
                });
            }
        }
        if x >= hi || x <= lo {
            x = 0.5 * (lo + hi);
        }

        let mut f = self.cdf(x) - p;
        for iteration in 0..QUANTILE_MAX_ITER {
            if f.abs() <= QUANTILE_TOL {
                return Ok(x);
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            if hi - lo <= f64::EPSILON * hi {
                return Ok(x);
            }
            let density = self.pdf(x);
            let newton = x - f / density;
            x = if density > 0.0 && newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            f = self.cdf(x) - p;
            if iteration + 1 == QUANTILE_MAX_ITER && f.abs() > QUANTILE_TOL {
                return Err(DistError::NoConvergence {
                    p,
                    iterations: QUANTILE_MAX_ITER,
                    last: x,
                    cdf: f + p,
                    lo,
                    hi,
                });
            }
        }
        Ok(x)
    }
}

/// Standard normal quantile (Acklam's rational approximation refined by one Halley step).
pub fn std_normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    // Halley refinement
    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Standard normal CDF, exposed for interval arithmetic elsewhere.
pub fn normal_cdf(x: f64) -> f64 {
    std_normal_cdf(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Regularised lower incomplete gamma via series / Lentz continued fraction.
    fn oracle_gamma_p(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let ln_pref = a * x.ln() - x - ln_gamma(a);
        if x < a + 1.0 {
            let mut term = 1.0 / a;
            let mut sum = term;
            let mut k = 1.0;
            while term.abs() > sum.abs() * 1e-17 {
                term *= x / (a + k);
                sum += term;
                k += 1.0;
            }
            sum * ln_pref.exp()
        } else {
            let tiny = 1e-300;
            let mut b = x + 1.0 - a;
            let mut c = 1.0 / tiny;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..500 {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < tiny {
                    d = tiny;
                }
                c = b + an / c;
                if c.abs() < tiny {
                    c = tiny;
                }
                d = 1.0 / d;
                let del = d * c;
                h *= del;
                if (del - 1.0).abs() < 1e-16 {
                    break;
                }
            }
            1.0 - ln_pref.exp() * h
        }
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..300 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    // Composite Simpson on [0, x] of the inverse Gaussian density, with a substitution
    // x = t^2 that removes the steep left edge.
    fn oracle_ig_cdf(mean: f64, shape: f64, x: f64) -> f64 {
        let dens = |v: f64| {
            if v <= 0.0 {
                0.0
            } else {
                (shape / (2.0 * PI * v.powi(3))).sqrt() * (-shape * (v - mean).powi(2) / (2.0 * mean * mean * v)).exp()
            }
        };
        let g = |t: f64| 2.0 * t * dens(t * t);
        let upper = x.sqrt();
        let n = 20_000;
        let h = upper / n as f64;
        let mut s = g(0.0) + g(upper);
        for i in 1..n {
            let t = i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(t);
        }
        s * h / 3.0
    }

    #[test]
    fn normal_median_is_mean() {
        let m = Marginal::Normal { mean: 1.3, sd: 0.2 };
        assert_relative_eq!(m.quantile(0.5).unwrap(), 1.3, epsilon = 1e-12);
    }

    #[test]
    fn normal_quantile_round_trip() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.77, 0.999, 1.0 - 1e-9] {
            let z = std_normal_quantile(p);
            assert!((std_normal_cdf(z) - p).abs() <= 1e-10 * p.max(1e-3), "p={p}");
        }
    }

    #[test]
    fn gamma_median_matches_series_oracle() {
        let m = Marginal::Gamma { mean: 1.2, shape: 4.0 };
        let rate = 4.0 / 1.2;
        let oracle = bisect(|x| oracle_gamma_p(4.0, rate * x) - 0.5, 0.0, 20.0);
        // frozen from the oracle above
        assert_relative_eq!(oracle, 1.101_618_224_655_269, epsilon = 1e-9);
        assert_relative_eq!(m.quantile(0.5).unwrap(), oracle, epsilon = 1e-9);
        for &p in &[0.001, 0.1, 0.9, 0.9999] {
            let q = m.quantile(p).unwrap();
            assert!((oracle_gamma_p(4.0, rate * q) - p).abs() < 1e-10);
        }
    }

    #[test]
    fn inverse_gaussian_median_matches_quadrature() {
        let m = Marginal::InvGaussian { mean: 1.2, shape: 4.0 };
        let oracle = bisect(|x| oracle_ig_cdf(1.2, 4.0, x) - 0.5, 0.01, 20.0);
        assert_relative_eq!(oracle, 1.046_032_046_835_246_2, epsilon = 1e-8);
        assert_relative_eq!(m.quantile(0.5).unwrap(), oracle, epsilon = 1e-8);
        for &p in &[0.01, 0.25, 0.75, 0.995] {
            let q = m.quantile(p).unwrap();
            assert!((m.cdf(q) - p).abs() <= QUANTILE_TOL);
            assert!((oracle_ig_cdf(1.2, 4.0, q) - p).abs() < 1e-8);
        }
    }

    #[test]
    fn stated_variances() {
        let var = |m: Marginal| m.variance();
        assert_relative_eq!(var(Marginal::Gamma { mean: 1.2, shape: 4.0 }), 0.36, epsilon = 1e-12);
        assert_relative_eq!(var(Marginal::Gamma { mean: 1.6, shape: 4.0 }), 0.64, epsilon = 1e-12);
        assert_relative_eq!(
            var(Marginal::InvGaussian { mean: 1.2, shape: 4.0 }),
            0.432,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            var(Marginal::InvGaussian { mean: 1.6, shape: 4.0 }),
            1.024,
            epsilon = 1e-12
        );
    }

    #[test]
    fn rejects_bad_input() {
        let m = Marginal::Gamma { mean: 1.2, shape: 4.0 };
        assert!(matches!(m.quantile(0.0), Err(DistError::InvalidProbability(_))));
        assert!(matches!(m.quantile(1.0), Err(DistError::InvalidProbability(_))));
        let bad = Marginal::Gamma { mean: -1.0, shape: 4.0 };
        assert!(matches!(bad.quantile(0.5), Err(DistError::InvalidParameter(_))));
    }

    #[test]
    fn extreme_tails_converge() {
        for m in [
            Marginal::Gamma { mean: 1.6, shape: 4.0 },
            Marginal::InvGaussian { mean: 1.6, shape: 4.0 },
            Marginal::InvGaussian { mean: 0.05, shape: 4.0 },
        ] {
            for &p in &[1e-15, 1e-9, 1.0 - 1e-12] {
                let q = m.quantile(p).unwrap();
                assert!(q > 0.0 && q.is_finite());
            }
        }
    }
}
