//! Parametric event-time and censoring distributions.

use rand::distr::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum SurvivalLaw {
    Exponential {
        rate: f64,
    },
    /// `F(x) = 1 - exp(-(x / scale)^shape)`.
    Weibull {
        shape: f64,
        scale: f64,
    },
    LogNormal {
        mu: f64,
        sigma: f64,
    },
    /// Hazard `rates[i]` on `[breaks[i-1], breaks[i])`, with `breaks[-1] = 0`
    /// and the last rate continuing to infinity.
    PiecewiseHazard {
        breaks: Vec<f64>,
        rates: Vec<f64>,
    },
}

impl SurvivalLaw {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("{m} in {self:?}")));
        let pos = |x: f64| x.is_finite() && x > 0.0;
        match self {
            Self::Exponential { rate } if !pos(*rate) => bad("rate must be positive"),
            Self::Weibull { shape, scale } if !pos(*shape) || !pos(*scale) => {
                bad("shape and scale must be positive")
            }
            Self::LogNormal { mu, sigma } if !mu.is_finite() || !pos(*sigma) => {
                bad("sigma must be positive")
            }
            Self::PiecewiseHazard { breaks, rates } => {
                if rates.len() != breaks.len() + 1 {
                    return bad("need one more rate than breaks");
                }
                if rates.iter().any(|r| !r.is_finite() || *r < 0.0) || !pos(*rates.last().unwrap())
                {
                    return bad("rates must be nonnegative with a positive last rate");
                }
                if breaks.iter().any(|b| !pos(*b)) || breaks.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("breaks must be positive and increasing");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    pub fn cumulative_hazard(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        match self {
            Self::Exponential { rate } => rate * x,
            Self::Weibull { shape, scale } => (x / scale).powf(*shape),
            Self::LogNormal { .. } => -self.survival(x).ln(),
            Self::PiecewiseHazard { breaks, rates } => {
                let mut acc = 0.0;
                let mut start = 0.0;
                for (i, &rate) in rates.iter().enumerate() {
                    let end = breaks.get(i).copied().unwrap_or(f64::INFINITY);
                    if x <= end {
                        return acc + rate * (x - start);
                    }
                    acc += rate * (end - start);
                    start = end;
                }
                acc
            }
        }
    }

    pub fn survival(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return 1.0;
        }
        match self {
            Self::LogNormal { mu, sigma } => {
                0.5 * erfc((x.ln() - mu) / (sigma * std::f64::consts::SQRT_2))
            }
            _ => (-self.cumulative_hazard(x)).exp(),
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        1.0 - self.survival(x)
    }

    pub fn hazard(&self, x: f64) -> f64 {
        if x < 0.0 {
            return 0.0;
        }
        match self {
            Self::Exponential { rate } => *rate,
            Self::Weibull { shape, scale } => shape / scale * (x / scale).powf(shape - 1.0),
            Self::LogNormal { .. } => {
                let s = self.survival(x);
                if s > 0.0 {
                    self.density(x) / s
                } else {
                    0.0
                }
            }
            Self::PiecewiseHazard { breaks, rates } => rates[breaks.partition_point(|&b| b <= x)],
        }
    }

    pub fn density(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return match self {
                Self::Exponential { rate } if x == 0.0 => *rate,
                _ => 0.0,
            };
        }
        match self {
            Self::LogNormal { mu, sigma } => {
                let z = (x.ln() - mu) / sigma;
                (-0.5 * z * z).exp() / (x * sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            _ => self.hazard(x) * self.survival(x),
        }
    }

    /// `F^{-1}(p)` for `p` in `[0, 1)`.
    pub fn quantile(&self, p: f64) -> f64 {
        assert!((0.0..1.0).contains(&p), "quantile level out of range");
        let h = -(-p).ln_1p();
        match self {
            Self::Exponential { rate } => h / rate,
            Self::Weibull { shape, scale } => scale * h.powf(1.0 / shape),
            Self::LogNormal { mu, sigma } => {
                // S(x) = erfc(z / √2) / 2
                (mu - sigma * std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)).exp()
            }
            Self::PiecewiseHazard { breaks, rates } => {
                let mut acc = 0.0;
                let mut start = 0.0;
                for (i, &rate) in rates.iter().enumerate() {
                    let end = breaks.get(i).copied().unwrap_or(f64::INFINITY);
                    let seg = rate * (end - start);
                    if acc + seg >= h {
                        return start + (h - acc) / rate;
                    }
                    acc += seg;
                    start = end;
                }
                start
            }
        }
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.quantile(u)
    }

    /// Draw from the law whose hazard is `ratio` times this one, i.e. survival `S^ratio`.
    pub fn sample_with_hazard_ratio<R: Rng + ?Sized>(&self, rng: &mut R, ratio: f64) -> f64 {
        let v: f64 = rng.sample(Open01);
        self.quantile(-(v.ln() / ratio).exp_m1())
    }

    /// Upper end of the support used for numerical integration: `S(x) < eps` beyond it.
    pub fn effective_upper(&self, eps: f64) -> f64 {
        self.quantile(1.0 - eps)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CensoringLaw {
    #[default]
    None,
    Uniform {
        upper: f64,
    },
}

impl CensoringLaw {
    /// `P(C ≥ x)`.
    pub fn survival(&self, x: f64) -> f64 {
        match self {
            Self::None => 1.0,
            Self::Uniform { upper } => (1.0 - x / upper).clamp(0.0, 1.0),
        }
    }

    /// Right end of the support, infinite without censoring.
    pub fn upper(&self) -> f64 {
        match self {
            Self::None => f64::INFINITY,
            Self::Uniform { upper } => *upper,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::None => f64::INFINITY,
            Self::Uniform { upper } => upper * rng.sample::<f64, _>(Open01),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn laws() -> Vec<SurvivalLaw> {
        vec![
            SurvivalLaw::Exponential { rate: 1.5 },
            SurvivalLaw::Weibull {
                shape: 1.5,
                scale: 2.0,
            },
            SurvivalLaw::Weibull {
                shape: 0.7,
                scale: 1.0,
            },
            SurvivalLaw::LogNormal {
                mu: 0.3,
                sigma: 0.8,
            },
            SurvivalLaw::PiecewiseHazard {
                breaks: vec![0.5, 2.0],
                rates: vec![0.2, 1.0, 0.5],
            },
        ]
    }

    #[test]
    fn quantile_inverts_cdf() {
        for law in laws() {
            law.validate().unwrap();
            for p in [0.01, 0.2, 0.5, 0.77, 0.99] {
                let x = law.quantile(p);
                assert!((law.cdf(x) - p).abs() < 1e-10, "{law:?} p={p}");
            }
        }
    }

    #[test]
    fn density_is_derivative_of_cdf() {
        for law in laws() {
            for x in [0.3, 1.1, 2.7] {
                let h = 1e-6;
                let num = (law.cdf(x + h) - law.cdf(x - h)) / (2.0 * h);
                assert!((num - law.density(x)).abs() < 1e-6, "{law:?} x={x}");
            }
        }
    }

    #[test]
    fn serde_tagging() {
        let law: SurvivalLaw =
            serde_json::from_str(r#"{"type":"weibull","shape":1.5,"scale":2}"#).unwrap();
        assert_eq!(
            law,
            SurvivalLaw::Weibull {
                shape: 1.5,
                scale: 2.0
            }
        );
        let c: CensoringLaw = serde_json::from_str(r#"{"type":"uniform","upper":3}"#).unwrap();
        assert_eq!(c.survival(1.5), 0.5);
        assert!(SurvivalLaw::Exponential { rate: -1.0 }.validate().is_err());
    }

    #[test]
    fn sample_mean_matches() {
        let law = SurvivalLaw::Exponential { rate: 2.0 };
        let mut rng = stream(1, 0);
        let n = 200_000;
        let mean = (0..n).map(|_| law.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.005);
    }
}
