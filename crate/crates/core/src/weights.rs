//! Polynomial weight functions on `[0, 1]` and the weighted integrand.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::counting::StepProcesses;
use crate::linalg::Matrix;
use crate::{Error, Result};

/// `w̃(x) = Σ c_i x^i`, evaluated at the left-continuous pooled Kaplan–Meier estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFunction {
    coefficients: Vec<f64>,
    label: String,
}

impl WeightFunction {
    pub fn new(coefficients: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if coefficients.iter().any(|c| !c.is_finite()) || coefficients.iter().all(|&c| c == 0.0) {
            return Err(Error::InvalidWeight(label));
        }
        let mut coefficients = coefficients;
        while coefficients.len() > 1 && coefficients.last() == Some(&0.0) {
            coefficients.pop();
        }
        Ok(Self {
            coefficients,
            label,
        })
    }

    /// Fleming–Harrington weight `x^r (1 - x)^g`.
    pub fn fleming_harrington(r: u32, g: u32) -> Self {
        let (r, g) = (r as usize, g as usize);
        let mut coefficients = vec![0.0; r + g + 1];
        // (1 - x)^g = Σ_i C(g, i) (-1)^i x^i
        let mut binom = 1.0;
        for i in 0..=g {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            coefficients[r + i] = sign * binom;
            binom = binom * (g - i) as f64 / (i + 1) as f64;
        }
        let label = if r == 0 && g == 0 {
            "LR".to_string()
        } else {
            format!("fh:{r}:{g}")
        };
        Self {
            coefficients,
            label,
        }
    }

    /// `1 - 2x`, which changes sign at the median of the pooled distribution.
    pub fn crossing() -> Self {
        Self {
            coefficients: vec![1.0, -2.0],
            label: "Cross".into(),
        }
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn degree(&self) -> usize {
        self.coefficients.len() - 1
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coefficients
            .iter()
            .rev()
            .fold(0.0, |acc, &c| acc * x + c)
    }

    /// `eval` with values within round-off of zero set to zero, so a weight that
    /// vanishes at the estimate (e.g. `1 - 2x` at `F̂ = 1/2`) contributes nothing.
    pub fn eval_snapped(&self, x: f64) -> f64 {
        let v = self.eval(x);
        let scale: f64 = self.coefficients.iter().map(|c| c.abs()).sum();
        if v.abs() <= 64.0 * f64::EPSILON * scale {
            0.0
        } else {
            v
        }
    }

    /// Grammar form: `fh:r:g` for Fleming–Harrington shapes, `poly:c0,c1,...` otherwise.
    pub fn grammar(&self) -> String {
        for r in 0..=self.degree() as u32 {
            let g = self.degree() as u32 - r;
            if WeightFunction::fleming_harrington(r, g).coefficients == self.coefficients {
                return format!("fh:{r}:{g}");
            }
        }
        let cs: Vec<String> = self.coefficients.iter().map(|c| format!("{c}")).collect();
        format!("poly:{}", cs.join(","))
    }
}

impl FromStr for WeightFunction {
    type Err = Error;

    /// Parses `fh:r:g` or `poly:c0,c1,...`. `fh:0:0` is labeled `LR` and
    /// `poly:1,-2` is labeled `Cross`; other weights keep their source text.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidWeight(s.to_string());
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let w = match kind {
            "fh" => {
                let (r, g) = rest.split_once(':').ok_or_else(bad)?;
                let r: u32 = r.trim().parse().map_err(|_| bad())?;
                let g: u32 = g.trim().parse().map_err(|_| bad())?;
                if r + g > 32 {
                    return Err(bad());
                }
                WeightFunction::fleming_harrington(r, g)
            }
            "poly" => {
                let cs = rest
                    .split(',')
                    .map(|c| c.trim().parse::<f64>().map_err(|_| bad()))
                    .collect::<Result<Vec<_>>>()?;
                let w = WeightFunction::new(cs, s)?;
                if w.coefficients == [1.0, -2.0] {
                    w.with_label("Cross")
                } else if w.coefficients == [1.0] {
                    w.with_label("LR")
                } else {
                    w
                }
            }
            _ => return Err(bad()),
        };
        Ok(w)
    }
}

impl fmt::Display for WeightFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.grammar())
    }
}

impl Serialize for WeightFunction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.grammar())
    }
}

impl<'de> Deserialize<'de> for WeightFunction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// True iff the coefficient vectors are linearly independent.
pub fn check_independence(weights: &[WeightFunction]) -> bool {
    if weights.is_empty() {
        return false;
    }
    let width = weights
        .iter()
        .map(|w| w.coefficients.len())
        .max()
        .unwrap_or(1);
    let coef = Matrix::from_fn(weights.len(), width, |i, j| {
        weights[i].coefficients.get(j).copied().unwrap_or(0.0)
    });
    coef.rank() == weights.len()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSet {
    weights: Vec<WeightFunction>,
    independence_checked: bool,
}

impl WeightSet {
    pub fn new(weights: Vec<WeightFunction>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidWeight("empty weight set".into()));
        }
        if !check_independence(&weights) {
            return Err(Error::DependentWeights);
        }
        Ok(Self {
            weights,
            independence_checked: true,
        })
    }

    /// Skips the independence check; the statistic stays computable through
    /// the pseudoinverse but its limit degrees of freedom no longer apply.
    pub fn unchecked(weights: Vec<WeightFunction>) -> Self {
        Self {
            weights,
            independence_checked: false,
        }
    }

    /// Log-rank plus the crossing weight.
    pub fn default_set() -> Self {
        Self::new(vec![
            WeightFunction::fleming_harrington(0, 0),
            WeightFunction::crossing(),
        ])
        .expect("default weights are independent")
    }

    pub fn parse_all<S: AsRef<str>>(specs: &[S]) -> Result<Self> {
        let ws = specs
            .iter()
            .map(|s| s.as_ref().parse())
            .collect::<Result<Vec<WeightFunction>>>()?;
        Self::new(ws)
    }

    pub fn weights(&self) -> &[WeightFunction] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn independence_checked(&self) -> bool {
        self.independence_checked
    }
}

/// `∏_j Y_j(t) / (n · Y(t)^{k-1})` at each grid time; 0 once any group is empty.
pub fn group_factor(sp: &StepProcesses) -> Vec<f64> {
    let n = sp.n() as f64;
    let k = sp.k as i32;
    (0..sp.grid().len())
        .map(|d| {
            let y = sp.pooled.at_risk[d];
            // divide as we go to keep the product in range for large k
            let mut acc = 1.0 / n;
            for j in 0..sp.k {
                acc *= sp.at_risk[j][d];
            }
            if acc == 0.0 {
                0.0
            } else {
                acc / y.powi(k - 1)
            }
        })
        .collect()
}

/// `w_n(t_d) = w̃(F̂(t_d-)) · ∏_j Y_j / (n · Y^{k-1})`.
pub fn integrand(w: &WeightFunction, sp: &StepProcesses) -> Vec<f64> {
    group_factor(sp)
        .into_iter()
        .zip(&sp.pooled.km_left)
        .map(|(g, &f)| if g == 0.0 { 0.0 } else { w.eval_snapped(f) * g })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::build_processes;
    use crate::survdata::SurvivalDataset;

    #[test]
    fn fleming_harrington_expansion() {
        assert_eq!(
            WeightFunction::fleming_harrington(0, 0).coefficients(),
            &[1.0]
        );
        assert_eq!(
            WeightFunction::fleming_harrington(1, 0).coefficients(),
            &[0.0, 1.0]
        );
        assert_eq!(
            WeightFunction::fleming_harrington(1, 1).coefficients(),
            &[0.0, 1.0, -1.0]
        );
        assert_eq!(
            WeightFunction::fleming_harrington(0, 3).coefficients(),
            &[1.0, -3.0, 3.0, -1.0]
        );
        let w = WeightFunction::fleming_harrington(2, 3);
        for x in [0.0, 0.1, 0.37, 0.9, 1.0] {
            let direct = x * x * (1.0f64 - x).powi(3);
            assert!((w.eval(x) - direct).abs() < 1e-14);
        }
    }

    #[test]
    fn crossing_weight_values() {
        let w = WeightFunction::crossing();
        assert_eq!(w.eval(0.0), 1.0);
        assert_eq!(w.eval(0.5), 0.0);
        assert_eq!(w.eval(1.0), -1.0);
    }

    #[test]
    fn grammar_round_trip() {
        let w: WeightFunction = "poly:1,-2".parse().unwrap();
        assert_eq!(w, WeightFunction::crossing());
        let w: WeightFunction = "fh:0:0".parse().unwrap();
        assert_eq!(w.label(), "LR");
        let w: WeightFunction = "fh:1:1".parse().unwrap();
        assert_eq!(w.grammar(), "fh:1:1");
        let w: WeightFunction = "poly:0.5,0,3".parse().unwrap();
        assert_eq!(w.grammar(), "poly:0.5,0,3");
        for bad in [
            "", "fh:1", "poly:", "poly:a", "poly:0,0", "exp:1", "fh:-1:0",
        ] {
            assert!(bad.parse::<WeightFunction>().is_err(), "{bad}");
        }
    }

    #[test]
    fn independence() {
        let p = |s: &str| s.parse::<WeightFunction>().unwrap();
        assert!(check_independence(&[p("poly:1"), p("poly:1,-2")]));
        assert!(!check_independence(&[p("poly:1,1"), p("poly:2,2")]));
        assert!(!check_independence(&[
            p("poly:1"),
            p("poly:0,1"),
            p("poly:1,-1")
        ]));
        assert!(matches!(
            WeightSet::new(vec![p("poly:1,1"), p("poly:2,2")]),
            Err(Error::DependentWeights)
        ));
        assert!(WeightSet::default_set().independence_checked());
    }

    #[test]
    fn integrand_two_singletons() {
        let ds = SurvivalDataset::from_columns(&[1.0, 2.0], &[true, true], &[0, 1], 2).unwrap();
        let sp = build_processes(&ds);
        let w = integrand(&WeightFunction::fleming_harrington(0, 0), &sp);
        assert!((w[0] - 0.25).abs() < 1e-15);
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn integrand_balanced_groups() {
        // three groups with two subjects each, all censored at a common late time
        let ds = SurvivalDataset::from_columns(
            &[1.0, 5.0, 5.0, 5.0, 5.0, 5.0],
            &[true, false, false, false, false, false],
            &[0, 0, 1, 1, 2, 2],
            3,
        )
        .unwrap();
        let sp = build_processes(&ds);
        let w = integrand(&WeightFunction::fleming_harrington(0, 0), &sp);
        // Y_j = n/k = 2 and Y = n at t = 1: (n/k)^k / (n · n^{k-1}) = 1/k^k
        assert!((w[0] - 1.0 / 27.0).abs() < 1e-15);
    }
}
