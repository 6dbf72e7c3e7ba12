//! Large-sample limits: `F₀`, `y_j`, `ν_j`, the limit mean `μ` under local
//! alternatives, the limit covariance `Σ`, the noncentrality `δ` and the
//! resulting noncentral chi-square power.
//!
//! The limits solve an ODE in `t`; for group `j` write `φ_j = κ_j (1 - G_j) f_j`,
//! so that `y_j dA_j = φ_j dt`. Then
//!
//! - `dΛ₀ = Σ_j φ_j / y`, `F₀ = 1 - exp(-Λ₀)`,
//! - `dμ_rj = w̃_r(F₀) γ_j(F₀) ∏_{i≠j} y_i / y^{k-1} · φ_j`,
//! - `dσ_j^{(rr')} = w̃_r(F₀) w̃_r'(F₀) (∏_{i≠j} y_i)² / y^{2(k-1)} · φ_j`,
//!
//! none of which divides by `y_j`.

use serde::{Deserialize, Serialize};

use crate::laws::{CensoringLaw, SurvivalLaw};
use crate::linalg::{HypothesisSpec, Matrix};
use crate::numeric::solve_ode;
use crate::statistic::{chi2_sf, chi2_upper_quantile, wald, BlockCovariance, ZVector};
use crate::weights::{WeightFunction, WeightSet};
use crate::{Error, Result};

const RTOL: f64 = 1e-10;
const ATOL: f64 = 1e-14;
/// Survival mass below which a law's tail is ignored.
const TAIL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupPopulation {
    pub law: SurvivalLaw,
    #[serde(default)]
    pub censoring: CensoringLaw,
    /// Limiting share `κ_j` of the total sample.
    pub proportion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationConfig {
    pub groups: Vec<GroupPopulation>,
}

impl PopulationConfig {
    /// Equal proportions, common censoring.
    pub fn balanced(laws: Vec<SurvivalLaw>, censoring: CensoringLaw) -> Self {
        let k = laws.len() as f64;
        Self {
            groups: laws
                .into_iter()
                .map(|law| GroupPopulation {
                    law,
                    censoring: censoring.clone(),
                    proportion: 1.0 / k,
                })
                .collect(),
        }
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups.len() < 2 {
            return Err(Error::InvalidConfig("need at least two groups".into()));
        }
        let mut total = 0.0;
        for g in &self.groups {
            g.law.validate()?;
            if !(g.proportion > 0.0 && g.proportion < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "proportion {} outside (0, 1)",
                    g.proportion
                )));
            }
            if let CensoringLaw::Uniform { upper } = g.censoring {
                if !(upper.is_finite() && upper > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "censoring upper limit {upper}"
                    )));
                }
            }
            total += g.proportion;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "proportions sum to {total}, not 1"
            )));
        }
        Ok(())
    }

    /// Right end of the integration range: beyond it some group has (numerically) nobody at risk.
    fn horizon(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.censoring.upper().min(g.law.effective_upper(TAIL)))
            .fold(f64::INFINITY, f64::min)
    }

    /// Times where some integrand has a kink or jump.
    fn breakpoints(&self, end: f64) -> Vec<f64> {
        let mut pts = vec![0.0, end];
        for g in &self.groups {
            if let SurvivalLaw::PiecewiseHazard { breaks, .. } = &g.law {
                pts.extend(breaks.iter().copied().filter(|&b| b < end));
            }
            let u = g.censoring.upper();
            if u < end {
                pts.push(u);
            }
        }
        pts.sort_by(f64::total_cmp);
        pts.dedup();
        pts
    }

    fn at_risk(&self, t: f64) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.proportion * g.censoring.survival(t) * g.law.survival(t))
            .collect()
    }

    fn event_density(&self, t: f64) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.proportion * g.censoring.survival(t) * g.law.density(t))
            .collect()
    }
}

/// Local alternative `α_nj / α_j = 1 + n^{-1/2} θ_j γ(F₀)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalAlternative {
    pub theta: Vec<f64>,
    /// `γ`, in weight grammar; defaults to the constant 1 (proportional hazards).
    #[serde(default = "constant_direction")]
    pub direction: WeightFunction,
}

fn constant_direction() -> WeightFunction {
    WeightFunction::fleming_harrington(0, 0)
}

impl LocalAlternative {
    pub fn proportional(theta: Vec<f64>) -> Self {
        Self {
            theta,
            direction: constant_direction(),
        }
    }

    pub fn null(k: usize) -> Self {
        Self::proportional(vec![0.0; k])
    }
}

/// `F₀`, `y_j` and `ν_j` at requested times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitTable {
    pub times: Vec<f64>,
    pub f0: Vec<f64>,
    /// `[j][i]`.
    pub at_risk: Vec<Vec<f64>>,
    /// `[j][i]`.
    pub nu: Vec<Vec<f64>>,
}

fn integrate_segments<F>(
    cfg: &PopulationConfig,
    y0: Vec<f64>,
    stops: &[f64],
    mut rhs: F,
    mut record: impl FnMut(usize, &[f64]),
) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let end = stops.last().copied().unwrap_or(0.0);
    let mut pts = cfg.breakpoints(end);
    pts.extend_from_slice(stops);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let mut y = y0;
    let mut next_stop = 0;
    let mut t = 0.0;
    while next_stop < stops.len() && stops[next_stop] <= 0.0 {
        record(next_stop, &y);
        next_stop += 1;
    }
    for &p in pts.iter().filter(|&&p| p > 0.0) {
        y = solve_ode(&mut rhs, &y, t, p, RTOL, ATOL)?;
        t = p;
        while next_stop < stops.len() && stops[next_stop] <= t {
            record(next_stop, &y);
            next_stop += 1;
        }
    }
    Ok(y)
}

pub fn limit_functions(cfg: &PopulationConfig, times: &[f64]) -> Result<LimitTable> {
    cfg.validate()?;
    let k = cfg.k();
    let mut stops: Vec<f64> = times.to_vec();
    stops.sort_by(f64::total_cmp);
    let mut table = LimitTable {
        times: stops.clone(),
        f0: vec![0.0; stops.len()],
        at_risk: vec![vec![0.0; stops.len()]; k],
        nu: vec![vec![0.0; stops.len()]; k],
    };
    // state: Λ₀, ν_1..ν_k
    let rhs = |t: f64, _: &[f64], d: &mut [f64]| {
        let y: f64 = cfg.at_risk(t).iter().sum();
        let phi = cfg.event_density(t);
        let total: f64 = phi.iter().sum();
        d[0] = if y > 0.0 { total / y } else { 0.0 };
        d[1..].copy_from_slice(&phi);
    };
    let mut rows = Vec::with_capacity(stops.len());
    integrate_segments(cfg, vec![0.0; k + 1], &stops, rhs, |i, y| {
        rows.push((i, y.to_vec()))
    })?;
    for (i, state) in rows {
        let t = stops[i];
        table.f0[i] = -(-state[0]).exp_m1();
        let yr = cfg.at_risk(t);
        for j in 0..k {
            table.at_risk[j][i] = yr[j];
            table.nu[j][i] = state[1 + j];
        }
    }
    Ok(table)
}

/// Limit mean `μ` (weight-major, as `Z`) and block covariance `Σ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitMoments {
    pub mu: ZVector,
    pub sigma: BlockCovariance,
}

pub fn limit_moments(
    cfg: &PopulationConfig,
    alt: &LocalAlternative,
    ws: &WeightSet,
) -> Result<LimitMoments> {
    cfg.validate()?;
    let k = cfg.k();
    let m = ws.len();
    if alt.theta.len() != k {
        return Err(Error::InvalidConfig(format!(
            "theta has {} entries for {k} groups",
            alt.theta.len()
        )));
    }
    let end = cfg.horizon();
    if end.is_nan() || end <= 0.0 {
        return Err(Error::SingularLimit(
            "some group has nobody at risk from the start".into(),
        ));
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|r| (r..m).map(move |rp| (r, rp))).collect();
    let dim = 1 + m * k + pairs.len() * k;
    let rhs = |t: f64, state: &[f64], d: &mut [f64]| {
        d.fill(0.0);
        let yr = cfg.at_risk(t);
        let y: f64 = yr.iter().sum();
        if y <= 1e-12 {
            return;
        }
        let phi = cfg.event_density(t);
        d[0] = phi.iter().sum::<f64>() / y;
        let f0 = -(-state[0]).exp_m1();
        let wv: Vec<f64> = ws.weights().iter().map(|w| w.eval(f0)).collect();
        let gamma = alt.direction.eval(f0);
        let scale = y.powi(k as i32 - 1);
        for j in 0..k {
            if phi[j] == 0.0 {
                continue;
            }
            let others = (0..k).filter(|&i| i != j).map(|i| yr[i]).product::<f64>() / scale;
            for r in 0..m {
                d[1 + r * k + j] = wv[r] * others * alt.theta[j] * gamma * phi[j];
            }
            for (p, &(r, rp)) in pairs.iter().enumerate() {
                d[1 + m * k + p * k + j] = wv[r] * wv[rp] * others * others * phi[j];
            }
        }
    };
    let state = integrate_segments(cfg, vec![0.0; dim], &[end], rhs, |_, _| {})?;
    let mu = ZVector {
        k,
        m,
        values: state[1..1 + m * k].to_vec(),
    };
    let mut matrix = Matrix::zeros(k * m, k * m);
    for (p, &(r, rp)) in pairs.iter().enumerate() {
        for j in 0..k {
            let v = state[1 + m * k + p * k + j];
            matrix[(r * k + j, rp * k + j)] = v;
            matrix[(rp * k + j, r * k + j)] = v;
        }
    }
    Ok(LimitMoments {
        mu,
        sigma: BlockCovariance { k, m, matrix },
    })
}

/// `δ = (T⁽ᵐ⁾μ)ᵀ (T⁽ᵐ⁾ Σ T⁽ᵐ⁾)⁺ (T⁽ᵐ⁾μ)`.
pub fn noncentrality(
    cfg: &PopulationConfig,
    alt: &LocalAlternative,
    ws: &WeightSet,
    spec: &HypothesisSpec,
) -> Result<f64> {
    if spec.k() != cfg.k() {
        return Err(Error::InvalidConfig(
            "hypothesis and population disagree on k".into(),
        ));
    }
    let lm = limit_moments(cfg, alt, ws)?;
    Ok(wald(&lm.mu, &lm.sigma, spec).value)
}

/// Single-weight `δ` in the factored form `c² (Tθ)ᵀ (T Σ T)⁺ Tθ` with
/// `c = ∫ w̃(F₀) γ(F₀) ∏ y_j / y^{k-1} dA`, valid when all groups share one event-time law.
pub fn noncentrality_factored(
    cfg: &PopulationConfig,
    alt: &LocalAlternative,
    weight: &WeightFunction,
    spec: &HypothesisSpec,
) -> Result<f64> {
    let first = &cfg.groups[0].law;
    if cfg.groups.iter().any(|g| &g.law != first) {
        return Err(Error::InvalidConfig(
            "factored form needs a common event-time law".into(),
        ));
    }
    let ws = WeightSet::new(vec![weight.clone()])?;
    let k = cfg.k();
    // c_j = μ_j / θ_j with unit θ
    let unit = LocalAlternative {
        theta: vec![1.0; k],
        direction: alt.direction.clone(),
    };
    let lm = limit_moments(cfg, &unit, &ws)?;
    let c = lm.mu.values[0];
    let theta = ZVector {
        k,
        m: 1,
        values: alt.theta.clone(),
    };
    Ok(c * c * wald(&theta, &lm.sigma, spec).value)
}

/// Upper tail of the noncentral chi-square law as a Poisson(`δ/2`) mixture of central tails.
pub fn noncentral_chi2_sf(x: f64, df: usize, delta: f64) -> f64 {
    assert!(delta >= 0.0 && df > 0);
    if x <= 0.0 {
        return 1.0;
    }
    if delta == 0.0 {
        return chi2_sf(x, df);
    }
    let lambda = delta / 2.0;
    let mode = lambda.floor() as usize;
    let log_weight = |i: usize| -lambda + i as f64 * lambda.ln() - ln_factorial(i);
    let mut total = 0.0;
    let mut mass = 0.0;
    // walk outward from the mode so the dominant terms come first
    let mut i = mode;
    loop {
        let w = log_weight(i).exp();
        total += w * chi2_sf(x, df + 2 * i);
        mass += w;
        if w < 1e-16 || i == 0 {
            break;
        }
        i -= 1;
    }
    let mut i = mode + 1;
    while 1.0 - mass > 1e-12 && i < mode + 100_000 {
        let w = log_weight(i).exp();
        total += w * chi2_sf(x, df + 2 * i);
        mass += w;
        i += 1;
    }
    total.clamp(0.0, 1.0)
}

fn ln_factorial(i: usize) -> f64 {
    statrs::function::factorial::ln_factorial(i as u64)
}

/// Limit power of the level-`alpha` asymptotic test.
pub fn predicted_power(delta: f64, df: usize, alpha: f64) -> f64 {
    noncentral_chi2_sf(chi2_upper_quantile(alpha, df), df, delta)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerPrediction {
    pub delta: f64,
    pub df: usize,
    pub alpha: f64,
    pub power: f64,
}

pub fn power(
    cfg: &PopulationConfig,
    alt: &LocalAlternative,
    ws: &WeightSet,
    spec: &HypothesisSpec,
    alpha: f64,
) -> Result<PowerPrediction> {
    let delta = noncentrality(cfg, alt, ws, spec)?;
    let df = ws.len() * spec.rank;
    Ok(PowerPrediction {
        delta,
        df,
        alpha,
        power: predicted_power(delta, df, alpha),
    })
}
