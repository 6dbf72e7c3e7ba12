//! Monte-Carlo size and power studies.
//!
//! Each replicate draws a fresh dataset (group `j` of replicate `r` from its
//! own random stream), runs the asymptotic test, the combined permutation test
//! and the single-weight permutation tests, and records rejections.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::laws::{CensoringLaw, SurvivalLaw};
use crate::linalg::{contrast, Effect, HypothesisSpec};
use crate::numeric::{bisect, integrate};
use crate::permutation::{run_with_engine, PermutationPlan};
use crate::rng::{splitmix64, stream, substream, DEFAULT_SEED};
use crate::statistic::{chi2_sf, Engine};
use crate::survdata::{Factor, FactorialLayout, Observation, SurvivalDataset};
use crate::weights::WeightSet;
use crate::{Error, Result, TIE_CONVENTION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Calibration {
    /// Root of the censoring-rate integral evaluated by quadrature.
    #[default]
    Quadrature,
    /// Root of a Monte-Carlo estimate of the same integral (common random numbers).
    MonteCarlo,
}

/// Departure from the common null law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum AlternativeSpec {
    /// The listed (0-based) groups follow `law` instead of the base law.
    Law {
        groups: Vec<usize>,
        law: SurvivalLaw,
    },
    /// Hazard of group `j` multiplied by `1 + θ_j / √n`.
    Local { theta: Vec<f64> },
}

fn default_weights() -> Vec<String> {
    vec!["fh:0:0".into(), "poly:1,-2".into()]
}

fn default_alpha() -> f64 {
    0.05
}

fn default_perm() -> usize {
    1999
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Factor names and level counts in row-major order; absent for a one-way layout.
    #[serde(default)]
    pub factors: Option<Vec<(String, usize)>>,
    pub sizes: Vec<usize>,
    pub base_law: SurvivalLaw,
    #[serde(default)]
    pub alternative: Option<AlternativeSpec>,
    /// Target censoring rate per group; empty means no censoring.
    #[serde(default)]
    pub censoring: Vec<f64>,
    #[serde(default)]
    pub calibration: Calibration,
    /// `oneway`, `main:<f>` or `interaction:<f>,<g>`.
    pub effect: String,
    #[serde(default = "default_weights")]
    pub weights: Vec<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    pub n_sim: usize,
    /// Permutation replicates per dataset; 0 runs the asymptotic test only.
    #[serde(default = "default_perm")]
    pub n_perm: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn layout(&self) -> Result<Option<FactorialLayout>> {
        match &self.factors {
            None => Ok(None),
            Some(fs) => {
                let factors = fs
                    .iter()
                    .map(|(name, levels)| {
                        Factor::new(
                            name.clone(),
                            (1..=*levels).map(|l| format!("{name}{l}")).collect(),
                        )
                    })
                    .collect();
                FactorialLayout::new(factors).map(Some)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("scenario {}: {m}", self.name)));
        if self.k() < 2 {
            return bad("need at least two groups".into());
        }
        if self.sizes.iter().any(|&n| n < 2) {
            return bad("every group needs at least two observations".into());
        }
        if !self.censoring.is_empty() && self.censoring.len() != self.k() {
            return bad(format!(
                "{} censoring rates for {} groups",
                self.censoring.len(),
                self.k()
            ));
        }
        if self.censoring.iter().any(|c| !(0.0..1.0).contains(c)) {
            return bad("censoring rates must lie in [0, 1)".into());
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        if self.n_sim == 0 {
            return bad("n_sim must be positive".into());
        }
        self.base_law.validate()?;
        match &self.alternative {
            Some(AlternativeSpec::Law { groups, law }) => {
                law.validate()?;
                if groups.iter().any(|&g| g >= self.k()) {
                    return bad("alternative group index out of range".into());
                }
            }
            Some(AlternativeSpec::Local { theta }) => {
                if theta.len() != self.k() {
                    return bad("theta needs one entry per group".into());
                }
                let root_n = (self.sizes.iter().sum::<usize>() as f64).sqrt();
                if theta.iter().any(|t| 1.0 + t / root_n <= 0.0) {
                    return bad("local alternative makes a hazard nonpositive".into());
                }
            }
            None => {}
        }
        if let Some(l) = self.layout()? {
            if l.k() != self.k() {
                return bad(format!(
                    "layout has {} cells but {} sizes are given",
                    l.k(),
                    self.k()
                ));
            }
        }
        Effect::parse(&self.effect)?;
        WeightSet::parse_all(&self.weights)?;
        Ok(())
    }

    /// Event-time law of every group.
    pub fn group_laws(&self) -> Vec<SurvivalLaw> {
        let mut laws = vec![self.base_law.clone(); self.k()];
        if let Some(AlternativeSpec::Law { groups, law }) = &self.alternative {
            for &g in groups {
                laws[g] = law.clone();
            }
        }
        laws
    }

    /// Hazard multiplier of every group.
    pub fn hazard_ratios(&self) -> Vec<f64> {
        match &self.alternative {
            Some(AlternativeSpec::Local { theta }) => {
                let root_n = (self.sizes.iter().sum::<usize>() as f64).sqrt();
                theta.iter().map(|t| 1.0 + t / root_n).collect()
            }
            _ => vec![1.0; self.k()],
        }
    }
}

/// Censoring rate `P(T > C)` for `C ~ Unif[0, U]`: `(1/U) ∫₀^U S(x) dx`.
pub fn censoring_rate(law: &SurvivalLaw, upper: f64) -> f64 {
    integrate(|x| law.survival(x), 0.0, upper, 1e-12 * upper) / upper
}

/// Upper limit `U` of uniform censoring giving the target rate; a zero target means no censoring.
pub fn calibrate_censoring(law: &SurvivalLaw, target: f64) -> Result<CensoringLaw> {
    if target == 0.0 {
        return Ok(CensoringLaw::None);
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::TargetUnreachable(target));
    }
    solve_upper(|u| censoring_rate(law, u), law.median(), target)
}

/// Same root with the integral replaced by a sample mean of `min(T/U, 1)`.
pub fn calibrate_censoring_monte_carlo(
    law: &SurvivalLaw,
    target: f64,
    draws: usize,
    seed: u64,
) -> Result<CensoringLaw> {
    if target == 0.0 {
        return Ok(CensoringLaw::None);
    }
    if !(target > 0.0 && target < 1.0) {
        return Err(Error::TargetUnreachable(target));
    }
    let mut rng = stream(seed, u64::MAX);
    let sample: Vec<f64> = (0..draws).map(|_| law.sample(&mut rng)).collect();
    let rate = |u: f64| sample.iter().map(|&t| (t / u).min(1.0)).sum::<f64>() / draws as f64;
    solve_upper(rate, law.median(), target)
}

/// `rate` decreases from 1 to 0 in `U`; bisection in `log U`.
fn solve_upper<F: FnMut(f64) -> f64>(mut rate: F, start: f64, target: f64) -> Result<CensoringLaw> {
    let (mut lo, mut hi) = (start, start);
    let mut guard = 0;
    while rate(lo) < target {
        lo /= 2.0;
        guard += 1;
        if guard > 200 {
            return Err(Error::TargetUnreachable(target));
        }
    }
    while rate(hi) > target {
        hi *= 2.0;
        guard += 1;
        if guard > 400 {
            return Err(Error::TargetUnreachable(target));
        }
    }
    let log_u = bisect(|x| rate(x.exp()) - target, lo.ln(), hi.ln(), 1e-12)?;
    Ok(CensoringLaw::Uniform { upper: log_u.exp() })
}

/// `n` event times from `law` with hazard scaled by `ratio`.
pub fn sample_group<R: Rng + ?Sized>(
    law: &SurvivalLaw,
    ratio: f64,
    n: usize,
    rng: &mut R,
) -> Vec<f64> {
    (0..n)
        .map(|_| {
            if ratio == 1.0 {
                law.sample(rng)
            } else {
                law.sample_with_hazard_ratio(rng, ratio)
            }
        })
        .collect()
}

/// Everything a replicate needs, fixed for the whole study.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    pub config: ScenarioConfig,
    pub layout: Option<FactorialLayout>,
    pub spec: HypothesisSpec,
    pub weights: WeightSet,
    pub laws: Vec<SurvivalLaw>,
    pub ratios: Vec<f64>,
    pub censoring: Vec<CensoringLaw>,
}

impl PreparedScenario {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let spec = contrast(layout.as_ref(), config.k(), &Effect::parse(&config.effect)?)?;
        let weights = WeightSet::parse_all(&config.weights)?;
        let laws = config.group_laws();
        let censoring = (0..config.k())
            .map(|j| {
                let target = config.censoring.get(j).copied().unwrap_or(0.0);
                match config.calibration {
                    Calibration::Quadrature => calibrate_censoring(&laws[j], target),
                    Calibration::MonteCarlo => calibrate_censoring_monte_carlo(
                        &laws[j],
                        target,
                        100_000,
                        config.seed ^ j as u64,
                    ),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ratios: config.hazard_ratios(),
            config: config.clone(),
            layout,
            spec,
            weights,
            laws,
            censoring,
        })
    }

    /// Dataset of replicate `r`.
    pub fn dataset(&self, r: usize) -> Result<SurvivalDataset> {
        let mut obs = Vec::with_capacity(self.config.sizes.iter().sum());
        for (j, &nj) in self.config.sizes.iter().enumerate() {
            let mut rng = substream(self.config.seed, r as u64, j as u64);
            let times = sample_group(&self.laws[j], self.ratios[j], nj, &mut rng);
            for t in times {
                let c = self.censoring[j].sample(&mut rng);
                obs.push(Observation::new(t.min(c), t <= c, j));
            }
        }
        SurvivalDataset::new(obs, self.config.k(), self.layout.clone())
    }

    fn permutation_seed(&self, r: usize) -> u64 {
        splitmix64(splitmix64(self.config.seed) ^ (r as u64).wrapping_mul(0xA24B_AED4_963E_E407))
    }

    /// Rejection indicators of replicate `r`, in [`Self::methods`] order.
    pub fn replicate(&self, r: usize) -> Result<Vec<bool>> {
        let ds = self.dataset(r)?;
        let engine = Engine::new(&ds, &self.spec, &self.weights);
        let mut scratch = engine.scratch();
        let obs = engine.evaluate(&ds.labels(), &mut scratch);
        let alpha = self.config.alpha;
        let mut out = vec![chi2_sf(obs.combined, engine.df()) <= alpha];
        if self.config.n_perm == 0 {
            out.extend(
                obs.single
                    .iter()
                    .map(|&s| chi2_sf(s, engine.single_df()) <= alpha),
            );
        } else {
            let mut plan =
                PermutationPlan::monte_carlo(self.config.n_perm, self.permutation_seed(r))
                    .with_threads(1);
            plan.alpha = alpha;
            let res = run_with_engine(&engine, &ds.labels(), &plan)?;
            out.push(res.p_value <= alpha);
            out.extend(res.single.iter().map(|s| s.p_value <= alpha));
        }
        Ok(out)
    }

    /// Column names: `Asy`, `Per` (if permuting), then one per weight when several are combined.
    pub fn methods(&self) -> Vec<String> {
        let mut m = vec!["Asy".to_string()];
        if self.config.n_perm > 0 {
            m.push("Per".into());
        }
        if self.weights.len() > 1 {
            m.extend(self.weights.weights().iter().map(|w| w.label().to_string()));
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRate {
    pub method: String,
    pub rejections: usize,
    pub rate: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionTable {
    pub version: String,
    pub tie_convention: String,
    pub scenario: String,
    pub effect: String,
    pub df: usize,
    pub weights: Vec<String>,
    pub n_sim: usize,
    #[serde(rename = "B")]
    pub n_perm: usize,
    pub seed: u64,
    pub alpha: f64,
    /// Whether the single-weight columns come from permutation or chi-square tests.
    pub single_weight_tests: String,
    pub group_laws: Vec<SurvivalLaw>,
    /// Uniform censoring used per group, calibrated against that group's own law.
    pub censoring: Vec<CensoringLaw>,
    pub rates: Vec<RejectionRate>,
}

impl RejectionTable {
    pub fn rate(&self, method: &str) -> Option<f64> {
        self.rates
            .iter()
            .find(|r| r.method == method)
            .map(|r| r.rate)
    }

    /// One header line and one row, rates in percent.
    pub fn render_text(&self) -> String {
        let mut head = format!("{:<40}", "scenario");
        let mut row = format!("{:<40}", self.scenario);
        for r in &self.rates {
            head.push_str(&format!("  {:>12}", r.method));
            row.push_str(&format!(
                "  {:>12}",
                format!("{:.1} ({:.1})", 100.0 * r.rate, 100.0 * r.std_error)
            ));
        }
        format!(
            "{head}\n{row}\n\nrejection rates in % (Monte-Carlo standard error), N_sim = {}, N_perm = {}, seed = {}\n",
            self.n_sim, self.n_perm, self.seed
        )
    }
}

pub type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RejectionTable> {
    run_scenario_with(cfg, None, None)
}

/// `threads` caps the worker pool (`None`: global pool); `progress(done, total)` is
/// called after each finished replicate.
pub fn run_scenario_with(
    cfg: &ScenarioConfig,
    threads: Option<usize>,
    progress: Option<Progress>,
) -> Result<RejectionTable> {
    let prepared = PreparedScenario::new(cfg)?;
    let done = AtomicUsize::new(0);
    let one = |r: usize| {
        let out = prepared.replicate(r);
        let d = done.fetch_add(1, Ordering::Relaxed) + 1;
        if let Some(p) = progress {
            p(d, cfg.n_sim);
        }
        out
    };
    let results: Vec<Vec<bool>> = run_indexed(cfg.n_sim, threads, one)?;
    let methods = prepared.methods();
    let rates = methods
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let rejections = results.iter().filter(|r| r[i]).count();
            let rate = rejections as f64 / cfg.n_sim as f64;
            RejectionRate {
                method: m.clone(),
                rejections,
                rate,
                std_error: (rate * (1.0 - rate) / cfg.n_sim as f64).sqrt(),
            }
        })
        .collect();
    Ok(RejectionTable {
        version: env!("CARGO_PKG_VERSION").to_string(),
        tie_convention: TIE_CONVENTION.to_string(),
        scenario: cfg.name.clone(),
        effect: cfg.effect.clone(),
        df: prepared.weights.len() * prepared.spec.rank,
        weights: prepared
            .weights
            .weights()
            .iter()
            .map(|w| w.grammar())
            .collect(),
        n_sim: cfg.n_sim,
        n_perm: cfg.n_perm,
        seed: cfg.seed,
        alpha: cfg.alpha,
        single_weight_tests: if cfg.n_perm > 0 {
            "permutation"
        } else {
            "asymptotic"
        }
        .to_string(),
        group_laws: prepared.laws.clone(),
        censoring: prepared.censoring.clone(),
        rates,
    })
}

/// `f(0..count)` collected in index order, in parallel when available.
pub fn run_indexed<T, F>(count: usize, threads: Option<usize>, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    if threads == Some(1) {
        return (0..count).map(f).collect();
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || {
            (0..count)
                .into_par_iter()
                .map(&f)
                .collect::<Result<Vec<T>>>()
        };
        match threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .install(run),
            None => run(),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..count).map(f).collect()
    }
}
