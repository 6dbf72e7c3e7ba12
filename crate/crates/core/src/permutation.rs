//! Studentized permutation test: random (or exhaustive) relabeling of group
//! memberships with the pooled quantities held fixed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::linalg::HypothesisSpec;
use crate::rng::stream;
use crate::statistic::{Engine, Evaluation};
use crate::survdata::SurvivalDataset;
use crate::weights::WeightSet;
use crate::{Error, Result};

pub const DEFAULT_REPLICATES: usize = 1999;
pub const DEFAULT_EXACT_CAP: u128 = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PermutationMode {
    MonteCarlo,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PermutationPlan {
    pub replicates: usize,
    pub seed: u64,
    pub mode: PermutationMode,
    pub exact_cap: u128,
    pub alpha: f64,
    pub keep_replicates: bool,
    /// Worker count; `None` uses the global pool, `Some(1)` runs inline.
    pub threads: Option<usize>,
}

impl PermutationPlan {
    pub fn monte_carlo(replicates: usize, seed: u64) -> Self {
        Self {
            replicates,
            seed,
            mode: PermutationMode::MonteCarlo,
            exact_cap: DEFAULT_EXACT_CAP,
            alpha: 0.05,
            keep_replicates: false,
            threads: None,
        }
    }

    pub fn exact() -> Self {
        Self {
            mode: PermutationMode::Exact,
            ..Self::monte_carlo(0, 0)
        }
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = Some(threads);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == PermutationMode::MonteCarlo && self.replicates == 0 {
            return Err(Error::InvalidPlan(
                "at least one replicate is required".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidPlan(format!(
                "alpha {} outside (0, 1)",
                self.alpha
            )));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidPlan("thread count must be positive".into()));
        }
        Ok(())
    }
}

impl Default for PermutationPlan {
    fn default() -> Self {
        Self::monte_carlo(DEFAULT_REPLICATES, crate::rng::DEFAULT_SEED)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SingleWeightPermutation {
    pub label: String,
    pub observed: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PermutationResult {
    pub observed: f64,
    pub p_value: f64,
    /// Permutation critical value at `alpha`; infinite when `B` is too small to have one.
    pub quantile: f64,
    pub replicates: usize,
    pub mode: PermutationMode,
    pub seed: u64,
    pub degenerate_count: usize,
    /// One entry per weight when more than one weight is combined.
    pub single: Vec<SingleWeightPermutation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicate_statistics: Option<Vec<f64>>,
}

impl PermutationResult {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}

/// `S_b` counts as at least `observed` up to round-off.
fn at_least(s: f64, observed: f64) -> bool {
    s >= observed - 1e-10 * observed.abs().max(1e-12)
}

/// Multinomial coefficient `n! / ∏ n_j!`, saturating at `u128::MAX`.
pub fn assignment_count(sizes: &[usize]) -> u128 {
    let mut total: u128 = 1;
    let mut placed: u128 = 0;
    for &nj in sizes {
        for i in 1..=nj as u128 {
            placed += 1;
            // C(placed, i) built incrementally: total * placed / i stays integral
            total = match total.checked_mul(placed) {
                Some(v) => v / i,
                None => return u128::MAX,
            };
        }
    }
    total
}

/// Distinct label vectors with the given group sizes, in lexicographic order.
#[derive(Debug, Clone)]
pub struct Assignments {
    current: Vec<usize>,
    done: bool,
}

impl Iterator for Assignments {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.current.clone();
        self.done = !next_permutation(&mut self.current);
        Some(out)
    }
}

fn next_permutation(v: &mut [usize]) -> bool {
    let n = v.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

pub fn exact_assignments(sizes: &[usize], cap: u128) -> Result<(u128, Assignments)> {
    let count = assignment_count(sizes);
    if count > cap {
        return Err(Error::CapExceeded { count, cap });
    }
    let current = sizes
        .iter()
        .enumerate()
        .flat_map(|(j, &nj)| std::iter::repeat_n(j, nj))
        .collect();
    Ok((
        count,
        Assignments {
            current,
            done: false,
        },
    ))
}

pub fn permutation_test(
    ds: &SurvivalDataset,
    spec: &HypothesisSpec,
    ws: &WeightSet,
    plan: &PermutationPlan,
) -> Result<PermutationResult> {
    let engine = Engine::new(ds, spec, ws);
    run_with_engine(&engine, &ds.labels(), plan)
}

/// Permutation test on a prepared engine; `labels` is the observed assignment.
pub fn run_with_engine(
    engine: &Engine,
    labels: &[usize],
    plan: &PermutationPlan,
) -> Result<PermutationResult> {
    plan.validate()?;
    let mut scratch = engine.scratch();
    let observed = engine.evaluate(labels, &mut scratch);
    let evals = match plan.mode {
        PermutationMode::MonteCarlo => monte_carlo(engine, labels, plan)?,
        PermutationMode::Exact => {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            let mut sizes = vec![0; k];
            for &j in labels {
                sizes[j] += 1;
            }
            let (_, iter) = exact_assignments(&sizes, plan.exact_cap)?;
            iter.map(|l| engine.evaluate(&l, &mut scratch)).collect()
        }
    };
    Ok(summarize(&observed, &evals, plan, engine.weight_labels()))
}

fn replicate(
    engine: &Engine,
    labels: &[usize],
    seed: u64,
    b: usize,
    buf: &mut (crate::statistic::Scratch, Vec<usize>),
) -> Evaluation {
    let (scratch, perm) = buf;
    perm.copy_from_slice(labels);
    perm.shuffle(&mut stream(seed, b as u64));
    engine.evaluate(perm, scratch)
}

fn monte_carlo(
    engine: &Engine,
    labels: &[usize],
    plan: &PermutationPlan,
) -> Result<Vec<Evaluation>> {
    let init = || (engine.scratch(), labels.to_vec());
    if plan.threads == Some(1) {
        let mut buf = init();
        return Ok((0..plan.replicates)
            .map(|b| replicate(engine, labels, plan.seed, b, &mut buf))
            .collect());
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let run = || {
            (0..plan.replicates)
                .into_par_iter()
                .map_init(init, |buf, b| replicate(engine, labels, plan.seed, b, buf))
                .collect()
        };
        match plan.threads {
            Some(t) => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build()
                    .map_err(|e| Error::InvalidPlan(e.to_string()))?;
                Ok(pool.install(run))
            }
            None => Ok(run()),
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let mut buf = init();
        Ok((0..plan.replicates)
            .map(|b| replicate(engine, labels, plan.seed, b, &mut buf))
            .collect())
    }
}

fn summarize(
    observed: &Evaluation,
    evals: &[Evaluation],
    plan: &PermutationPlan,
    labels: &[String],
) -> PermutationResult {
    let count = evals.len();
    let exceed = evals
        .iter()
        .filter(|e| at_least(e.combined, observed.combined))
        .count();
    let p = |hits: usize| match plan.mode {
        PermutationMode::MonteCarlo => (1 + hits) as f64 / (count + 1) as f64,
        PermutationMode::Exact => hits as f64 / count as f64,
    };
    let mut stats: Vec<f64> = evals.iter().map(|e| e.combined).collect();
    let mut sorted = stats.clone();
    sorted.sort_by(f64::total_cmp);
    let quantile = {
        let total = match plan.mode {
            PermutationMode::MonteCarlo => count + 1,
            PermutationMode::Exact => count,
        };
        let idx = ((1.0 - plan.alpha) * total as f64 - 1e-9).ceil() as usize;
        if idx == 0 {
            sorted.first().copied().unwrap_or(f64::INFINITY)
        } else if idx > count {
            f64::INFINITY
        } else {
            sorted[idx - 1]
        }
    };
    let single = observed
        .single
        .iter()
        .enumerate()
        .map(|(r, &obs)| {
            let hits = evals.iter().filter(|e| at_least(e.single[r], obs)).count();
            SingleWeightPermutation {
                label: labels[r].clone(),
                observed: obs,
                p_value: p(hits),
            }
        })
        .collect();
    PermutationResult {
        observed: observed.combined,
        p_value: p(exceed),
        quantile,
        replicates: count,
        mode: plan.mode,
        seed: plan.seed,
        degenerate_count: evals.iter().filter(|e| e.combined_degenerate).count(),
        single,
        replicate_statistics: plan.keep_replicates.then(|| std::mem::take(&mut stats)),
    }
}
