//! Counting and at-risk processes on the grid of distinct observation times.
//!
//! Tie convention: the risk set at `t` is `{X ≥ t}`, so a censored time tied
//! with an event time is still at risk there, and all events at a tied time
//! enter jointly through `ΔN`. The pooled Kaplan–Meier estimator uses the
//! distinct-time product `∏ (1 - ΔN/Y)`.

use serde::Serialize;

use crate::survdata::SurvivalDataset;

/// Strictly increasing distinct observation times.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn from_times(times: impl IntoIterator<Item = f64>) -> Self {
        let mut times: Vec<f64> = times.into_iter().collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        Self { times }
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Grid position of an observed time.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.times.binary_search_by(|x| x.total_cmp(&t)).ok()
    }
}

/// Group-free quantities: they depend on the observations but not on the
/// group labels, so they are shared by every permutation replicate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PooledProcesses {
    pub grid: TimeGrid,
    /// Grid position of every observation, in dataset order.
    pub grid_index: Vec<usize>,
    pub status: Vec<u8>,
    /// `Y(t_d)`.
    pub at_risk: Vec<f64>,
    /// `ΔN(t_d)`.
    pub events: Vec<f64>,
    /// Pooled Kaplan–Meier distribution function just before `t_d`.
    pub km_left: Vec<f64>,
}

impl PooledProcesses {
    pub fn new(ds: &SurvivalDataset) -> Self {
        let obs = ds.observations();
        let grid = TimeGrid::from_times(obs.iter().map(|o| o.time));
        let d = grid.len();
        let grid_index: Vec<usize> = obs
            .iter()
            .map(|o| grid.index_of(o.time).expect("time on grid"))
            .collect();
        let status: Vec<u8> = obs.iter().map(|o| o.status).collect();
        let mut at_time = vec![0.0; d];
        let mut events = vec![0.0; d];
        for (&g, &s) in grid_index.iter().zip(&status) {
            at_time[g] += 1.0;
            events[g] += f64::from(s);
        }
        let at_risk = reverse_cumsum(&at_time);
        let mut km_left = Vec::with_capacity(d);
        let mut surv = 1.0;
        for i in 0..d {
            km_left.push(1.0 - surv);
            surv *= 1.0 - events[i] / at_risk[i];
        }
        Self {
            grid,
            grid_index,
            status,
            at_risk,
            events,
            km_left,
        }
    }

    pub fn n(&self) -> usize {
        self.status.len()
    }

    /// Pooled Kaplan–Meier survival `1 - F̂(t_d)` at each grid time.
    pub fn km_survival(&self) -> Vec<f64> {
        let mut s = 1.0;
        self.events
            .iter()
            .zip(&self.at_risk)
            .map(|(e, y)| {
                s *= 1.0 - e / y;
                s
            })
            .collect()
    }
}

fn reverse_cumsum(x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut acc = 0.0;
    for i in (0..x.len()).rev() {
        acc += x[i];
        out[i] = acc;
    }
    out
}

/// Pooled and per-group processes for one assignment of group labels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepProcesses {
    pub pooled: PooledProcesses,
    pub k: usize,
    /// `Y_j(t_d)`, indexed `[j][d]`.
    pub at_risk: Vec<Vec<f64>>,
    /// `ΔN_j(t_d)`, indexed `[j][d]`.
    pub events: Vec<Vec<f64>>,
}

impl StepProcesses {
    pub fn with_labels(pooled: PooledProcesses, labels: &[usize], k: usize) -> Self {
        let d = pooled.grid.len();
        let mut at_time = vec![vec![0.0; d]; k];
        let mut events = vec![vec![0.0; d]; k];
        for ((&g, &s), &j) in pooled.grid_index.iter().zip(&pooled.status).zip(labels) {
            at_time[j][g] += 1.0;
            events[j][g] += f64::from(s);
        }
        let at_risk = at_time.iter().map(|c| reverse_cumsum(c)).collect();
        Self {
            pooled,
            k,
            at_risk,
            events,
        }
    }

    pub fn n(&self) -> usize {
        self.pooled.n()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.pooled.grid
    }

    /// Nelson–Aalen increments `ΔN_j / Y_j` (0 where `Y_j = 0`).
    pub fn na_increments(&self, j: usize) -> Vec<f64> {
        self.events[j]
            .iter()
            .zip(&self.at_risk[j])
            .map(|(&e, &y)| if y > 0.0 { e / y } else { 0.0 })
            .collect()
    }
}

pub fn build_processes(ds: &SurvivalDataset) -> StepProcesses {
    StepProcesses::with_labels(PooledProcesses::new(ds), &ds.labels(), ds.k())
}

/// Right-continuous step function given by its values at the jump grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl StepFunction {
    pub fn eval(&self, t: f64) -> f64 {
        match self.times.partition_point(|&x| x <= t) {
            0 => 0.0,
            i => self.values[i - 1],
        }
    }
}

/// Nelson–Aalen estimator of group `j` on the pooled grid.
pub fn nelson_aalen(ds: &SurvivalDataset, j: usize) -> StepFunction {
    let sp = build_processes(ds);
    let mut acc = 0.0;
    let values = sp
        .na_increments(j)
        .into_iter()
        .map(|inc| {
            acc += inc;
            acc
        })
        .collect();
    StepFunction {
        times: sp.grid().times().to_vec(),
        values,
    }
}

/// Kaplan–Meier survival curve of a single group, evaluated on the pooled grid.
pub fn group_km_survival(sp: &StepProcesses, j: usize) -> Vec<f64> {
    let mut s = 1.0;
    sp.events[j]
        .iter()
        .zip(&sp.at_risk[j])
        .map(|(&e, &y)| {
            if y > 0.0 {
                s *= 1.0 - e / y;
            }
            s
        })
        .collect()
}
