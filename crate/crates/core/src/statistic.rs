//! The joint Wald-type statistic over several weights.
//!
//! For weights `w̃_1..w̃_m` the statistic is
//! `S = (T⁽ᵐ⁾Z)ᵀ (T⁽ᵐ⁾ Σ̂ T⁽ᵐ⁾)⁺ (T⁽ᵐ⁾Z)` with `T⁽ᵐ⁾ = diag(T, …, T)`,
//! `Z[r, j] = √n Σ_d w_r[d] ΔÂ_j[d]` and the block-diagonal covariance
//! `σ̂_j^{(rr')} = n Σ_d w_r[d] w_r'[d] ΔN_j[d] / Y_j[d]²`.
//!
//! [`wald`] evaluates the definition literally. [`Engine`] computes the same
//! number in the reduced coordinates `Uᵀ Z`, where `T = U Uᵀ`, and reuses all
//! label-independent quantities; it is what the permutation loop runs.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::counting::{PooledProcesses, StepProcesses};
use crate::linalg::{HypothesisSpec, Matrix, RELATIVE_CUTOFF};
use crate::survdata::SurvivalDataset;
use crate::weights::{integrand, WeightSet};

/// `Z` stacked weight-major: `(w_1: groups 1..k), (w_2: groups 1..k), …`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ZVector {
    pub k: usize,
    pub m: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockCovariance {
    pub k: usize,
    pub m: usize,
    pub matrix: Matrix,
}

impl BlockCovariance {
    /// `σ̂_j^{(rr')}`.
    pub fn entry(&self, r: usize, rp: usize, j: usize) -> f64 {
        self.matrix[(r * self.k + j, rp * self.k + j)]
    }

    pub fn block(&self, r: usize, rp: usize) -> Matrix {
        Matrix::from_fn(self.k, self.k, |i, j| {
            self.matrix[(r * self.k + i, rp * self.k + j)]
        })
    }
}

pub fn z_vector(sp: &StepProcesses, ws: &WeightSet) -> ZVector {
    let sqrt_n = (sp.n() as f64).sqrt();
    let increments: Vec<Vec<f64>> = (0..sp.k).map(|j| sp.na_increments(j)).collect();
    let mut values = Vec::with_capacity(sp.k * ws.len());
    for w in ws.weights() {
        let wn = integrand(w, sp);
        for inc in &increments {
            values.push(sqrt_n * wn.iter().zip(inc).map(|(a, b)| a * b).sum::<f64>());
        }
    }
    ZVector {
        k: sp.k,
        m: ws.len(),
        values,
    }
}

pub fn covariance(sp: &StepProcesses, ws: &WeightSet) -> BlockCovariance {
    let (k, m) = (sp.k, ws.len());
    let n = sp.n() as f64;
    let wn: Vec<Vec<f64>> = ws.weights().iter().map(|w| integrand(w, sp)).collect();
    let mut matrix = Matrix::zeros(k * m, k * m);
    for j in 0..k {
        let ratio: Vec<f64> = sp.events[j]
            .iter()
            .zip(&sp.at_risk[j])
            .map(|(&e, &y)| if y > 0.0 { e / (y * y) } else { 0.0 })
            .collect();
        for r in 0..m {
            for rp in r..m {
                let v = n
                    * (0..ratio.len())
                        .map(|d| wn[r][d] * wn[rp][d] * ratio[d])
                        .sum::<f64>();
                matrix[(r * k + j, rp * k + j)] = v;
                matrix[(rp * k + j, r * k + j)] = v;
            }
        }
    }
    BlockCovariance { k, m, matrix }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WaldStatistic {
    pub value: f64,
    pub df: usize,
    /// The projected covariance has lower rank than `df`.
    pub degenerate: bool,
}

/// Literal evaluation of the quadratic form with the full `km × km` matrices.
pub fn wald(z: &ZVector, cov: &BlockCovariance, spec: &HypothesisSpec) -> WaldStatistic {
    assert_eq!(z.k, spec.k());
    assert_eq!(cov.matrix.rows(), z.values.len());
    let tm = spec.t.block_diagonal(z.m);
    let tz = tm.mul_vec(&z.values);
    let middle = &(&tm * &cov.matrix) * &tm;
    let df = z.m * spec.rank;
    let degenerate = middle.rank() < df;
    let value = middle.pinv(None).quadratic_form(&tz).max(0.0);
    WaldStatistic {
        value,
        df,
        degenerate,
    }
}

/// Upper tail of the central chi-square distribution.
pub fn chi2_sf(x: f64, df: usize) -> f64 {
    assert!(df > 0, "degrees of freedom must be positive");
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    statrs::function::gamma::gamma_ur(df as f64 / 2.0, x / 2.0)
}

/// `x` with `chi2_sf(x, df) = upper`.
pub fn chi2_upper_quantile(upper: f64, df: usize) -> f64 {
    assert!(upper > 0.0 && upper < 1.0);
    let (mut lo, mut hi) = (0.0, df as f64 + 10.0);
    while chi2_sf(hi, df) > upper {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if chi2_sf(mid, df) > upper {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `xᵀ A⁺ x` for symmetric positive semi-definite `A` (row-major, `dim × dim`),
/// with the same relative eigenvalue cutoff as [`Matrix::pinv`]. Returns the
/// form and whether `A` was rank deficient.
pub fn psd_pinv_form(a: &[f64], x: &[f64]) -> (f64, bool) {
    let dim = x.len();
    if dim == 1 {
        let v = a[0];
        return if v > 0.0 {
            (x[0] * x[0] / v, false)
        } else {
            (0.0, true)
        };
    }
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || !scale.is_finite() {
        return (0.0, true);
    }
    let eig = (DMatrix::from_row_slice(dim, dim, a) / scale).symmetric_eigen();
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = dim as f64 * lmax * RELATIVE_CUTOFF;
    let mut value = 0.0;
    let mut kept = 0;
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda > tol && lambda > 0.0 {
            let proj: f64 = eig
                .eigenvectors
                .column(i)
                .iter()
                .zip(x)
                .map(|(v, x)| v * x)
                .sum();
            value += proj * proj / (lambda * scale);
            kept += 1;
        }
    }
    (value.max(0.0), kept < dim)
}

/// Statistic values for one label assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    /// All weights combined.
    pub combined: f64,
    pub combined_degenerate: bool,
    /// Each weight on its own (empty when there is a single weight).
    pub single: Vec<f64>,
}

/// Per-worker buffers for [`Engine::evaluate`].
#[derive(Debug, Clone)]
pub struct Scratch {
    at_time: Vec<f64>,
    events: Vec<f64>,
    at_risk: Vec<f64>,
    z: Vec<f64>,
    sigma: Vec<f64>,
    reduced_z: Vec<f64>,
    reduced_cov: Vec<f64>,
}

/// Label-independent precomputation of the statistic for one dataset, hypothesis and weight set.
#[derive(Debug, Clone)]
pub struct Engine {
    pooled: PooledProcesses,
    k: usize,
    m: usize,
    q: usize,
    rank: usize,
    /// `w̃_r(F̂(t_d-))` at `[d * m + r]`.
    weight_values: Vec<f64>,
    /// `U` row-major `k × q`.
    basis: Vec<f64>,
    weight_labels: Vec<String>,
}

impl Engine {
    pub fn new(ds: &SurvivalDataset, spec: &HypothesisSpec, ws: &WeightSet) -> Self {
        assert_eq!(ds.k(), spec.k(), "hypothesis and data disagree on k");
        Self::from_pooled(PooledProcesses::new(ds), ds.k(), spec, ws)
    }

    pub fn from_pooled(
        pooled: PooledProcesses,
        k: usize,
        spec: &HypothesisSpec,
        ws: &WeightSet,
    ) -> Self {
        let m = ws.len();
        let weight_values = pooled
            .km_left
            .iter()
            .flat_map(|&f| ws.weights().iter().map(move |w| w.eval_snapped(f)))
            .collect();
        Self {
            k,
            m,
            q: spec.basis.cols(),
            rank: spec.rank,
            weight_values,
            basis: spec.basis.as_slice().to_vec(),
            weight_labels: ws.weights().iter().map(|w| w.label().to_string()).collect(),
            pooled,
        }
    }

    pub fn pooled(&self) -> &PooledProcesses {
        &self.pooled
    }

    pub fn df(&self) -> usize {
        self.m * self.rank
    }

    pub fn single_df(&self) -> usize {
        self.rank
    }

    pub fn weight_count(&self) -> usize {
        self.m
    }

    pub fn weight_labels(&self) -> &[String] {
        &self.weight_labels
    }

    pub fn scratch(&self) -> Scratch {
        let (d, k, m, q) = (self.pooled.grid.len(), self.k, self.m, self.q);
        Scratch {
            at_time: vec![0.0; d * k],
            events: vec![0.0; d * k],
            at_risk: vec![0.0; k],
            z: vec![0.0; m * k],
            sigma: vec![0.0; m * m * k],
            reduced_z: vec![0.0; m * q],
            reduced_cov: vec![0.0; m * q * m * q],
        }
    }

    pub fn evaluate(&self, labels: &[usize], s: &mut Scratch) -> Evaluation {
        let (k, m, q) = (self.k, self.m, self.q);
        let n = self.pooled.n() as f64;
        let grid_len = self.pooled.grid.len();
        s.at_time.fill(0.0);
        s.events.fill(0.0);
        s.at_risk.fill(0.0);
        s.z.fill(0.0);
        s.sigma.fill(0.0);
        for ((&g, &st), &j) in self
            .pooled
            .grid_index
            .iter()
            .zip(&self.pooled.status)
            .zip(labels)
        {
            s.at_time[g * k + j] += 1.0;
            s.events[g * k + j] += f64::from(st);
        }
        let pow = k as i32 - 1;
        for d in (0..grid_len).rev() {
            let row = d * k..(d + 1) * k;
            for (y, c) in s.at_risk.iter_mut().zip(&s.at_time[row.clone()]) {
                *y += c;
            }
            if self.pooled.events[d] == 0.0 {
                continue;
            }
            let mut factor = 1.0 / n;
            for &y in &s.at_risk {
                factor *= y;
            }
            if factor == 0.0 {
                continue;
            }
            factor /= self.pooled.at_risk[d].powi(pow);
            let wv = &self.weight_values[d * m..(d + 1) * m];
            for j in 0..k {
                let e = s.events[d * k + j];
                if e == 0.0 {
                    continue;
                }
                let y = s.at_risk[j];
                let inc = e / y;
                let inc2 = inc / y;
                for r in 0..m {
                    let wr = wv[r] * factor;
                    s.z[r * k + j] += wr * inc;
                    for (rp, &w) in wv.iter().enumerate().take(m).skip(r) {
                        s.sigma[(r * m + rp) * k + j] += wr * w * factor * inc2;
                    }
                }
            }
        }
        let sqrt_n = n.sqrt();
        for v in &mut s.z {
            *v *= sqrt_n;
        }
        for v in &mut s.sigma {
            *v *= n;
        }
        // reduced coordinates
        let u = &self.basis;
        for r in 0..m {
            for c in 0..q {
                s.reduced_z[r * q + c] = (0..k).map(|j| u[j * q + c] * s.z[r * k + j]).sum();
            }
        }
        let dim = m * q;
        for r in 0..m {
            for rp in r..m {
                for c in 0..q {
                    for cp in 0..q {
                        let v: f64 = (0..k)
                            .map(|j| u[j * q + c] * u[j * q + cp] * s.sigma[(r * m + rp) * k + j])
                            .sum();
                        s.reduced_cov[(r * q + c) * dim + rp * q + cp] = v;
                        s.reduced_cov[(rp * q + cp) * dim + r * q + c] = v;
                    }
                }
            }
        }
        let (combined, combined_degenerate) = psd_pinv_form(&s.reduced_cov, &s.reduced_z);
        let single = if m > 1 {
            (0..m)
                .map(|r| {
                    let block: Vec<f64> = (0..q)
                        .flat_map(|c| {
                            let row = (r * q + c) * dim + r * q;
                            s.reduced_cov[row..row + q].to_vec()
                        })
                        .collect();
                    psd_pinv_form(&block, &s.reduced_z[r * q..(r + 1) * q]).0
                })
                .collect()
        } else {
            Vec::new()
        };
        Evaluation {
            combined,
            combined_degenerate,
            single,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::counting::build_processes;
    use crate::linalg::{contrast, Effect};
    use crate::survdata::FactorialLayout;
    use crate::weights::WeightFunction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_sample() -> SurvivalDataset {
        SurvivalDataset::from_columns(&[1.0, 2.0], &[true, true], &[0, 1], 2).unwrap()
    }

    fn lr() -> WeightSet {
        WeightSet::new(vec![WeightFunction::fleming_harrington(0, 0)]).unwrap()
    }

    #[test]
    fn two_sample_hand_values() {
        let sp = build_processes(&two_sample());
        let z = z_vector(&sp, &lr());
        assert!((z.values[0] - 2f64.sqrt() * 0.25).abs() < 1e-15);
        assert_eq!(z.values[1], 0.0);
        let cov = covariance(&sp, &lr());
        assert!((cov.entry(0, 0, 0) - 0.125).abs() < 1e-15);
        assert_eq!(cov.entry(0, 0, 1), 0.0);
        let spec = contrast(None, 2, &Effect::OneWay).unwrap();
        let s = wald(&z, &cov, &spec);
        assert!((s.value - 1.0).abs() < 1e-12);
        assert_eq!(s.df, 1);
    }

    #[test]
    fn zero_event_group_contributes_nothing() {
        let ds = SurvivalDataset::from_columns(
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            &[true, true, false, false, true],
            &[0, 0, 1, 1, 0],
            2,
        )
        .unwrap();
        let sp = build_processes(&ds);
        let ws = WeightSet::default_set();
        let z = z_vector(&sp, &ws);
        assert_eq!(z.values[1], 0.0);
        assert_eq!(z.values[3], 0.0);
        let cov = covariance(&sp, &ws);
        for r in 0..2 {
            for rp in 0..2 {
                assert_eq!(cov.entry(r, rp, 1), 0.0);
            }
        }
    }

    #[test]
    fn identical_weights_give_identical_blocks() {
        let ds = SurvivalDataset::from_columns(
            &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            &[true, true, false, true, true, true],
            &[0, 1, 0, 1, 0, 1],
            2,
        )
        .unwrap();
        let sp = build_processes(&ds);
        let w = WeightFunction::crossing();
        let ws = WeightSet::unchecked(vec![w.clone(), w]);
        let cov = covariance(&sp, &ws);
        assert_eq!(cov.block(0, 0), cov.block(0, 1));
        assert_eq!(cov.block(0, 0), cov.block(1, 1));
    }

    #[test]
    fn zero_z_and_zero_covariance() {
        let spec = contrast(None, 2, &Effect::OneWay).unwrap();
        let z = ZVector {
            k: 2,
            m: 1,
            values: vec![0.0, 0.0],
        };
        let cov = BlockCovariance {
            k: 2,
            m: 1,
            matrix: Matrix::from_diagonal(&[1.0, 2.0]),
        };
        assert_eq!(wald(&z, &cov, &spec).value, 0.0);
        let z = ZVector {
            k: 2,
            m: 1,
            values: vec![1.0, -1.0],
        };
        let zero = BlockCovariance {
            k: 2,
            m: 1,
            matrix: Matrix::zeros(2, 2),
        };
        let s = wald(&z, &zero, &spec);
        assert_eq!(s.value, 0.0);
        assert!(s.degenerate);
    }

    #[test]
    fn time_scaling_leaves_z_unchanged() {
        let times = [0.3, 1.2, 1.2, 2.5, 3.1, 4.0, 4.4, 6.0];
        let events = [true, true, false, true, false, true, true, false];
        let groups = [0, 1, 2, 0, 1, 2, 0, 1];
        let ds = SurvivalDataset::from_columns(&times, &events, &groups, 3).unwrap();
        let scaled: Vec<f64> = times.iter().map(|t| t * 17.5).collect();
        let ds2 = SurvivalDataset::from_columns(&scaled, &events, &groups, 3).unwrap();
        let ws = WeightSet::default_set();
        let z1 = z_vector(&build_processes(&ds), &ws);
        let z2 = z_vector(&build_processes(&ds2), &ws);
        assert_eq!(z1, z2);
    }

    #[test]
    fn chi2_reference_values() {
        assert_eq!(chi2_sf(0.0, 3), 1.0);
        assert!((chi2_sf(5.99146, 2) - (-5.99146f64 / 2.0).exp()).abs() < 1e-14);
        assert!((chi2_sf(5.991464547107979, 2) - 0.05).abs() < 1e-12);
        // f = 4: e^{-x/2} (1 + x/2)
        let x = 9.487729036781154;
        assert!((chi2_sf(x, 4) - (-x / 2.0f64).exp() * (1.0 + x / 2.0)).abs() < 1e-14);
        assert!((chi2_sf(x, 4) - 0.05).abs() < 1e-12);
        assert!((chi2_upper_quantile(0.05, 4) - x).abs() < 1e-9);
    }

    #[test]
    fn chi2_matches_closed_forms() {
        // even df: Poisson sum; odd df = 1: erfc
        for &x in &[0.01, 0.5, 1.0, 3.7, 10.0, 25.0, 60.0] {
            for half in 1..8usize {
                let mut term = 1.0;
                let mut sum = 1.0;
                for i in 1..half {
                    term *= x / 2.0 / i as f64;
                    sum += term;
                }
                let exact = (-x / 2.0f64).exp() * sum;
                assert!(
                    (chi2_sf(x, 2 * half) - exact).abs() < 1e-10,
                    "x={x} df={}",
                    2 * half
                );
            }
            let exact1 = statrs::function::erf::erfc((x / 2.0f64).sqrt());
            assert!((chi2_sf(x, 1) - exact1).abs() < 1e-10);
        }
    }

    fn random_dataset(rng: &mut ChaCha8Rng, n: usize, k: usize) -> SurvivalDataset {
        loop {
            let times: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(1..40) as f64) / 4.0)
                .collect();
            let events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.7)).collect();
            let groups: Vec<usize> = (0..n)
                .map(|i| if i < k { i } else { rng.random_range(0..k) })
                .collect();
            if let Ok(ds) = SurvivalDataset::from_columns(&times, &events, &groups, k) {
                return ds;
            }
        }
    }

    #[test]
    fn engine_matches_literal_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let layout = FactorialLayout::from_level_counts(&[2, 3]).unwrap();
        let effects = [
            Effect::OneWay,
            Effect::Main("A".into()),
            Effect::Main("B".into()),
            Effect::Interaction(vec!["A".into(), "B".into()]),
        ];
        let weight_sets = [
            WeightSet::default_set(),
            lr(),
            WeightSet::parse_all(&["fh:0:0", "fh:1:0", "fh:0:2"]).unwrap(),
        ];
        // n = 120 keeps the six-group product Y_1⋯Y_6 away from zero at most event
        // times; much sparser designs make Σ̂ numerically rank deficient
        for _ in 0..15 {
            let ds = random_dataset(&mut rng, 120, 6);
            let sp = build_processes(&ds);
            for e in &effects {
                let spec = contrast(Some(&layout), 6, e).unwrap();
                for ws in &weight_sets {
                    let literal = wald(&z_vector(&sp, ws), &covariance(&sp, ws), &spec);
                    let engine = Engine::new(&ds, &spec, ws);
                    let mut scratch = engine.scratch();
                    let fast = engine.evaluate(&ds.labels(), &mut scratch);
                    let tol = 1e-9 * literal.value.max(1.0);
                    assert!(
                        (fast.combined - literal.value).abs() < tol,
                        "{e:?}: {} vs {}",
                        fast.combined,
                        literal.value
                    );
                    assert_eq!(engine.df(), literal.df);
                    for (r, w) in ws.weights().iter().enumerate().take(fast.single.len()) {
                        let single = WeightSet::new(vec![w.clone()]).unwrap();
                        let lit = wald(&z_vector(&sp, &single), &covariance(&sp, &single), &spec);
                        assert!((fast.single[r] - lit.value).abs() < 1e-9 * lit.value.max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn two_sample_reduces_to_studentized_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = contrast(None, 2, &Effect::OneWay).unwrap();
        for _ in 0..20 {
            let ds = random_dataset(&mut rng, 30, 2);
            let sp = build_processes(&ds);
            let ws = lr();
            let z = z_vector(&sp, &ws);
            let cov = covariance(&sp, &ws);
            let s = wald(&z, &cov, &spec).value;
            let expected =
                (z.values[0] - z.values[1]).powi(2) / (cov.entry(0, 0, 0) + cov.entry(0, 0, 1));
            assert!((s - expected).abs() < 1e-9 * expected.max(1.0));
        }
    }
}
