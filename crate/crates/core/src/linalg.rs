//! Small dense matrices: Kronecker products, Moore–Penrose inverses and the
//! contrast/projection matrices of factorial hypotheses.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Sub};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::survdata::FactorialLayout;
use crate::{Error, Result};

/// Relative singular-value cutoff shared by [`Matrix::pinv`] and rank computations.
pub const RELATIVE_CUTOFF: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{}", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "entry count must be rows * cols");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let n = diag.len();
        Self::from_fn(n, n, |i, j| if i == j { diag[i] } else { 0.0 })
    }

    /// `J_n / n`, the averaging matrix.
    pub fn averaging(n: usize) -> Self {
        Self::new(n, n, vec![1.0 / n as f64; n * n])
    }

    /// `P_n = I_n - J_n / n`, the centering matrix.
    pub fn centering(n: usize) -> Self {
        &Self::identity(n) - &Self::averaging(n)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::new(
            self.rows,
            self.cols,
            self.data.iter().map(|x| x * c).collect(),
        )
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Maximum absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn kronecker(&self, other: &Matrix) -> Matrix {
        let (rb, cb) = (other.rows, other.cols);
        Matrix::from_fn(self.rows * rb, self.cols * cb, |i, j| {
            self[(i / rb, j / cb)] * other[(i % rb, j % cb)]
        })
    }

    /// Block-diagonal matrix with `copies` copies of `self` on the diagonal.
    pub fn block_diagonal(&self, copies: usize) -> Matrix {
        Matrix::identity(copies).kronecker(self)
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    /// Copy scaled to unit max-abs entry, with the scale; decompositions lose
    /// accuracy on matrices whose entries are far from order one.
    fn normalized(&self) -> (DMatrix<f64>, f64) {
        let s = self.max_abs();
        let s = if s > 0.0 && s.is_finite() { s } else { 1.0 };
        (self.to_nalgebra() / s, s)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Singular values in decreasing order.
    pub fn singular_values(&self) -> Vec<f64> {
        if self.data.is_empty() {
            return Vec::new();
        }
        let (a, scale) = self.normalized();
        let mut sv: Vec<f64> = a.singular_values().iter().map(|v| v * scale).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv
    }

    pub fn default_tolerance(&self) -> f64 {
        let smax = self.singular_values().first().copied().unwrap_or(0.0);
        self.rows.max(self.cols) as f64 * smax * RELATIVE_CUTOFF
    }

    /// Numerical rank with the default cutoff.
    pub fn rank(&self) -> usize {
        let sv = self.singular_values();
        let tol =
            self.rows.max(self.cols) as f64 * sv.first().copied().unwrap_or(0.0) * RELATIVE_CUTOFF;
        sv.iter().filter(|&&s| s > tol).count()
    }

    /// Moore–Penrose inverse via the SVD. Singular values at or below `tol`
    /// (default `max(rows, cols) · σ_max · 1e-12`) are treated as zero.
    pub fn pinv(&self, tol: Option<f64>) -> Matrix {
        if self.data.is_empty() {
            return Matrix::zeros(self.cols, self.rows);
        }
        let (a, scale) = self.normalized();
        if self.is_symmetric() {
            return self.symmetric_pinv(a, scale, tol);
        }
        let svd = a.svd(true, true);
        let smax = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
        let tol = tol.map_or(
            self.rows.max(self.cols) as f64 * smax * RELATIVE_CUTOFF,
            |t| t / scale,
        );
        let u = svd.u.as_ref().expect("u requested");
        let vt = svd.v_t.as_ref().expect("v_t requested");
        let mut out = DMatrix::<f64>::zeros(self.cols, self.rows);
        for (idx, &s) in svd.singular_values.iter().enumerate() {
            if s > tol && s > 0.0 {
                let v_col = vt.row(idx).transpose();
                let u_col = u.column(idx);
                out += (v_col * u_col.transpose()) / s;
            }
        }
        Matrix::from_nalgebra(&(out / scale))
    }

    /// Symmetric up to round-off relative to the largest entry.
    pub fn is_symmetric(&self) -> bool {
        let tol = 1e-13 * self.max_abs();
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    /// Symmetric case. The SVD can return inaccurate singular vectors when
    /// several singular values vanish; the symmetric eigensolver does not.
    fn symmetric_pinv(&self, a: DMatrix<f64>, scale: f64, tol: Option<f64>) -> Matrix {
        let a = (&a + a.transpose()) * 0.5;
        let eig = a.symmetric_eigen();
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tol = tol.map_or(self.rows as f64 * lmax * RELATIVE_CUTOFF, |t| t / scale);
        let mut out = DMatrix::<f64>::zeros(self.rows, self.rows);
        for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda.abs() > tol && lambda != 0.0 {
                let v = eig.eigenvectors.column(idx);
                out += (v * v.transpose()) / lambda;
            }
        }
        Matrix::from_nalgebra(&(out / scale))
    }

    /// Eigen-decomposition of a symmetric matrix: eigenvalues and the
    /// eigenvectors as columns of the returned matrix.
    pub fn symmetric_eigen(&self) -> (Vec<f64>, Matrix) {
        assert_eq!(self.rows, self.cols);
        let (a, scale) = self.normalized();
        let eig = a.symmetric_eigen();
        (
            eig.eigenvalues.iter().map(|v| v * scale).collect(),
            Matrix::from_nalgebra(&eig.eigenvectors),
        )
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &Matrix {
    type Output = Matrix;
    fn mul(self, rhs: &Matrix) -> Matrix {
        assert_eq!(self.cols, rhs.rows, "dimension mismatch in product");
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for l in 0..self.cols {
                let a = self[(i, l)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..rhs.cols {
                    out.data[i * rhs.cols + j] += a * rhs.data[l * rhs.cols + j];
                }
            }
        }
        out
    }
}

impl Add for &Matrix {
    type Output = Matrix;
    fn add(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        )
    }
}

impl Sub for &Matrix {
    type Output = Matrix;
    fn sub(self, rhs: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Matrix::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}

/// Which null hypothesis a contrast encodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "factors")]
pub enum Effect {
    /// No group effect at all: `A_1 = … = A_k`.
    OneWay,
    /// No main effect of one factor.
    Main(String),
    /// No interaction among the listed factors.
    Interaction(Vec<String>),
}

impl Effect {
    /// Parses `oneway`, `main:<f>` or `interaction:<f>,<g>[,...]`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("oneway") {
            return Ok(Effect::OneWay);
        }
        let bad = || Error::InvalidConfig(format!("cannot parse effect `{s}`"));
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        let names: Vec<String> = rest
            .split(',')
            .map(|n| n.trim().to_string())
            .filter(|n| !n.is_empty())
            .collect();
        match kind {
            "main" if names.len() == 1 => Ok(Effect::Main(names[0].clone())),
            "interaction" if names.len() >= 2 => Ok(Effect::Interaction(names)),
            _ => Err(bad()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Effect::OneWay => "oneway".into(),
            Effect::Main(f) => f.clone(),
            Effect::Interaction(fs) => fs.join(":"),
        }
    }

    pub fn descriptor(&self) -> String {
        match self {
            Effect::OneWay => "oneway".into(),
            Effect::Main(f) => format!("main:{f}"),
            Effect::Interaction(fs) => format!("interaction:{}", fs.join(",")),
        }
    }
}

/// A null hypothesis `T A = 0` with `T = Hᵀ(HHᵀ)⁺H`.
#[derive(Debug, Clone, Serialize)]
pub struct HypothesisSpec {
    pub h: Matrix,
    pub t: Matrix,
    pub rank: usize,
    pub label: String,
    /// Orthonormal basis of the range of `T` (k × rank), so `T = U Uᵀ`.
    #[serde(skip)]
    pub basis: Matrix,
}

impl HypothesisSpec {
    pub fn from_contrast(h: Matrix, label: impl Into<String>) -> Result<Self> {
        if !h.is_finite() {
            return Err(Error::InvalidConfig(
                "contrast matrix has non-finite entries".into(),
            ));
        }
        let ones = vec![1.0; h.cols()];
        let row_sums = h.mul_vec(&ones);
        let scale = h.max_abs().max(1.0);
        if row_sums
            .iter()
            .any(|s| s.abs() > 1e-12 * scale * h.cols() as f64)
        {
            return Err(Error::InvalidConfig(
                "rows of a contrast matrix must sum to zero".into(),
            ));
        }
        let ht = h.transpose();
        let t = &(&ht * &(&h * &ht).pinv(None)) * &h;
        let trace_rank = t.trace().round();
        let svd_rank = t.rank();
        if trace_rank < 0.0 || trace_rank as usize != svd_rank {
            return Err(Error::Numerical(format!(
                "projection rank from trace ({trace_rank}) disagrees with SVD rank ({svd_rank})"
            )));
        }
        if svd_rank == 0 {
            return Err(Error::InvalidConfig("contrast matrix is zero".into()));
        }
        let (vals, vecs) = t.symmetric_eigen();
        let cols: Vec<usize> = (0..vals.len()).filter(|&i| vals[i] > 0.5).collect();
        let basis = Matrix::from_fn(t.rows(), cols.len(), |i, j| vecs[(i, cols[j])]);
        Ok(Self {
            h,
            t,
            rank: svd_rank,
            label: label.into(),
            basis,
        })
    }

    pub fn k(&self) -> usize {
        self.t.rows()
    }
}

/// Builds the contrast for `effect` by Kronecker composition: `P_b` for each
/// factor in the effect and `J_b / b` for the others. Without a layout only
/// the one-way hypothesis `P_k` is available.
pub fn contrast(
    layout: Option<&FactorialLayout>,
    k: usize,
    effect: &Effect,
) -> Result<HypothesisSpec> {
    if k < 2 {
        return Err(Error::TooFewGroups(k));
    }
    if let Some(l) = layout {
        if l.k() != k {
            return Err(Error::EffectInconsistentWithLayout(format!(
                "layout has {} cells, data has {k} groups",
                l.k()
            )));
        }
    }
    let (h, label) = match (effect, layout) {
        (Effect::OneWay, _) => (Matrix::centering(k), "oneway".to_string()),
        (_, None) => {
            return Err(Error::EffectInconsistentWithLayout(format!(
                "effect `{}` needs a factorial layout",
                effect.descriptor()
            )))
        }
        (Effect::Main(name), Some(l)) => {
            let idx = l
                .factor_index(name)
                .ok_or_else(|| Error::UnknownFactor(name.clone()))?;
            (kronecker_contrast(l, &[idx]), name.clone())
        }
        (Effect::Interaction(names), Some(l)) => {
            let mut idx = Vec::with_capacity(names.len());
            for n in names {
                let i = l
                    .factor_index(n)
                    .ok_or_else(|| Error::UnknownFactor(n.clone()))?;
                if idx.contains(&i) {
                    return Err(Error::EffectInconsistentWithLayout(format!(
                        "factor `{n}` listed twice"
                    )));
                }
                idx.push(i);
            }
            (kronecker_contrast(l, &idx), names.join(":"))
        }
    };
    if h.max_abs() < 1e-15 {
        return Err(Error::EffectInconsistentWithLayout(format!(
            "effect `{}` involves a factor with a single level",
            effect.descriptor()
        )));
    }
    HypothesisSpec::from_contrast(h, label)
}

fn kronecker_contrast(layout: &FactorialLayout, in_effect: &[usize]) -> Matrix {
    layout
        .level_counts()
        .iter()
        .enumerate()
        .map(|(i, &b)| {
            if in_effect.contains(&i) {
                Matrix::centering(b)
            } else {
                Matrix::averaging(b)
            }
        })
        .fold(Matrix::identity(1), |acc, m| acc.kronecker(&m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
        (a - b).max_abs() <= tol * a.max_abs().max(1.0)
    }

    #[test]
    fn kronecker_identity_and_shape() {
        let b = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(Matrix::identity(1).kronecker(&b), b);
        let hb = Matrix::centering(2).kronecker(&Matrix::averaging(3));
        assert_eq!((hb.rows(), hb.cols()), (6, 6));
        for i in 0..6 {
            for j in 0..6 {
                let expected = if (i < 3) == (j < 3) {
                    1.0 / 6.0
                } else {
                    -1.0 / 6.0
                };
                assert!((hb[(i, j)] - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn kronecker_rank_is_multiplicative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            // rank-deficient factors: product of 3x2 and 2x3
            let a = &random(3, 2, &mut rng) * &random(2, 3, &mut rng);
            let b = random(3, 3, &mut rng);
            assert_eq!(a.kronecker(&b).rank(), a.rank() * b.rank());
        }
    }

    #[test]
    fn pinv_simple_cases() {
        assert_eq!(Matrix::identity(3).pinv(None), Matrix::identity(3));
        let d = Matrix::from_diagonal(&[2.0, 0.0]);
        assert!(close(
            &d.pinv(None),
            &Matrix::from_diagonal(&[0.5, 0.0]),
            1e-15
        ));
        assert_eq!(Matrix::zeros(2, 3).pinv(None), Matrix::zeros(3, 2));
    }

    #[test]
    fn penrose_identities_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..25 {
            let a = random(4, 6, &mut rng);
            let p = a.pinv(None);
            assert!(close(&(&(&a * &p) * &a), &a, 1e-10));
            assert!(close(&(&(&p * &a) * &p), &p, 1e-10));
            let ap = &a * &p;
            assert!(close(&ap.transpose(), &ap, 1e-10));
            let pa = &p * &a;
            assert!(close(&pa.transpose(), &pa, 1e-10));
        }
    }

    #[test]
    fn pinv_of_rank_deficient_projected_covariance() {
        // T D T for a rank-2 projection and a tiny-scale diagonal D
        let layout = FactorialLayout::from_level_counts(&[2, 3]).unwrap();
        let t = contrast(Some(&layout), 6, &Effect::Main("B".into()))
            .unwrap()
            .t;
        let d = Matrix::from_diagonal(&[3.8e-10, 3.2e-10, 1.1e-9, 1.0e-9, 2.0e-9, 1.25e-9]);
        let a = &(&t * &d) * &t;
        let p = a.pinv(None);
        let scale = p.max_abs();
        assert!((&p - &p.transpose()).max_abs() < 1e-12 * scale);
        assert!((&(&(&a * &p) * &a) - &a).max_abs() < 1e-10 * a.max_abs());
        assert!((&(&(&p * &a) * &p) - &p).max_abs() < 1e-10 * scale);
        assert!((&(&a * &p) - &t).max_abs() < 1e-9);
    }

    #[test]
    fn pinv_is_an_involution_for_full_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let a = random(5, 5, &mut rng);
            assert!(close(&a.pinv(None).pinv(None), &a, 1e-9));
        }
    }

    #[test]
    fn oneway_projection_is_centering() {
        let spec = contrast(None, 6, &Effect::OneWay).unwrap();
        assert!(close(&spec.t, &Matrix::centering(6), 1e-12));
        assert_eq!(spec.rank, 5);
    }

    #[test]
    fn two_by_three_ranks() {
        let layout = FactorialLayout::from_level_counts(&[2, 3]).unwrap();
        let ranks: Vec<_> = [
            Effect::Main("A".into()),
            Effect::Main("B".into()),
            Effect::Interaction(vec!["A".into(), "B".into()]),
        ]
        .iter()
        .map(|e| contrast(Some(&layout), 6, e).unwrap().rank)
        .collect();
        assert_eq!(ranks, vec![1, 2, 2]);
    }

    #[test]
    fn contrast_errors() {
        let layout = FactorialLayout::from_level_counts(&[2, 3]).unwrap();
        assert!(matches!(
            contrast(Some(&layout), 6, &Effect::Main("Z".into())),
            Err(Error::UnknownFactor(_))
        ));
        assert!(matches!(
            contrast(None, 6, &Effect::Main("A".into())),
            Err(Error::EffectInconsistentWithLayout(_))
        ));
        assert!(matches!(
            contrast(Some(&layout), 4, &Effect::OneWay),
            Err(Error::EffectInconsistentWithLayout(_))
        ));
        assert!(HypothesisSpec::from_contrast(Matrix::identity(3), "x").is_err());
    }

    #[test]
    fn projection_properties_and_row_space() {
        let layout = FactorialLayout::from_level_counts(&[2, 3, 2]).unwrap();
        let effects = [
            Effect::OneWay,
            Effect::Main("B".into()),
            Effect::Interaction(vec!["A".into(), "C".into()]),
            Effect::Interaction(vec!["A".into(), "B".into(), "C".into()]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for e in &effects {
            let spec = contrast(Some(&layout), 12, e).unwrap();
            let t = &spec.t;
            assert!((t - &t.transpose()).max_abs() <= 1e-10);
            assert!((&(t * t) - t).max_abs() <= 1e-10);
            assert_eq!(spec.rank, t.trace().round() as usize);
            let doubled = HypothesisSpec::from_contrast(spec.h.scale(2.0), "2h").unwrap();
            assert!((&doubled.t - t).max_abs() <= 1e-10);
            let basis = &spec.basis;
            assert!((&(basis * &basis.transpose()) - t).max_abs() <= 1e-10);
            for _ in 0..20 {
                let a: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
                let norm = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(norm(t.mul_vec(&a)) > 1e-9 && norm(spec.h.mul_vec(&a)) > 1e-9);
                // project onto the null space of T: then H vanishes too
                let ta = t.mul_vec(&a);
                let null: Vec<f64> = a.iter().zip(&ta).map(|(x, y)| x - y).collect();
                assert!(norm(t.mul_vec(&null)) <= 1e-9);
                assert!(norm(spec.h.mul_vec(&null)) <= 1e-9);
            }
        }
    }

    #[test]
    fn effect_grammar() {
        assert_eq!(Effect::parse("oneway").unwrap(), Effect::OneWay);
        assert_eq!(
            Effect::parse("main:trt").unwrap(),
            Effect::Main("trt".into())
        );
        assert_eq!(
            Effect::parse("interaction:trt,celltype").unwrap(),
            Effect::Interaction(vec!["trt".into(), "celltype".into()])
        );
        assert!(Effect::parse("main:").is_err());
        assert!(Effect::parse("interaction:a").is_err());
        assert!(Effect::parse("bogus").is_err());
    }
}
