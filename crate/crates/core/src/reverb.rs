//! The reverberation transform.
//!
//! A feature sequence `f` of shape `(T, D)` is lifted to a similarity tensor
//! `F[:, :, d] = f[:, d] f[:, d]^T`, and each slice is carried from the
//! observation domain (`T` past steps) into the rehearsal domain (`T_f` future
//! steps, `K_g` generations) by the bilinear map `G^T F_d R`.
//!
//! `R` (`T x T_f`) routes every observed step to every future step; `G`
//! (`T x K_g`) re-weights the observed steps in `K_g` ways. Both are bounded
//! to `[-1, 1]` with `tanh`.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{ensure_finite, Error, Result};

/// Relative singular-value cut-off used for numerical rank.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// `(T, T, D)` tensor of per-feature outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTensor {
    pub values: Array3<f64>,
}

impl SimilarityTensor {
    pub fn steps(&self) -> usize {
        self.values.dim().0
    }

    pub fn features(&self) -> usize {
        self.values.dim().2
    }

    pub fn slice(&self, d: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(2), d)
    }
}

/// Per-agent reverberation (`r`, `T x T_f`) and generating (`g`, `T x K_g`)
/// kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverbKernelPair {
    pub r: Array2<f64>,
    pub g: Array2<f64>,
}

impl ReverbKernelPair {
    /// Wraps already-bounded kernels, rejecting entries outside `[-1, 1]`.
    pub fn new(r: Array2<f64>, g: Array2<f64>) -> Result<Self> {
        if r.nrows() != g.nrows() {
            return Err(Error::Shape(format!("R has {} rows but G has {}", r.nrows(), g.nrows())));
        }
        ensure_finite("reverberation kernel", r.iter().chain(g.iter()))?;
        if r.iter().chain(g.iter()).any(|v| v.abs() > 1.0) {
            return Err(Error::Domain("kernel entries must lie in [-1, 1]; bound them first".into()));
        }
        Ok(Self { r, g })
    }

    /// Bounds raw head outputs with `tanh`.
    pub fn from_raw(r: &Array2<f64>, g: &Array2<f64>) -> Result<Self> {
        Self::new(bound_kernel(r), bound_kernel(g))
    }

    pub fn steps(&self) -> usize {
        self.r.nrows()
    }

    pub fn future_steps(&self) -> usize {
        self.r.ncols()
    }

    pub fn generations(&self) -> usize {
        self.g.ncols()
    }
}

/// `(K_g, T_f, D)` rehearsal-domain field.
#[derive(Debug, Clone, PartialEq)]
pub struct RehearsalField {
    pub values: Array3<f64>,
}

impl RehearsalField {
    pub fn slice(&self, d: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(2), d)
    }
}

pub fn sequential_similarity(f: ArrayView2<'_, f64>) -> Result<SimilarityTensor> {
    ensure_finite("similarity input", f.iter())?;
    let (t, d) = f.dim();
    let mut values = Array3::zeros((t, t, d));
    for k in 0..d {
        let col = f.column(k);
        for i in 0..t {
            for j in 0..t {
                values[[i, j, k]] = col[i] * col[j];
            }
        }
    }
    Ok(SimilarityTensor { values })
}

pub fn bound_kernel(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(f64::tanh)
}

pub fn reverberation_transform(f: &SimilarityTensor, kernels: &ReverbKernelPair) -> Result<RehearsalField> {
    transform_slices(&f.values, kernels)
}

/// `G^T F_d R` for every slice of an arbitrary `(T, T, D)` tensor.
pub fn transform_slices(f: &Array3<f64>, kernels: &ReverbKernelPair) -> Result<RehearsalField> {
    let (t0, t1, depth) = f.dim();
    let t = kernels.steps();
    if t0 != t || t1 != t {
        return Err(Error::Shape(format!("similarity slices are {t0}x{t1} but kernels expect {t}x{t}")));
    }
    let gt = kernels.g.t();
    let mut values = Array3::zeros((kernels.generations(), kernels.future_steps(), depth));
    for d in 0..depth {
        let out = gt.dot(&f.index_axis(Axis(2), d)).dot(&kernels.r);
        values.index_axis_mut(Axis(2), d).assign(&out);
    }
    Ok(RehearsalField { values })
}

/// Same result as similarity followed by the transform, computed through the
/// rank-one factorization `(G^T f_d)(f_d^T R)` without forming `F`.
pub fn transform_features(f: ArrayView2<'_, f64>, kernels: &ReverbKernelPair) -> Result<RehearsalField> {
    let (t, depth) = f.dim();
    if t != kernels.steps() {
        return Err(Error::Shape(format!("features have {t} steps but kernels expect {}", kernels.steps())));
    }
    let a = kernels.g.t().dot(&f); // (K_g, D)
    let b = kernels.r.t().dot(&f); // (T_f, D)
    let mut values = Array3::zeros((kernels.generations(), kernels.future_steps(), depth));
    for ((k, q, d), v) in values.indexed_iter_mut() {
        *v = a[[k, d]] * b[[q, d]];
    }
    Ok(RehearsalField { values })
}

pub fn numerical_rank(m: ArrayView2<'_, f64>) -> usize {
    let (r, c) = m.dim();
    if r == 0 || c == 0 {
        return 0;
    }
    let dm = DMatrix::from_fn(r, c, |i, j| m[[i, j]]);
    let sv = dm.singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOLERANCE * max).count()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankReport {
    pub rank_r: usize,
    pub rank_g: usize,
    /// Rank of each input slice.
    pub rank_f: Vec<usize>,
    /// Rank of each transformed slice.
    pub rank_out: Vec<usize>,
    pub rank_out_max: usize,
    /// Slices where `rank(out_d) > min(rank G, rank F_d, rank R)`.
    pub violations: Vec<usize>,
}

impl RankReport {
    pub fn bound_holds(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn rank_report(kernels: &ReverbKernelPair, f: &Array3<f64>) -> Result<RankReport> {
    let field = transform_slices(f, kernels)?;
    let rank_r = numerical_rank(kernels.r.view());
    let rank_g = numerical_rank(kernels.g.view());
    let depth = f.dim().2;
    let mut rank_f = Vec::with_capacity(depth);
    let mut rank_out = Vec::with_capacity(depth);
    let mut violations = Vec::new();
    for d in 0..depth {
        let rf = numerical_rank(f.index_axis(Axis(2), d));
        let ro = numerical_rank(field.slice(d));
        if ro > rank_g.min(rf).min(rank_r) {
            violations.push(d);
        }
        rank_f.push(rf);
        rank_out.push(ro);
    }
    Ok(RankReport {
        rank_r,
        rank_g,
        rank_out_max: rank_out.iter().copied().max().unwrap_or(0),
        rank_f,
        rank_out,
        violations,
    })
}

/// Least-squares residuals of projecting a transformed slice onto the column
/// space of `G^T` (its columns) and the row space of `R` (its rows).
///
/// Returns `(g_residual, r_residual)`, both relative to `||out||_F`.
pub fn subspace_residuals(out: ArrayView2<'_, f64>, kernels: &ReverbKernelPair) -> (f64, f64) {
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let o = DMatrix::from_fn(out.nrows(), out.ncols(), |i, j| out[[i, j]]);
    let gt = DMatrix::from_fn(kernels.generations(), kernels.steps(), |i, j| kernels.g[[j, i]]);
    let rt = DMatrix::from_fn(kernels.future_steps(), kernels.steps(), |i, j| kernels.r[[j, i]]);
    // columns of out lie in Col(G^T); rows of out lie in Row(R) = Col(R^T)
    let col_res = projection_residual(&gt, &o);
    let row_res = projection_residual(&rt, &o.transpose());
    (col_res / norm, row_res / norm)
}

fn projection_residual(basis: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    let svd = basis.clone().svd(true, true);
    let max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let x = svd.solve(target, RANK_TOLERANCE * max.max(f64::MIN_POSITIVE)).expect("svd computed with both factors");
    (basis * x - target).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn similarity_outer_product() {
        let f = array![[1.0], [2.0]];
        let s = sequential_similarity(f.view()).unwrap();
        assert_eq!(s.slice(0), array![[1.0, 2.0], [2.0, 4.0]]);
    }

    #[test]
    fn zero_column_gives_zero_slice() {
        let f = array![[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0]];
        let s = sequential_similarity(f.view()).unwrap();
        assert!(s.slice(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn similarity_rejects_nan() {
        let f = array![[1.0], [f64::NAN]];
        assert!(sequential_similarity(f.view()).is_err());
    }

    #[test]
    fn bound_kernel_values() {
        let b = bound_kernel(&array![[0.0, 0.549_306_1, 40.0]]);
        assert_eq!(b[[0, 0]], 0.0);
        assert!((b[[0, 1]] - 0.5).abs() < 1e-6);
        assert!(b[[0, 2]] <= 1.0 && b[[0, 2]] > 0.999_999);
        let seq: Vec<f64> = (0..10).map(|i| (i as f64).tanh()).collect();
        assert!(seq.windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn identity_kernels_reproduce_input() {
        let f = array![[1.0, 0.5], [-2.0, 3.0], [0.25, 1.0]];
        let sim = sequential_similarity(f.view()).unwrap();
        let eye = Array2::eye(3);
        let k = ReverbKernelPair::new(eye.clone(), eye).unwrap();
        let out = reverberation_transform(&sim, &k).unwrap();
        assert_eq!(out.values, sim.values);
    }

    #[test]
    fn single_entry_r_selects_a_column() {
        let f = array![[1.0], [2.0], [3.0]];
        let sim = sequential_similarity(f.view()).unwrap();
        // future step 1 reads observed step 2 only
        let mut r = Array2::zeros((3, 2));
        r[[2, 1]] = 1.0;
        let k = ReverbKernelPair::new(r, Array2::eye(3)).unwrap();
        let out = reverberation_transform(&sim, &k).unwrap();
        for g in 0..3 {
            assert_eq!(out.values[[g, 0, 0]], 0.0);
            assert_eq!(out.values[[g, 1, 0]], sim.values[[g, 2, 0]]);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = array![[1.0], [2.0]];
        let sim = sequential_similarity(f.view()).unwrap();
        let k = ReverbKernelPair::new(Array2::zeros((3, 2)), Array2::zeros((3, 2))).unwrap();
        assert!(matches!(reverberation_transform(&sim, &k), Err(Error::Shape(_))));
        assert!(ReverbKernelPair::new(Array2::zeros((3, 2)), Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn out_of_range_kernel_rejected() {
        assert!(ReverbKernelPair::new(array![[1.5]], array![[0.0]]).is_err());
        assert!(ReverbKernelPair::from_raw(&array![[1.5]], &array![[0.0]]).is_ok());
    }

    #[test]
    fn factorized_route_matches_explicit() {
        let f = array![[0.3, -1.2], [0.7, 0.1], [-0.4, 0.9], [1.1, 0.0]];
        let r = array![[0.1, 0.2, -0.3], [0.5, -0.6, 0.2], [0.0, 0.9, 0.4], [-0.7, 0.3, 0.8]];
        let g = array![[0.2, -0.1], [0.4, 0.6], [-0.9, 0.3], [0.05, 0.7]];
        let k = ReverbKernelPair::new(r, g).unwrap();
        let explicit = reverberation_transform(&sequential_similarity(f.view()).unwrap(), &k).unwrap();
        let fact = transform_features(f.view(), &k).unwrap();
        for (a, b) in explicit.values.iter().zip(fact.values.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn duplicated_g_columns_lower_rank() {
        let g = array![[0.1, 0.1, 0.5], [0.3, 0.3, -0.2], [0.7, 0.7, 0.9]];
        assert_eq!(numerical_rank(g.view()), 2);
    }

    #[test]
    fn rank_one_slice_bounds_output() {
        let f = array![[0.3, 1.0], [0.7, -1.0], [-0.4, 0.5]];
        let sim = sequential_similarity(f.view()).unwrap();
        let r = array![[0.1, 0.2, -0.3, 0.9], [0.5, -0.6, 0.2, 0.1], [0.0, 0.9, 0.4, -0.5]];
        let g = array![[0.2, -0.1], [0.4, 0.6], [-0.9, 0.3]];
        let rep = rank_report(&ReverbKernelPair::new(r, g).unwrap(), &sim.values).unwrap();
        assert!(rep.rank_out.iter().all(|&r| r <= 1));
        assert_eq!(rep.rank_r, 3);
        assert_eq!(rep.rank_g, 2);
        assert!(rep.bound_holds());
    }
}
