//! Least-squares linear reference motion.
//!
//! The observation `X` (`t_h x m`) is fitted by `A_h w` where row `t` of the
//! design is `(1, t)` for `t = 1..=t_h`; the fit is extrapolated with rows
//! `(1, t)` for `t = t_h+1..=t_h+t_f`.

use ndarray::{Array2, ArrayView2};

use crate::error::{ensure_finite, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearFit {
    /// `(2, m)`: intercept row then slope row.
    pub w_lin: Array2<f64>,
    /// `(t_h, m)`.
    pub fitted: Array2<f64>,
    /// `(t_f, m)`.
    pub predicted: Array2<f64>,
}

impl LinearFit {
    pub fn slope(&self) -> ndarray::ArrayView1<'_, f64> {
        self.w_lin.row(1)
    }
}

/// Design rows `(1, t)` for `t = first..first + len`.
pub fn design(first: usize, len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, 2), |(i, j)| if j == 0 { 1.0 } else { (first + i) as f64 })
}

pub fn linear_fit(x: ArrayView2<'_, f64>, t_f: usize) -> Result<LinearFit> {
    let t_h = x.nrows();
    if t_h < 2 {
        return Err(Error::InsufficientData(format!("linear fit needs at least 2 observed steps, got {t_h}")));
    }
    ensure_finite("observation", x.iter())?;
    let a_h = design(1, t_h);
    let normal = a_h.t().dot(&a_h);
    let rhs = a_h.t().dot(&x);
    let w_lin = solve2(&normal, &rhs)?;
    let fitted = a_h.dot(&w_lin);
    let predicted = design(t_h + 1, t_f).dot(&w_lin);
    Ok(LinearFit { w_lin, fitted, predicted })
}

pub fn residual(x: ArrayView2<'_, f64>, fit: &LinearFit) -> Result<Array2<f64>> {
    if x.dim() != fit.fitted.dim() {
        return Err(Error::Shape(format!("observation {:?} vs fit {:?}", x.dim(), fit.fitted.dim())));
    }
    Ok(&x - &fit.fitted)
}

/// Solves the 2x2 system `a w = b` by Gaussian elimination with partial
/// pivoting.
fn solve2(a: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    let mut a = a.clone();
    let mut b = b.clone();
    if a[[1, 0]].abs() > a[[0, 0]].abs() {
        for j in 0..2 {
            a.swap([0, j], [1, j]);
        }
        for j in 0..b.ncols() {
            b.swap([0, j], [1, j]);
        }
    }
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if a[[0, 0]].abs() <= f64::EPSILON * scale {
        return Err(Error::InsufficientData("singular linear design".into()));
    }
    let factor = a[[1, 0]] / a[[0, 0]];
    let pivot = a[[1, 1]] - factor * a[[0, 1]];
    if pivot.abs() <= 1e-12 * scale {
        return Err(Error::InsufficientData("singular linear design".into()));
    }
    let mut w = Array2::zeros((2, b.ncols()));
    for j in 0..b.ncols() {
        let b1 = b[[1, j]] - factor * b[[0, j]];
        w[[1, j]] = b1 / pivot;
        w[[0, j]] = (b[[0, j]] - a[[0, 1]] * w[[1, j]]) / a[[0, 0]];
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn exactly_linear_extrapolates_exactly() {
        let x = array![[0.0, 0.0], [1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        let fit = linear_fit(x.view(), 3).unwrap();
        let expected = array![[4.0, 8.0], [5.0, 10.0], [6.0, 12.0]];
        for (a, b) in fit.predicted.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let r = residual(x.view(), &fit).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zigzag_matches_centered_closed_form() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 0.0], [1.0, 0.0]];
        let fit = linear_fit(x.view(), 2).unwrap();
        // centered slope: sum (t - 2.5)(x - 0.5) / sum (t - 2.5)^2 = 1.0 / 5.0
        let slope = 1.0 / 5.0;
        let intercept = 0.5 - slope * 2.5;
        assert!((fit.w_lin[[1, 0]] - slope).abs() < 1e-12);
        assert!((fit.w_lin[[0, 0]] - intercept).abs() < 1e-12);
        assert!(fit.w_lin.column(1).iter().all(|v| v.abs() < 1e-12));
        assert!((fit.predicted[[0, 0]] - (intercept + 5.0 * slope)).abs() < 1e-12);
    }

    #[test]
    fn constant_trajectory_has_zero_slope() {
        let x = Array2::from_elem((8, 2), 3.25);
        let fit = linear_fit(x.view(), 12).unwrap();
        assert!(fit.slope().iter().all(|v| v.abs() < 1e-12));
        assert!(fit.predicted.iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn residual_orthogonal_to_design() {
        let x = array![[0.3, -1.0], [1.7, 0.2], [1.9, 1.1], [3.6, 1.0], [4.1, 2.5]];
        let fit = linear_fit(x.view(), 1).unwrap();
        let r = residual(x.view(), &fit).unwrap();
        let proj = design(1, 5).t().dot(&r);
        assert!(proj.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn too_short_rejected() {
        let x = array![[1.0, 2.0]];
        assert!(matches!(linear_fit(x.view(), 3), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn residual_shape_checked() {
        let x = Array2::zeros((4, 2));
        let fit = linear_fit(x.view(), 2).unwrap();
        assert!(residual(Array2::zeros((3, 2)).view(), &fit).is_err());
    }
}
