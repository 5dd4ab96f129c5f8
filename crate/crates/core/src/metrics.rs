//! Displacement metrics over `K` hypotheses shaped `(K, t_f, m)`.

use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(preds: &Array3<f64>, gt: ArrayView2<'_, f64>) -> Result<()> {
    let (k, tf, m) = preds.dim();
    if k == 0 || tf == 0 || (tf, m) != gt.dim() {
        return Err(Error::Shape(format!("predictions {:?} vs ground truth {:?}", preds.dim(), gt.dim())));
    }
    Ok(())
}

/// Per-hypothesis `(ADE, FDE)`.
pub fn per_row(preds: &Array3<f64>, gt: ArrayView2<'_, f64>) -> Result<Vec<(f64, f64)>> {
    check(preds, gt)?;
    let tf = gt.nrows();
    Ok(preds
        .axis_iter(Axis(0))
        .map(|row| {
            let dists: Vec<f64> = (0..tf)
                .map(|t| row.row(t).iter().zip(gt.row(t)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .collect();
            (dists.iter().sum::<f64>() / tf as f64, dists[tf - 1])
        })
        .collect())
}

/// `(minADE, minFDE)`; the two minima are taken independently.
pub fn min_ade_fde(preds: &Array3<f64>, gt: ArrayView2<'_, f64>) -> Result<(f64, f64)> {
    let rows = per_row(preds, gt)?;
    let min = |f: fn(&(f64, f64)) -> f64| rows.iter().map(f).fold(f64::INFINITY, f64::min);
    Ok((min(|r| r.0), min(|r| r.1)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatMetrics {
    pub mean_ade: f64,
    pub std_ade: f64,
    pub mean_fde: f64,
    pub std_fde: f64,
}

/// Mean and population standard deviation of the per-hypothesis ADE/FDE.
pub fn stat_ade_fde(preds: &Array3<f64>, gt: ArrayView2<'_, f64>) -> Result<StatMetrics> {
    let rows = per_row(preds, gt)?;
    let (ade_mean, ade_std) = mean_std(rows.iter().map(|r| r.0));
    let (fde_mean, fde_std) = mean_std(rows.iter().map(|r| r.1));
    Ok(StatMetrics { mean_ade: ade_mean, std_ade: ade_std, mean_fde: fde_mean, std_fde: fde_std })
}

/// Arithmetic mean and population standard deviation.
pub fn mean_std(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.into_iter().collect();
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{s, Array2};

    fn offsets(rows: &[f64]) -> (Array3<f64>, Array2<f64>) {
        let gt = Array2::from_shape_fn((5, 2), |(t, j)| (t * 2 + j) as f64 * 0.3);
        let mut p = Array3::zeros((rows.len(), 5, 2));
        for (k, &o) in rows.iter().enumerate() {
            p.slice_mut(s![k, .., ..]).assign(&gt);
            p.slice_mut(s![k, .., 0]).mapv_inplace(|v| v + o);
        }
        (p, gt)
    }

    #[test]
    fn exact_row_gives_zero() {
        let (p, gt) = offsets(&[0.0, 4.0]);
        assert_eq!(min_ade_fde(&p, gt.view()).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn constant_offsets() {
        let (p, gt) = offsets(&[1.0, 2.0]);
        let (a, f) = min_ade_fde(&p, gt.view()).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (f - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_statistics() {
        let (p, gt) = offsets(&[1.0, 3.0]);
        let s = stat_ade_fde(&p, gt.view()).unwrap();
        assert!((s.mean_ade - 2.0).abs() < 1e-12 && (s.std_ade - 1.0).abs() < 1e-12);
        let (p, gt) = offsets(&[2.0, 2.0, 2.0]);
        assert!(stat_ade_fde(&p, gt.view()).unwrap().std_fde.abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let (p, _) = offsets(&[1.0]);
        assert!(min_ade_fde(&p, Array2::zeros((4, 2)).view()).is_err());
        assert!(min_ade_fde(&Array3::zeros((0, 5, 2)), Array2::zeros((5, 2)).view()).is_err());
    }
}
