//! Central finite-difference checks of analytic gradients.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::Rng;

use super::params::ParamStore;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor so entries whose true gradient is ~0 are judged on
/// absolute error instead of dividing noise by noise.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tol
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Checks `grad` of a scalar function of a flat vector at `x`.
pub fn check_fn(f: impl Fn(&[f64]) -> f64, grad: &[f64], x: &[f64], h: f64) -> GradCheckReport {
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        report.record("x", i, grad[i], (up - down) / (2.0 * h));
    }
    report
}

/// Checks parameter gradients of `loss`, which must return the scalar loss
/// and per-parameter gradients for the store it is given.
///
/// At most `per_param` entries of each tensor are probed (chosen with `rng`);
/// `None` probes every entry.
pub fn check_params<F>(
    params: &ParamStore,
    loss: F,
    h: f64,
    per_param: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<Option<Array2<f64>>>)>,
{
    let (_, grads) = loss(params)?;
    let mut report = GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None };
    let mut probe = params.clone();
    for (id, name, value) in params.iter() {
        let n = value.len();
        let picks: Vec<usize> = match per_param {
            Some(k) if k < n => sample(rng, n, k).into_iter().collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let original = value.as_slice().expect("standard layout")[idx];
            let set = |p: &mut ParamStore, v: f64| {
                p.value_mut(id).as_slice_mut().expect("standard layout")[idx] = v;
            };
            set(&mut probe, original + h);
            let (up, _) = loss(&probe)?;
            set(&mut probe, original - h);
            let (down, _) = loss(&probe)?;
            set(&mut probe, original);
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[id].as_ref().map_or(0.0, |g| g.as_slice().expect("standard layout")[idx]);
            report.record(name, idx, analytic, numeric);
        }
    }
    Ok(report)
}
