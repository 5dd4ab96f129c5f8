//! Reverberation curves: column-normalized squared kernel entries.
//!
//! `r(t | t_p) = R[t_p, t]² / Σ_x R[x, t]²`, optionally with every row scaled
//! by one generating-kernel column (`altered` curves). Social kernels are read
//! per partition from the partition-major layout. A column whose denominator
//! is zero is reported as uniform `1/T_h` and flagged degenerate.

use std::fmt;
use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveKind {
    Non,
    NonAltered,
    Soc,
    SocAltered,
}

impl CurveKind {
    pub fn name(self) -> &'static str {
        match self {
            CurveKind::Non => "non",
            CurveKind::NonAltered => "non_altered",
            CurveKind::Soc => "soc",
            CurveKind::SocAltered => "soc_altered",
        }
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One curve family: `values[[t_p, t]]` for every past step `t_p` and
/// future step `t` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyCurves {
    pub kind: CurveKind,
    pub partition: Option<usize>,
    pub generation: Option<usize>,
    pub values: Array2<f64>,
    /// Per future step: the denominator was zero.
    pub degenerate: Vec<bool>,
}

impl LatencyCurves {
    pub fn past_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn future_steps(&self) -> usize {
        self.values.ncols()
    }

    fn key(&self) -> (CurveKind, Option<usize>, Option<usize>, (usize, usize)) {
        (self.kind, self.partition, self.generation, self.values.dim())
    }
}

fn normalize(weighted: Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let (tp, tf) = weighted.dim();
    let mut values = weighted.mapv(|v| v * v);
    let mut degenerate = vec![false; tf];
    for (mut col, flag) in values.columns_mut().into_iter().zip(degenerate.iter_mut()) {
        let denom: f64 = col.sum();
        if denom > 0.0 && denom.is_finite() {
            col.mapv_inplace(|v| v / denom);
        } else {
            col.fill(1.0 / tp as f64);
            *flag = true;
        }
    }
    (values, degenerate)
}

fn scaled(r: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>, k: usize) -> Result<Array2<f64>> {
    if g.nrows() != r.nrows() {
        return Err(Error::Shape(format!("R has {} rows, G has {}", r.nrows(), g.nrows())));
    }
    if k >= g.ncols() {
        return Err(Error::Shape(format!("generation {k} out of range for {} columns", g.ncols())));
    }
    let col = g.column(k);
    Ok(Array2::from_shape_fn(r.dim(), |(i, t)| r[[i, t]] * col[i]))
}

pub fn curve_non(r: ArrayView2<'_, f64>) -> LatencyCurves {
    let (values, degenerate) = normalize(r.to_owned());
    LatencyCurves { kind: CurveKind::Non, partition: None, generation: None, values, degenerate }
}

/// Altered curve of generation `k` (0-based).
pub fn curve_non_altered(r: ArrayView2<'_, f64>, g: ArrayView2<'_, f64>, k: usize) -> Result<LatencyCurves> {
    let (values, degenerate) = normalize(scaled(r, g, k)?);
    Ok(LatencyCurves { kind: CurveKind::NonAltered, partition: None, generation: Some(k), values, degenerate })
}

fn block(m: ArrayView2<'_, f64>, n_theta: usize, n: usize) -> Result<ArrayView2<'_, f64>> {
    if n_theta == 0 || !m.nrows().is_multiple_of(n_theta) || n >= n_theta {
        return Err(Error::Shape(format!("cannot take partition {n} of {n_theta} from {} rows", m.nrows())));
    }
    let steps = m.nrows() / n_theta;
    Ok(m.slice_move(s![n * steps..(n + 1) * steps, ..]))
}

/// Curve of partition `n` (0-based) of a partition-major social kernel.
pub fn curve_soc(r_soc: ArrayView2<'_, f64>, n_theta: usize, n: usize) -> Result<LatencyCurves> {
    let (values, degenerate) = normalize(block(r_soc, n_theta, n)?.to_owned());
    Ok(LatencyCurves { kind: CurveKind::Soc, partition: Some(n), generation: None, values, degenerate })
}

pub fn curve_soc_altered(
    r_soc: ArrayView2<'_, f64>,
    g_soc: ArrayView2<'_, f64>,
    n_theta: usize,
    n: usize,
    k: usize,
) -> Result<LatencyCurves> {
    let r = block(r_soc, n_theta, n)?;
    let g = block(g_soc, n_theta, n)?;
    let (values, degenerate) = normalize(scaled(r, g, k)?);
    Ok(LatencyCurves { kind: CurveKind::SocAltered, partition: Some(n), generation: Some(k), values, degenerate })
}

/// Every family for one agent, in export order. Altered curves need a
/// generating kernel and are skipped when it is absent.
pub fn all_curves(
    non: Option<(ArrayView2<'_, f64>, Option<ArrayView2<'_, f64>>)>,
    soc: Option<(ArrayView2<'_, f64>, Option<ArrayView2<'_, f64>>)>,
    n_theta: usize,
) -> Result<Vec<LatencyCurves>> {
    let mut out = Vec::new();
    if let Some((r, g)) = non {
        out.push(curve_non(r));
        if let Some(g) = g {
            for k in 0..g.ncols() {
                out.push(curve_non_altered(r, g, k)?);
            }
        }
    }
    if let Some((r, g)) = soc {
        for n in 0..n_theta {
            out.push(curve_soc(r, n_theta, n)?);
        }
        if let Some(g) = g {
            for n in 0..n_theta {
                for k in 0..g.ncols() {
                    out.push(curve_soc_altered(r, g, n_theta, n, k)?);
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise mean over agents. Each agent must supply the same families in
/// the same order. A step is degenerate in the mean if it was for any agent.
pub fn average_curves(per_agent: &[Vec<LatencyCurves>]) -> Result<Vec<LatencyCurves>> {
    let first = per_agent.first().ok_or_else(|| Error::InsufficientData("no curves to average".into()))?;
    let n = per_agent.len() as f64;
    let mut out = Vec::with_capacity(first.len());
    for (i, base) in first.iter().enumerate() {
        let mut sum = Array2::<f64>::zeros(base.values.dim());
        let mut degenerate = vec![false; base.future_steps()];
        for agent in per_agent {
            let c = agent
                .get(i)
                .filter(|c| c.key() == base.key())
                .ok_or_else(|| Error::Shape("agents disagree on curve families".into()))?;
            sum += &c.values;
            for (d, &x) in degenerate.iter_mut().zip(&c.degenerate) {
                *d |= x;
            }
        }
        out.push(LatencyCurves { values: sum / n, degenerate, ..base.clone() });
    }
    if per_agent.iter().any(|a| a.len() != first.len()) {
        return Err(Error::Shape("agents disagree on curve families".into()));
    }
    Ok(out)
}

pub const CSV_HEADER: &str = "kind,agent,partition,generation,t_p,t,value,degenerate";

/// Appends CSV rows for `curves`. Steps and indices are 1-based; future
/// steps are numbered `T_h+1 ..= T_h+T_f`.
pub fn write_csv_rows(out: &mut String, agent: &str, curves: &[LatencyCurves]) {
    let opt = |v: Option<usize>| v.map_or(String::new(), |v| (v + 1).to_string());
    for c in curves {
        let tp = c.past_steps();
        for p in 0..tp {
            for t in 0..c.future_steps() {
                let _ = writeln!(
                    out,
                    "{},{agent},{},{},{},{},{},{}",
                    c.kind,
                    opt(c.partition),
                    opt(c.generation),
                    p + 1,
                    tp + t + 1,
                    c.values[[p, t]],
                    u8::from(c.degenerate[t])
                );
            }
        }
    }
}
