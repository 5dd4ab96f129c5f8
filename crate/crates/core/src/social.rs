//! Angle-partitioned social encoding.
//!
//! Neighbors are binned into `N_θ` angular sectors around the ego. Each
//! neighbor contributes `E_soc(e_trl(ego) ⊙ e_trl(neighbor))`, and each
//! partition holds the mean over its neighbors (zero when empty).
//!
//! Flattened layout: the `(T, N_θ, d)` representation becomes `(N_θ·T, d)`
//! with row `n·T + t`, so each partition is one contiguous block of `T` rows.

use std::cmp::Ordering;
use std::f64::consts::TAU;

use ndarray::{Array2, Array3, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, MlpSpec, ParamStore, Tape, Var};
use crate::transforms::{forward_array, TransformKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartitionAssignment {
    pub index: usize,
    /// Ego and neighbor coincide, so the angle is undefined.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocialRepr {
    /// `(T, N_θ, d)`.
    pub values: Array3<f64>,
}

impl SocialRepr {
    /// `(N_θ·T, d)` in partition-major order.
    pub fn flatten(&self) -> Array2<f64> {
        let (t, n, d) = self.values.dim();
        let mut out = Array2::zeros((n * t, d));
        for p in 0..n {
            for s in 0..t {
                for j in 0..d {
                    out[[flat_index(p, s, t), j]] = self.values[[s, p, j]];
                }
            }
        }
        out
    }
}

/// Row of step `t` of partition `n` in the flattened layout.
pub fn flat_index(n: usize, t: usize, steps: usize) -> usize {
    n * steps + t
}

/// Trajectory shifted so its final point sits at the origin.
pub fn translate(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let last = x.row(x.nrows() - 1).to_owned();
    &x - &last
}

pub fn partition_of(ego: [f64; 2], neighbor: [f64; 2], n_theta: usize) -> PartitionAssignment {
    let (dx, dy) = (neighbor[0] - ego[0], neighbor[1] - ego[1]);
    if dx == 0.0 && dy == 0.0 {
        return PartitionAssignment { index: 0, degenerate: true };
    }
    let mut angle = dy.atan2(dx);
    if angle < 0.0 {
        angle += TAU;
    }
    // atan2 of a tiny negative dy can round to exactly TAU after wrapping
    let index = ((angle * n_theta as f64 / TAU).floor() as usize).min(n_theta - 1);
    PartitionAssignment { index, degenerate: false }
}

fn point(x: ArrayView2<'_, f64>, row: usize) -> [f64; 2] {
    [x[[row, 0]], x[[row, 1]]]
}

/// Partition of `neighbor` relative to `ego` at the final observed frame.
pub fn assign_partition(
    ego: ArrayView2<'_, f64>,
    neighbor: ArrayView2<'_, f64>,
    n_theta: usize,
) -> Result<PartitionAssignment> {
    check_pair(ego, neighbor)?;
    if n_theta == 0 {
        return Err(Error::Config("n_theta must be positive".into()));
    }
    let last = ego.nrows() - 1;
    Ok(partition_of(point(ego, last), point(neighbor, last), n_theta))
}

fn check_pair(ego: ArrayView2<'_, f64>, neighbor: ArrayView2<'_, f64>) -> Result<()> {
    if ego.dim() != neighbor.dim() || ego.ncols() < 2 || ego.nrows() == 0 {
        return Err(Error::Shape(format!(
            "ego {:?} and neighbor {:?} must share a (t, >=2) shape",
            ego.dim(),
            neighbor.dim()
        )));
    }
    Ok(())
}

/// Partition per neighbor per spectral step. Static assignment repeats the
/// final-frame partition; per-step assignment reads the last time frame
/// covered by each spectral step.
pub fn partitions(
    ego: ArrayView2<'_, f64>,
    neighbors: &[Array2<f64>],
    n_theta: usize,
    steps: usize,
    per_step: bool,
) -> Result<Vec<Vec<usize>>> {
    let t_h = ego.nrows();
    neighbors
        .iter()
        .map(|nb| {
            check_pair(ego, nb.view())?;
            Ok((0..steps)
                .map(|k| {
                    let frame = if per_step { ((k + 1) * t_h) / steps - 1 } else { t_h - 1 };
                    partition_of(point(ego, frame), point(nb.view(), frame), n_theta).index
                })
                .collect())
        })
        .collect()
}

/// Order in which neighbor contributions are summed. Sorting by coordinates
/// makes the result bit-identical under any permutation of the input list.
pub fn canonical_order(neighbors: &[Array2<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..neighbors.len()).collect();
    idx.sort_by(|&a, &b| {
        neighbors[a]
            .iter()
            .zip(neighbors[b].iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    idx
}

#[derive(Debug, Clone, PartialEq)]
pub struct SocialEncoder {
    pub trl: Mlp,
    pub soc: Mlp,
    pub kind: TransformKind,
    pub n_theta: usize,
}

impl SocialEncoder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: TransformKind,
        m: usize,
        d: usize,
        n_theta: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let width = kind.spectral_dims(m);
        Ok(Self {
            trl: Mlp::new(store, &format!("{name}.trl"), &MlpSpec::uniform(&[width, d, d], Activation::Tanh), rng)?,
            soc: Mlp::new(store, &format!("{name}.soc"), &MlpSpec::uniform(&[d, d, d], Activation::Tanh), rng)?,
            kind,
            n_theta,
        })
    }

    pub fn translate_embed(&self, tape: &mut Tape<'_>, x: ArrayView2<'_, f64>) -> Result<Var> {
        let spec = forward_array(translate(x).view(), self.kind)?;
        let v = tape.input(spec);
        self.trl.apply(tape, v)
    }

    pub fn pairwise(&self, tape: &mut Tape<'_>, e_i: Var, e_j: Var) -> Result<Var> {
        let p = tape.mul(e_i, e_j)?;
        self.soc.apply(tape, p)
    }

    /// Flattened `(N_θ·T, d)` social representation on the tape.
    ///
    /// `parts[j][t]` is the partition of neighbor `j` at spectral step `t`.
    pub fn represent(
        &self,
        tape: &mut Tape<'_>,
        ego: ArrayView2<'_, f64>,
        neighbors: &[Array2<f64>],
        parts: &[Vec<usize>],
    ) -> Result<Var> {
        let d = self.soc.out_dim();
        let steps = self.kind.spectral_len(ego.nrows())?;
        if parts.len() != neighbors.len() || parts.iter().any(|p| p.len() != steps) {
            return Err(Error::Shape("partition table does not match neighbors".into()));
        }
        let order = canonical_order(neighbors);
        let pair: Vec<Var> = if neighbors.is_empty() {
            Vec::new()
        } else {
            let e_ego = self.translate_embed(tape, ego)?;
            order
                .iter()
                .map(|&j| {
                    let e_j = self.translate_embed(tape, neighbors[j].view())?;
                    self.pairwise(tape, e_ego, e_j)
                })
                .collect::<Result<_>>()?
        };
        let mut blocks = Vec::with_capacity(self.n_theta);
        for n in 0..self.n_theta {
            let counts: Vec<usize> = (0..steps).map(|t| parts.iter().filter(|p| p[t] == n).count()).collect();
            let mut acc: Option<Var> = None;
            for (slot, &j) in order.iter().enumerate() {
                let hits: Vec<bool> = (0..steps).map(|t| parts[j][t] == n).collect();
                if !hits.iter().any(|&h| h) {
                    continue;
                }
                let term = if hits.iter().all(|&h| h) && counts.iter().all(|&c| c == counts[0]) {
                    tape.scale(pair[slot], 1.0 / counts[0] as f64)
                } else {
                    let mask =
                        Array2::from_shape_fn((steps, d), |(t, _)| if hits[t] { 1.0 / counts[t] as f64 } else { 0.0 });
                    let mv = tape.input(mask);
                    tape.mul(pair[slot], mv)?
                };
                acc = Some(match acc {
                    Some(a) => tape.add(a, term)?,
                    None => term,
                });
            }
            blocks.push(match acc {
                Some(a) => a,
                None => tape.input(Array2::zeros((steps, d))),
            });
        }
        tape.concat_rows(&blocks)
    }
}

/// Plain-array entry point: `E_trl(T[x − x_last])`.
pub fn translate_embed(enc: &SocialEncoder, params: &ParamStore, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params);
    let v = enc.translate_embed(&mut tape, x)?;
    Ok(tape.value(v).to_owned())
}

pub fn pairwise_social(
    enc: &SocialEncoder,
    params: &ParamStore,
    e_i: &Array2<f64>,
    e_j: &Array2<f64>,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new(params);
    let a = tape.input(e_i.clone());
    let b = tape.input(e_j.clone());
    let v = enc.pairwise(&mut tape, a, b)?;
    Ok(tape.value(v).to_owned())
}

pub fn social_representation(
    enc: &SocialEncoder,
    params: &ParamStore,
    ego: ArrayView2<'_, f64>,
    neighbors: &[Array2<f64>],
    per_step: bool,
) -> Result<SocialRepr> {
    let steps = enc.kind.spectral_len(ego.nrows())?;
    let parts = partitions(ego, neighbors, enc.n_theta, steps, per_step)?;
    let mut tape = Tape::new(params);
    let flat = enc.represent(&mut tape, ego, neighbors, &parts)?;
    let flat = tape.value(flat);
    let d = flat.ncols();
    let values = Array3::from_shape_fn((steps, enc.n_theta, d), |(t, n, j)| flat[[flat_index(n, t, steps), j]]);
    Ok(SocialRepr { values })
}
