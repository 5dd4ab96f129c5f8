//! Invertible sequence transforms into a time-frequency representation.
//!
//! Every kind maps a `(t, m)` sequence onto a `(T, M)` spectrum. The three
//! non-trivial kinds are single-level, orthonormal and critically sampled, so
//! `T = t/2`, `M = 2m`. Columns are laid out channel-major: the first `m`
//! columns hold the low-pass (or real) channel for each spatial dimension, the
//! next `m` the high-pass (or imaginary) channel.
//!
//! * `haar`: pairwise average/difference scaled by `1/sqrt(2)`. One vanishing
//!   moment and the shortest possible support, so every spectral step covers
//!   exactly two adjacent frames.
//! * `db2`: Daubechies-2 filter bank with periodic boundary extension. Two
//!   vanishing moments: detail coefficients of an affine segment vanish
//!   wherever the filter does not wrap around the boundary.
//! * `dft`: orthonormal real Fourier basis. Row 0 packs the DC term with the
//!   Nyquist term; rows `1..T` carry the real and imaginary parts of bins
//!   `1..T`. The spectrum has no time localization at all.
//! * `none`: identity, `T = t`, `M = m`.
//!
//! All kinds are linear maps along the time axis, so each one is also exposed
//! as its analysis matrix ([`basis`]) for use inside differentiable code.

use std::f64::consts::{PI, SQRT_2};
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// A trajectory (or residual) sampled at a fixed interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeq {
    /// `(t, m)`: time steps by spatial dimensions, meters.
    pub values: Array2<f64>,
    /// Seconds per step.
    pub dt: f64,
}

impl TimeSeq {
    pub fn new(values: Array2<f64>, dt: f64) -> Result<Self> {
        if values.nrows() < 2 {
            return Err(Error::InsufficientData(format!("a sequence needs at least 2 steps, got {}", values.nrows())));
        }
        Ok(Self { values, dt })
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    /// `(T, M)`.
    pub values: Array2<f64>,
    pub kind: TransformKind,
    /// Step interval of the time-domain sequence this came from.
    pub dt: f64,
}

impl Spectrum {
    pub fn steps(&self) -> usize {
        self.values.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    None,
    Dft,
    Db2,
    #[default]
    Haar,
}

impl TransformKind {
    pub const ALL: [TransformKind; 4] =
        [TransformKind::None, TransformKind::Dft, TransformKind::Db2, TransformKind::Haar];

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::None => "none",
            TransformKind::Dft => "dft",
            TransformKind::Db2 => "db2",
            TransformKind::Haar => "haar",
        }
    }

    /// Number of coefficient channels per spatial dimension.
    pub fn channels(self) -> usize {
        match self {
            TransformKind::None => 1,
            _ => 2,
        }
    }

    /// Spectral length for a time-domain length `t`.
    pub fn spectral_len(self, t: usize) -> Result<usize> {
        self.check_len(t)?;
        Ok(t / self.channels())
    }

    /// Spectral width for `m` spatial dimensions.
    pub fn spectral_dims(self, m: usize) -> usize {
        m * self.channels()
    }

    fn check_len(self, t: usize) -> Result<()> {
        if t == 0 {
            return Err(Error::InsufficientData("empty sequence".into()));
        }
        if self.channels() == 2 && !t.is_multiple_of(2) {
            return Err(Error::OddLength { len: t, kind: self.name() });
        }
        Ok(())
    }
}

impl fmt::Display for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TransformKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(TransformKind::None),
            "dft" => Ok(TransformKind::Dft),
            "db2" => Ok(TransformKind::Db2),
            "haar" => Ok(TransformKind::Haar),
            other => Err(Error::Config(format!("unknown transform `{other}` (expected none, dft, db2 or haar)"))),
        }
    }
}

/// Daubechies-2 low-pass analysis filter.
pub(crate) fn db2_lowpass() -> [f64; 4] {
    let s3 = 3f64.sqrt();
    let n = 4.0 * SQRT_2;
    [(1.0 + s3) / n, (3.0 + s3) / n, (3.0 - s3) / n, (1.0 - s3) / n]
}

/// Quadrature-mirror high-pass filter `g[n] = (-1)^n h[3 - n]`.
pub(crate) fn db2_highpass() -> [f64; 4] {
    let h = db2_lowpass();
    [h[3], -h[2], h[1], -h[0]]
}

/// Orthogonal `(t, t)` analysis matrix of `kind`.
///
/// Row `c * T + k` produces coefficient `k` of channel `c`, so the spectrum is
/// `spectrum[k, c*m + j] = sum_n basis[c*T + k, n] * x[n, j]` and the inverse
/// is the transpose.
pub fn basis(kind: TransformKind, t: usize) -> Result<Array2<f64>> {
    kind.check_len(t)?;
    let half = t / 2;
    let mut q = Array2::<f64>::zeros((t, t));
    match kind {
        TransformKind::None => {
            q.diag_mut().fill(1.0);
        }
        TransformKind::Haar => {
            let r = 1.0 / SQRT_2;
            for k in 0..half {
                q[[k, 2 * k]] = r;
                q[[k, 2 * k + 1]] = r;
                q[[half + k, 2 * k]] = r;
                q[[half + k, 2 * k + 1]] = -r;
            }
        }
        TransformKind::Db2 => {
            let h = db2_lowpass();
            let g = db2_highpass();
            for k in 0..half {
                for n in 0..4 {
                    let col = (2 * k + n) % t;
                    q[[k, col]] += h[n];
                    q[[half + k, col]] += g[n];
                }
            }
        }
        TransformKind::Dft => {
            let tf = t as f64;
            let dc = 1.0 / tf.sqrt();
            let ac = (2.0 / tf).sqrt();
            for n in 0..t {
                let nf = n as f64;
                q[[0, n]] = dc;
                q[[half, n]] = if n % 2 == 0 { dc } else { -dc };
                for k in 1..half {
                    let phase = 2.0 * PI * k as f64 * nf / tf;
                    q[[k, n]] = ac * phase.cos();
                    q[[half + k, n]] = -ac * phase.sin();
                }
            }
        }
    }
    Ok(q)
}

/// Forward transform on a raw `(t, m)` array.
pub fn forward_array(x: ArrayView2<'_, f64>, kind: TransformKind) -> Result<Array2<f64>> {
    let (t, m) = x.dim();
    kind.check_len(t)?;
    ensure_finite("transform input", x.iter())?;
    match kind {
        TransformKind::None => Ok(x.to_owned()),
        TransformKind::Haar => {
            let half = t / 2;
            let r = 1.0 / SQRT_2;
            let mut out = Array2::zeros((half, 2 * m));
            for k in 0..half {
                for j in 0..m {
                    let a = x[[2 * k, j]];
                    let b = x[[2 * k + 1, j]];
                    out[[k, j]] = (a + b) * r;
                    out[[k, m + j]] = (a - b) * r;
                }
            }
            Ok(out)
        }
        _ => {
            let q = basis(kind, t)?;
            Ok(pack(&q.dot(&x), kind.channels()))
        }
    }
}

/// Inverse transform on a raw `(T, M)` array.
pub fn inverse_array(spec: ArrayView2<'_, f64>, kind: TransformKind) -> Result<Array2<f64>> {
    let (steps, width) = spec.dim();
    let c = kind.channels();
    if width % c != 0 {
        return Err(Error::Shape(format!("{kind} spectrum width {width} is not a multiple of {c}")));
    }
    if steps == 0 {
        return Err(Error::Shape("empty spectrum".into()));
    }
    ensure_finite("spectrum", spec.iter())?;
    let t = steps * c;
    let m = width / c;
    match kind {
        TransformKind::None => Ok(spec.to_owned()),
        TransformKind::Haar => {
            let r = 1.0 / SQRT_2;
            let mut out = Array2::zeros((t, m));
            for k in 0..steps {
                for j in 0..m {
                    let a = spec[[k, j]];
                    let d = spec[[k, m + j]];
                    out[[2 * k, j]] = (a + d) * r;
                    out[[2 * k + 1, j]] = (a - d) * r;
                }
            }
            Ok(out)
        }
        _ => {
            let q = basis(kind, t)?;
            Ok(q.t().dot(&unpack(spec, c)))
        }
    }
}

pub fn forward(seq: &TimeSeq, kind: TransformKind) -> Result<Spectrum> {
    Ok(Spectrum { values: forward_array(seq.values.view(), kind)?, kind, dt: seq.dt })
}

pub fn inverse(spec: &Spectrum) -> Result<TimeSeq> {
    Ok(TimeSeq { values: inverse_array(spec.values.view(), spec.kind)?, dt: spec.dt })
}

/// `(t, m)` coefficients stacked channel-major along rows into `(t/c, c*m)`.
fn pack(coeffs: &Array2<f64>, c: usize) -> Array2<f64> {
    let (t, m) = coeffs.dim();
    let steps = t / c;
    let mut out = Array2::zeros((steps, c * m));
    for ch in 0..c {
        out.slice_mut(s![.., ch * m..(ch + 1) * m]).assign(&coeffs.slice(s![ch * steps..(ch + 1) * steps, ..]));
    }
    out
}

fn unpack(spec: ArrayView2<'_, f64>, c: usize) -> Array2<f64> {
    let (steps, width) = spec.dim();
    let m = width / c;
    let mut out = Array2::zeros((steps * c, m));
    for ch in 0..c {
        out.slice_mut(s![ch * steps..(ch + 1) * steps, ..]).assign(&spec.slice(s![.., ch * m..(ch + 1) * m]));
    }
    out
}
