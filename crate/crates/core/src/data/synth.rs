//! Synthetic scenes with planted response latencies.
//!
//! Every agent walks straight at constant speed. When `turn` is non-zero an
//! event is planted at frame `t_e`: the agent hesitates (its `t_e → t_e+1`
//! displacement shrinks by `cue_speed`), and exactly `δ` frames later its
//! heading starts rotating at a constant rate, reaching `±turn` radians after
//! `duration` frames. A zero `turn` plants no event at all.

use std::f64::consts::TAU;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Record, Scene};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthLatencySpec {
    pub scenes: usize,
    pub agents: usize,
    pub t_h: usize,
    pub t_f: usize,
    pub dt: f64,
    /// Event frame, 0-based within the window. Defaults to `t_h - 2`.
    pub t_e: Option<usize>,
    /// Onset delays in frames; each agent draws one uniformly.
    pub deltas: Vec<usize>,
    pub duration: usize,
    /// Heading change in radians; the sign is random per agent.
    pub turn: f64,
    /// Speed factor of the hesitation cue.
    pub cue_speed: f64,
    /// Position noise standard deviation.
    pub noise: f64,
    pub speed_min: f64,
    pub speed_max: f64,
    /// Distance between agents of one scene at the event frame.
    pub spacing: f64,
    pub seed: u64,
}

impl Default for SynthLatencySpec {
    fn default() -> Self {
        Self {
            scenes: 200,
            agents: 2,
            t_h: 8,
            t_f: 12,
            dt: 0.4,
            t_e: None,
            deltas: vec![0, 1, 2, 3],
            duration: 3,
            turn: std::f64::consts::FRAC_PI_2,
            cue_speed: 0.5,
            noise: 0.05,
            speed_min: 1.0,
            speed_max: 1.6,
            spacing: 4.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthLabel {
    pub scene: String,
    pub agent: i64,
    pub t_e: usize,
    pub delta: usize,
    /// `t_e + delta`: first frame whose outgoing displacement is rotated.
    pub onset: usize,
    /// `+1` for counter-clockwise, `-1` for clockwise.
    pub sign: i8,
}

impl SynthLatencySpec {
    pub fn frames(&self) -> usize {
        self.t_h + self.t_f
    }

    pub fn event_frame(&self) -> usize {
        self.t_e.unwrap_or(self.t_h.saturating_sub(2))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.scenes == 0 || self.agents == 0 {
            return bad("scenes and agents must be positive".into());
        }
        if self.t_h < 2 || self.t_f < 1 {
            return bad("t_h must be at least 2 and t_f at least 1".into());
        }
        if self.deltas.is_empty() {
            return bad("at least one delay is required".into());
        }
        if self.duration == 0 {
            return bad("duration must be at least 1".into());
        }
        let last = self.frames() - 2;
        let t_e = self.event_frame();
        if t_e > last {
            return bad(format!("event frame {t_e} is past the last displacement {last}"));
        }
        if let Some(d) = self.deltas.iter().find(|&&d| t_e + d > last) {
            return bad(format!("onset {} (t_e {t_e} + delay {d}) is beyond the horizon", t_e + d));
        }
        for (name, v) in [("dt", self.dt), ("speed_min", self.speed_min), ("cue_speed", self.cue_speed)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.speed_max >= self.speed_min && self.speed_max.is_finite()) {
            return bad("speed_max must be at least speed_min".into());
        }
        if !(self.noise >= 0.0 && self.noise.is_finite() && self.turn.is_finite() && self.spacing.is_finite()) {
            return bad("noise must be non-negative; turn and spacing finite".into());
        }
        Ok(())
    }
}

/// Generates scenes named `synth_<index>` plus one label per agent.
pub fn synth_latency_scenes(spec: &SynthLatencySpec) -> Result<(Vec<Scene>, Vec<SynthLabel>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let frames = spec.frames();
    let t_e = spec.event_frame();
    let event = spec.turn != 0.0;
    let mut scenes = Vec::with_capacity(spec.scenes);
    let mut labels = Vec::with_capacity(spec.scenes * spec.agents);
    for s in 0..spec.scenes {
        let id = format!("synth_{s:04}");
        let mut records = Vec::with_capacity(frames * spec.agents);
        for a in 0..spec.agents {
            let heading = rng.random_range(0.0..TAU);
            let speed = rng.random_range(spec.speed_min..=spec.speed_max);
            let delta = spec.deltas[rng.random_range(0..spec.deltas.len())];
            let sign: i8 = if rng.random_bool(0.5) { 1 } else { -1 };
            let anchor = [0.0, spec.spacing * a as f64 + rng.random_range(-0.5..0.5)];
            let onset = t_e + delta;
            let mut pts = Array2::<f64>::zeros((frames, 2));
            for f in 0..frames - 1 {
                let progress = if event && f >= onset {
                    ((f - onset + 1).min(spec.duration)) as f64 / spec.duration as f64
                } else {
                    0.0
                };
                let theta = heading + f64::from(sign) * spec.turn * progress;
                let step = speed * spec.dt * if event && f == t_e { spec.cue_speed } else { 1.0 };
                pts[[f + 1, 0]] = pts[[f, 0]] + step * theta.cos();
                pts[[f + 1, 1]] = pts[[f, 1]] + step * theta.sin();
            }
            let shift = [anchor[0] - pts[[t_e, 0]], anchor[1] - pts[[t_e, 1]]];
            for f in 0..frames {
                let mut p = [pts[[f, 0]] + shift[0], pts[[f, 1]] + shift[1]];
                if spec.noise > 0.0 {
                    p[0] += noise.sample(&mut rng);
                    p[1] += noise.sample(&mut rng);
                }
                records.push(Record { frame: f as i64, agent: a as i64, x: p[0], y: p[1] });
            }
            labels.push(SynthLabel { scene: id.clone(), agent: a as i64, t_e, delta, onset, sign });
        }
        scenes.push(Scene::new(id, spec.dt, records)?);
    }
    Ok((scenes, labels))
}

/// First frame `f` whose outgoing displacement turns the most relative to
/// the incoming one. `None` when the path never changes heading.
pub fn change_point(track: &Array2<f64>) -> Option<usize> {
    let n = track.nrows();
    if n < 3 {
        return None;
    }
    let heading = |f: usize| (track[[f + 1, 1]] - track[[f, 1]]).atan2(track[[f + 1, 0]] - track[[f, 0]]);
    let changes: Vec<f64> = (1..n - 1)
        .map(|f| {
            let mut d = heading(f) - heading(f - 1);
            d = (d + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
            d.abs()
        })
        .collect();
    let max = changes.iter().cloned().fold(0.0, f64::max);
    if max < 1e-9 {
        return None;
    }
    changes.iter().position(|&c| c >= max - 1e-9).map(|i| i + 1)
}
