//! Trajectory datasets: scene files, windowing, preprocessing, splits and
//! synthetic latency scenarios.
//!
//! Scene files hold one observation per line, whitespace separated:
//!
//! ```text
//! <frame_id> <agent_id> <x> <y>
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Frame ids are integers
//! (an integral float such as `780.0` is accepted). Each agent's frames should
//! form an arithmetic progression; a gap splits that agent into separate
//! tracks.

pub mod synth;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::io::write_atomic;

pub use synth::{change_point, synth_latency_scenes, SynthLabel, SynthLatencySpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub id: String,
    /// Seconds between consecutive frames of one track.
    pub dt: f64,
    /// Sorted by `(agent, frame)`.
    pub records: Vec<Record>,
}

/// Contiguous run of one agent's frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub agent: i64,
    pub first_frame: i64,
    /// `(len, 2)`.
    pub points: Array2<f64>,
}

impl Scene {
    /// Validates finiteness and `(agent, frame)` uniqueness.
    pub fn new(id: impl Into<String>, dt: f64, mut records: Vec<Record>) -> Result<Self> {
        let id = id.into();
        records.sort_by_key(|r| (r.agent, r.frame));
        for w in records.windows(2) {
            if (w[0].agent, w[0].frame) == (w[1].agent, w[1].frame) {
                return Err(Error::Data(format!(
                    "scene `{id}`: duplicate record for agent {} at frame {}",
                    w[0].agent, w[0].frame
                )));
            }
        }
        if let Some(r) = records.iter().find(|r| !r.x.is_finite() || !r.y.is_finite()) {
            return Err(Error::Data(format!(
                "scene `{id}`: non-finite position for agent {} at frame {}",
                r.agent, r.frame
            )));
        }
        Ok(Self { id, dt, records })
    }

    pub fn agents(&self) -> Vec<i64> {
        let mut a: Vec<i64> = self.records.iter().map(|r| r.agent).collect();
        a.dedup();
        a
    }

    /// Smallest positive frame difference within any agent; the scene's
    /// native frame spacing.
    pub fn frame_step(&self) -> Option<i64> {
        self.records.windows(2).filter(|w| w[0].agent == w[1].agent).map(|w| w[1].frame - w[0].frame).min()
    }

    pub fn tracks(&self) -> Vec<Track> {
        let step = self.frame_step().unwrap_or(1);
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            let split = i == self.records.len()
                || self.records[i].agent != self.records[i - 1].agent
                || self.records[i].frame - self.records[i - 1].frame != step;
            if split {
                let run = &self.records[start..i];
                out.push(Track {
                    agent: run[0].agent,
                    first_frame: run[0].frame,
                    points: Array2::from_shape_fn((run.len(), 2), |(t, j)| if j == 0 { run[t].x } else { run[t].y }),
                });
                start = i;
            }
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut rows = self.records.clone();
        rows.sort_by_key(|r| (r.frame, r.agent));
        let mut s = String::new();
        for r in rows {
            let _ = writeln!(s, "{}\t{}\t{:?}\t{:?}", r.frame, r.agent, r.x, r.y);
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }
}

fn parse_frame(tok: &str) -> Option<i64> {
    tok.parse::<i64>().ok().or_else(|| {
        let f: f64 = tok.parse().ok()?;
        (f.fract() == 0.0 && f.abs() < 9e15).then_some(f as i64)
    })
}

/// Parses scene text; `path` only labels error messages.
pub fn parse_scene(text: &str, id: &str, dt: f64, path: &Path) -> Result<Scene> {
    let mut records = Vec::new();
    let mut seen: HashMap<(i64, i64), usize> = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let err = |column: usize, msg: String| Error::Parse { path: path.to_path_buf(), line: lineno, column, msg };
        let mut fields = Vec::with_capacity(4);
        let mut offset = 0;
        for tok in line.split_whitespace() {
            let at = line[offset..].find(tok).map_or(offset, |p| p + offset);
            fields.push((at + 1, tok));
            offset = at + tok.len();
        }
        if fields.len() != 4 {
            return Err(err(1, format!("expected 4 fields (frame agent x y), found {}", fields.len())));
        }
        let frame =
            parse_frame(fields[0].1).ok_or_else(|| err(fields[0].0, format!("bad frame id `{}`", fields[0].1)))?;
        let agent =
            parse_frame(fields[1].1).ok_or_else(|| err(fields[1].0, format!("bad agent id `{}`", fields[1].1)))?;
        let coord = |i: usize| -> Result<f64> {
            let (col, tok) = fields[i];
            match tok.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(col, format!("bad coordinate `{tok}`"))),
            }
        };
        let (x, y) = (coord(2)?, coord(3)?);
        if let Some(prev) = seen.insert((agent, frame), lineno) {
            return Err(err(
                fields[0].0,
                format!("duplicate record for agent {agent} at frame {frame} (first on line {prev})"),
            ));
        }
        records.push(Record { frame, agent, x, y });
    }
    Scene::new(id, dt, records)
}

pub fn load_scene(path: &Path, dt: f64) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let id = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    parse_scene(&text, &id, dt, path)
}

/// One ego window with its fully observed neighbors.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub scene: String,
    pub agent: i64,
    /// First observed frame id.
    pub frame: i64,
    /// `(t_h, 2)`.
    pub ego: Array2<f64>,
    /// Each `(t_h, 2)`, ordered by agent id.
    pub neighbors: Vec<Array2<f64>>,
    /// `(t_f, 2)`.
    pub gt: Array2<f64>,
    /// Translation removed by [`preprocess`]; zero for world coordinates.
    pub origin: [f64; 2],
}

/// Every admissible `(t_h + t_f)` window of every track, stepping `stride`
/// frames. Neighbors are other agents present on all `t_h` observed frames.
pub fn make_windows(scene: &Scene, t_h: usize, t_f: usize, stride: usize) -> Result<Vec<Sample>> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    let step = scene.frame_step().unwrap_or(1);
    let lookup: HashMap<(i64, i64), [f64; 2]> =
        scene.records.iter().map(|r| ((r.agent, r.frame), [r.x, r.y])).collect();
    let agents = scene.agents();
    let mut out = Vec::new();
    for track in scene.tracks() {
        let len = track.points.nrows();
        if len < t_h + t_f {
            continue;
        }
        for start in (0..=len - t_h - t_f).step_by(stride) {
            let first = track.first_frame + start as i64 * step;
            let frames: Vec<i64> = (0..t_h as i64).map(|t| first + t * step).collect();
            let neighbors = agents
                .iter()
                .filter(|&&a| a != track.agent)
                .filter_map(|&a| {
                    let pts: Option<Vec<[f64; 2]>> = frames.iter().map(|&f| lookup.get(&(a, f)).copied()).collect();
                    pts.map(|p| Array2::from_shape_fn((t_h, 2), |(t, j)| p[t][j]))
                })
                .collect();
            out.push(Sample {
                scene: scene.id.clone(),
                agent: track.agent,
                frame: first,
                ego: track.points.slice(ndarray::s![start..start + t_h, ..]).to_owned(),
                neighbors,
                gt: track.points.slice(ndarray::s![start + t_h..start + t_h + t_f, ..]).to_owned(),
                origin: [0.0, 0.0],
            });
        }
    }
    Ok(out)
}

fn shift(a: &Array2<f64>, by: [f64; 2]) -> Array2<f64> {
    let mut out = a.clone();
    for mut row in out.rows_mut() {
        row[0] += by[0];
        row[1] += by[1];
    }
    out
}

/// Translates the whole sample so the ego's last observed point is the origin.
pub fn preprocess(sample: &Sample) -> Sample {
    let last = sample.ego.nrows() - 1;
    let p = [sample.ego[[last, 0]], sample.ego[[last, 1]]];
    let neg = [-p[0], -p[1]];
    let mut ego = shift(&sample.ego, neg);
    // exact zero, not `x - x` rounding
    ego[[last, 0]] = 0.0;
    ego[[last, 1]] = 0.0;
    Sample {
        ego,
        neighbors: sample.neighbors.iter().map(|n| shift(n, neg)).collect(),
        gt: shift(&sample.gt, neg),
        origin: [sample.origin[0] + p[0], sample.origin[1] + p[1]],
        ..sample.clone()
    }
}

/// Undoes [`preprocess`].
pub fn untranslate(sample: &Sample) -> Sample {
    let o = sample.origin;
    Sample {
        ego: shift(&sample.ego, o),
        neighbors: sample.neighbors.iter().map(|n| shift(n, o)).collect(),
        gt: shift(&sample.gt, o),
        origin: [0.0, 0.0],
        ..sample.clone()
    }
}

/// Moves a `(·, 2)` array expressed relative to `origin` back to world
/// coordinates.
pub fn to_world(a: &Array2<f64>, origin: [f64; 2]) -> Array2<f64> {
    shift(a, origin)
}

/// Appends a constant-velocity neighbor that sits at `offset` from the ego's
/// last observed point on the last observed frame. `velocity` is in units per
/// second.
pub fn inject_manual_neighbor(sample: &Sample, offset: [f64; 2], velocity: [f64; 2], dt: f64) -> Sample {
    let t_h = sample.ego.nrows();
    let last = t_h - 1;
    let anchor = [sample.ego[[last, 0]] + offset[0], sample.ego[[last, 1]] + offset[1]];
    let nb = Array2::from_shape_fn((t_h, 2), |(t, j)| anchor[j] + velocity[j] * dt * (t as f64 - last as f64));
    let mut out = sample.clone();
    out.neighbors.push(nb);
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub train: Vec<PathBuf>,
    pub val: Vec<PathBuf>,
    pub test: Vec<PathBuf>,
}

/// Split manifest: one `<train|val|test> <path>` pair per line, `#` comments.
/// Relative paths resolve against the manifest's directory.
pub fn parse_split_manifest(text: &str, base: &Path, path: &Path) -> Result<Split> {
    let mut split = Split::default();
    for (n, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (tag, rest) = trimmed.split_once(char::is_whitespace).ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            column: 1,
            msg: "expected `<split> <path>`".into(),
        })?;
        let p = PathBuf::from(rest.trim());
        let p = if p.is_relative() { base.join(p) } else { p };
        match tag {
            "train" => split.train.push(p),
            "val" => split.val.push(p),
            "test" => split.test.push(p),
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    column: 1,
                    msg: format!("unknown split `{other}` (expected train, val or test)"),
                })
            }
        }
    }
    Ok(split)
}

pub fn load_split_manifest(path: &Path) -> Result<Split> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_split_manifest(&text, path.parent().unwrap_or(Path::new(".")), path)
}

/// Per-scene sample counts, for report breakdowns.
pub fn count_by_scene(samples: &[Sample]) -> BTreeMap<String, usize> {
    let mut m = BTreeMap::new();
    for s in samples {
        *m.entry(s.scene.clone()).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_agents() -> Scene {
        let mut recs = Vec::new();
        for f in 0..20 {
            recs.push(Record { frame: f * 10, agent: 1, x: f as f64 * 0.5, y: 1.0 });
            recs.push(Record { frame: f * 10, agent: 2, x: 3.0, y: f as f64 * -0.25 });
        }
        Scene::new("toy", 0.4, recs).unwrap()
    }

    #[test]
    fn load_two_agent_file() {
        let scene = parse_scene(&two_agents().to_text(), "toy", 0.4, Path::new("toy.txt")).unwrap();
        assert_eq!(scene.agents(), vec![1, 2]);
        assert_eq!(scene.frame_step(), Some(10));
        assert_eq!(scene, two_agents());
    }

    #[test]
    fn roundtrip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.txt");
        let mut scene = two_agents();
        scene.records[3].x = 0.1 + 0.2;
        scene.write(&path).unwrap();
        assert_eq!(load_scene(&path, 0.4).unwrap(), scene);
    }

    #[test]
    fn duplicate_reports_line() {
        let text = "0 1 0.0 0.0\n1 1 1.0 0.0\n\n1 1 2.0 0.0\n";
        match parse_scene(text, "d", 0.4, Path::new("d.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_field_reports_column() {
        match parse_scene("0 1 0.0 abc\n", "d", 0.4, Path::new("d.txt")) {
            Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (1, 9)),
            other => panic!("{other:?}"),
        }
        assert!(parse_scene("0 1 0.0\n", "d", 0.4, Path::new("d.txt")).is_err());
    }

    #[test]
    fn float_frame_ids_accepted() {
        let s = parse_scene("780.0 1.0 0.5 0.5\n790.0 1.0 0.6 0.5\n", "f", 0.4, Path::new("f")).unwrap();
        assert_eq!(s.records[1].frame, 790);
    }

    #[test]
    fn gaps_split_tracks() {
        let recs: Vec<Record> =
            [0, 1, 2, 5, 6].iter().map(|&f| Record { frame: f, agent: 7, x: f as f64, y: 0.0 }).collect();
        let scene = Scene::new("g", 0.4, recs).unwrap();
        let tracks = scene.tracks();
        assert_eq!(tracks.len(), 2);
        assert_eq!((tracks[0].points.nrows(), tracks[1].first_frame), (3, 5));
    }

    #[test]
    fn exact_length_gives_one_window() {
        let samples = make_windows(&two_agents(), 8, 12, 1).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].neighbors.len(), 1);
        assert_eq!(make_windows(&two_agents(), 4, 12, 1).unwrap().len(), 10);
        assert_eq!(make_windows(&two_agents(), 4, 12, 2).unwrap().len(), 6);
    }

    #[test]
    fn partial_neighbors_excluded() {
        let mut scene = two_agents();
        scene.records.retain(|r| !(r.agent == 2 && r.frame == 30));
        let samples = make_windows(&scene, 8, 12, 1).unwrap();
        let ego1 = samples.iter().find(|s| s.agent == 1).unwrap();
        assert!(ego1.neighbors.is_empty());
    }

    #[test]
    fn preprocess_is_invertible() {
        let s = &make_windows(&two_agents(), 8, 12, 1).unwrap()[1];
        let p = preprocess(s);
        assert_eq!(p.ego.row(7).to_vec(), vec![0.0, 0.0]);
        let back = untranslate(&p);
        for (a, b) in back.gt.iter().chain(back.neighbors[0].iter()).zip(s.gt.iter().chain(s.neighbors[0].iter())) {
            assert!((a - b).abs() <= 1e-12);
        }
        let d = |a: &Array2<f64>, b: &Array2<f64>| {
            ((a[[0, 0]] - b[[0, 0]]).powi(2) + (a[[0, 1]] - b[[0, 1]]).powi(2)).sqrt()
        };
        assert!((d(&p.ego, &p.neighbors[0]) - d(&s.ego, &s.neighbors[0])).abs() < 1e-12);
    }

    #[test]
    fn manual_neighbor_lands_at_offset() {
        let s = preprocess(&make_windows(&two_agents(), 8, 12, 1).unwrap()[0]);
        let with = inject_manual_neighbor(&s, [2.0, 0.0], [1.0, 0.0], 0.4);
        assert_eq!(with.neighbors.len(), s.neighbors.len() + 1);
        let nb = with.neighbors.last().unwrap();
        assert_eq!(nb.row(7).to_vec(), vec![2.0, 0.0]);
        assert!((nb[[6, 0]] - 1.6).abs() < 1e-12);
        let part = crate::social::assign_partition(with.ego.view(), nb.view(), 8).unwrap();
        assert_eq!(part.index, 0);
    }

    #[test]
    fn split_manifest() {
        let text = "# comment\ntrain a.txt\ntest /abs/b.txt\nval c.txt\n";
        let s = parse_split_manifest(text, Path::new("/data"), Path::new("m")).unwrap();
        assert_eq!(s.train, vec![PathBuf::from("/data/a.txt")]);
        assert_eq!(s.test, vec![PathBuf::from("/abs/b.txt")]);
        assert!(parse_split_manifest("holdout x\n", Path::new("."), Path::new("m")).is_err());
    }
}
