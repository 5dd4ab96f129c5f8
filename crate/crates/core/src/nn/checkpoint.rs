//! Checkpoint files.
//!
//! A checkpoint is a pair `<stem>.manifest` + `<stem>.bin`. The manifest is
//! UTF-8 text, one record per line:
//!
//! ```text
//! reverb-checkpoint 1
//! meta <key> <value>
//! tensor <name> <rows> <cols> f32 <byte offset>
//! ```
//!
//! `meta` lines come first, then `tensor` lines in blob order. The blob is the
//! concatenation of every tensor, row-major, as little-endian IEEE-754
//! `float32`, with no padding; offsets are in bytes from the start of the blob
//! and the blob length must equal the end of the last tensor.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::adam::Adam;
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub const MAGIC: &str = "reverb-checkpoint 1";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Array2<f32>)>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("manifest")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

impl Checkpoint {
    pub fn from_params(params: &ParamStore, adam: Option<&Adam>) -> Self {
        let mut tensors: Vec<(String, Array2<f32>)> =
            params.iter().map(|(_, name, v)| (name.to_string(), v.mapv(|x| x as f32))).collect();
        let mut meta = BTreeMap::new();
        if let Some(adam) = adam {
            meta.insert("adam_step".to_string(), adam.step.to_string());
            for (id, name, _) in params.iter() {
                tensors.push((format!("{ADAM_M}{name}"), adam.m[id].mapv(|x| x as f32)));
                tensors.push((format!("{ADAM_V}{name}"), adam.v[id].mapv(|x| x as f32)));
            }
        }
        Self { meta, tensors }
    }

    pub fn to_bytes(&self) -> (String, Vec<u8>) {
        let mut manifest = String::new();
        let _ = writeln!(manifest, "{MAGIC}");
        for (k, v) in &self.meta {
            let _ = writeln!(manifest, "meta {k} {v}");
        }
        let mut blob = Vec::new();
        for (name, t) in &self.tensors {
            let _ = writeln!(manifest, "tensor {name} {} {} f32 {}", t.nrows(), t.ncols(), blob.len());
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        (manifest, blob)
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        let (manifest, blob) = self.to_bytes();
        write_atomic(&blob_path(stem), &blob)?;
        write_atomic(&manifest_path(stem), manifest.as_bytes())
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let mpath = manifest_path(stem);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = blob_path(stem);
        let blob = std::fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        Self::parse(&text, &blob)
    }

    pub fn parse(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        if lines.next().map(str::trim) != Some(MAGIC) {
            return Err(Error::Checkpoint(format!("missing `{MAGIC}` header")));
        }
        let mut ckpt = Checkpoint::default();
        let mut expected_offset = 0usize;
        for (n, line) in lines.enumerate() {
            let lineno = n + 2;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                [] => continue,
                ["meta", key, value @ ..] => {
                    ckpt.meta.insert(key.to_string(), value.join(" "));
                }
                ["tensor", name, rows, cols, "f32", offset] => {
                    let parse = |s: &str| {
                        s.parse::<usize>().map_err(|_| Error::Checkpoint(format!("line {lineno}: bad number `{s}`")))
                    };
                    let (rows, cols, offset) = (parse(rows)?, parse(cols)?, parse(offset)?);
                    if offset != expected_offset {
                        return Err(Error::Checkpoint(format!(
                            "line {lineno}: offset {offset}, expected {expected_offset}"
                        )));
                    }
                    let end = offset + rows * cols * 4;
                    if end > blob.len() {
                        return Err(Error::Checkpoint(format!(
                            "line {lineno}: tensor `{name}` runs past the blob ({end} > {})",
                            blob.len()
                        )));
                    }
                    let data: Vec<f32> = blob[offset..end]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    let t = Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Checkpoint(e.to_string()))?;
                    ckpt.tensors.push((name.to_string(), t));
                    expected_offset = end;
                }
                _ => {
                    return Err(Error::Checkpoint(format!("line {lineno}: unrecognized `{line}`")));
                }
            }
        }
        if expected_offset != blob.len() {
            return Err(Error::Checkpoint(format!(
                "blob has {} bytes, manifest describes {expected_offset}",
                blob.len()
            )));
        }
        Ok(ckpt)
    }

    fn tensor(&self, name: &str) -> Option<&Array2<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Lists every difference between the checkpoint's tensors and `params`:
    /// missing, extra, or differently shaped.
    pub fn diff(&self, params: &ParamStore) -> Vec<String> {
        let mut out = Vec::new();
        for (_, name, v) in params.iter() {
            match self.tensor(name) {
                None => out.push(format!("missing `{name}` ({}x{})", v.nrows(), v.ncols())),
                Some(t) if t.dim() != v.dim() => out.push(format!(
                    "`{name}`: checkpoint {}x{}, configuration {}x{}",
                    t.nrows(),
                    t.ncols(),
                    v.nrows(),
                    v.ncols()
                )),
                _ => {}
            }
        }
        for (name, t) in &self.tensors {
            if !name.starts_with(ADAM_M) && !name.starts_with(ADAM_V) && params.id(name).is_none() {
                out.push(format!("unexpected `{name}` ({}x{})", t.nrows(), t.ncols()));
            }
        }
        out
    }

    /// Copies tensors into `params` (and `adam`, when its moments are
    /// present). Fails with the full dimension diff on any mismatch.
    pub fn restore(&self, params: &mut ParamStore, adam: Option<&mut Adam>) -> Result<()> {
        let diff = self.diff(params);
        if !diff.is_empty() {
            return Err(Error::CheckpointMismatch(diff.join("\n")));
        }
        for id in 0..params.len() {
            let name = params.name(id).to_string();
            let t = self.tensor(&name).expect("checked by diff");
            *params.value_mut(id) = t.mapv(f64::from);
        }
        if let Some(adam) = adam {
            if let Some(step) = self.meta.get("adam_step") {
                adam.step = step.parse().map_err(|_| Error::Checkpoint(format!("bad adam_step `{step}`")))?;
                for id in 0..params.len() {
                    let name = params.name(id);
                    if let (Some(m), Some(v)) =
                        (self.tensor(&format!("{ADAM_M}{name}")), self.tensor(&format!("{ADAM_V}{name}")))
                    {
                        adam.m[id] = m.mapv(f64::from);
                        adam.v[id] = v.mapv(f64::from);
                    }
                }
            }
        }
        params.check_finite()
    }
}
