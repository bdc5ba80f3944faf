//! Run artifacts: CSV tables, grayscale weight maps and the JSON manifest.
//!
//! Every file goes through one [`Emitter`], which hashes what it writes. The
//! manifest is written last (via rename), so a directory without
//! `manifest.json` is an incomplete run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use loracomp::sampler::omega_trace;
use loracomp::tensor::kron_upsample_with;
use loracomp::{LatentGrid, PatchLayout, PlanarMap, Trajectory};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::HarnessError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileEntry {
    /// Path relative to the run directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineInfo {
    pub name: String,
    pub version: String,
}

impl Default for EngineInfo {
    fn default() -> Self {
        Self {
            name: "loracomp".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub engine: EngineInfo,
    pub experiment: String,
    pub name: String,
    pub config: serde_json::Value,
    /// Wall-clock seconds per phase; only present when requested.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
    pub results: serde_json::Value,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    pub fn new(experiment: &str, name: &str) -> Self {
        Self {
            engine: EngineInfo::default(),
            experiment: experiment.into(),
            name: name.into(),
            config: serde_json::Value::Null,
            timings: None,
            results: serde_json::Value::Null,
            files: Vec::new(),
        }
    }
}

pub struct Emitter {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Emitter {
    /// Creates the run directory and removes any manifest from an earlier run.
    pub fn create(root: &Path) -> Result<Self, HarnessError> {
        fs::create_dir_all(root).map_err(|e| HarnessError::io(root, e))?;
        let manifest = root.join(MANIFEST_NAME);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(|e| HarnessError::io(&manifest, e))?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn files(&self) -> &[FileEntry] {
        &self.files
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), HarnessError> {
        if self.files.iter().any(|f| f.path == rel) {
            return Err(HarnessError::io(
                self.root.join(rel),
                std::io::Error::new(std::io::ErrorKind::AlreadyExists, "artifact written twice"),
            ));
        }
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| HarnessError::io(&path, e))?;
        self.files.push(FileEntry {
            path: rel.into(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    /// Writes UTF-8 text, adding the final newline if it is missing.
    pub fn write_text(&mut self, rel: &str, text: &str) -> Result<(), HarnessError> {
        if text.ends_with('\n') {
            self.write_bytes(rel, text.as_bytes())
        } else {
            self.write_bytes(rel, format!("{text}\n").as_bytes())
        }
    }

    /// Writes the manifest with the sorted file inventory and returns it.
    pub fn finish(self, mut manifest: RunManifest) -> Result<RunManifest, HarnessError> {
        let mut files = self.files;
        files.sort_by(|a, b| a.path.cmp(&b.path));
        manifest.files = files;
        let mut text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| HarnessError::io(self.root.join(MANIFEST_NAME), e.into()))?;
        text.push('\n');
        let tmp = self.root.join(format!("{MANIFEST_NAME}.partial"));
        let dest = self.root.join(MANIFEST_NAME);
        fs::write(&tmp, text).map_err(|e| HarnessError::io(&tmp, e))?;
        fs::rename(&tmp, &dest).map_err(|e| HarnessError::io(&dest, e))?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `floor(v * 255 + 0.5)` clamped to a byte; 0 is black, 1 is white.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Binary 8-bit portable graymap.
pub fn pgm_bytes(map: &PlanarMap<f64>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(map.as_slice().iter().map(|&v| quantize(v)));
    out
}

/// One sampling run's outputs.
#[derive(Debug, Clone, Default)]
pub struct TrajectorySet {
    /// File-name stem, e.g. `gated_seed3`.
    pub label: String,
    pub finals: Vec<LatentGrid<f64>>,
    /// Trajectories that recorded weight matrices.
    pub traced: Vec<Trajectory<f64>>,
    /// Layout the weights were computed on; needed for the maps.
    pub layout: Option<PatchLayout>,
}

/// `(t, adapter, mean weight)` rows: per-step patch means averaged over trajectories.
pub fn averaged_trace(traced: &[Trajectory<f64>]) -> Result<Vec<(usize, usize, f64)>, HarnessError> {
    let Some(first) = traced.first() else {
        return Ok(Vec::new());
    };
    let mut acc = omega_trace(first)?;
    for traj in &traced[1..] {
        for ((t, sums), (t2, means)) in acc.iter_mut().zip(omega_trace(traj)?) {
            debug_assert_eq!(*t, t2);
            for (s, m) in sums.iter_mut().zip(means) {
                *s += m;
            }
        }
    }
    let n = traced.len() as f64;
    Ok(acc
        .into_iter()
        .flat_map(|(t, sums)| {
            sums.into_iter()
                .enumerate()
                .map(move |(i, s)| (t, i, s / n))
        })
        .collect())
}

pub fn trace_csv(rows: &[(usize, usize, f64)]) -> String {
    let mut out = String::from("step,adapter,mean_weight\n");
    for (t, i, w) in rows {
        let _ = writeln!(out, "{t},{i},{w}");
    }
    out
}

pub fn latents_csv(finals: &[LatentGrid<f64>]) -> String {
    let dim = finals.first().map_or(0, |g| g.as_slice().len());
    let mut out = String::from("trajectory");
    for k in 0..dim {
        let _ = write!(out, ",v{k}");
    }
    out.push('\n');
    for (i, g) in finals.iter().enumerate() {
        let _ = write!(out, "{i}");
        for v in g.as_slice() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Writes the trace, the weight maps of the first traced trajectory every
/// `map_stride` steps (0 = none) and, if requested, the final latents.
pub fn emit_set(
    emitter: &mut Emitter,
    set: &TrajectorySet,
    map_stride: usize,
    write_latents: bool,
) -> Result<(), HarnessError> {
    if !set.traced.is_empty() {
        let rows = averaged_trace(&set.traced)?;
        emitter.write_text(&format!("traces/{}.csv", set.label), &trace_csv(&rows))?;
    }
    if let (Some(layout), Some(traj), true) = (set.layout, set.traced.first(), map_stride > 0) {
        let (h, w) = match set.finals.first() {
            Some(g) => (g.height(), g.width()),
            None => (traj.final_latent.height(), traj.final_latent.width()),
        };
        let (rows, cols) = layout.grid_for(h, w)?;
        for (k, step) in traj.steps.iter().enumerate() {
            if k % map_stride != 0 {
                continue;
            }
            let Some(gated) = &step.omega_gated else {
                return Err(loracomp::Error::MissingWeights.into());
            };
            for i in 0..gated.n_adapters() {
                let patch_map = PlanarMap::new(rows, cols, gated.row(i).to_vec())?;
                let full = kron_upsample_with(&patch_map, layout);
                emitter.write_bytes(
                    &format!("maps/{}/t{:04}_a{i:02}.pgm", set.label, step.t),
                    &pgm_bytes(&full),
                )?;
            }
        }
    }
    if write_latents && !set.finals.is_empty() {
        emitter.write_text(&format!("latents/{}.csv", set.label), &latents_csv(&set.finals))?;
    }
    Ok(())
}

/// Emits every set into `out_dir` and writes a manifest listing the files.
pub fn emit_artifacts(
    sets: &[TrajectorySet],
    out_dir: &Path,
    map_stride: usize,
) -> Result<RunManifest, HarnessError> {
    let mut emitter = Emitter::create(out_dir)?;
    for set in sets {
        emit_set(&mut emitter, set, map_stride, true)?;
    }
    emitter.finish(RunManifest::new("artifacts", "artifacts"))
}
