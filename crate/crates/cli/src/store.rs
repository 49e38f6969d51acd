//! On-disk results: append-only metric rows, one manifest per run cell,
//! checkpoints and cached reference posteriors.
//!
//! Layout under the output directory:
//!
//! ```text
//! config.txt            canonical configuration the store belongs to
//! results.jsonl         one MetricResult per line, tagged with its run id
//! manifests/<run>.json  written after the run's rows; marks the run complete
//! checkpoints/          flow checkpoints
//! references/           reference posterior samples
//! particles/            MF-ABC particle sets
//! ```

use crate::config::{hex, ExperimentConfig};
use mfsbi_core::metrics::MetricResult;
use mfsbi_core::reference::{ReferenceMethod, ReferenceSampleSet};
use mfsbi_core::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error(
        "{dir} holds results of a different configuration (hash {existing}, this one {new}); choose a new output directory"
    )]
    ConfigMismatch { dir: PathBuf, existing: String, new: String },
    #[error("no results in {0}")]
    Empty(PathBuf),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

/// A results row with the run it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredRow {
    pub run_id: String,
    #[serde(flatten)]
    pub row: MetricResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundSummary {
    pub observation_id: usize,
    pub round: usize,
    pub n_proposal: usize,
    pub n_active: usize,
    pub simulator_calls: usize,
    pub acceptance_rate: f64,
    /// Absent for the untruncated first round.
    pub threshold: Option<f64>,
}

/// Everything needed to trace and reproduce one (budget, seed) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config_hash: String,
    pub task: String,
    pub algorithm: String,
    pub lf_budget: usize,
    pub hf_budget: usize,
    pub seed: u64,
    pub settings: BTreeMap<String, String>,
    pub lf_calls: usize,
    /// High-fidelity simulator calls per trained posterior, replacements
    /// included; one entry for amortized runs, one per observation for
    /// sequential runs and MF-ABC.
    pub hf_calls: Vec<usize>,
    pub rounds: Vec<RoundSummary>,
    pub checkpoints: Vec<String>,
    pub references: Vec<String>,
    pub particles: Vec<String>,
    pub train_best_epochs: Vec<usize>,
    pub rows: usize,
}

pub struct ResultsStore {
    root: PathBuf,
    config_hash: String,
}

impl ResultsStore {
    /// Open or create a store for `config`. An existing store written by a
    /// different configuration is refused.
    pub fn open(root: &Path, config: &ExperimentConfig) -> Result<Self, StoreError> {
        for sub in ["manifests", "checkpoints", "references", "particles"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io(&p))?;
        }
        let hash = config.hash();
        let cfg_path = root.join("config.txt");
        let text = format!("# config hash {hash}\n{}", config.canonical());
        match fs::read_to_string(&cfg_path) {
            Ok(existing) => {
                if existing != text {
                    let old = existing
                        .lines()
                        .next()
                        .and_then(|l| l.strip_prefix("# config hash "))
                        .unwrap_or("unknown")
                        .to_string();
                    return Err(StoreError::ConfigMismatch { dir: root.to_path_buf(), existing: old, new: hash });
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                fs::write(&cfg_path, text).map_err(io(&cfg_path))?;
            }
            Err(e) => return Err(StoreError::Io { path: cfg_path, source: e }),
        }
        Ok(Self { root: root.to_path_buf(), config_hash: hash })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn manifest_path(&self, run_id: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{run_id}.json"))
    }

    pub fn is_complete(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).exists()
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(name)
    }

    pub fn particles_path(&self, name: &str) -> PathBuf {
        self.root.join("particles").join(name)
    }

    pub fn references_dir(&self) -> PathBuf {
        self.root.join("references")
    }

    /// Append rows, then write the manifest that marks them complete.
    pub fn commit(&self, rows: &[MetricResult], manifest: &RunManifest) -> Result<(), StoreError> {
        let path = self.root.join("results.jsonl");
        let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io(&path))?;
        let mut buf = String::new();
        for r in rows {
            let s = StoredRow { run_id: manifest.run_id.clone(), row: r.clone() };
            buf.push_str(&serde_json::to_string(&s).expect("row serializes"));
            buf.push('\n');
        }
        f.write_all(buf.as_bytes()).map_err(io(&path))?;
        f.sync_all().map_err(io(&path))?;
        let mpath = self.manifest_path(&manifest.run_id);
        let tmp = mpath.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(manifest).expect("manifest serializes")).map_err(io(&tmp))?;
        fs::rename(&tmp, &mpath).map_err(io(&mpath))?;
        Ok(())
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        read_manifest(&self.manifest_path(run_id))
    }
}

fn read_manifest(path: &Path) -> Result<RunManifest, StoreError> {
    let text = fs::read_to_string(path).map_err(io(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Parse { path: path.to_path_buf(), line: e.line(), msg: e.to_string() })
}

/// Rows of every completed run in `root`, in file order. Rows of runs
/// without a manifest (interrupted) are skipped, and a run appended twice
/// contributes only its first `manifest.rows` rows.
pub fn read_rows(root: &Path) -> Result<Vec<StoredRow>, StoreError> {
    let path = root.join("results.jsonl");
    let f = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::Empty(root.to_path_buf())),
        Err(e) => return Err(StoreError::Io { path, source: e }),
    };
    let mut expected: HashMap<String, Option<usize>> = HashMap::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io(&path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: StoredRow = serde_json::from_str(&line)
            .map_err(|e| StoreError::Parse { path: path.clone(), line: i + 1, msg: e.to_string() })?;
        let limit = match expected.get(&r.run_id) {
            Some(l) => *l,
            None => {
                let mp = root.join("manifests").join(format!("{}.json", r.run_id));
                let l = if mp.exists() { Some(read_manifest(&mp)?.rows) } else { None };
                expected.insert(r.run_id.clone(), l);
                l
            }
        };
        let Some(limit) = limit else { continue };
        let count = seen.entry(r.run_id.clone()).or_insert(0);
        if *count < limit {
            *count += 1;
            out.push(r);
        }
    }
    if out.is_empty() {
        return Err(StoreError::Empty(root.to_path_buf()));
    }
    Ok(out)
}

/// Cached reference samples for one (task, x_o, method).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CachedReference {
    pub task: String,
    pub x_o: Vec<f64>,
    pub method: ReferenceMethod,
    pub seed: u64,
    pub set: ReferenceSampleSet,
    /// SHA-256 over the sample values.
    pub content_hash: String,
}

pub fn samples_hash(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    hex(&h.finalize())
}

fn reference_key(task: &str, x_o: &[f64], method: ReferenceMethod) -> String {
    let mut h = Sha256::new();
    h.update(task.as_bytes());
    for v in x_o {
        h.update(v.to_le_bytes());
    }
    h.update(format!("{method:?}").as_bytes());
    format!("{task}-{:?}-{}", method, &hex(&h.finalize())[..16]).to_lowercase()
}

pub fn reference_path(dir: &Path, task: &str, x_o: &[f64], method: ReferenceMethod) -> PathBuf {
    dir.join(format!("{}.json", reference_key(task, x_o, method)))
}

/// Load a cached reference with at least `n` samples drawn with `seed`.
/// Corrupt or mismatching files are treated as missing.
pub fn load_reference(path: &Path, x_o: &[f64], n: usize, seed: u64) -> Option<CachedReference> {
    let text = fs::read_to_string(path).ok()?;
    let c: CachedReference = match serde_json::from_str(&text) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("{}: unreadable reference cache ({e}); regenerating", path.display());
            return None;
        }
    };
    if samples_hash(&c.set.samples) != c.content_hash {
        log::warn!("{}: content hash mismatch; regenerating", path.display());
        return None;
    }
    (c.x_o == x_o && c.seed == seed && c.set.samples.rows() == n).then_some(c)
}

pub fn save_reference(path: &Path, c: &CachedReference) -> Result<(), StoreError> {
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, serde_json::to_string(c).expect("reference serializes")).map_err(io(&tmp))?;
    fs::rename(&tmp, path).map_err(io(path))
}
