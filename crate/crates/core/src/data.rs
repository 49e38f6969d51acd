//! Simulated datasets and their on-disk formats.
//!
//! CSV (`*.csv`): header lines `# key=value`, then a column line
//! `theta_0,..,x_0,..[,weight]`, then one row per simulation. Values use the
//! shortest representation that parses back to the same `f64`.
//!
//! Binary (`*.bin`, for images): the 8-byte magic `MFSBIDS1`, a little-endian
//! `u64` header length, the header as a JSON object of the same keys, then
//! `rows * (theta_dim + x_dim [+ 1])` little-endian `f64` values, row-major.

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MFSBIDS1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed dataset: {0}")]
    Malformed(String),
    #[error("dataset schema version {0} is not supported")]
    Version(u32),
}

/// Tagged (θ, x) pairs from one simulator fidelity.
#[derive(Debug, Clone, PartialEq)]
pub struct FidelityDataset {
    pub task: String,
    /// 0 is the lowest fidelity.
    pub fidelity: u8,
    pub simulator: String,
    pub theta: Tensor,
    pub x: Tensor,
    pub seed: u64,
    pub simulator_calls: usize,
    pub replacements: usize,
    pub weights: Option<Vec<f64>>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    task: String,
    fidelity: u8,
    simulator: String,
    rows: usize,
    theta_dim: usize,
    x_dim: usize,
    seed: u64,
    simulator_calls: usize,
    replacements: usize,
    weighted: bool,
    #[serde(default)]
    meta: BTreeMap<String, String>,
}

impl FidelityDataset {
    pub fn new(task: &str, fidelity: u8, simulator: &str, theta: Tensor, x: Tensor, seed: u64) -> Self {
        let n = theta.rows();
        Self {
            task: task.to_string(),
            fidelity,
            simulator: simulator.to_string(),
            theta,
            x,
            seed,
            simulator_calls: n,
            replacements: 0,
            weights: None,
            meta: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn theta_dim(&self) -> usize {
        self.theta.cols()
    }

    pub fn x_dim(&self) -> usize {
        self.x.cols()
    }

    /// Rows `idx` as a new dataset with the same provenance.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            theta: self.theta.select_rows(idx),
            x: self.x.select_rows(idx),
            weights: self.weights.as_ref().map(|w| idx.iter().map(|&i| w[i]).collect()),
            simulator_calls: idx.len(),
            replacements: 0,
            ..self.clone()
        }
    }

    /// The first `n` rows.
    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    fn header(&self) -> Header {
        Header {
            schema_version: SCHEMA_VERSION,
            task: self.task.clone(),
            fidelity: self.fidelity,
            simulator: self.simulator.clone(),
            rows: self.len(),
            theta_dim: self.theta_dim(),
            x_dim: self.x_dim(),
            seed: self.seed,
            simulator_calls: self.simulator_calls,
            replacements: self.replacements,
            weighted: self.weights.is_some(),
            meta: self.meta.clone(),
        }
    }

    fn from_parts(h: Header, values: Vec<f64>) -> Result<Self, DataError> {
        if h.schema_version != SCHEMA_VERSION {
            return Err(DataError::Version(h.schema_version));
        }
        let width = h.theta_dim + h.x_dim + usize::from(h.weighted);
        if values.len() != h.rows * width {
            return Err(DataError::Malformed(format!(
                "expected {} values for {} rows, found {}",
                h.rows * width,
                h.rows,
                values.len()
            )));
        }
        let mut theta = Vec::with_capacity(h.rows * h.theta_dim);
        let mut x = Vec::with_capacity(h.rows * h.x_dim);
        let mut w = Vec::new();
        for row in values.chunks(width.max(1)) {
            theta.extend_from_slice(&row[..h.theta_dim]);
            x.extend_from_slice(&row[h.theta_dim..h.theta_dim + h.x_dim]);
            if h.weighted {
                w.push(row[width - 1]);
            }
        }
        let bad = |e: crate::tensor::TensorError| DataError::Malformed(e.to_string());
        Ok(Self {
            task: h.task,
            fidelity: h.fidelity,
            simulator: h.simulator,
            theta: Tensor::new(vec![h.rows, h.theta_dim], theta).map_err(bad)?,
            x: Tensor::new(vec![h.rows, h.x_dim], x).map_err(bad)?,
            seed: h.seed,
            simulator_calls: h.simulator_calls,
            replacements: h.replacements,
            weights: h.weighted.then_some(w),
            meta: h.meta,
        })
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(out);
        let h = self.header();
        let v = serde_json::to_value(&h).expect("header serializes");
        for (k, val) in v.as_object().expect("object") {
            if k == "meta" {
                continue;
            }
            let s = match val {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            writeln!(out, "# {k}={s}")?;
        }
        for (k, val) in &self.meta {
            writeln!(out, "# meta.{k}={val}")?;
        }
        let mut wtr = csv::Writer::from_writer(out);
        let mut cols: Vec<String> = (0..self.theta_dim()).map(|i| format!("theta_{i}")).collect();
        cols.extend((0..self.x_dim()).map(|i| format!("x_{i}")));
        if self.weights.is_some() {
            cols.push("weight".into());
        }
        wtr.write_record(&cols)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.theta.row(i).iter().chain(self.x.row(i)).map(|v| v.to_string()).collect();
            if let Some(w) = &self.weights {
                rec.push(w[i].to_string());
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self, DataError> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut fields = serde_json::Map::new();
        let mut meta = BTreeMap::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(kv) = line.strip_prefix("# ") else { break };
            body_start += line.len();
            let (k, v) = kv.trim_end().split_once('=').ok_or_else(|| DataError::Malformed(format!("bad header line {kv:?}")))?;
            if let Some(mk) = k.strip_prefix("meta.") {
                meta.insert(mk.to_string(), v.to_string());
                continue;
            }
            let val = match k {
                "task" | "simulator" => serde_json::Value::String(v.to_string()),
                _ => serde_json::from_str(v).map_err(|e| DataError::Malformed(format!("{k}: {e}")))?,
            };
            fields.insert(k.to_string(), val);
        }
        fields.insert("meta".into(), serde_json::to_value(&meta).expect("map"));
        let h: Header = serde_json::from_value(serde_json::Value::Object(fields)).map_err(|e| DataError::Malformed(e.to_string()))?;
        let mut rdr = csv::Reader::from_reader(text[body_start..].as_bytes());
        let mut values = Vec::new();
        for rec in rdr.records() {
            for f in rec?.iter() {
                values.push(f.parse::<f64>().map_err(|e| DataError::Malformed(format!("{f:?}: {e}")))?);
            }
        }
        Self::from_parts(h, values)
    }

    pub fn write_binary<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(out);
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        out.write_all(MAGIC)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        for i in 0..self.len() {
            for v in self.theta.row(i).iter().chain(self.x.row(i)) {
                out.write_all(&v.to_le_bytes())?;
            }
            if let Some(w) = &self.weights {
                out.write_all(&w[i].to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<Self, DataError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DataError::Malformed("bad magic".into()));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut header)?;
        let h: Header = serde_json::from_slice(&header).map_err(|e| DataError::Malformed(e.to_string()))?;
        let mut rest = Vec::new();
        input.read_to_end(&mut rest)?;
        if rest.len() % 8 != 0 {
            return Err(DataError::Malformed("trailing bytes".into()));
        }
        let values = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Self::from_parts(h, values)
    }

    /// Write as binary for `.bin` paths and CSV otherwise.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let f = std::fs::File::create(path)?;
        if path.extension().is_some_and(|e| e == "bin") {
            self.write_binary(f)
        } else {
            self.write_csv(f)
        }
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        if path.extension().is_some_and(|e| e == "bin") {
            Self::read_binary(f)
        } else {
            Self::read_csv(f)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> FidelityDataset {
        let theta = Tensor::from_rows(&[vec![0.1, 1.0 / 3.0], vec![2.5, 1e-300]]).unwrap();
        let x = Tensor::from_rows(&[vec![-1.0, 0.2, 3.0], vec![f64::MAX, 0.0, -7.25]]).unwrap();
        let mut d = FidelityDataset::new("ou2", 0, "ou-low", theta, x, 42);
        d.meta.insert("note".into(), "a b".into());
        d
    }

    #[test]
    fn csv_round_trip() {
        let d = sample();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        assert_eq!(FidelityDataset::read_csv(buf.as_slice()).unwrap(), d);
    }

    #[test]
    fn binary_round_trip_with_weights() {
        let mut d = sample();
        d.weights = Some(vec![0.5, -0.25]);
        let mut buf = Vec::new();
        d.write_binary(&mut buf).unwrap();
        assert_eq!(FidelityDataset::read_binary(buf.as_slice()).unwrap(), d);
    }
}
