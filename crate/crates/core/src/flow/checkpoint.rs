//! JSON checkpoint container.
//!
//! Layout (one JSON object):
//!
//! ```text
//! format_version        integer, currently 1
//! architecture          FlowArchitecture
//! architecture_hash     hex SHA-256 of the compact JSON of `architecture`
//! parameters            [{name, shape, data}] in registration order
//! x_standardizer        {mean, std, eps}
//! theta_standardizer    {mean, std, eps}
//! theta_box             {lower, upper}
//! rng_seed_provenance   seed used to initialize the network
//! ```
//!
//! Floats are written in shortest round-trip form, so loading reproduces
//! every parameter bit for bit.

use super::{ConditionalFlow, FlowArchitecture, FlowError, LogitBox, Standardizer};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("architecture hash mismatch: stored {stored}, recomputed {computed}")]
    ArchitectureHash { stored: String, computed: String },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Serialize, Deserialize)]
struct NamedParam {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Container {
    format_version: u32,
    architecture: FlowArchitecture,
    architecture_hash: String,
    parameters: Vec<NamedParam>,
    x_standardizer: Standardizer,
    theta_standardizer: Standardizer,
    theta_box: LogitBox,
    rng_seed_provenance: u64,
}

pub fn to_json(flow: &ConditionalFlow) -> String {
    let c = Container {
        format_version: FORMAT_VERSION,
        architecture: flow.arch.clone(),
        architecture_hash: flow.arch.hash(),
        parameters: flow
            .params
            .names()
            .iter()
            .zip(flow.params.values())
            .map(|(n, v)| NamedParam {
                name: n.clone(),
                shape: v.shape().to_vec(),
                data: v.data().to_vec(),
            })
            .collect(),
        x_standardizer: flow.x_standardizer.clone(),
        theta_standardizer: flow.theta_standardizer.clone(),
        theta_box: flow.theta_box.clone(),
        rng_seed_provenance: flow.init_seed,
    };
    serde_json::to_string(&c).expect("checkpoint serializes")
}

fn json_err(e: serde_json::Error) -> CheckpointError {
    if e.is_eof() {
        CheckpointError::Truncated
    } else {
        CheckpointError::Malformed(e.to_string())
    }
}

pub fn from_json(text: &str) -> Result<ConditionalFlow, FlowError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(json_err)?;
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::Malformed("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let c: Container = serde_json::from_value(value).map_err(json_err)?;
    let computed = c.architecture.hash();
    if computed != c.architecture_hash {
        return Err(CheckpointError::ArchitectureHash {
            stored: c.architecture_hash,
            computed,
        }
        .into());
    }
    let mut flow = ConditionalFlow::new(c.architecture, c.theta_box, c.rng_seed_provenance)?;
    let mut store = ParamStore::new();
    for p in c.parameters {
        let t = Tensor::new(p.shape, p.data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        store.add(p.name, t);
    }
    flow.set_params(store)?;
    flow.set_standardizers(c.x_standardizer, c.theta_standardizer)?;
    Ok(flow)
}

pub fn save_checkpoint(flow: &ConditionalFlow, path: &Path) -> Result<(), FlowError> {
    std::fs::write(path, to_json(flow)).map_err(CheckpointError::from)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ConditionalFlow, FlowError> {
    let text = std::fs::read_to_string(path).map_err(CheckpointError::from)?;
    from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowArchitecture;

    fn flow() -> ConditionalFlow {
        let bx = LogitBox::new(vec![0.0, 0.0], vec![1.0, 2.0]).unwrap();
        let mut f = ConditionalFlow::new(FlowArchitecture::new(2, 3), bx, 4).unwrap();
        f.params_mut().values_mut()[3].data_mut()[0] = 0.1 + 0.2;
        f
    }

    #[test]
    fn round_trip_is_bitwise() {
        let f = flow();
        let g = from_json(&to_json(&f)).unwrap();
        for (a, b) in f.params().values().iter().zip(g.params().values()) {
            let ab: Vec<u64> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn distinct_errors() {
        let text = to_json(&flow());
        let truncated = &text[..text.len() / 2];
        assert!(matches!(from_json(truncated), Err(FlowError::Checkpoint(CheckpointError::Truncated))));

        let bumped = text.replacen("\"format_version\":1", "\"format_version\":7", 1);
        assert!(matches!(
            from_json(&bumped),
            Err(FlowError::Checkpoint(CheckpointError::VersionMismatch { found: 7, .. }))
        ));

        let mutated = text.replacen("\"hidden_units\":50", "\"hidden_units\":51", 1);
        assert!(matches!(
            from_json(&mutated),
            Err(FlowError::Checkpoint(CheckpointError::ArchitectureHash { .. }))
        ));
    }
}
