//! Posterior estimation algorithms: NPE, multifidelity transfer (two levels
//! or a chain), truncated sequential rounds and ensemble active learning.

mod active;
mod posterior;
mod sequential;

pub use active::{acquisition_scores, run_a_mf_tsnpe, ActiveConfig, ActiveReport, ActiveRound};
pub use posterior::{EnsemblePosterior, FlowPosterior, PosteriorModel, PriorPosterior};
pub use sequential::{
    hpr_threshold, run_mf_tsnpe, run_tsnpe, sample_truncated, LowFidelity, RoundData, RoundRecord, SequentialConfig,
    SequentialReport, TruncatedProposal,
};


use crate::data::FidelityDataset;
use crate::flow::{ConditionalFlow, EmbeddingSpec, FlowArchitecture, FlowError, LogitBox};
use crate::prior::{Prior, PriorError};
use crate::simulators::SimError;
use crate::tensor::TensorError;
use crate::train::{train, StandardizerPolicy, TrainConfig, TrainError, TrainReport};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Invalid(String),
    #[error("the {0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("low-fidelity dataset is empty; use plain NPE instead")]
    NoLowFidelity,
    #[error("this posterior was trained for a single observation and cannot be evaluated at another")]
    ObservationMismatch,
    #[error("posterior is not amortized")]
    NotAmortized,
    #[error("truncated proposal accepted {accepted} of {trials} prior draws; the region is degenerate")]
    DegenerateTruncation { accepted: usize, trials: usize },
}

/// Network shape shared by every stage of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub embedding: EmbeddingSpec,
    pub transforms: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub permutation_seed: u64,
    pub train: TrainConfig,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        let a = FlowArchitecture::new(1, 1);
        Self {
            embedding: EmbeddingSpec::Identity,
            transforms: a.transforms,
            hidden_units: a.hidden_units,
            hidden_layers: a.hidden_layers,
            permutation_seed: a.permutation_seed,
            train: TrainConfig::default(),
        }
    }
}

impl EstimatorConfig {
    pub fn architecture(&self, theta_dim: usize, x_dim: usize) -> FlowArchitecture {
        let mut a = FlowArchitecture::new(theta_dim, x_dim).with_embedding(self.embedding.clone());
        a.transforms = self.transforms;
        a.hidden_units = self.hidden_units;
        a.hidden_layers = self.hidden_layers;
        a.permutation_seed = self.permutation_seed;
        a
    }

    /// Untrained flow whose logit box is the prior support.
    pub fn build(&self, prior: &Prior, x_dim: usize, seed: u64) -> Result<ConditionalFlow, AlgoError> {
        let (lo, hi) = prior.support_box()?;
        let bx = LogitBox::new(lo, hi)?;
        Ok(ConditionalFlow::new(self.architecture(prior.dim(), x_dim), bx, seed)?)
    }
}

/// Independent sub-seed for stage `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_dataset(prior: &Prior, d: &FidelityDataset, which: &'static str) -> Result<(), AlgoError> {
    if d.is_empty() {
        return Err(AlgoError::EmptyDataset(which));
    }
    if d.theta_dim() != prior.dim() {
        return Err(AlgoError::Invalid(format!(
            "{which} dataset has θ dimension {}, prior has {}",
            d.theta_dim(),
            prior.dim()
        )));
    }
    Ok(())
}

/// Train a fresh flow on one dataset, fitting preprocessing on it.
pub fn pretrain(
    prior: &Prior,
    data: &FidelityDataset,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(ConditionalFlow, TrainReport), AlgoError> {
    check_dataset(prior, data, "training")?;
    let mut flow = config.build(prior, data.x_dim(), derive_seed(seed, 1000))?;
    let tc = config.train.with_seed(derive_seed(seed, 0));
    let report = train(&mut flow, &data.theta, &data.x, &tc, StandardizerPolicy::Fit)?;
    Ok((flow, report))
}

/// Copy `source` into a new flow and keep training it on `data`.
/// Preprocessing statistics carry over unchanged and no weights are frozen.
pub fn fine_tune(
    source: &ConditionalFlow,
    data: &FidelityDataset,
    config: &EstimatorConfig,
    seed: u64,
    stage: u64,
) -> Result<(ConditionalFlow, TrainReport), AlgoError> {
    if data.is_empty() {
        return Err(AlgoError::EmptyDataset("high-fidelity"));
    }
    let mut flow = ConditionalFlow::new(source.architecture().clone(), source.theta_box().clone(), derive_seed(seed, 1000 + stage))?;
    flow.clone_weights_from(source)?;
    let tc = config.train.with_seed(derive_seed(seed, stage));
    let report = train(&mut flow, &data.theta, &data.x, &tc, StandardizerPolicy::Keep)?;
    Ok((flow, report))
}

/// Amortized NPE on high-fidelity data alone.
pub fn run_npe(
    prior: &Prior,
    hf: &FidelityDataset,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(FlowPosterior, TrainReport), AlgoError> {
    let (flow, report) = pretrain(prior, hf, config, seed)?;
    Ok((FlowPosterior::amortized(flow, prior.clone()), report))
}

/// Pretrain on low fidelity, then fine-tune a copy on high fidelity.
pub fn run_mf_npe(
    prior: &Prior,
    lf: &FidelityDataset,
    hf: &FidelityDataset,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(FlowPosterior, Vec<TrainReport>), AlgoError> {
    if lf.is_empty() {
        return Err(AlgoError::NoLowFidelity);
    }
    run_mf_npe_chain(prior, &[lf, hf], config, seed)
}

/// Train on each fidelity in ascending order, initialising every level from
/// the previous one. A fresh optimizer is used per level.
pub fn run_mf_npe_chain(
    prior: &Prior,
    levels: &[&FidelityDataset],
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(FlowPosterior, Vec<TrainReport>), AlgoError> {
    if levels.len() < 2 {
        return Err(AlgoError::Invalid("a fidelity chain needs at least two levels".into()));
    }
    for (f, d) in levels.iter().enumerate() {
        check_dataset(prior, d, if f == 0 { "low-fidelity" } else { "higher-fidelity" })?;
        if d.x_dim() != levels[0].x_dim() {
            return Err(AlgoError::Invalid(format!("level {f} has x dimension {}, level 0 has {}", d.x_dim(), levels[0].x_dim())));
        }
    }
    let (mut flow, first) = pretrain(prior, levels[0], config, seed)?;
    let mut reports = vec![first];
    for (f, d) in levels.iter().enumerate().skip(1) {
        let (next, report) = fine_tune(&flow, d, config, seed, f as u64)?;
        flow = next;
        reports.push(report);
    }
    Ok((FlowPosterior::amortized(flow, prior.clone()), reports))
}
