//! Benchmark tasks: prior, simulators per fidelity, estimator shape and
//! reference posteriors.

use crate::config::{ExperimentConfig, TaskId};
use mfsbi_core::algorithms::EstimatorConfig;
use mfsbi_core::flow::EmbeddingSpec;
use mfsbi_core::prior::Prior;
use mfsbi_core::reference::{
    kernel_log_weight, ou_euler_loglik, rejection_sample, sir_resample, ReferenceError, ReferenceMethod,
    ReferenceSampleSet, RejectionConfig,
};
use mfsbi_core::simulators::{
    blob_prior, simulate_batch, simulate_one, sir_prior, slcp_loglik, slcp_prior, BlobConfig, BlobHigh, BlobLow,
    OuConfig, OuHigh, OuLow, OuPerturbed, OuVariant, PerturbationSpec, SimError, Simulator, SirHigh, SirLow, SlcpHigh,
    SlcpLow,
};
use mfsbi_core::tensor::Tensor;
use mfsbi_core::train::TrainConfig;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fidelity {
    Low,
    /// Coarse-step OU, the middle level of a three-level chain.
    Mid,
    High,
}

impl Fidelity {
    pub fn level(self) -> u8 {
        match self {
            Fidelity::Low => 0,
            Fidelity::Mid => 1,
            Fidelity::High => 2,
        }
    }
}

impl FromStr for Fidelity {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "low" => Ok(Fidelity::Low),
            "mid" => Ok(Fidelity::Mid),
            "high" => Ok(Fidelity::High),
            _ => Err(format!("unknown fidelity `{s}` (expected low, mid or high)")),
        }
    }
}

pub struct Task {
    pub id: TaskId,
    pub prior: Prior,
    pub high: Box<dyn Simulator>,
    pub low: Box<dyn Simulator>,
    pub mid: Option<Box<dyn Simulator>>,
    pub estimator: EstimatorConfig,
    sir_bandwidth: f64,
}

/// One test observation and the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: usize,
    pub theta: Vec<f64>,
    pub x: Vec<f64>,
}

fn ou_variant(id: TaskId) -> Option<OuVariant> {
    match id {
        TaskId::Ou2 | TaskId::Ou2Perturbed => Some(OuVariant::Ou2),
        TaskId::Ou3 => Some(OuVariant::Ou3),
        TaskId::Ou4 => Some(OuVariant::Ou4),
        _ => None,
    }
}

impl Task {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let train = TrainConfig {
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate,
            patience: cfg.patience,
            max_epochs: cfg.max_epochs,
            ..TrainConfig::default()
        };
        let mut estimator =
            EstimatorConfig { transforms: cfg.transforms, hidden_units: cfg.hidden_units, train, ..EstimatorConfig::default() };
        let id = cfg.task;
        let (prior, high, low, mid): (Prior, Box<dyn Simulator>, Box<dyn Simulator>, Option<Box<dyn Simulator>>) =
            match id {
                TaskId::Ou2 | TaskId::Ou3 | TaskId::Ou4 => {
                    let v = ou_variant(id).expect("ou task");
                    (
                        v.prior(),
                        Box::new(OuHigh::new(v)),
                        Box::new(OuLow::new(v)),
                        Some(Box::new(OuHigh::with_config(v, OuConfig::coarse()))),
                    )
                }
                TaskId::Ou2Perturbed => {
                    let v = OuVariant::Ou2;
                    let spec = PerturbationSpec { delta: cfg.delta, invert: cfg.invert };
                    (v.prior(), Box::new(OuHigh::new(v)), Box::new(OuPerturbed::new(v, spec)), None)
                }
                TaskId::Slcp => (slcp_prior(), Box::new(SlcpHigh), Box::new(SlcpLow), None),
                TaskId::Sir => (sir_prior(), Box::new(SirHigh::default()), Box::new(SirLow::default()), None),
                TaskId::Blob => {
                    let config = BlobConfig { output_side: cfg.blob_side, ..BlobConfig::default() };
                    estimator.embedding = EmbeddingSpec::blob_cnn(cfg.blob_side);
                    (blob_prior(), Box::new(BlobHigh { config }), Box::new(BlobLow { config }), None)
                }
            };
        Self { id, prior, high, low, mid, estimator, sir_bandwidth: cfg.sir_bandwidth }
    }

    pub fn simulator(&self, f: Fidelity) -> Result<&dyn Simulator, String> {
        match f {
            Fidelity::Low => Ok(self.low.as_ref()),
            Fidelity::High => Ok(self.high.as_ref()),
            Fidelity::Mid => self.mid.as_deref().ok_or_else(|| format!("task {} has no middle fidelity", self.id)),
        }
    }

    /// Whether reference posterior samples can be generated.
    pub fn has_reference(&self) -> bool {
        self.id != TaskId::Blob
    }

    /// `n` test observations simulated at high fidelity from prior draws;
    /// the first `k` observations do not depend on `n`.
    pub fn observations(&self, n: usize, seed: u64) -> Result<Vec<Observation>, SimError> {
        let (theta, x, _) = simulate_batch(self.high.as_ref(), &self.prior, n, seed)?;
        Ok((0..n).map(|i| Observation { id: i, theta: theta.row(i).to_vec(), x: x.row(i).to_vec() }).collect())
    }

    pub fn reference_method(&self) -> ReferenceMethod {
        match self.id {
            TaskId::Sir => ReferenceMethod::ImportanceResampling,
            _ => ReferenceMethod::Rejection,
        }
    }

    /// Reference posterior samples at `x_o`.
    pub fn reference(&self, x_o: &[f64], n: usize, seed: u64) -> Result<ReferenceSampleSet, ReferenceError> {
        let mut set = match self.id {
            TaskId::Ou2 | TaskId::Ou3 | TaskId::Ou4 | TaskId::Ou2Perturbed => {
                let v = ou_variant(self.id).expect("ou task");
                let config = OuConfig::default();
                let ll = |t: &[f64]| ou_euler_loglik(&v.params(t), x_o, &config).unwrap_or(f64::NEG_INFINITY);
                rejection_sample(&ll, &self.prior, n, seed, &RejectionConfig::default())?
            }
            TaskId::Slcp => {
                let ll = |t: &[f64]| slcp_loglik(t, x_o);
                rejection_sample(&ll, &self.prior, n, seed, &RejectionConfig::default())?
            }
            TaskId::Sir => {
                let sim = self.high.as_ref();
                let h = self.sir_bandwidth;
                let lw = |t: &[f64]| kernel_log_weight(&simulate_one(sim, t, 0).summary, x_o, h);
                sir_resample(&lw, &self.prior, 20 * n, n, seed)?
            }
            TaskId::Blob => {
                return Err(ReferenceError::Invalid(
                    "blob has no tractable likelihood; use the nltp or nrmse metrics".into(),
                ))
            }
        };
        set.task = self.id.to_string();
        Ok(set)
    }

    /// Prior interval widths, for NRMSE.
    pub fn ranges(&self) -> Vec<f64> {
        match self.prior.ranges() {
            Ok(r) => r,
            // unbounded marginals: use a spread from prior draws
            Err(_) => {
                let mut rng = mfsbi_core::simulators::row_rng(0, 0);
                let draws: Vec<Vec<f64>> = (0..10_000).map(|_| self.prior.sample(&mut rng)).collect();
                let t = Tensor::from_rows(&draws).expect("rows");
                (0..t.cols())
                    .map(|j| {
                        let (lo, hi) = t.iter_rows().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r[j]), b.max(r[j])));
                        hi - lo
                    })
                    .collect()
            }
        }
    }
}
