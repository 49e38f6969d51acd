//! Minibatch maximum-likelihood training with validation early stopping.

use crate::flow::{ConditionalFlow, EmbeddingSpec, FlowError, Prepared, Standardizer};
use crate::nn::ParamStore;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset has {0} rows; at least 10 are needed for a train/validation split")]
    TooSmall(usize),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("epoch {epoch}, batch {batch}: {source}")]
    Step {
        epoch: usize,
        batch: usize,
        #[source]
        source: FlowError,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 200,
            learning_rate: 5e-4,
            val_fraction: 0.1,
            patience: 20,
            max_epochs: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(TrainError::Config(format!("val_fraction {} not in (0, 1)", self.val_fraction)));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::Config("patience, batch_size and max_epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

/// Whether preprocessing statistics are refit on the new data or carried
/// over from a previous training stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StandardizerPolicy {
    Fit,
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(e).expect("serializable") + "\n")
            .collect()
    }
}

/// Tracks the lowest validation loss and the parameters that achieved it.
#[derive(Debug, Clone)]
pub struct EarlyStopState {
    pub best: f64,
    pub best_epoch: usize,
    pub best_params: Option<ParamStore>,
    pub epochs_since_improvement: usize,
    patience: usize,
}

impl EarlyStopState {
    pub fn new(patience: usize) -> Self {
        Self {
            best: f64::INFINITY,
            best_epoch: 0,
            best_params: None,
            epochs_since_improvement: 0,
            patience,
        }
    }

    /// Record an epoch; returns true when training should stop. Ties keep
    /// the earlier snapshot.
    pub fn update(&mut self, epoch: usize, val_loss: f64, params: &ParamStore) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.best_params = Some(params.clone());
            self.epochs_since_improvement = 0;
        } else {
            self.epochs_since_improvement += 1;
        }
        self.epochs_since_improvement >= self.patience
    }
}

/// Seeded shuffle split; the validation part has `round(fraction * n)` rows.
pub fn split_train_val(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), TrainError> {
    if n < 10 {
        return Err(TrainError::TooSmall(n));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(TrainError::Config(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    Ok((train, val))
}

/// Mean negative log density of a prepared batch, recorded on the tape.
pub fn nll_loss(flow: &ConditionalFlow, tape: &mut Tape, vars: &[Var], batch: &Prepared) -> Result<Var, FlowError> {
    let lp = flow.log_prob_tape(tape, vars, batch)?;
    let s = tape.sum(lp)?;
    Ok(tape.scale(s, -1.0 / batch.len() as f64)?)
}

/// Mean negative log density without recording gradients.
pub fn eval_nll(flow: &ConditionalFlow, data: &Prepared) -> Result<f64, FlowError> {
    let lp = flow.log_prob_prepared(data)?;
    Ok(-lp.iter().sum::<f64>() / lp.len() as f64)
}

/// Fit the x and θ standardizers of `flow` on the given rows.
pub fn fit_standardizers(flow: &mut ConditionalFlow, theta: &Tensor, x: &Tensor, rows: &[usize]) -> Result<(), FlowError> {
    let p = flow.x_dim();
    let xs = if matches!(flow.architecture().embedding, EmbeddingSpec::Cnn { .. }) {
        Standardizer::fit_scalar(p, rows.iter().map(|&i| x.row(i)))
    } else {
        Standardizer::fit(p, rows.iter().map(|&i| x.row(i)))
    };
    let d = flow.theta_dim();
    let mut logits = Vec::with_capacity(rows.len());
    let mut buf = vec![0.0; d];
    for &i in rows {
        flow.theta_box().forward(theta.row(i), &mut buf)?;
        logits.push(buf.clone());
    }
    let ts = Standardizer::fit(d, logits.iter().map(|r| r.as_slice()));
    flow.set_standardizers(xs, ts)
}

/// Train `flow` in place and leave it at the best-validation parameters.
pub fn train(
    flow: &mut ConditionalFlow,
    theta: &Tensor,
    x: &Tensor,
    config: &TrainConfig,
    policy: StandardizerPolicy,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    let start = Instant::now();
    let n = theta.rows();
    if x.rows() != n {
        return Err(TrainError::Config(format!("{} θ rows but {} x rows", n, x.rows())));
    }
    let (train_idx, val_idx) = split_train_val(n, config.val_fraction, config.seed)?;
    if policy == StandardizerPolicy::Fit {
        fit_standardizers(flow, theta, x, &train_idx)?;
    }
    let all = flow.prepare(theta, x)?;
    let train_set = all.select(&train_idx);
    let val_set = all.select(&val_idx);

    let mut adam = AdamState::new(
        AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        },
        flow.params().values(),
    );
    let mut stopper = EarlyStopState::new(config.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut epochs = Vec::new();
    let mut reason = StopReason::MaxEpochs;
    let names = flow.params().names().to_vec();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, rows) in order.chunks(config.batch_size).enumerate() {
            let batch = train_set.select(rows);
            let mut tape = Tape::new();
            let vars = flow.params().register(&mut tape, true);
            let loss = nll_loss(flow, &mut tape, &vars, &batch).map_err(|source| TrainError::Step {
                epoch,
                batch: b,
                source,
            })?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            total += value * rows.len() as f64;
            tape.backward(loss).map_err(|e| TrainError::Step {
                epoch,
                batch: b,
                source: e.into(),
            })?;
            let grads = flow.params().grads(&tape, &vars);
            adam_step(&mut adam, flow.params_mut().values_mut(), &grads, &names).map_err(|e| TrainError::Step {
                epoch,
                batch: b,
                source: e.into(),
            })?;
        }
        let val_loss = eval_nll(flow, &val_set).map_err(|source| TrainError::Step {
            epoch,
            batch: usize::MAX,
            source,
        })?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / train_set.len() as f64,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {:.5} val {val_loss:.5}", total / train_set.len() as f64);
        if stopper.update(epoch, val_loss, flow.params()) {
            reason = StopReason::Patience;
            break;
        }
    }
    let stop_epoch = epochs.len();
    if let Some(best) = stopper.best_params.take() {
        *flow.params_mut() = best;
    }
    Ok(TrainReport {
        epochs,
        stop_epoch,
        stop_reason: reason,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
