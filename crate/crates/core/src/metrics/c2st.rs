use super::{check_pair, MetricError};
use crate::nn::{Activation, Mlp, ParamStore};
use crate::pool::{parallel_map, worker_count};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, Tensor};
use crate::train::EarlyStopState;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Classifier and cross-validation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct C2stConfig {
    pub folds: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of each training fold held out for early stopping.
    pub val_fraction: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl Default for C2stConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            hidden_units: 100,
            hidden_layers: 2,
            learning_rate: 1e-3,
            batch_size: 200,
            val_fraction: 0.1,
            patience: 10,
            max_epochs: 1000,
        }
    }
}

pub const MIN_ROWS: usize = 100;

/// Classifier two-sample test with the default classifier.
pub fn c2st(a: &Tensor, b: &Tensor, seed: u64) -> Result<f64, MetricError> {
    c2st_with(a, b, seed, &C2stConfig::default())
}

/// Mean held-out accuracy of a ReLU classifier separating `a` from `b`
/// under k-fold cross-validation, on z-scored pooled data.
pub fn c2st_with(a: &Tensor, b: &Tensor, seed: u64, config: &C2stConfig) -> Result<f64, MetricError> {
    let accs = c2st_folds(a, b, seed, config)?;
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Held-out accuracy of each cross-validation fold.
pub fn c2st_folds(a: &Tensor, b: &Tensor, seed: u64, config: &C2stConfig) -> Result<Vec<f64>, MetricError> {
    check_pair(a, b, MIN_ROWS)?;
    let d = a.cols();
    let n = a.rows() + b.rows();
    let pooled = Tensor::vstack(&[a, b]).expect("same width");
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for r in pooled.iter_rows() {
        for j in 0..d {
            mean[j] += r[j] / n as f64;
        }
    }
    for r in pooled.iter_rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / n as f64;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| v.sqrt().max(1e-12)).collect();
    let mut z = pooled.clone();
    for r in 0..n {
        for (j, v) in z.row_mut(r).iter_mut().enumerate() {
            *v = (*v - mean[j]) / std[j];
        }
    }
    let labels: Vec<f64> = (0..n).map(|i| if i < a.rows() { 0.0 } else { 1.0 }).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let k = config.folds.max(2);
    let accs = parallel_map(k, worker_count(), |f| {
        let test: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % k == f).map(|(_, &r)| r).collect();
        let train: Vec<usize> = order.iter().enumerate().filter(|(i, _)| i % k != f).map(|(_, &r)| r).collect();
        fold_accuracy(&z, &labels, &train, &test, config, seed.wrapping_add(f as u64 + 1))
    });
    Ok(accs)
}

fn batch(z: &Tensor, labels: &[f64], rows: &[usize]) -> (Tensor, Tensor) {
    let x = z.select_rows(rows);
    let y = Tensor::new(vec![rows.len(), 1], rows.iter().map(|&r| labels[r]).collect()).expect("len");
    (x, y)
}

fn logits(net: &Mlp, store: &ParamStore, x: &Tensor) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars = store.register(&mut tape, false);
    let xv = tape.constant(x.clone());
    let out = net.forward(&mut tape, &vars, xv).expect("classifier forward");
    tape.value(out).data().to_vec()
}

fn bce(logits: &[f64], y: &[f64]) -> f64 {
    logits
        .iter()
        .zip(y)
        .map(|(&l, &t)| l.max(0.0) - l * t + (-l.abs()).exp().ln_1p())
        .sum::<f64>()
        / logits.len() as f64
}

fn fold_accuracy(z: &Tensor, labels: &[f64], train: &[usize], test: &[usize], config: &C2stConfig, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_val = ((train.len() as f64) * config.val_fraction).round().max(1.0) as usize;
    let (val, fit) = train.split_at(n_val);
    let mut store = ParamStore::new();
    let mut sizes = vec![z.cols()];
    sizes.extend(std::iter::repeat_n(config.hidden_units, config.hidden_layers));
    sizes.push(1);
    let net = Mlp::new(&mut store, "classifier", &sizes, Activation::Relu, &mut rng);
    let names = store.names().to_vec();
    let mut adam = AdamState::new(AdamConfig { lr: config.learning_rate, ..AdamConfig::default() }, store.values());
    let (val_x, val_y) = batch(z, labels, val);
    let mut stopper = EarlyStopState::new(config.patience);
    let mut order = fit.to_vec();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        for rows in order.chunks(config.batch_size) {
            let (x, y) = batch(z, labels, rows);
            let mut tape = Tape::new();
            let vars = store.register(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(y);
            let l = net.forward(&mut tape, &vars, xv).expect("classifier forward");
            // softplus(l) − y·l is the logistic loss with logits.
            let sp = tape.softplus(l).expect("softplus");
            let yl = tape.mul(yv, l).expect("same shape");
            let per = tape.sub(sp, yl).expect("same shape");
            let loss = tape.mean(per).expect("mean");
            tape.backward(loss).expect("scalar loss");
            let grads = store.grads(&tape, &vars);
            if adam_step(&mut adam, store.values_mut(), &grads, &names).is_err() {
                break;
            }
        }
        let val_loss = bce(&logits(&net, &store, &val_x), val_y.data());
        if stopper.update(epoch, val_loss, &store) {
            break;
        }
    }
    if let Some(best) = stopper.best_params.take() {
        store = best;
    }
    let (tx, ty) = batch(z, labels, test);
    let correct = logits(&net, &store, &tx)
        .iter()
        .zip(ty.data())
        .filter(|(&l, &t)| (l > 0.0) == (t > 0.5))
        .count();
    correct as f64 / test.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..n * d).map(|_| shift + Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    #[test]
    fn separated_sets_are_distinguished() {
        let acc = c2st(&normal(300, 2, 0.0, 1), &normal(300, 2, 10.0, 2), 0).unwrap();
        assert!(acc > 0.99, "{acc}");
    }

    #[test]
    fn too_few_rows_is_an_error() {
        assert!(matches!(c2st(&normal(50, 1, 0.0, 1), &normal(50, 1, 0.0, 2), 0), Err(MetricError::TooFewSamples { .. })));
    }
}
