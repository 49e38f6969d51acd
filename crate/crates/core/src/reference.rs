//! Ground-truth posterior samples: exact OU likelihoods with rejection
//! sampling, and sampling-importance-resampling for other tasks.

use crate::pool::{parallel_map, worker_count};
use crate::prior::Prior;
use crate::simulators::{row_rng, OuConfig, OuParams};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum ReferenceError {
    #[error("invalid likelihood argument: {0}")]
    Domain(String),
    #[error("rejection acceptance rate {rate:.3e} is below 1e-7; use importance resampling instead")]
    LowAcceptance { rate: f64 },
    #[error("effective sample size {ess:.2} is below 10; the importance weights are degenerate")]
    DegenerateWeights { ess: f64 },
    #[error("{0}")]
    Invalid(String),
}

/// Log-likelihood of observed OU points spaced `dt` apart under the exact
/// continuous-time transition density, with X(0) ~ N(μ + μ_offset, 1).
pub fn ou_exact_loglik(p: &OuParams, x: &[f64], dt: f64) -> Result<f64, ReferenceError> {
    if !(p.gamma > 0.0 && p.sigma > 0.0 && dt > 0.0) {
        return Err(ReferenceError::Domain(format!("γ={}, σ={}, Δt={dt} must be positive", p.gamma, p.sigma)));
    }
    if x.is_empty() {
        return Err(ReferenceError::Domain("no observed points".into()));
    }
    let g = -(-2.0 * p.gamma * dt).exp_m1() / p.gamma;
    let decay = 1.0 - p.gamma * g;
    assert!(decay >= 0.0, "γg = 1 − exp(−2γΔt) < 1");
    let a = decay.sqrt();
    let d0 = x[0] - (p.mu + p.offset);
    let mut ll = -0.5 * LN_2PI - 0.5 * d0 * d0;
    let norm = -0.5 * (std::f64::consts::PI * g).ln() - p.sigma.ln();
    let denom = g * p.sigma * p.sigma;
    for w in x.windows(2) {
        let r = (p.mu - w[1]) - a * (p.mu - w[0]);
        ll += norm - r * r / denom;
    }
    Ok(ll)
}

/// Log-likelihood of the observed subsample under the Euler-Maruyama
/// scheme that generates it: `stride` steps of size `dt` compose into a
/// Gaussian AR(1) transition.
pub fn ou_euler_loglik(p: &OuParams, x: &[f64], config: &OuConfig) -> Result<f64, ReferenceError> {
    if !(p.sigma > 0.0) || x.is_empty() {
        return Err(ReferenceError::Domain("σ must be positive and x non-empty".into()));
    }
    let a1 = 1.0 - p.gamma * config.dt;
    let k = config.stride as i32;
    let a = a1.powi(k);
    let var_sum = if (a1 * a1 - 1.0).abs() < 1e-15 {
        k as f64
    } else {
        (1.0 - a1.powi(2 * k)) / (1.0 - a1 * a1)
    };
    let var = p.sigma * p.sigma * config.dt * var_sum;
    let d0 = x[0] - (p.mu + p.offset);
    let mut ll = -0.5 * LN_2PI - 0.5 * d0 * d0;
    let norm = -0.5 * (LN_2PI + var.ln());
    for w in x.windows(2) {
        let r = w[1] - (p.mu + a * (w[0] - p.mu));
        ll += norm - 0.5 * r * r / var;
    }
    Ok(ll)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceMethod {
    Rejection,
    ImportanceResampling,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceSampleSet {
    pub task: String,
    pub observation_id: usize,
    pub method: ReferenceMethod,
    pub samples: Tensor,
    pub proposals: usize,
    pub acceptance_rate: Option<f64>,
    pub ess: Option<f64>,
    /// Rejection envelope in nats and the largest log-likelihood seen.
    pub bound: Option<f64>,
    pub observed_max: Option<f64>,
}

/// Rejection-sampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectionConfig {
    pub bound_draws: usize,
    pub margin: f64,
    pub block: usize,
    pub max_restarts: usize,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self { bound_draws: 100_000, margin: 2.0, block: 65_536, max_restarts: 5 }
    }
}

fn prior_block(prior: &Prior, n: usize, seed: u64, block: u64) -> Vec<Vec<f64>> {
    let mut rng = row_rng(seed, block);
    (0..n).map(|_| prior.sample(&mut rng)).collect()
}

fn eval_block<F>(loglik: &F, thetas: &[Vec<f64>]) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let workers = worker_count();
    let chunk = thetas.len().div_ceil(workers.max(1)).max(1);
    let parts = parallel_map(thetas.len().div_ceil(chunk), workers, |c| {
        thetas[c * chunk..((c + 1) * chunk).min(thetas.len())].iter().map(|t| loglik(t)).collect::<Vec<f64>>()
    });
    parts.into_iter().flatten().collect()
}

/// Exact posterior samples by rejection from the prior, with the envelope
/// set to the largest log-likelihood over a prior sweep plus a margin. A
/// likelihood above the envelope restarts with a raised bound.
pub fn rejection_sample<F>(
    loglik: &F,
    prior: &Prior,
    n: usize,
    seed: u64,
    config: &RejectionConfig,
) -> Result<ReferenceSampleSet, ReferenceError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    let sweep = prior_block(prior, config.bound_draws, seed, u64::MAX);
    let mut observed = eval_block(loglik, &sweep).into_iter().fold(f64::NEG_INFINITY, f64::max);
    if !observed.is_finite() {
        return Err(ReferenceError::Invalid("likelihood is zero on every prior draw".into()));
    }
    let mut bound = observed + config.margin;
    'restart: for attempt in 0..=config.max_restarts {
        let mut out = Vec::with_capacity(n * prior.dim());
        let mut got = 0;
        let mut trials = 0usize;
        let mut block_id = 0u64;
        let mut u_rng = ChaCha8Rng::seed_from_u64(seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9));
        while got < n {
            let thetas = prior_block(prior, config.block, seed.wrapping_add(attempt as u64 + 1), block_id);
            block_id += 1;
            let ll = eval_block(loglik, &thetas);
            for (t, &l) in thetas.iter().zip(&ll) {
                trials += 1;
                if l > observed {
                    observed = l;
                }
                if l > bound {
                    log::warn!("rejection bound {bound:.3} exceeded by {l:.3}; restarting with a raised bound");
                    bound = l + config.margin;
                    continue 'restart;
                }
                if got < n && u_rng.random::<f64>().ln() < l - bound {
                    out.extend_from_slice(t);
                    got += 1;
                }
            }
            let rate = got as f64 / trials as f64;
            if trials >= 10_000_000 && rate < 1e-7 {
                return Err(ReferenceError::LowAcceptance { rate });
            }
        }
        return Ok(ReferenceSampleSet {
            task: String::new(),
            observation_id: 0,
            method: ReferenceMethod::Rejection,
            samples: Tensor::new(vec![n, prior.dim()], out).expect("rows"),
            proposals: trials,
            acceptance_rate: Some(n as f64 / trials as f64),
            ess: None,
            bound: Some(bound),
            observed_max: Some(observed),
        });
    }
    Err(ReferenceError::Invalid(format!("bound kept moving after {} restarts", config.max_restarts)))
}

/// Effective sample size of unnormalised log weights.
pub fn effective_sample_size(log_w: &[f64]) -> f64 {
    let m = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return 0.0;
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    s * s / s2
}

/// Draw `n_prop` prior samples, weight them by `log_weight` and resample
/// `n_out` with replacement.
pub fn sir_resample<F>(
    log_weight: &F,
    prior: &Prior,
    n_prop: usize,
    n_out: usize,
    seed: u64,
) -> Result<ReferenceSampleSet, ReferenceError>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if n_prop < n_out || n_out == 0 {
        return Err(ReferenceError::Invalid(format!("need n_prop ({n_prop}) ≥ n_out ({n_out}) > 0")));
    }
    let thetas = prior_block(prior, n_prop, seed, 0);
    let lw = eval_block(log_weight, &thetas);
    let ess = effective_sample_size(&lw);
    if ess < 10.0 {
        return Err(ReferenceError::DegenerateWeights { ess });
    }
    let m = lw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut cum = Vec::with_capacity(n_prop);
    let mut acc = 0.0;
    for l in &lw {
        acc += (l - m).exp();
        cum.push(acc);
    }
    let mut rng = row_rng(seed, 1);
    let mut out = Vec::with_capacity(n_out * prior.dim());
    for _ in 0..n_out {
        let u = rng.random::<f64>() * acc;
        let i = cum.partition_point(|&c| c <= u).min(n_prop - 1);
        out.extend_from_slice(&thetas[i]);
    }
    Ok(ReferenceSampleSet {
        task: String::new(),
        observation_id: 0,
        method: ReferenceMethod::ImportanceResampling,
        samples: Tensor::new(vec![n_out, prior.dim()], out).expect("rows"),
        proposals: n_prop,
        acceptance_rate: None,
        ess: Some(ess),
        bound: None,
        observed_max: None,
    })
}

/// Gaussian kernel log-weight on the distance between summaries, for
/// deterministic simulators without a likelihood.
pub fn kernel_log_weight(summary: &[f64], x_o: &[f64], bandwidth: f64) -> f64 {
    let d2: f64 = summary.iter().zip(x_o).map(|(a, b)| (a - b) * (a - b)).sum();
    if d2.is_finite() {
        -0.5 * d2 / (bandwidth * bandwidth)
    } else {
        f64::NEG_INFINITY
    }
}
