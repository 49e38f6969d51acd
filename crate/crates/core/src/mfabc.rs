//! Multifidelity rejection ABC with early acceptance and rejection.
//!
//! Each particle θ ~ prior is first judged on the low-fidelity distance.
//! The high-fidelity simulator then runs with probability η₁ after a
//! low-fidelity accept and η₂ after a reject, and the weight
//! `a_L + (a_H − a_L) / η` corrects the low-fidelity decision. The weights
//! are unbiased for the high-fidelity acceptance probability but may be
//! negative.

use crate::pool::{parallel_map, worker_count};
use crate::prior::Prior;
use crate::simulators::{row_rng, SimError, Simulator};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MfAbcError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("every particle has zero weight; increase the acceptance thresholds")]
    AllZero,
    #[error("total positive weight {0} is not positive")]
    NoPositiveMass(f64),
    #[error("x_o has length {got}, simulators produce {expected}")]
    Observation { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfAbcConfig {
    /// Low- and high-fidelity acceptance thresholds.
    pub epsilon: (f64, f64),
    /// Continuation probabilities after a low-fidelity accept and reject.
    pub eta: (f64, f64),
    /// Prior draws used to z-score summaries.
    pub pilot: usize,
}

impl Default for MfAbcConfig {
    fn default() -> Self {
        Self { epsilon: (1.0, 1.0), eta: (0.9, 0.3), pilot: 10_000 }
    }
}

impl MfAbcConfig {
    pub fn validate(&self) -> Result<(), MfAbcError> {
        let (el, eh) = self.epsilon;
        if !(el > 0.0 && eh > 0.0) {
            return Err(MfAbcError::Config("epsilon components must be positive".into()));
        }
        let ok = |e: f64| e > 0.0 && e <= 1.0;
        if !(ok(self.eta.0) && ok(self.eta.1)) {
            return Err(MfAbcError::Config("eta components must lie in (0, 1]".into()));
        }
        if self.pilot < 2 {
            return Err(MfAbcError::Config("pilot run needs at least two draws".into()));
        }
        Ok(())
    }
}

/// Per-dimension z-scoring of summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryScale {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SummaryScale {
    /// Mean and standard deviation of `sim` outputs over `n` prior draws.
    pub fn pilot(sim: &dyn Simulator, prior: &Prior, n: usize, seed: u64) -> Self {
        let rows = parallel_map(n, worker_count(), |i| {
            let mut rng = row_rng(seed, i as u64);
            let theta = prior.sample(&mut rng);
            sim.simulate(&theta, &mut rng).summary
        });
        let rows: Vec<Vec<f64>> = rows.into_iter().filter(|r| r.iter().all(|v| v.is_finite())).collect();
        let d = sim.x_dim();
        let m = rows.len().max(1) as f64;
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / m).collect();
        let std = (0..d)
            .map(|j| (rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / m).sqrt().max(1e-12))
            .collect();
        Self { mean, std }
    }

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.std)
            .map(|((x, y), s)| ((x - y) / s).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FidelityPath {
    LowOnly,
    LowAndHigh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedParticle {
    pub theta: Vec<f64>,
    pub weight: f64,
    pub path: FidelityPath,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfAbcResult {
    pub particles: Vec<WeightedParticle>,
    pub lf_calls: usize,
    pub hf_calls: usize,
    pub scale_low: SummaryScale,
    pub scale_high: SummaryScale,
}

impl MfAbcResult {
    pub fn hf_fraction(&self) -> f64 {
        self.hf_calls as f64 / self.particles.len() as f64
    }

    /// Sum of negative weights, a diagnostic of estimator variance.
    pub fn negative_mass(&self) -> f64 {
        self.particles.iter().map(|p| p.weight.min(0.0)).sum()
    }
}

// Stream tags so that θ, each simulator and the continuation coin use
// independent, reproducible streams per particle.
const THETA: u64 = 0;
const LOW: u64 = 0x4c4f57;
const HIGH: u64 = 0x484947;
const COIN: u64 = 0x434f49;

fn stream(seed: u64, tag: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    row_rng(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15), i as u64)
}

fn check_x(sim: &dyn Simulator, x_o: &[f64]) -> Result<(), MfAbcError> {
    if sim.x_dim() != x_o.len() {
        return Err(MfAbcError::Observation { expected: sim.x_dim(), got: x_o.len() });
    }
    Ok(())
}

/// Run `n` particles. Pilot scales come from `pilot_seed`-derived runs so
/// that they can be shared with plain rejection ABC.
pub fn run_mf_abc(
    prior: &Prior,
    lf_sim: &dyn Simulator,
    hf_sim: &dyn Simulator,
    x_o: &[f64],
    n: usize,
    config: &MfAbcConfig,
    seed: u64,
) -> Result<MfAbcResult, MfAbcError> {
    config.validate()?;
    check_x(lf_sim, x_o)?;
    check_x(hf_sim, x_o)?;
    let scale_low = SummaryScale::pilot(lf_sim, prior, config.pilot, seed ^ LOW);
    let scale_high = SummaryScale::pilot(hf_sim, prior, config.pilot, seed ^ HIGH);
    let (el, eh) = config.epsilon;
    let (e1, e2) = config.eta;
    let particles = parallel_map(n, worker_count(), |i| {
        let theta = prior.sample(&mut stream(seed, THETA, i));
        let xl = lf_sim.simulate(&theta, &mut stream(seed, LOW, i)).summary;
        let a_l = if scale_low.distance(&xl, x_o) < el { 1.0 } else { 0.0 };
        let eta = if a_l > 0.0 { e1 } else { e2 };
        let coin: f64 = stream(seed, COIN, i).random();
        if coin < eta {
            let xh = hf_sim.simulate(&theta, &mut stream(seed, HIGH, i)).summary;
            let a_h = if scale_high.distance(&xh, x_o) < eh { 1.0 } else { 0.0 };
            WeightedParticle { theta, weight: a_l + (a_h - a_l) / eta, path: FidelityPath::LowAndHigh }
        } else {
            WeightedParticle { theta, weight: a_l, path: FidelityPath::LowOnly }
        }
    });
    let hf_calls = particles.iter().filter(|p| p.path == FidelityPath::LowAndHigh).count();
    if particles.iter().all(|p| p.weight == 0.0) {
        return Err(MfAbcError::AllZero);
    }
    Ok(MfAbcResult { particles, lf_calls: n, hf_calls, scale_low, scale_high })
}

/// Plain rejection ABC on the high-fidelity simulator, drawing θ and the
/// simulator noise from the same streams as [`run_mf_abc`].
pub fn rejection_abc(
    prior: &Prior,
    hf_sim: &dyn Simulator,
    x_o: &[f64],
    n: usize,
    epsilon: f64,
    pilot: usize,
    seed: u64,
) -> Result<Vec<WeightedParticle>, MfAbcError> {
    check_x(hf_sim, x_o)?;
    let scale = SummaryScale::pilot(hf_sim, prior, pilot, seed ^ HIGH);
    Ok(parallel_map(n, worker_count(), |i| {
        let theta = prior.sample(&mut stream(seed, THETA, i));
        let xh = hf_sim.simulate(&theta, &mut stream(seed, HIGH, i)).summary;
        let w = if scale.distance(&xh, x_o) < epsilon { 1.0 } else { 0.0 };
        WeightedParticle { theta, weight: w, path: FidelityPath::LowAndHigh }
    }))
}

/// Multinomial resampling proportional to max(w, 0).
pub fn resample_particles(particles: &[WeightedParticle], n_out: usize, seed: u64) -> Result<Tensor, MfAbcError> {
    let total: f64 = particles.iter().map(|p| p.weight.max(0.0)).sum();
    let negative: f64 = particles.iter().map(|p| p.weight.min(0.0)).sum();
    if !(total > 0.0) || total + negative <= 0.0 {
        return Err(MfAbcError::NoPositiveMass(total + negative));
    }
    if negative < 0.0 {
        log::info!("resampling drops negative weight mass {negative:.3} against positive {total:.3}");
    }
    let d = particles[0].theta.len();
    let mut cum = Vec::with_capacity(particles.len());
    let mut acc = 0.0;
    for p in particles {
        acc += p.weight.max(0.0);
        cum.push(acc);
    }
    let mut rng = row_rng(seed, 0);
    let mut out = Vec::with_capacity(n_out * d);
    for _ in 0..n_out {
        let u = rng.random::<f64>() * acc;
        let i = cum.partition_point(|&c| c <= u).min(particles.len() - 1);
        out.extend_from_slice(&particles[i].theta);
    }
    Ok(Tensor::new(vec![n_out, d], out).expect("rows"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_positive_particle_is_always_drawn() {
        let ps: Vec<WeightedParticle> = (0..5)
            .map(|i| WeightedParticle {
                theta: vec![i as f64],
                weight: if i == 3 { 1.0 } else { 0.0 },
                path: FidelityPath::LowOnly,
            })
            .collect();
        let t = resample_particles(&ps, 100, 1).unwrap();
        assert!(t.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn config_is_checked() {
        let c = MfAbcConfig { eta: (0.0, 0.3), ..MfAbcConfig::default() };
        assert!(c.validate().is_err());
        let c = MfAbcConfig { epsilon: (1.0, -1.0), ..MfAbcConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn no_positive_mass_is_an_error() {
        let ps = vec![WeightedParticle { theta: vec![0.0], weight: 0.0, path: FidelityPath::LowOnly }];
        assert!(resample_particles(&ps, 3, 0).is_err());
    }
}
