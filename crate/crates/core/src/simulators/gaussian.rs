use super::{SimOutput, Simulator};
use crate::prior::{Marginal, Prior};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// θ ~ N(0, 1) restricted to (−5, 5), x | θ ~ N(θ, noise²).
#[derive(Debug, Clone, Copy)]
pub struct ConjugateGaussian {
    pub noise_std: f64,
}

impl Default for ConjugateGaussian {
    fn default() -> Self {
        Self { noise_std: 0.5 }
    }
}

impl ConjugateGaussian {
    pub fn prior(&self) -> Prior {
        Prior::new(vec![Marginal::Normal { mean: 0.0, std: 1.0, bounds: Some((-5.0, 5.0)) }]).expect("valid prior")
    }
}

/// Mean and standard deviation of θ | x for the untruncated N(0, 1) prior.
/// Truncation at ±5 moves these by less than 1e-5 for |x| ≤ 3.
pub fn conjugate_posterior(x: f64, noise_std: f64) -> (f64, f64) {
    let prec = 1.0 + 1.0 / (noise_std * noise_std);
    (x / (noise_std * noise_std) / prec, prec.recip().sqrt())
}

impl Simulator for ConjugateGaussian {
    fn name(&self) -> &str {
        "gaussian"
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn x_dim(&self) -> usize {
        1
    }
    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        SimOutput::summary(vec![theta[0] + self.noise_std * rng.sample::<f64, _>(StandardNormal)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn posterior_at_one() {
        let (m, s) = conjugate_posterior(1.0, 0.5);
        assert!((m - 0.8).abs() < 1e-12);
        assert!((s - 0.2f64.sqrt()).abs() < 1e-12);
    }
}
