use super::{SimOutput, Simulator};
use crate::flow::{average_pool, bilinear_resize};
use crate::prior::Prior;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

pub const HF_SIDE: usize = 256;
pub const LF_SIDE: usize = 32;

/// Success probability of one pixel at squared distance `r` from the centre.
pub fn blob_probability(r: f64, sigma: f64, gamma: f64) -> f64 {
    0.9 - 0.8 * (-0.5 * (r / (sigma * sigma)).powf(gamma)).exp()
}

pub fn blob_prior() -> Prior {
    Prior::uniform(&[0.0, 0.0, 0.2], &[256.0, 256.0, 2.0]).expect("valid box")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub sigma_high: f64,
    pub sigma_low: f64,
    /// Side of the emitted image. 256 reproduces the full protocol; smaller
    /// divisors of 256 average-pool the high-fidelity render and upsample
    /// the low-fidelity one only as far as this side.
    pub output_side: usize,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self { sigma_high: 12.0, sigma_low: 2.0, output_side: HF_SIDE }
    }
}

/// Binomial(255, p) image; pixel (row y, column x) sits at coordinates (x, y).
fn render(side: usize, cx: f64, cy: f64, sigma: f64, gamma: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let r = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            let p = blob_probability(r, sigma, gamma).clamp(0.0, 1.0);
            let k = Binomial::new(255, p).expect("p in [0, 1]").sample(rng);
            img.push(k as f64);
        }
    }
    img
}

/// 256×256 render with σ = 12.
#[derive(Debug, Clone, Default)]
pub struct BlobHigh {
    pub config: BlobConfig,
}

/// 32×32 render with σ = 2 at θ/8, bilinearly upsampled.
///
/// θ stays in high-fidelity coordinates; the centre is mapped so that
/// upsampling puts the blob where the high-fidelity render would.
#[derive(Debug, Clone, Default)]
pub struct BlobLow {
    pub config: BlobConfig,
}

impl Simulator for BlobHigh {
    fn name(&self) -> &str {
        "blob-high"
    }
    fn theta_dim(&self) -> usize {
        3
    }
    fn x_dim(&self) -> usize {
        self.config.output_side * self.config.output_side
    }
    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        let img = render(HF_SIDE, theta[0], theta[1], self.config.sigma_high, theta[2], rng);
        let side = self.config.output_side;
        if side == HF_SIDE {
            return SimOutput::summary(img);
        }
        SimOutput::summary(average_pool(&img, HF_SIDE, HF_SIDE, HF_SIDE / side))
    }
}

impl Simulator for BlobLow {
    fn name(&self) -> &str {
        "blob-low"
    }
    fn theta_dim(&self) -> usize {
        3
    }
    fn x_dim(&self) -> usize {
        self.config.output_side * self.config.output_side
    }
    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        let scale = (HF_SIDE / LF_SIDE) as f64;
        let to_lf = |c: f64| (c + 0.5) / scale - 0.5;
        let img = render(LF_SIDE, to_lf(theta[0]), to_lf(theta[1]), self.config.sigma_low, theta[2], rng);
        let side = self.config.output_side;
        if side == LF_SIDE {
            return SimOutput { raw: None, summary: img };
        }
        SimOutput { raw: Some(img.clone()), summary: bilinear_resize(&img, LF_SIDE, LF_SIDE, side, side) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulators::row_rng;

    #[test]
    fn probability_limits() {
        assert!((blob_probability(0.0, 12.0, 1.0) - 0.1).abs() < 1e-15);
        assert!((blob_probability(1e8, 12.0, 1.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn shapes() {
        let hi = BlobHigh::default().simulate(&[100.0, 50.0, 1.0], &mut row_rng(0, 0));
        assert_eq!(hi.summary.len(), 256 * 256);
        let lo = BlobLow::default().simulate(&[100.0, 50.0, 1.0], &mut row_rng(0, 0));
        assert_eq!(lo.summary.len(), 256 * 256);
        assert_eq!(lo.raw.unwrap().len(), 32 * 32);
        assert!(hi.summary.iter().all(|&v| (0.0..=255.0).contains(&v) && v.fract() == 0.0));
    }
}
