use super::{SimOutput, Simulator};
use crate::prior::Prior;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Mean and covariance of one SLCP draw.
pub fn slcp_moments(theta: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
    let s1 = theta[2] * theta[2];
    let s2 = theta[3] * theta[3];
    let rho = theta[4].tanh();
    let m = [theta[0], theta[1]];
    let c = rho * s1 * s2;
    (m, [[s1 * s1, c], [c, s2 * s2]])
}

pub fn slcp_prior() -> Prior {
    Prior::uniform(&[-3.0; 5], &[3.0; 5]).expect("valid box")
}

fn draws(theta: &[f64], zero_mean: bool, rng: &mut ChaCha8Rng) -> SimOutput {
    let s1 = theta[2] * theta[2];
    let s2 = theta[3] * theta[3];
    if s1 == 0.0 || s2 == 0.0 {
        return SimOutput::invalid(8);
    }
    let rho = theta[4].tanh();
    let (m1, m2) = if zero_mean { (0.0, 0.0) } else { (theta[0], theta[1]) };
    let l21 = rho * s2;
    let l22 = s2 * (1.0 - rho * rho).sqrt();
    let mut out = Vec::with_capacity(8);
    for _ in 0..4 {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        out.push(m1 + s1 * z1);
        out.push(m2 + l21 * z1 + l22 * z2);
    }
    SimOutput::summary(out)
}

/// Four draws from N(m_θ, S_θ), flattened to 8 values.
#[derive(Debug, Clone, Copy, Default)]
pub struct SlcpHigh;

/// As [`SlcpHigh`] with the mean fixed to zero; θ₁, θ₂ are dummies.
#[derive(Debug, Clone, Copy, Default)]
pub struct SlcpLow;

impl Simulator for SlcpHigh {
    fn name(&self) -> &str {
        "slcp-high"
    }
    fn theta_dim(&self) -> usize {
        5
    }
    fn x_dim(&self) -> usize {
        8
    }
    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        draws(theta, false, rng)
    }
}

impl Simulator for SlcpLow {
    fn name(&self) -> &str {
        "slcp-low"
    }
    fn theta_dim(&self) -> usize {
        5
    }
    fn x_dim(&self) -> usize {
        8
    }
    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        draws(theta, true, rng)
    }
}

/// Gaussian log-likelihood of an 8-vector of SLCP draws.
pub fn slcp_loglik(theta: &[f64], x: &[f64]) -> f64 {
    let (m, s) = slcp_moments(theta);
    let det = s[0][0] * s[1][1] - s[0][1] * s[1][0];
    if det <= 0.0 {
        return f64::NEG_INFINITY;
    }
    let inv = [[s[1][1] / det, -s[0][1] / det], [-s[1][0] / det, s[0][0] / det]];
    let mut ll = 0.0;
    for pair in x.chunks(2) {
        let d = [pair[0] - m[0], pair[1] - m[1]];
        let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
        ll += -0.5 * q - 0.5 * det.ln() - (2.0 * std::f64::consts::PI).ln();
    }
    ll
}
