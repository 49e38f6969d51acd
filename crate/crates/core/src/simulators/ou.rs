use super::{SimOutput, Simulator};
use crate::prior::Prior;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

pub const FIXED_GAMMA: f64 = 0.5;
pub const FIXED_OFFSET: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub mu: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub offset: f64,
}

/// Which OU parameters are free. Fixed ones take γ = 0.5 and μ_offset = 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OuVariant {
    Ou2,
    Ou3,
    Ou4,
}

impl OuVariant {
    pub fn dim(self) -> usize {
        match self {
            Self::Ou2 => 2,
            Self::Ou3 => 3,
            Self::Ou4 => 4,
        }
    }

    pub fn params(self, theta: &[f64]) -> OuParams {
        OuParams {
            mu: theta[0],
            sigma: theta[1],
            gamma: if self.dim() >= 3 { theta[2] } else { FIXED_GAMMA },
            offset: if self.dim() >= 4 { theta[3] } else { FIXED_OFFSET },
        }
    }

    pub fn prior(self) -> Prior {
        let lower = [0.1, 0.1, 0.1, 0.0];
        let upper = [3.0, 0.6, 1.0, 4.0];
        let d = self.dim();
        Prior::uniform(&lower[..d], &upper[..d]).expect("valid box")
    }
}

/// Euler-Maruyama grid and the observed subsample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuConfig {
    pub dt: f64,
    /// Trace length including X(0).
    pub points: usize,
    /// Index spacing of the observed subsample, starting at 0.
    pub stride: usize,
    pub observed: usize,
}

impl Default for OuConfig {
    fn default() -> Self {
        Self { dt: 0.1, points: 101, stride: 11, observed: 10 }
    }
}

impl OuConfig {
    /// Ten Euler steps of size 1.1, observed at every step: the same
    /// observation times as the default grid.
    pub fn coarse() -> Self {
        Self { dt: 1.1, points: 10, stride: 1, observed: 10 }
    }

    /// Time between consecutive observed points.
    pub fn observed_spacing(&self) -> f64 {
        self.dt * self.stride as f64
    }

    pub fn trace(&self, p: &OuParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.points);
        let x0: f64 = p.mu + p.offset + rng.sample::<f64, _>(StandardNormal);
        x.push(x0);
        let drift = p.gamma * self.dt;
        let diff = p.sigma * self.dt.sqrt();
        let mut cur = x0;
        for _ in 1..self.points {
            let z: f64 = rng.sample(StandardNormal);
            cur += drift * (p.mu - cur) + diff * z;
            x.push(cur);
        }
        x
    }

    pub fn subsample(&self, trace: &[f64]) -> Vec<f64> {
        (0..self.observed).map(|k| trace[k * self.stride]).collect()
    }
}

/// High-fidelity OU process summarised by an evenly spaced subsample.
#[derive(Debug, Clone)]
pub struct OuHigh {
    pub variant: OuVariant,
    pub config: OuConfig,
    pub keep_trace: bool,
    name: String,
}

impl OuHigh {
    pub fn new(variant: OuVariant) -> Self {
        Self::with_config(variant, OuConfig::default())
    }

    pub fn with_config(variant: OuVariant, config: OuConfig) -> Self {
        let name = if config == OuConfig::default() {
            "ou-high".to_string()
        } else {
            format!("ou-dt{}", config.dt)
        };
        Self { variant, config, keep_trace: false, name }
    }
}

impl Simulator for OuHigh {
    fn name(&self) -> &str {
        &self.name
    }

    fn theta_dim(&self) -> usize {
        self.variant.dim()
    }

    fn x_dim(&self) -> usize {
        self.config.observed
    }

    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        let trace = self.config.trace(&self.variant.params(theta), rng);
        let summary = self.config.subsample(&trace);
        SimOutput { raw: self.keep_trace.then_some(trace), summary }
    }
}

/// Low-fidelity OU surrogate: ten i.i.d. N(μ, σ²) draws. Any parameters
/// beyond (μ, σ) are dummies.
#[derive(Debug, Clone)]
pub struct OuLow {
    pub variant: OuVariant,
    pub len: usize,
}

impl OuLow {
    pub fn new(variant: OuVariant) -> Self {
        Self { variant, len: 10 }
    }
}

impl Simulator for OuLow {
    fn name(&self) -> &str {
        "ou-low"
    }

    fn theta_dim(&self) -> usize {
        self.variant.dim()
    }

    fn x_dim(&self) -> usize {
        self.len
    }

    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        let (mu, sigma) = (theta[0], theta[1]);
        let summary = (0..self.len)
            .map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        SimOutput::summary(summary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    /// Standard deviation of the noise added to σ.
    pub delta: f64,
    /// Reverse the summary (anti-diagonal permutation).
    pub invert: bool,
}

pub const SIGMA_FLOOR: f64 = 0.01;

/// OU process run with σ + ε, ε ~ N(0, δ²), floored at 0.01, optionally
/// with the summary reversed.
#[derive(Debug, Clone)]
pub struct OuPerturbed {
    pub variant: OuVariant,
    pub config: OuConfig,
    pub spec: PerturbationSpec,
}

impl OuPerturbed {
    pub fn new(variant: OuVariant, spec: PerturbationSpec) -> Self {
        assert!(spec.delta >= 0.0 && spec.delta.is_finite(), "delta must be non-negative");
        Self { variant, config: OuConfig::default(), spec }
    }

    pub fn apply_inversion(summary: &mut [f64]) {
        summary.reverse();
    }
}

impl Simulator for OuPerturbed {
    fn name(&self) -> &str {
        "ou-perturbed"
    }

    fn theta_dim(&self) -> usize {
        self.variant.dim()
    }

    fn x_dim(&self) -> usize {
        self.config.observed
    }

    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput {
        let mut p = self.variant.params(theta);
        if self.spec.delta > 0.0 {
            let eps = Normal::new(0.0, self.spec.delta).expect("delta checked").sample(rng);
            p.sigma = (p.sigma + eps).max(SIGMA_FLOOR);
        }
        let trace = self.config.trace(&p, rng);
        let mut summary = self.config.subsample(&trace);
        if self.spec.invert {
            Self::apply_inversion(&mut summary);
        }
        SimOutput::summary(summary)
    }
}
