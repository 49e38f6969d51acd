//! Product priors over independent marginals.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as SNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("invalid marginal {index}: {msg}")]
    Invalid { index: usize, msg: String },
    #[error("prior has no bounded support in dimension {0}")]
    Unbounded(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Marginal {
    Uniform { lower: f64, upper: f64 },
    /// `log X ~ N(mu, sigma^2)`, optionally truncated to `bounds`.
    LogNormal { mu: f64, sigma: f64, bounds: Option<(f64, f64)> },
    Normal { mean: f64, std: f64, bounds: Option<(f64, f64)> },
}

impl Marginal {
    fn bounds(&self) -> Option<(f64, f64)> {
        match *self {
            Marginal::Uniform { lower, upper } => Some((lower, upper)),
            Marginal::LogNormal { bounds, .. } | Marginal::Normal { bounds, .. } => bounds,
        }
    }

    /// Probability mass of the untruncated law inside the bounds.
    fn truncated_mass(&self) -> f64 {
        let norm = |m: f64, s: f64, lo: f64, hi: f64| {
            let n = SNormal::new(m, s).expect("validated");
            n.cdf(hi) - n.cdf(lo)
        };
        match *self {
            Marginal::Uniform { .. } => 1.0,
            Marginal::LogNormal { mu, sigma, bounds } => match bounds {
                Some((lo, hi)) => norm(mu, sigma, lo.max(f64::MIN_POSITIVE).ln(), hi.ln()),
                None => 1.0,
            },
            Marginal::Normal { mean, std, bounds } => match bounds {
                Some((lo, hi)) => norm(mean, std, lo, hi),
                None => 1.0,
            },
        }
    }

    fn log_density(&self, v: f64) -> f64 {
        if let Some((lo, hi)) = self.bounds() {
            if !(v > lo && v < hi) {
                return f64::NEG_INFINITY;
            }
        }
        match *self {
            Marginal::Uniform { lower, upper } => -(upper - lower).ln(),
            Marginal::LogNormal { mu, sigma, .. } => {
                if v <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let z = (v.ln() - mu) / sigma;
                -0.5 * z * z - sigma.ln() - v.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - self.truncated_mass().ln()
            }
            Marginal::Normal { mean, std, .. } => {
                let z = (v - mean) / std;
                -0.5 * z * z - std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() - self.truncated_mass().ln()
            }
        }
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        loop {
            let v = match *self {
                Marginal::Uniform { lower, upper } => lower + (upper - lower) * rng.random::<f64>(),
                Marginal::LogNormal { mu, sigma, .. } => (mu + sigma * rng.sample::<f64, _>(StandardNormal)).exp(),
                Marginal::Normal { mean, std, .. } => Normal::new(mean, std).expect("validated").sample(rng),
            };
            match self.bounds() {
                Some((lo, hi)) if !(v > lo && v < hi) => continue,
                _ => return v,
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub marginals: Vec<Marginal>,
}

impl Prior {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self, PriorError> {
        for (index, m) in marginals.iter().enumerate() {
            let bad = |msg: &str| PriorError::Invalid {
                index,
                msg: msg.to_string(),
            };
            match *m {
                Marginal::Uniform { lower, upper } => {
                    if !(lower < upper) || !lower.is_finite() || !upper.is_finite() {
                        return Err(bad("uniform needs finite lower < upper"));
                    }
                }
                Marginal::LogNormal { sigma, .. } | Marginal::Normal { std: sigma, .. } => {
                    if !(sigma > 0.0) {
                        return Err(bad("scale must be positive"));
                    }
                }
            }
            if let Some((lo, hi)) = m.bounds() {
                if !(lo < hi) {
                    return Err(bad("empty truncation interval"));
                }
            }
        }
        Ok(Self { marginals })
    }

    pub fn uniform(lower: &[f64], upper: &[f64]) -> Result<Self, PriorError> {
        Self::new(
            lower
                .iter()
                .zip(upper)
                .map(|(&lower, &upper)| Marginal::Uniform { lower, upper })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.marginals.iter().map(|m| m.sample(rng)).collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        self.marginals.iter().zip(theta).map(|(m, &v)| m.log_density(v)).sum()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        self.log_density(theta) > f64::NEG_INFINITY
    }

    /// Per-dimension support bounds, used as the flow's logit box.
    pub fn support_box(&self) -> Result<(Vec<f64>, Vec<f64>), PriorError> {
        let mut lo = Vec::with_capacity(self.dim());
        let mut hi = Vec::with_capacity(self.dim());
        for (i, m) in self.marginals.iter().enumerate() {
            let (l, h) = m.bounds().ok_or(PriorError::Unbounded(i))?;
            lo.push(l);
            hi.push(h);
        }
        Ok((lo, hi))
    }

    /// Width of the support per dimension.
    pub fn ranges(&self) -> Result<Vec<f64>, PriorError> {
        let (lo, hi) = self.support_box()?;
        Ok(lo.iter().zip(&hi).map(|(l, h)| h - l).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_density() {
        let p = Prior::uniform(&[0.1, 0.1], &[3.0, 0.6]).unwrap();
        let expect = -(2.9f64 * 0.5).ln();
        assert!((p.log_density(&[1.0, 0.3]) - expect).abs() < 1e-12);
        assert_eq!(p.log_density(&[3.0, 0.3]), f64::NEG_INFINITY);
    }

    #[test]
    fn truncated_lognormal_normalizes() {
        // Importance check: E_prior[1 / p(θ)] over the box equals its volume.
        let m = Marginal::LogNormal {
            mu: 0.4f64.ln(),
            sigma: 0.5,
            bounds: Some((0.001, 3.0)),
        };
        let p = Prior::new(vec![m]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Trapezoid quadrature of the density over the support.
        let n = 200_000;
        let h = (3.0 - 0.001) / n as f64;
        let mut s = 0.0;
        for i in 1..n {
            s += p.log_density(&[0.001 + i as f64 * h]).exp();
        }
        assert!((s * h - 1.0).abs() < 1e-3);
        for _ in 0..1000 {
            assert!(p.contains(&p.sample(&mut rng)));
        }
    }

    #[test]
    fn unbounded_has_no_box() {
        let p = Prior::new(vec![Marginal::Normal {
            mean: 0.0,
            std: 1.0,
            bounds: None,
        }])
        .unwrap();
        assert_eq!(p.support_box(), Err(PriorError::Unbounded(0)));
    }
}
