use super::{SimError, SimOutput, Simulator};
use crate::prior::{Marginal, Prior};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SirConfig {
    pub population: f64,
    pub days: f64,
    /// RK4 step in days.
    pub step: f64,
    /// Number of evenly spaced I/N values in the summary, ending at `days`.
    pub summary_points: usize,
}

impl Default for SirConfig {
    fn default() -> Self {
        Self { population: 1e6, days: 160.0, step: 0.1, summary_points: 10 }
    }
}

impl SirConfig {
    /// The 50-point observation variant.
    pub fn fifty_points() -> Self {
        Self { summary_points: 50, ..Self::default() }
    }

    fn steps(&self) -> usize {
        (self.days / self.step).round() as usize
    }
}

pub fn sir_prior() -> Prior {
    let bounds = Some((0.001, 3.0));
    Prior::new(vec![
        Marginal::LogNormal { mu: 0.4f64.ln(), sigma: 0.5, bounds },
        Marginal::LogNormal { mu: 0.125f64.ln(), sigma: 0.2, bounds },
    ])
    .expect("valid prior")
}

/// Compartments at every integration step, starting at t = 0.
#[derive(Debug, Clone)]
pub struct SirTrajectory {
    pub t: Vec<f64>,
    pub s: Vec<f64>,
    pub i: Vec<f64>,
    /// Absent for the two-compartment model.
    pub r: Option<Vec<f64>>,
}

impl SirTrajectory {
    /// I/N at `points` evenly spaced times ending at the final time.
    pub fn summary(&self, config: &SirConfig) -> Vec<f64> {
        let steps = self.t.len() - 1;
        (1..=config.summary_points)
            .map(|k| {
                let idx = (k as f64 * steps as f64 / config.summary_points as f64).round() as usize;
                self.i[idx] / config.population
            })
            .collect()
    }
}

/// RK4 integration from (N − 1, 1, 0). With `with_r = false` only the S and
/// I equations are solved.
pub fn sir_trajectory(beta: f64, gamma: f64, config: &SirConfig, with_r: bool) -> Result<SirTrajectory, SimError> {
    let n = config.population;
    let h = config.step;
    let f = |s: f64, i: f64| {
        let inf = beta * s * i / n;
        (-inf, inf - gamma * i, gamma * i)
    };
    let steps = config.steps();
    let mut tr = SirTrajectory {
        t: Vec::with_capacity(steps + 1),
        s: Vec::with_capacity(steps + 1),
        i: Vec::with_capacity(steps + 1),
        r: with_r.then(|| Vec::with_capacity(steps + 1)),
    };
    let (mut s, mut i, mut r) = (n - 1.0, 1.0, 0.0);
    let tol = -1e-9 * n;
    for k in 0..=steps {
        tr.t.push(k as f64 * h);
        tr.s.push(s);
        tr.i.push(i);
        if let Some(rs) = tr.r.as_mut() {
            rs.push(r);
        }
        if k == steps {
            break;
        }
        let k1 = f(s, i);
        let k2 = f(s + 0.5 * h * k1.0, i + 0.5 * h * k1.1);
        let k3 = f(s + 0.5 * h * k2.0, i + 0.5 * h * k2.1);
        let k4 = f(s + h * k3.0, i + h * k3.1);
        s += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
        i += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
        r += h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
        for v in [s, i, r] {
            if v < tol || !v.is_finite() {
                return Err(SimError::NegativeCompartment { t: (k + 1) as f64 * h, value: v });
            }
        }
        s = s.max(0.0);
        i = i.max(0.0);
        r = r.max(0.0);
    }
    Ok(tr)
}

fn simulate(theta: &[f64], config: &SirConfig, with_r: bool) -> SimOutput {
    match sir_trajectory(theta[0], theta[1], config, with_r) {
        Ok(tr) => SimOutput::summary(tr.summary(config)),
        Err(_) => SimOutput::invalid(config.summary_points),
    }
}

/// Full S, I, R dynamics.
#[derive(Debug, Clone, Default)]
pub struct SirHigh {
    pub config: SirConfig,
}

/// S and I dynamics only; the recovered compartment is not modelled.
#[derive(Debug, Clone, Default)]
pub struct SirLow {
    pub config: SirConfig,
}

impl Simulator for SirHigh {
    fn name(&self) -> &str {
        "sir-high"
    }
    fn theta_dim(&self) -> usize {
        2
    }
    fn x_dim(&self) -> usize {
        self.config.summary_points
    }
    fn simulate(&self, theta: &[f64], _: &mut ChaCha8Rng) -> SimOutput {
        simulate(theta, &self.config, true)
    }
}

impl Simulator for SirLow {
    fn name(&self) -> &str {
        "sir-low"
    }
    fn theta_dim(&self) -> usize {
        2
    }
    fn x_dim(&self) -> usize {
        self.config.summary_points
    }
    fn simulate(&self, theta: &[f64], _: &mut ChaCha8Rng) -> SimOutput {
        simulate(theta, &self.config, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_transmission_decays_exponentially() {
        let c = SirConfig::default();
        let tr = sir_trajectory(0.001, 0.125, &c, true).unwrap();
        let last = *tr.i.last().unwrap();
        assert!(last / c.population < 1e-6);
        // dI/dt ≈ (β − γ) I while S ≈ N.
        let oracle = ((0.001 - 0.125) * 160.0f64).exp();
        assert!((last - oracle).abs() / oracle < 1e-3, "{last} vs {oracle}");
    }

    #[test]
    fn population_is_conserved() {
        let c = SirConfig::default();
        let tr = sir_trajectory(0.6, 0.1, &c, true).unwrap();
        let r = tr.r.as_ref().unwrap();
        for k in 0..tr.t.len() {
            assert!((tr.s[k] + tr.i[k] + r[k] - c.population).abs() < 1e-6 * c.population);
        }
    }

    #[test]
    fn two_compartment_model_leaks() {
        let c = SirConfig::default();
        let tr = sir_trajectory(0.5, 0.125, &c, false).unwrap();
        assert!(tr.r.is_none());
        for k in 1..tr.t.len() {
            assert!(tr.s[k] + tr.i[k] <= tr.s[k - 1] + tr.i[k - 1] + 1e-9);
        }
        let hi = sir_trajectory(0.5, 0.125, &c, true).unwrap();
        assert_eq!(hi.summary(&c), tr.summary(&c));
    }

    #[test]
    fn summary_lengths() {
        let tr = sir_trajectory(0.4, 0.125, &SirConfig::default(), true).unwrap();
        assert_eq!(tr.summary(&SirConfig::default()).len(), 10);
        assert_eq!(tr.summary(&SirConfig::fifty_points()).len(), 50);
    }

    #[test]
    fn oversized_step_is_reported() {
        let c = SirConfig { step: 10.0, ..SirConfig::default() };
        assert!(matches!(sir_trajectory(3.0, 0.1, &c, true), Err(SimError::NegativeCompartment { .. })));
    }
}
