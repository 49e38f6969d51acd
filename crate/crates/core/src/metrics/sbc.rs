use super::MetricError;
use crate::algorithms::{AlgoError, PosteriorModel};
use crate::prior::Prior;
use crate::simulators::{row_rng, simulate_batch, Simulator};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SbcReport {
    /// `ranks[j][i]`: rank of θ_i in dimension j among L posterior draws.
    pub ranks: Vec<Vec<usize>>,
    pub draws: usize,
    pub bins: usize,
    pub histograms: Vec<Vec<usize>>,
    pub chi2: Vec<f64>,
    pub p_values: Vec<f64>,
}

impl SbcReport {
    pub fn min_p_value(&self) -> f64 {
        self.p_values.iter().copied().fold(1.0, f64::min)
    }

    /// Histogram and χ² uniformity test from ranks in 0..=draws.
    pub fn from_ranks(ranks: Vec<Vec<usize>>, draws: usize, max_bins: usize) -> Self {
        let values = draws + 1;
        let bins = (1..=max_bins.min(values)).rev().find(|b| values % b == 0).unwrap_or(1);
        let mut histograms = Vec::new();
        let mut chi2 = Vec::new();
        let mut p_values = Vec::new();
        for r in &ranks {
            let mut h = vec![0usize; bins];
            for &k in r {
                h[k * bins / values] += 1;
            }
            let expected = r.len() as f64 / bins as f64;
            let stat: f64 = h.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            let p = if bins > 1 {
                1.0 - ChiSquared::new((bins - 1) as f64).expect("positive dof").cdf(stat)
            } else {
                1.0
            };
            histograms.push(h);
            chi2.push(stat);
            p_values.push(p);
        }
        Self { ranks, draws, bins, histograms, chi2, p_values }
    }
}

/// Simulation-based calibration: for `n_pairs` prior draws θ_i with
/// simulations x_i, the rank of θ_i among `draws` posterior samples given
/// x_i, per dimension, with a χ² test of rank uniformity.
pub fn sbc_ranks(
    posterior: &dyn PosteriorModel,
    prior: &Prior,
    simulator: &dyn Simulator,
    n_pairs: usize,
    draws: usize,
    seed: u64,
) -> Result<SbcReport, MetricError> {
    if !posterior.is_amortized() {
        return Err(AlgoError::NotAmortized.into());
    }
    let (theta, x, _) = simulate_batch(simulator, prior, n_pairs, seed).map_err(AlgoError::from)?;
    let d = theta.cols();
    let mut ranks = vec![Vec::with_capacity(n_pairs); d];
    for i in 0..n_pairs {
        let mut rng = row_rng(seed ^ 0x5bc, i as u64);
        let s = posterior.sample(draws, x.row(i), &mut rng)?;
        let t = theta.row(i);
        for (j, rj) in ranks.iter_mut().enumerate() {
            rj.push(s.iter_rows().filter(|r| r[j] < t[j]).count());
        }
    }
    Ok(SbcReport::from_ranks(ranks, draws, 20))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_sums_to_pairs() {
        let ranks = vec![(0..100).map(|i| i % 100).collect::<Vec<_>>()];
        let r = SbcReport::from_ranks(ranks, 99, 20);
        assert_eq!(r.bins, 20);
        assert_eq!(r.histograms[0].iter().sum::<usize>(), 100);
        assert!(r.p_values[0] > 0.99);
    }
}
