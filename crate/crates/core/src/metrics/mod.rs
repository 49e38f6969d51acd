//! Posterior quality metrics.

mod c2st;
mod sbc;

pub use c2st::{c2st, c2st_folds, c2st_with, C2stConfig};
pub use sbc::{sbc_ranks, SbcReport};

use crate::algorithms::{AlgoError, PosteriorModel};
use crate::flow::FlowError;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("sample sets have dimensions {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least {need} rows per sample set, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("prior range of dimension {0} is not positive")]
    ZeroRange(usize),
    #[error("no (θ, x) pair could be evaluated")]
    NoPairs,
    #[error(transparent)]
    Posterior(#[from] AlgoError),
}

/// One metric value as stored in a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub task: String,
    pub algorithm: String,
    pub lf_budget: usize,
    pub hf_budget: usize,
    pub seed: u64,
    pub observation_id: usize,
    pub metric: String,
    pub value: f64,
    /// Posterior samples behind the value, where applicable.
    #[serde(default)]
    pub n_samples: usize,
    /// Spread over folds or repeats, where applicable.
    #[serde(default)]
    pub uncertainty: Option<f64>,
}

fn check_pair(a: &Tensor, b: &Tensor, min_rows: usize) -> Result<(), MetricError> {
    if a.cols() != b.cols() {
        return Err(MetricError::DimensionMismatch(a.cols(), b.cols()));
    }
    let got = a.rows().min(b.rows());
    if got < min_rows {
        return Err(MetricError::TooFewSamples { need: min_rows, got });
    }
    Ok(())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Points per set used to estimate the median pairwise distance.
const MEDIAN_SUBSET: usize = 1000;

/// Median pairwise Euclidean distance over the first rows of both sets.
pub fn median_distance(a: &Tensor, b: &Tensor) -> f64 {
    let rows: Vec<&[f64]> = a
        .iter_rows()
        .take(MEDIAN_SUBSET / 2)
        .chain(b.iter_rows().take(MEDIAN_SUBSET / 2))
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in 0..i {
            d.push(sq_dist(rows[i], rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

fn kernel_mean(a: &Tensor, b: &Tensor, inv2h2: f64) -> f64 {
    let mut s = 0.0;
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            s += (-sq_dist(ra, rb) * inv2h2).exp();
        }
    }
    s / (a.rows() * b.rows()) as f64
}

/// Biased (V-statistic) squared MMD with a Gaussian kernel whose bandwidth
/// is the median pairwise distance of the pooled sample, or `bandwidth`.
pub fn mmd(a: &Tensor, b: &Tensor, bandwidth: Option<f64>) -> Result<f64, MetricError> {
    check_pair(a, b, 1)?;
    let h = bandwidth.unwrap_or_else(|| median_distance(a, b)).max(1e-12);
    let inv = 1.0 / (2.0 * h * h);
    let v = kernel_mean(a, a, inv) + kernel_mean(b, b, inv) - 2.0 * kernel_mean(a, b, inv);
    Ok(v.max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NltpResult {
    pub value: f64,
    pub evaluated: usize,
    /// Pairs skipped because θ_o lies on the boundary of the parameter box.
    pub excluded: usize,
}

/// Mean of −log q(θ_o | x_o) over the pairs.
pub fn nltp(posterior: &dyn PosteriorModel, pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<NltpResult, MetricError> {
    let mut total = 0.0;
    let mut evaluated = 0;
    let mut excluded = 0;
    for (theta, x) in pairs {
        let t = Tensor::new(vec![1, theta.len()], theta.clone()).map_err(AlgoError::from)?;
        match posterior.log_prob(&t, x) {
            Ok(lp) => {
                total -= lp[0];
                evaluated += 1;
            }
            Err(AlgoError::Flow(FlowError::OutsideBox { .. })) => excluded += 1,
            Err(e) => return Err(e.into()),
        }
    }
    if excluded > 0 {
        log::warn!("nltp: {excluded} pairs on the parameter boundary were excluded");
    }
    if evaluated == 0 {
        return Err(MetricError::NoPairs);
    }
    Ok(NltpResult { value: total / evaluated as f64, evaluated, excluded })
}

/// Root-mean-square deviation of samples from θ_o after mapping each prior
/// interval onto [−1, 1], averaged over dimensions.
pub fn nrmse(samples: &Tensor, theta_o: &[f64], ranges: &[f64]) -> Result<f64, MetricError> {
    let d = theta_o.len();
    if samples.cols() != d || ranges.len() != d {
        return Err(MetricError::DimensionMismatch(samples.cols(), d));
    }
    if let Some(i) = ranges.iter().position(|&r| !(r > 0.0)) {
        return Err(MetricError::ZeroRange(i));
    }
    if samples.rows() == 0 {
        return Err(MetricError::TooFewSamples { need: 1, got: 0 });
    }
    let mut acc = 0.0;
    for j in 0..d {
        let scale = 2.0 / ranges[j];
        let ms: f64 = samples.iter_rows().map(|r| ((r[j] - theta_o[j]) * scale).powi(2)).sum::<f64>() / samples.rows() as f64;
        acc += ms.sqrt();
    }
    Ok(acc / d as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mmd_of_identical_sets_is_exactly_zero() {
        let a = Tensor::from_rows(&[vec![0.1, 2.0], vec![-1.0, 0.3], vec![5.0, 1.0]]).unwrap();
        assert_eq!(mmd(&a, &a, None).unwrap(), 0.0);
        assert!(matches!(mmd(&a, &Tensor::zeros(&[2, 3]), None), Err(MetricError::DimensionMismatch(2, 3))));
    }

    #[test]
    fn nrmse_trivial_cases() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(nrmse(&s, &[1.0, 2.0], &[1.0, 3.0]).unwrap(), 0.0);
        assert!(matches!(nrmse(&s, &[1.0, 2.0], &[1.0, 0.0]), Err(MetricError::ZeroRange(1))));
    }

    #[test]
    fn nrmse_is_affine_invariant() {
        let s = Tensor::from_rows(&[vec![0.3], vec![0.9], vec![-0.2]]).unwrap();
        let base = nrmse(&s, &[0.1], &[2.0]).unwrap();
        let t = Tensor::from_rows(&[vec![3.0 * 0.3 + 7.0], vec![3.0 * 0.9 + 7.0], vec![3.0 * -0.2 + 7.0]]).unwrap();
        let scaled = nrmse(&t, &[3.0 * 0.1 + 7.0], &[6.0]).unwrap();
        assert!((base - scaled).abs() < 1e-12);
    }
}
