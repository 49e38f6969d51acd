use super::AlgoError;
use crate::flow::ConditionalFlow;
use crate::prior::Prior;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::RngCore;

/// Anything that can score and draw parameters given an observation.
pub trait PosteriorModel: Sync {
    fn theta_dim(&self) -> usize;

    /// Amortized posteriors accept any observation; sequential ones only
    /// the observation they were trained for.
    fn is_amortized(&self) -> bool;

    fn log_prob(&self, theta: &Tensor, x: &[f64]) -> Result<Vec<f64>, AlgoError>;

    fn sample(&self, n: usize, x: &[f64], rng: &mut dyn RngCore) -> Result<Tensor, AlgoError>;

    /// Samples and their log densities.
    fn sample_with_log_prob(&self, n: usize, x: &[f64], rng: &mut dyn RngCore) -> Result<(Tensor, Vec<f64>), AlgoError> {
        let s = self.sample(n, x, rng)?;
        let lp = self.log_prob(&s, x)?;
        Ok((s, lp))
    }
}

/// A trained flow in original parameter coordinates.
#[derive(Debug, Clone)]
pub struct FlowPosterior {
    pub flow: ConditionalFlow,
    pub prior: Prior,
    /// Set for posteriors trained on one observation.
    pub x_o: Option<Vec<f64>>,
}

impl FlowPosterior {
    pub fn amortized(flow: ConditionalFlow, prior: Prior) -> Self {
        Self { flow, prior, x_o: None }
    }

    pub fn focused(flow: ConditionalFlow, prior: Prior, x_o: Vec<f64>) -> Self {
        Self { flow, prior, x_o: Some(x_o) }
    }

    pub(crate) fn check_x(&self, x: &[f64]) -> Result<(), AlgoError> {
        match &self.x_o {
            Some(xo) if xo.as_slice() != x => Err(AlgoError::ObservationMismatch),
            _ => Ok(()),
        }
    }
}

impl PosteriorModel for FlowPosterior {
    fn theta_dim(&self) -> usize {
        self.flow.theta_dim()
    }

    fn is_amortized(&self) -> bool {
        self.x_o.is_none()
    }

    fn log_prob(&self, theta: &Tensor, x: &[f64]) -> Result<Vec<f64>, AlgoError> {
        self.check_x(x)?;
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        Ok(self.flow.log_prob(theta, &xt)?)
    }

    fn sample(&self, n: usize, x: &[f64], rng: &mut dyn RngCore) -> Result<Tensor, AlgoError> {
        self.check_x(x)?;
        Ok(self.flow.sample(n, x, rng)?)
    }

    fn sample_with_log_prob(&self, n: usize, x: &[f64], rng: &mut dyn RngCore) -> Result<(Tensor, Vec<f64>), AlgoError> {
        self.check_x(x)?;
        Ok(self.flow.sample_with_log_prob(n, x, rng)?)
    }
}

/// Uniform mixture of flows.
#[derive(Debug, Clone)]
pub struct EnsemblePosterior {
    pub members: Vec<FlowPosterior>,
}

impl EnsemblePosterior {
    pub fn new(members: Vec<FlowPosterior>) -> Result<Self, AlgoError> {
        if members.is_empty() {
            return Err(AlgoError::Invalid("an ensemble needs at least one member".into()));
        }
        Ok(Self { members })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Member log densities, one vector per member.
    pub fn member_log_probs(&self, theta: &Tensor, x: &[f64]) -> Result<Vec<Vec<f64>>, AlgoError> {
        self.members.iter().map(|m| m.log_prob(theta, x)).collect()
    }
}

pub(crate) fn log_mean_exp(values: &[f64]) -> f64 {
    let m = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let s: f64 = values.iter().map(|v| (v - m).exp()).sum();
    m + (s / values.len() as f64).ln()
}

impl PosteriorModel for EnsemblePosterior {
    fn theta_dim(&self) -> usize {
        self.members[0].theta_dim()
    }

    fn is_amortized(&self) -> bool {
        self.members.iter().all(|m| m.is_amortized())
    }

    fn log_prob(&self, theta: &Tensor, x: &[f64]) -> Result<Vec<f64>, AlgoError> {
        let per = self.member_log_probs(theta, x)?;
        let mut buf = vec![0.0; per.len()];
        Ok((0..theta.rows())
            .map(|i| {
                for (b, m) in buf.iter_mut().zip(&per) {
                    *b = m[i];
                }
                log_mean_exp(&buf)
            })
            .collect())
    }

    fn sample(&self, n: usize, x: &[f64], rng: &mut dyn RngCore) -> Result<Tensor, AlgoError> {
        let e = self.members.len();
        let mut counts = vec![0usize; e];
        for _ in 0..n {
            counts[(rng.next_u64() % e as u64) as usize] += 1;
        }
        let mut parts = Vec::with_capacity(e);
        for (m, &c) in self.members.iter().zip(&counts) {
            if c > 0 {
                parts.push(m.sample(c, x, rng)?);
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let all = Tensor::vstack(&refs)?;
        // Interleave members so that prefixes are mixture draws too.
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(rng);
        Ok(all.select_rows(&idx))
    }
}

/// The prior seen as a data-independent posterior.
pub struct PriorPosterior<'a>(pub &'a Prior);

impl PosteriorModel for PriorPosterior<'_> {
    fn theta_dim(&self) -> usize {
        self.0.dim()
    }

    fn is_amortized(&self) -> bool {
        true
    }

    fn log_prob(&self, theta: &Tensor, _: &[f64]) -> Result<Vec<f64>, AlgoError> {
        Ok(theta.iter_rows().map(|r| self.0.log_density(r)).collect())
    }

    fn sample(&self, n: usize, _: &[f64], rng: &mut dyn RngCore) -> Result<Tensor, AlgoError> {
        let d = self.0.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.0.sample(rng));
        }
        Ok(Tensor::new(vec![n, d], data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_mean_exp_is_stable() {
        assert!((log_mean_exp(&[0.0, 0.0]) - 0.0).abs() < 1e-15);
        let v = [-1000.0, -1001.0];
        let direct = -1000.0 + ((1.0 + (-1.0f64).exp()) / 2.0).ln();
        assert!((log_mean_exp(&v) - direct).abs() < 1e-12);
    }
}
