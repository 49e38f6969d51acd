use super::{derive_seed, fine_tune, pretrain, AlgoError, EstimatorConfig, FlowPosterior, PosteriorModel, PriorPosterior};
use crate::data::FidelityDataset;
use crate::flow::ConditionalFlow;
use crate::prior::Prior;
use crate::simulators::{simulate_given, ParamSource, SimError, Simulator};
use crate::tensor::Tensor;
use crate::train::TrainReport;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which high-fidelity data each round trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoundData {
    /// All rounds so far.
    Accumulate,
    /// Only the newest round.
    Last,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequentialConfig {
    pub rounds: usize,
    pub epsilon: f64,
    /// High-fidelity simulations per round.
    pub per_round: usize,
    /// Posterior draws used to place the truncation threshold.
    pub n_mc: usize,
    pub round_data: RoundData,
    /// Pairs per round for the coverage diagnostic; 0 disables it.
    pub coverage_pairs: usize,
    pub coverage_draws: usize,
}

impl Default for SequentialConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            epsilon: 1e-6,
            per_round: 200,
            n_mc: 10_000,
            round_data: RoundData::Accumulate,
            coverage_pairs: 20,
            coverage_draws: 100,
        }
    }
}

impl SequentialConfig {
    pub fn validate(&self) -> Result<(), AlgoError> {
        if self.rounds == 0 || self.per_round == 0 {
            return Err(AlgoError::Invalid("rounds and per-round budget must be positive".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(AlgoError::Invalid(format!("epsilon {} not in (0, 1)", self.epsilon)));
        }
        if self.n_mc < 1000 {
            return Err(AlgoError::Invalid("n_mc must be at least 1000".into()));
        }
        Ok(())
    }
}

/// Log-density level above which the posterior holds about 1 − ε of its
/// mass: the empirical ε-quantile of log q over `n_mc` posterior draws.
pub fn hpr_threshold(
    posterior: &dyn PosteriorModel,
    x_o: &[f64],
    epsilon: f64,
    n_mc: usize,
    seed: u64,
) -> Result<f64, AlgoError> {
    if n_mc < 1000 {
        return Err(AlgoError::Invalid("n_mc must be at least 1000".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, mut lp) = posterior.sample_with_log_prob(n_mc, x_o, &mut rng)?;
    lp.sort_by(f64::total_cmp);
    let k = ((epsilon * n_mc as f64).floor() as usize).min(n_mc - 1);
    Ok(lp[k])
}

/// Prior restricted to a posterior's highest-probability region.
pub struct TruncatedProposal<'a> {
    pub prior: &'a Prior,
    pub posterior: &'a dyn PosteriorModel,
    pub x_o: &'a [f64],
    /// `-inf` leaves the prior untouched.
    pub threshold: f64,
}

const DEGENERATE_TRIALS: usize = 1_000_000;
const DEGENERATE_RATE: f64 = 1e-6;

impl TruncatedProposal<'_> {
    fn accept(&self, theta: &Tensor) -> Result<Vec<bool>, AlgoError> {
        if self.threshold == f64::NEG_INFINITY {
            return Ok(vec![true; theta.rows()]);
        }
        let lp = self.posterior.log_prob(theta, self.x_o)?;
        Ok(lp.iter().map(|&l| l >= self.threshold).collect())
    }

    fn draw_block(&self, n: usize, rng: &mut dyn RngCore) -> Tensor {
        let d = self.prior.dim();
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend(self.prior.sample(rng));
        }
        Tensor::new(vec![n, d], data).expect("prior rows")
    }

    fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> Result<(Tensor, usize), AlgoError> {
        let d = self.prior.dim();
        let mut out = Vec::with_capacity(n * d);
        let mut got = 0;
        let mut trials = 0;
        while got < n {
            let block = (2 * (n - got)).clamp(64, 65_536);
            let cand = self.draw_block(block, rng);
            let ok = self.accept(&cand)?;
            trials += block;
            for (i, a) in ok.iter().enumerate() {
                if *a && got < n {
                    out.extend_from_slice(cand.row(i));
                    got += 1;
                }
            }
            if trials >= DEGENERATE_TRIALS && (got as f64) < DEGENERATE_RATE * trials as f64 {
                return Err(AlgoError::DegenerateTruncation { accepted: got, trials });
            }
        }
        Ok((Tensor::new(vec![n, d], out)?, trials))
    }
}

impl ParamSource for TruncatedProposal<'_> {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        let (t, _) = self.sample_with(1, rng).map_err(|e| SimError::Source(e.to_string()))?;
        Ok(t.into_data())
    }
}

/// Exactly `n` rejection samples from the truncated prior, with the
/// acceptance rate.
pub fn sample_truncated(proposal: &TruncatedProposal<'_>, n: usize, seed: u64) -> Result<(Tensor, f64), AlgoError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, trials) = proposal.sample_with(n, &mut rng)?;
    Ok((t, n as f64 / trials.max(1) as f64))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub threshold: f64,
    pub acceptance_rate: f64,
    pub n_proposal: usize,
    pub n_active: usize,
    pub simulator_calls: usize,
    pub replacements: usize,
    pub train: Vec<TrainReport>,
    /// Mean highest-density rank of the true θ among posterior draws over
    /// this round's pairs; 0.5 when calibrated.
    pub coverage_rank: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SequentialReport {
    pub pretrain: Option<TrainReport>,
    pub rounds: Vec<RoundRecord>,
    /// High-fidelity simulator calls, replacements included.
    pub hf_calls: usize,
}

pub(crate) fn append(acc: &mut Option<FidelityDataset>, new: FidelityDataset, mode: RoundData) {
    match (acc.as_mut(), mode) {
        (Some(a), RoundData::Accumulate) => {
            a.theta = Tensor::vstack(&[&a.theta, &new.theta]).expect("same θ width");
            a.x = Tensor::vstack(&[&a.x, &new.x]).expect("same x width");
            a.simulator_calls += new.simulator_calls;
            a.replacements += new.replacements;
        }
        _ => *acc = Some(new),
    }
}

pub(crate) fn coverage_rank(
    flow: &ConditionalFlow,
    data: &FidelityDataset,
    pairs: usize,
    draws: usize,
    seed: u64,
) -> Result<Option<f64>, AlgoError> {
    let k = pairs.min(data.len());
    if k == 0 || draws == 0 {
        return Ok(None);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for i in 0..k {
        let x = data.x.row(i);
        let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
        let theta = data.theta.select_rows(&[i]);
        let lp_true = flow.log_prob(&theta, &xt)?[0];
        let (_, lp) = flow.sample_with_log_prob(draws, x, &mut rng)?;
        total += lp.iter().filter(|&&l| l > lp_true).count() as f64 / draws as f64;
    }
    Ok(Some(total / k as f64))
}

fn run_rounds(
    prior: &Prior,
    initial: Option<&ConditionalFlow>,
    hf_sim: &dyn Simulator,
    x_o: &[f64],
    seq: &SequentialConfig,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(FlowPosterior, SequentialReport), AlgoError> {
    seq.validate()?;
    let mut flow = initial.cloned();
    let mut data: Option<FidelityDataset> = None;
    let mut threshold = f64::NEG_INFINITY;
    let mut report = SequentialReport { pretrain: None, rounds: Vec::new(), hf_calls: 0 };
    for r in 0..seq.rounds {
        let current = flow.as_ref().map(|f| FlowPosterior::focused(f.clone(), prior.clone(), x_o.to_vec()));
        let uniform = PriorPosterior(prior);
        let post: &dyn PosteriorModel = match &current {
            Some(p) => p,
            None => &uniform,
        };
        let proposal = TruncatedProposal { prior, posterior: post, x_o, threshold };
        let (theta, rate) = sample_truncated(&proposal, seq.per_round, derive_seed(seed, 2000 + r as u64))?;
        let (theta, x, stats) = simulate_given(hf_sim, &theta, &proposal, derive_seed(seed, 3000 + r as u64))?;
        report.hf_calls += stats.calls;
        let mut round = FidelityDataset::new("", 1, hf_sim.name(), theta, x, seed);
        round.simulator_calls = stats.calls;
        round.replacements = stats.replacements;
        append(&mut data, round.clone(), seq.round_data);
        let train_on = data.as_ref().expect("appended");
        let (next, tr) = match &flow {
            Some(f) => fine_tune(f, train_on, config, seed, 1 + r as u64)?,
            None => pretrain(prior, train_on, config, seed)?,
        };
        let coverage = coverage_rank(&next, &round, seq.coverage_pairs, seq.coverage_draws, derive_seed(seed, 5000 + r as u64))?;
        log::info!("round {r}: acceptance {rate:.4}, coverage rank {coverage:?}");
        report.rounds.push(RoundRecord {
            round: r,
            threshold,
            acceptance_rate: rate,
            n_proposal: seq.per_round,
            n_active: 0,
            simulator_calls: stats.calls,
            replacements: stats.replacements,
            train: vec![tr],
            coverage_rank: coverage,
        });
        flow = Some(next);
        if r + 1 < seq.rounds {
            let p = FlowPosterior::focused(flow.clone().expect("trained"), prior.clone(), x_o.to_vec());
            threshold = hpr_threshold(&p, x_o, seq.epsilon, seq.n_mc, derive_seed(seed, 4000 + r as u64))?;
        }
    }
    let flow = flow.expect("at least one round");
    Ok((FlowPosterior::focused(flow, prior.clone(), x_o.to_vec()), report))
}

/// Truncated sequential NPE without low-fidelity pretraining.
pub fn run_tsnpe(
    prior: &Prior,
    hf_sim: &dyn Simulator,
    x_o: &[f64],
    seq: &SequentialConfig,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(FlowPosterior, SequentialReport), AlgoError> {
    run_rounds(prior, None, hf_sim, x_o, seq, config, seed)
}

/// Truncated sequential rounds starting from a low-fidelity estimator.
/// `lf` is either raw low-fidelity data or an already pretrained flow.
pub fn run_mf_tsnpe(
    prior: &Prior,
    lf: LowFidelity<'_>,
    hf_sim: &dyn Simulator,
    x_o: &[f64],
    seq: &SequentialConfig,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(FlowPosterior, SequentialReport), AlgoError> {
    let (flow, pre) = match lf {
        LowFidelity::Data(d) => {
            if d.is_empty() {
                return Err(AlgoError::NoLowFidelity);
            }
            let (f, r) = pretrain(prior, d, config, seed)?;
            (f, Some(r))
        }
        LowFidelity::Pretrained(f) => (f.clone(), None),
    };
    let (post, mut report) = run_rounds(prior, Some(&flow), hf_sim, x_o, seq, config, seed)?;
    report.pretrain = pre;
    Ok((post, report))
}

/// Starting point of a multifidelity sequential run.
#[derive(Debug, Clone, Copy)]
pub enum LowFidelity<'a> {
    Data(&'a FidelityDataset),
    Pretrained(&'a ConditionalFlow),
}
