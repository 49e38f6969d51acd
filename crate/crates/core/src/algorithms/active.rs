use super::sequential::{append, coverage_rank};
use super::{
    derive_seed, fine_tune, hpr_threshold, pretrain, sample_truncated, AlgoError, EnsemblePosterior, EstimatorConfig,
    FlowPosterior, LowFidelity, RoundRecord, SequentialConfig, TruncatedProposal,
};
use crate::data::FidelityDataset;
use crate::flow::ConditionalFlow;
use crate::pool::{parallel_map, worker_count};
use crate::prior::Prior;
use crate::simulators::{simulate_given, Simulator};
use crate::tensor::Tensor;
use crate::train::TrainReport;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActiveConfig {
    /// Fraction of each round chosen by the acquisition function.
    pub b_fraction: f64,
    pub ensemble_size: usize,
    /// Candidate pool drawn from the prior; defaults to 10 · M · R.
    pub pool_size: Option<usize>,
}

impl Default for ActiveConfig {
    fn default() -> Self {
        Self { b_fraction: 0.2, ensemble_size: 5, pool_size: None }
    }
}

/// Unbiased variance across members of q_e(θ | x_o), on the density scale.
pub fn acquisition_scores(pool: &Tensor, ensemble: &EnsemblePosterior, x_o: &[f64]) -> Result<Vec<f64>, AlgoError> {
    let e = ensemble.len();
    if e < 2 {
        return Err(AlgoError::Invalid("acquisition needs an ensemble of at least two members".into()));
    }
    if pool.rows() == 0 {
        return Err(AlgoError::Invalid("acquisition pool is empty".into()));
    }
    let per = ensemble.member_log_probs(pool, x_o)?;
    Ok((0..pool.rows())
        .map(|i| {
            // Shifted by the first member so identical members give exactly 0.
            let d0 = per[0][i].exp();
            let (mut s, mut s2) = (0.0, 0.0);
            for m in per.iter().skip(1) {
                let d = m[i].exp() - d0;
                s += d;
                s2 += d * d;
            }
            ((s2 - s * s / e as f64) / (e - 1) as f64).max(0.0)
        })
        .collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActiveRound {
    pub record: RoundRecord,
    /// Pool elements still available after this round.
    pub pool_left: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ActiveReport {
    pub pretrain: Vec<TrainReport>,
    pub rounds: Vec<ActiveRound>,
    pub hf_calls: usize,
}

fn pretrained_members(
    prior: &Prior,
    lf: LowFidelity<'_>,
    e: usize,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(Vec<ConditionalFlow>, Vec<TrainReport>), AlgoError> {
    match lf {
        LowFidelity::Pretrained(f) => Ok((vec![f.clone(); e], Vec::new())),
        LowFidelity::Data(d) => {
            if d.is_empty() {
                return Err(AlgoError::NoLowFidelity);
            }
            let results = parallel_map(e, worker_count(), |m| pretrain(prior, d, config, derive_seed(seed, 6000 + m as u64)));
            let mut flows = Vec::with_capacity(e);
            let mut reports = Vec::with_capacity(e);
            for r in results {
                let (f, rep) = r?;
                flows.push(f);
                reports.push(rep);
            }
            Ok((flows, reports))
        }
    }
}

/// Ensemble MF-TSNPE where each round replaces a fraction of the proposal
/// draws with the pool elements of highest ensemble disagreement.
///
/// Each member is pretrained on the low-fidelity data with its own seed,
/// then all members fine-tune on the same accumulated high-fidelity data.
#[allow(clippy::too_many_arguments)]
pub fn run_a_mf_tsnpe(
    prior: &Prior,
    lf: LowFidelity<'_>,
    hf_sim: &dyn Simulator,
    x_o: &[f64],
    seq: &SequentialConfig,
    active: &ActiveConfig,
    config: &EstimatorConfig,
    seed: u64,
) -> Result<(EnsemblePosterior, ActiveReport), AlgoError> {
    seq.validate()?;
    let e = active.ensemble_size;
    if e < 2 {
        return Err(AlgoError::Invalid("ensemble size must be at least 2".into()));
    }
    if !(0.0..1.0).contains(&active.b_fraction) {
        return Err(AlgoError::Invalid(format!("b_fraction {} not in [0, 1)", active.b_fraction)));
    }
    let m = seq.per_round;
    let b = (active.b_fraction * m as f64).round() as usize;
    let (mut members, pre) = pretrained_members(prior, lf, e, config, seed)?;

    let pool_size = active.pool_size.unwrap_or(10 * m * seq.rounds);
    let mut pool_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7000));
    let mut pool: Vec<Vec<f64>> = (0..pool_size).map(|_| prior.sample(&mut pool_rng)).collect();

    let mut data: Option<FidelityDataset> = None;
    let mut threshold = f64::NEG_INFINITY;
    let mut report = ActiveReport { pretrain: pre, rounds: Vec::new(), hf_calls: 0 };
    let focus = |fs: &[ConditionalFlow]| -> Result<EnsemblePosterior, AlgoError> {
        EnsemblePosterior::new(fs.iter().map(|f| FlowPosterior::focused(f.clone(), prior.clone(), x_o.to_vec())).collect())
    };

    for r in 0..seq.rounds {
        let r64 = r as u64;
        let ensemble = focus(&members)?;
        let proposal = TruncatedProposal { prior, posterior: &ensemble, x_o, threshold };

        // Active part: top-B admissible pool elements by ensemble variance.
        let mut chosen: Vec<usize> = Vec::new();
        if b > 0 && !pool.is_empty() {
            let d = prior.dim();
            let flat: Vec<f64> = pool.iter().flatten().copied().collect();
            let pool_t = Tensor::new(vec![pool.len(), d], flat)?;
            let scores = acquisition_scores(&pool_t, &ensemble, x_o)?;
            let admissible: Vec<bool> = if threshold == f64::NEG_INFINITY {
                vec![true; pool.len()]
            } else {
                use super::PosteriorModel;
                ensemble.log_prob(&pool_t, x_o)?.iter().map(|&l| l >= threshold).collect()
            };
            let mut order: Vec<usize> = (0..pool.len()).filter(|&i| admissible[i]).collect();
            order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
            chosen = order.into_iter().take(b).collect();
        }
        if chosen.len() < b {
            log::warn!("round {r}: acquisition pool exhausted, {} of {b} active draws filled by the proposal", b - chosen.len());
        }
        let n_active = chosen.len();
        let n_prop = m - n_active;
        let (prop_theta, rate) = sample_truncated(&proposal, n_prop.max(1), derive_seed(seed, 2000 + r64))?;
        let prop_theta = prop_theta.select_rows(&(0..n_prop).collect::<Vec<_>>());
        chosen.sort_unstable();
        let active_rows: Vec<f64> = chosen.iter().flat_map(|&i| pool[i].iter().copied()).collect();
        for &i in chosen.iter().rev() {
            pool.swap_remove(i);
        }
        let active_theta = Tensor::new(vec![n_active, prior.dim()], active_rows)?;
        let theta = Tensor::vstack(&[&prop_theta, &active_theta])?;

        let (theta, x, stats) = simulate_given(hf_sim, &theta, &proposal, derive_seed(seed, 3000 + r64))?;
        report.hf_calls += stats.calls;
        let mut round = FidelityDataset::new("", 1, hf_sim.name(), theta, x, seed);
        round.simulator_calls = stats.calls;
        round.replacements = stats.replacements;
        append(&mut data, round.clone(), seq.round_data);
        let train_on = data.as_ref().expect("appended");

        let results = parallel_map(e, worker_count(), |k| {
            fine_tune(&members[k], train_on, config, derive_seed(seed, 6000 + k as u64), 1 + r64)
        });
        let mut reports = Vec::with_capacity(e);
        let mut next = Vec::with_capacity(e);
        for res in results {
            let (f, rep) = res?;
            next.push(f);
            reports.push(rep);
        }
        members = next;
        let coverage = coverage_rank(&members[0], &round, seq.coverage_pairs, seq.coverage_draws, derive_seed(seed, 5000 + r64))?;
        report.rounds.push(ActiveRound {
            record: RoundRecord {
                round: r,
                threshold,
                acceptance_rate: rate,
                n_proposal: n_prop,
                n_active,
                simulator_calls: stats.calls,
                replacements: stats.replacements,
                train: reports,
                coverage_rank: coverage,
            },
            pool_left: pool.len(),
        });
        if r + 1 < seq.rounds {
            threshold = hpr_threshold(&focus(&members)?, x_o, seq.epsilon, seq.n_mc, derive_seed(seed, 4000 + r64))?;
        }
    }
    Ok((focus(&members)?, report))
}
