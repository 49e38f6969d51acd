//! Experiment orchestration: observations, references, run cells and
//! metric evaluation.

use crate::config::{Algorithm, ExperimentConfig, Metric};
use crate::store::{
    load_reference, reference_path, samples_hash, save_reference, CachedReference, ResultsStore, RoundSummary,
    RunManifest, StoreError,
};
use crate::tasks::{Fidelity, Observation, Task};
use mfsbi_core::algorithms::{
    derive_seed, pretrain, run_a_mf_tsnpe, run_mf_npe, run_mf_npe_chain, run_mf_tsnpe, run_npe, run_tsnpe,
    ActiveConfig, AlgoError, FlowPosterior, LowFidelity, PosteriorModel, RoundRecord, SequentialConfig,
};
use mfsbi_core::data::{DataError, FidelityDataset};
use mfsbi_core::flow::{save_checkpoint, FlowError};
use mfsbi_core::metrics::{c2st_folds, mmd, nltp, nrmse, sbc_ranks, C2stConfig, MetricError, MetricResult, SbcReport};
use mfsbi_core::mfabc::{resample_particles, run_mf_abc, MfAbcConfig, MfAbcError};
use mfsbi_core::pool::{parallel_map, worker_count};
use mfsbi_core::reference::ReferenceError;
use mfsbi_core::simulators::{simulate_dataset, SimError};
use mfsbi_core::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Algo(#[from] AlgoError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reference(#[from] ReferenceError),
    #[error(transparent)]
    MfAbc(#[from] MfAbcError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Tensor(#[from] mfsbi_core::tensor::TensorError),
    #[error("{0}")]
    Usage(String),
}

/// Seed streams owned by the CLI, on top of those used inside the core.
mod stream {
    pub const OBSERVATIONS: u64 = 9000;
    pub const REFERENCE: u64 = 9100;
    pub const LF_DATA: u64 = 8000;
    pub const MID_DATA: u64 = 8001;
    pub const HF_DATA: u64 = 8002;
    pub const PER_OBSERVATION: u64 = 10_000;
    pub const POSTERIOR_DRAWS: u64 = 20_000;
    pub const C2ST: u64 = 30_000;
}

pub fn run_id(cfg: &ExperimentConfig, hf_budget: usize, seed: u64) -> String {
    format!("{}-{}-lf{}-hf{}-s{}", cfg.task, cfg.algorithm, cfg.lf_budget, hf_budget, seed)
}

/// Test observations of a configuration.
pub fn observations(cfg: &ExperimentConfig, task: &Task) -> Result<Vec<Observation>, RunError> {
    Ok(task.observations(cfg.observations, derive_seed(cfg.observation_seed, stream::OBSERVATIONS))?)
}

/// Reference samples at each observation, read from or written to `dir`.
pub fn references(
    task: &Task,
    obs: &[Observation],
    n: usize,
    observation_seed: u64,
    dir: &Path,
) -> Result<Vec<(PathBuf, Tensor)>, RunError> {
    let method = task.reference_method();
    let mut out = Vec::with_capacity(obs.len());
    for o in obs {
        let path = reference_path(dir, task.id.as_str(), &o.x, method);
        let seed = derive_seed(observation_seed, stream::REFERENCE + o.id as u64);
        if let Some(c) = load_reference(&path, &o.x, n, seed) {
            log::debug!("reference cache hit {}", path.display());
            out.push((path, c.set.samples));
            continue;
        }
        let t = Instant::now();
        let mut set = task.reference(&o.x, n, seed)?;
        set.observation_id = o.id;
        log::info!("reference for observation {} in {:.1}s", o.id, t.elapsed().as_secs_f64());
        let c = CachedReference {
            task: task.id.to_string(),
            x_o: o.x.clone(),
            method,
            seed,
            content_hash: samples_hash(&set.samples),
            set,
        };
        save_reference(&path, &c)?;
        out.push((path, c.set.samples));
    }
    Ok(out)
}

/// One metric at one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metric: Metric,
    pub value: f64,
    pub n_samples: usize,
    pub uncertainty: Option<f64>,
}

/// Metrics from posterior samples (and the density, for NLTP).
pub fn evaluate(
    posterior: Option<&dyn PosteriorModel>,
    samples: &Tensor,
    obs: &Observation,
    reference: Option<&Tensor>,
    metrics: &[Metric],
    ranges: &[f64],
    seed: u64,
) -> Result<Vec<Evaluation>, RunError> {
    let mut out = Vec::new();
    for &m in metrics {
        let need_ref = || {
            reference.ok_or_else(|| RunError::Usage(format!("{} needs reference samples; use nltp or nrmse", m.as_str())))
        };
        let e = match m {
            Metric::C2st => {
                let folds = c2st_folds(samples, need_ref()?, derive_seed(seed, stream::C2ST), &C2stConfig::default())?;
                let k = folds.len() as f64;
                let mean = folds.iter().sum::<f64>() / k;
                let sd = (folds.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0)).sqrt();
                Evaluation { metric: m, value: mean, n_samples: samples.rows(), uncertainty: Some(sd) }
            }
            Metric::Mmd => {
                Evaluation { metric: m, value: mmd(samples, need_ref()?, None)?, n_samples: samples.rows(), uncertainty: None }
            }
            Metric::Nltp => match posterior {
                Some(p) => {
                    let r = nltp(p, &[(obs.theta.clone(), obs.x.clone())])?;
                    Evaluation { metric: m, value: r.value, n_samples: 0, uncertainty: None }
                }
                None => {
                    log::warn!("nltp skipped: the posterior has no density");
                    continue;
                }
            },
            Metric::Nrmse => Evaluation {
                metric: m,
                value: nrmse(samples, &obs.theta, ranges)?,
                n_samples: samples.rows(),
                uncertainty: None,
            },
        };
        out.push(e);
    }
    Ok(out)
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    task: &'a Task,
    obs: &'a [Observation],
    refs: Vec<Option<(PathBuf, Tensor)>>,
    ranges: Vec<f64>,
    store: &'a ResultsStore,
}

struct CellResult {
    rows: Vec<MetricResult>,
    manifest: RunManifest,
}

fn round_summaries(obs: usize, rounds: &[RoundRecord]) -> impl Iterator<Item = RoundSummary> + '_ {
    rounds.iter().map(move |r| RoundSummary {
        observation_id: obs,
        round: r.round,
        n_proposal: r.n_proposal,
        n_active: r.n_active,
        simulator_calls: r.simulator_calls,
        acceptance_rate: r.acceptance_rate,
        threshold: r.threshold.is_finite().then_some(r.threshold),
    })
}

pub fn sequential_config(cfg: &ExperimentConfig, hf_budget: usize) -> SequentialConfig {
    SequentialConfig {
        rounds: cfg.rounds,
        epsilon: cfg.epsilon,
        per_round: hf_budget / cfg.rounds,
        n_mc: cfg.n_mc,
        round_data: cfg.round_data,
        ..SequentialConfig::default()
    }
}

fn dataset(task: &Task, f: Fidelity, n: usize, seed: u64) -> Result<FidelityDataset, RunError> {
    let sim = task.simulator(f).map_err(RunError::Usage)?;
    Ok(simulate_dataset(task.id.as_str(), f.level(), sim, &task.prior, n, seed)?)
}

fn run_cell(ctx: &Ctx<'_>, hf_budget: usize, seed: u64) -> Result<CellResult, RunError> {
    let cfg = ctx.cfg;
    let task = ctx.task;
    let id = run_id(cfg, hf_budget, seed);
    let est = &task.estimator;
    let mut m = RunManifest {
        run_id: id.clone(),
        config_hash: ctx.store.config_hash().to_string(),
        task: task.id.to_string(),
        algorithm: cfg.algorithm.to_string(),
        lf_budget: if cfg.algorithm.uses_low_fidelity() { cfg.lf_budget } else { 0 },
        hf_budget,
        seed,
        settings: cfg.settings(),
        lf_calls: 0,
        hf_calls: Vec::new(),
        rounds: Vec::new(),
        checkpoints: Vec::new(),
        references: ctx.refs.iter().flatten().map(|(p, _)| p.display().to_string()).collect(),
        particles: Vec::new(),
        train_best_epochs: Vec::new(),
        rows: 0,
    };
    let lf = if cfg.algorithm.uses_low_fidelity() && cfg.algorithm != Algorithm::MfAbc {
        let d = dataset(task, Fidelity::Low, cfg.lf_budget, derive_seed(seed, stream::LF_DATA))?;
        m.lf_calls += d.simulator_calls;
        Some(d)
    } else {
        None
    };
    let mut rows = Vec::new();
    let row_lf = m.lf_budget;
    let push = |rows: &mut Vec<MetricResult>, obs: &Observation, evals: Vec<Evaluation>| {
        for e in evals {
            rows.push(MetricResult {
                task: task.id.to_string(),
                algorithm: cfg.algorithm.to_string(),
                lf_budget: row_lf,
                hf_budget,
                seed,
                observation_id: obs.id,
                metric: e.metric.as_str().to_string(),
                value: e.value,
                n_samples: e.n_samples,
                uncertainty: e.uncertainty,
            });
        }
    };
    let eval_posterior = |p: &dyn PosteriorModel, o: &Observation| -> Result<Vec<Evaluation>, RunError> {
        let s = derive_seed(seed, stream::PER_OBSERVATION + o.id as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s, stream::POSTERIOR_DRAWS));
        let samples = p.sample(cfg.posterior_samples, &o.x, &mut rng)?;
        let reference = ctx.refs[o.id].as_ref().map(|(_, t)| t);
        evaluate(Some(p), &samples, o, reference, &cfg.metrics, &ctx.ranges, s)
    };

    match cfg.algorithm {
        Algorithm::Npe | Algorithm::MfNpe | Algorithm::MfNpeChain => {
            let hf = dataset(task, Fidelity::High, hf_budget, derive_seed(seed, stream::HF_DATA))?;
            m.hf_calls.push(hf.simulator_calls);
            let (post, reports) = match cfg.algorithm {
                Algorithm::Npe => {
                    let (p, r) = run_npe(&task.prior, &hf, est, seed)?;
                    (p, vec![r])
                }
                Algorithm::MfNpe => run_mf_npe(&task.prior, lf.as_ref().expect("lf data"), &hf, est, seed)?,
                _ => {
                    let mid = dataset(task, Fidelity::Mid, cfg.mid_budget, derive_seed(seed, stream::MID_DATA))?;
                    m.lf_calls += mid.simulator_calls;
                    run_mf_npe_chain(&task.prior, &[lf.as_ref().expect("lf data"), &mid, &hf], est, seed)?
                }
            };
            m.train_best_epochs = reports.iter().map(|r| r.best_epoch).collect();
            let path = ctx.store.checkpoint_path(&format!("{id}.json"));
            save_checkpoint(&post.flow, &path)?;
            m.checkpoints.push(path.display().to_string());
            for o in ctx.obs {
                let ev = eval_posterior(&post, o)?;
                push(&mut rows, o, ev);
            }
        }
        Algorithm::Tsnpe | Algorithm::MfTsnpe | Algorithm::AMfTsnpe => {
            let seq = sequential_config(cfg, hf_budget);
            let pretrained = if cfg.algorithm == Algorithm::MfTsnpe {
                let (f, r) = pretrain(&task.prior, lf.as_ref().expect("lf data"), est, seed)?;
                m.train_best_epochs.push(r.best_epoch);
                Some(f)
            } else {
                None
            };
            for o in ctx.obs {
                let s = derive_seed(seed, stream::PER_OBSERVATION + o.id as u64);
                let ckpt = |name: String, post: &FlowPosterior, m: &mut RunManifest| -> Result<(), RunError> {
                    let path = ctx.store.checkpoint_path(&name);
                    save_checkpoint(&post.flow, &path)?;
                    m.checkpoints.push(path.display().to_string());
                    Ok(())
                };
                let ev = match cfg.algorithm {
                    Algorithm::AMfTsnpe => {
                        let active = ActiveConfig {
                            b_fraction: cfg.b_fraction,
                            ensemble_size: cfg.ensemble_size,
                            pool_size: None,
                        };
                        let lfd = LowFidelity::Data(lf.as_ref().expect("lf data"));
                        let (ens, rep) = run_a_mf_tsnpe(&task.prior, lfd, task.high.as_ref(), &o.x, &seq, &active, est, s)?;
                        m.hf_calls.push(rep.hf_calls);
                        let recs: Vec<RoundRecord> = rep.rounds.iter().map(|r| r.record.clone()).collect();
                        m.rounds.extend(round_summaries(o.id, &recs));
                        for (e, member) in ens.members.iter().enumerate() {
                            ckpt(format!("{id}-obs{}-m{e}.json", o.id), member, &mut m)?;
                        }
                        eval_posterior(&ens, o)?
                    }
                    _ => {
                        let (post, rep) = match &pretrained {
                            Some(f) => run_mf_tsnpe(&task.prior, LowFidelity::Pretrained(f), task.high.as_ref(), &o.x, &seq, est, s)?,
                            None => run_tsnpe(&task.prior, task.high.as_ref(), &o.x, &seq, est, s)?,
                        };
                        m.hf_calls.push(rep.hf_calls);
                        m.rounds.extend(round_summaries(o.id, &rep.rounds));
                        ckpt(format!("{id}-obs{}.json", o.id), &post, &mut m)?;
                        eval_posterior(&post, o)?
                    }
                };
                push(&mut rows, o, ev);
            }
        }
        Algorithm::MfAbc => {
            let abc = MfAbcConfig { epsilon: cfg.epsilon_abc, eta: cfg.eta, pilot: cfg.abc_pilot };
            for o in ctx.obs {
                let s = derive_seed(seed, stream::PER_OBSERVATION + o.id as u64);
                let r = run_mf_abc(&task.prior, task.low.as_ref(), task.high.as_ref(), &o.x, hf_budget, &abc, s)?;
                m.lf_calls += r.lf_calls;
                m.hf_calls.push(r.hf_calls);
                let theta = Tensor::from_rows(&r.particles.iter().map(|p| p.theta.clone()).collect::<Vec<_>>())?;
                let n = theta.rows();
                let mut ds = FidelityDataset::new(task.id.as_str(), 2, "mf-abc", theta, Tensor::new(vec![n, 0], vec![])?, s);
                ds.simulator_calls = r.hf_calls;
                ds.weights = Some(r.particles.iter().map(|p| p.weight).collect());
                let path = ctx.store.particles_path(&format!("{id}-obs{}.csv", o.id));
                ds.save(&path)?;
                m.particles.push(path.display().to_string());
                let samples = resample_particles(&r.particles, cfg.posterior_samples, derive_seed(s, stream::POSTERIOR_DRAWS))?;
                let reference = ctx.refs[o.id].as_ref().map(|(_, t)| t);
                let ev = evaluate(None, &samples, o, reference, &cfg.metrics, &ctx.ranges, s)?;
                push(&mut rows, o, ev);
            }
        }
    }
    m.rows = rows.len();
    Ok(CellResult { rows, manifest: m })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub output: PathBuf,
    /// Rows of every cell of the configuration, cached or new, in grid order.
    pub rows: Vec<MetricResult>,
    pub executed: usize,
    pub cached: usize,
}

/// Run every (budget, seed) cell of `cfg` that is not already complete in
/// the output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let task = Task::new(cfg);
    if cfg.metrics.iter().any(|m| m.needs_reference()) && !task.has_reference() {
        return Err(RunError::Usage(format!(
            "task {} has no reference posterior, so c2st and mmd are unavailable; use the nltp or nrmse metrics",
            task.id
        )));
    }
    if cfg.algorithm == Algorithm::MfNpeChain && task.mid.is_none() {
        return Err(RunError::Usage(format!("mf-npe-chain needs a middle fidelity, which task {} lacks", task.id)));
    }
    let store = ResultsStore::open(&cfg.output, cfg)?;
    let obs = observations(cfg, &task)?;
    let refs = if cfg.metrics.iter().any(|m| m.needs_reference()) {
        references(&task, &obs, cfg.posterior_samples, cfg.observation_seed, &store.references_dir())?
            .into_iter()
            .map(Some)
            .collect()
    } else {
        vec![None; obs.len()]
    };
    let ctx = Ctx { cfg, task: &task, obs: &obs, refs, ranges: task.ranges(), store: &store };

    let cells: Vec<(usize, u64)> = cfg.hf_budgets.iter().flat_map(|&b| cfg.seeds.iter().map(move |&s| (b, s))).collect();
    let writer = Mutex::new(());
    let results = parallel_map(cells.len(), worker_count(), |i| -> Result<bool, RunError> {
        let (b, s) = cells[i];
        let id = run_id(cfg, b, s);
        if store.is_complete(&id) {
            log::info!("{id}: cached");
            return Ok(false);
        }
        let t = Instant::now();
        let r = run_cell(&ctx, b, s)?;
        let _guard = writer.lock().expect("writer lock");
        store.commit(&r.rows, &r.manifest)?;
        log::info!("{id}: {} rows in {:.1}s", r.rows.len(), t.elapsed().as_secs_f64());
        Ok(true)
    });
    let mut executed = 0;
    for r in results {
        executed += usize::from(r?);
    }
    let ids: std::collections::HashSet<String> = cells.iter().map(|&(b, s)| run_id(cfg, b, s)).collect();
    let mut rows: Vec<(usize, MetricResult)> = crate::store::read_rows(&cfg.output)?
        .into_iter()
        .filter(|r| ids.contains(&r.run_id))
        .map(|r| {
            let pos = cells.iter().position(|&(b, s)| run_id(cfg, b, s) == r.run_id).expect("known run");
            (pos, r.row)
        })
        .collect();
    rows.sort_by_key(|(p, _)| *p);
    Ok(RunOutcome {
        output: cfg.output.clone(),
        rows: rows.into_iter().map(|(_, r)| r).collect(),
        executed,
        cached: cells.len() - executed,
    })
}

/// Generate (or find cached) reference posteriors for the configuration.
pub fn cmd_reference(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, RunError> {
    cfg.validate()?;
    let task = Task::new(cfg);
    if !task.has_reference() {
        return Err(RunError::Usage(format!("task {} has no reference posterior; use nltp or nrmse", task.id)));
    }
    let dir = cfg.output.join("references");
    std::fs::create_dir_all(&dir).map_err(|e| StoreError::Io { path: dir.clone(), source: e })?;
    let obs = observations(cfg, &task)?;
    Ok(references(&task, &obs, cfg.posterior_samples, cfg.observation_seed, &dir)?.into_iter().map(|(p, _)| p).collect())
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub path: PathBuf,
    pub rows: usize,
    pub replacements: usize,
    pub seconds: f64,
}

/// Simulate `n` prior draws at one fidelity and write them to `out`.
pub fn cmd_simulate(
    cfg: &ExperimentConfig,
    fidelity: Fidelity,
    n: usize,
    seed: u64,
    out: &Path,
) -> Result<SimulateOutcome, RunError> {
    if n == 0 {
        return Err(RunError::Usage("-n must be at least 1".into()));
    }
    let task = Task::new(cfg);
    let t = Instant::now();
    let d = dataset(&task, fidelity, n, seed)?;
    d.save(out)?;
    Ok(SimulateOutcome { path: out.to_path_buf(), rows: d.len(), replacements: d.replacements, seconds: t.elapsed().as_secs_f64() })
}

/// Train the configuration's amortized estimator at its first budget and
/// seed, then run simulation-based calibration.
pub fn cmd_sbc(cfg: &ExperimentConfig, pairs: usize, draws: usize) -> Result<SbcReport, RunError> {
    cfg.validate()?;
    if !cfg.algorithm.is_amortized() {
        return Err(RunError::Usage(format!("sbc needs an amortized algorithm, not {}", cfg.algorithm)));
    }
    let task = Task::new(cfg);
    let (hf_budget, seed) = (cfg.hf_budgets[0], cfg.seeds[0]);
    let hf = dataset(&task, Fidelity::High, hf_budget, derive_seed(seed, stream::HF_DATA))?;
    let post = match cfg.algorithm {
        Algorithm::Npe => run_npe(&task.prior, &hf, &task.estimator, seed)?.0,
        _ => {
            let lf = dataset(&task, Fidelity::Low, cfg.lf_budget, derive_seed(seed, stream::LF_DATA))?;
            let mut levels = vec![lf];
            if cfg.algorithm == Algorithm::MfNpeChain {
                levels.push(dataset(&task, Fidelity::Mid, cfg.mid_budget, derive_seed(seed, stream::MID_DATA))?);
            }
            levels.push(hf);
            let refs: Vec<&FidelityDataset> = levels.iter().collect();
            run_mf_npe_chain(&task.prior, &refs, &task.estimator, seed)?.0
        }
    };
    Ok(sbc_ranks(&post, &task.prior, task.high.as_ref(), pairs, draws, derive_seed(seed, 5000))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_ids_separate_cells() {
        let c = ExperimentConfig::default();
        assert_ne!(run_id(&c, 50, 0), run_id(&c, 100, 0));
        assert_ne!(run_id(&c, 50, 0), run_id(&c, 50, 1));
        let other = ExperimentConfig { lf_budget: 1000, ..Default::default() };
        assert_ne!(run_id(&c, 50, 0), run_id(&other, 50, 0));
    }

    #[test]
    fn sequential_rounds_split_the_budget() {
        let c = ExperimentConfig { rounds: 4, ..Default::default() };
        assert_eq!(sequential_config(&c, 1000).per_round, 250);
    }
}
