//! Benchmark simulators at two or more fidelities, their priors and the
//! replacement policy for invalid outputs.
//!
//! Every simulator is a pure function of `(θ, rng)`. Batches derive one
//! ChaCha8 stream per row from `(seed, row)`, so results do not depend on
//! the worker count.

mod blob;
mod gaussian;
mod ou;
mod sir;
mod slcp;

pub use blob::{blob_probability, BlobConfig, BlobHigh, BlobLow};
pub use gaussian::{conjugate_posterior, ConjugateGaussian};
pub use ou::{OuConfig, OuHigh, OuLow, OuParams, OuPerturbed, OuVariant, PerturbationSpec};
pub use sir::{sir_trajectory, SirConfig, SirHigh, SirLow, SirTrajectory};
pub use blob::blob_prior;
pub use sir::sir_prior;
pub use slcp::{slcp_loglik, slcp_moments, slcp_prior, SlcpHigh, SlcpLow};

use crate::data::FidelityDataset;
use crate::pool::{parallel_map, worker_count};
use crate::prior::Prior;
use crate::tensor::Tensor;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("n must be at least 1")]
    Empty,
    #[error("theta has {got} entries, simulator `{sim}` expects {expected}")]
    ThetaDim { sim: String, expected: usize, got: usize },
    #[error("{invalid} of {calls} simulations were invalid; the task looks misconfigured")]
    TooManyInvalid { invalid: usize, calls: usize },
    #[error("SIR integration produced a negative compartment ({value}) at t={t}; reduce the step")]
    NegativeCompartment { t: f64, value: f64 },
    #[error("unknown {kind} `{name}`")]
    Unknown { kind: &'static str, name: String },
    #[error("parameter source: {0}")]
    Source(String),
}

/// Output of one simulation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    /// Full trace or image when the simulator keeps it.
    pub raw: Option<Vec<f64>>,
    pub summary: Vec<f64>,
}

impl SimOutput {
    pub fn summary(summary: Vec<f64>) -> Self {
        Self { raw: None, summary }
    }

    pub fn invalid(len: usize) -> Self {
        Self::summary(vec![f64::NAN; len])
    }

    pub fn is_valid(&self) -> bool {
        self.summary.iter().all(|v| v.is_finite())
    }
}

pub trait Simulator: Send + Sync {
    fn name(&self) -> &str;
    fn theta_dim(&self) -> usize;
    fn x_dim(&self) -> usize;
    fn simulate(&self, theta: &[f64], rng: &mut ChaCha8Rng) -> SimOutput;
}

/// Where parameters come from, both for fresh rows and for replacements.
pub trait ParamSource: Sync {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError>;
}

impl ParamSource for Prior {
    fn dim(&self) -> usize {
        Prior::dim(self)
    }

    fn draw(&self, rng: &mut dyn RngCore) -> Result<Vec<f64>, SimError> {
        Ok(self.sample(rng))
    }
}

/// RNG for row `row` of a batch seeded with `seed`.
pub fn row_rng(seed: u64, row: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row);
    rng
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchStats {
    /// Total simulator invocations, replacements included.
    pub calls: usize,
    pub replacements: usize,
}

/// Upper bound on invalid outputs before a batch is declared broken: more
/// than half of the calls, beyond three binomial standard deviations.
fn too_many_invalid(invalid: usize, calls: usize) -> bool {
    if calls < 1000 {
        return false;
    }
    let c = calls as f64;
    invalid as f64 > 0.5 * c + 3.0 * (0.25 * c).sqrt()
}

const MAX_ATTEMPTS_PER_ROW: usize = 1000;

fn run_rows(
    sim: &dyn Simulator,
    initial: Option<&Tensor>,
    source: &dyn ParamSource,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Tensor, BatchStats), SimError> {
    if n == 0 {
        return Err(SimError::Empty);
    }
    if source.dim() != sim.theta_dim() {
        return Err(SimError::ThetaDim { sim: sim.name().into(), expected: sim.theta_dim(), got: source.dim() });
    }
    let rows = parallel_map(n, worker_count(), |i| -> Result<(Vec<f64>, Vec<f64>, usize), SimError> {
        let mut rng = row_rng(seed, i as u64);
        let mut theta = match initial {
            Some(t) => t.row(i).to_vec(),
            None => source.draw(&mut rng)?,
        };
        for attempt in 0..MAX_ATTEMPTS_PER_ROW {
            let out = sim.simulate(&theta, &mut rng);
            if out.is_valid() {
                return Ok((theta, out.summary, attempt + 1));
            }
            theta = source.draw(&mut rng)?;
        }
        Err(SimError::TooManyInvalid { invalid: MAX_ATTEMPTS_PER_ROW, calls: MAX_ATTEMPTS_PER_ROW })
    });
    let mut theta = Vec::with_capacity(n * sim.theta_dim());
    let mut x = Vec::with_capacity(n * sim.x_dim());
    let mut stats = BatchStats::default();
    for r in rows {
        let (t, s, calls) = r?;
        theta.extend(t);
        x.extend(s);
        stats.calls += calls;
        stats.replacements += calls - 1;
    }
    if too_many_invalid(stats.replacements, stats.calls) {
        return Err(SimError::TooManyInvalid { invalid: stats.replacements, calls: stats.calls });
    }
    if stats.replacements > 0 {
        log::info!(
            "{}: {} replacements over {} calls ({:.3}%)",
            sim.name(),
            stats.replacements,
            stats.calls,
            100.0 * stats.replacements as f64 / stats.calls as f64
        );
    }
    let theta = Tensor::new(vec![n, sim.theta_dim()], theta).expect("row lengths checked");
    let x = Tensor::new(vec![n, sim.x_dim()], x).expect("row lengths checked");
    Ok((theta, x, stats))
}

/// Draw `n` parameters from `source` and simulate them, replacing invalid
/// outputs with fresh draws from the same source.
pub fn simulate_batch(
    sim: &dyn Simulator,
    source: &dyn ParamSource,
    n: usize,
    seed: u64,
) -> Result<(Tensor, Tensor, BatchStats), SimError> {
    run_rows(sim, None, source, n, seed)
}

/// Simulate the given parameters; invalid rows are redrawn from `source`.
pub fn simulate_given(
    sim: &dyn Simulator,
    theta: &Tensor,
    source: &dyn ParamSource,
    seed: u64,
) -> Result<(Tensor, Tensor, BatchStats), SimError> {
    if theta.cols() != sim.theta_dim() {
        return Err(SimError::ThetaDim { sim: sim.name().into(), expected: sim.theta_dim(), got: theta.cols() });
    }
    run_rows(sim, Some(theta), source, theta.rows(), seed)
}

/// [`simulate_batch`] packaged as a dataset with provenance.
pub fn simulate_dataset(
    task: &str,
    fidelity: u8,
    sim: &dyn Simulator,
    source: &dyn ParamSource,
    n: usize,
    seed: u64,
) -> Result<FidelityDataset, SimError> {
    let (theta, x, stats) = simulate_batch(sim, source, n, seed)?;
    let mut d = FidelityDataset::new(task, fidelity, sim.name(), theta, x, seed);
    d.simulator_calls = stats.calls;
    d.replacements = stats.replacements;
    Ok(d)
}

/// Single simulation with the row-0 stream of `seed`.
pub fn simulate_one(sim: &dyn Simulator, theta: &[f64], seed: u64) -> SimOutput {
    sim.simulate(theta, &mut row_rng(seed, 0))
}
