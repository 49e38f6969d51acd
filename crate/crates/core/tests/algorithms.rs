use mfsbi_core::algorithms::{
    acquisition_scores, derive_seed, hpr_threshold, run_a_mf_tsnpe, run_mf_npe, run_mf_tsnpe, run_npe, sample_truncated,
    ActiveConfig, AlgoError, EnsemblePosterior, EstimatorConfig, FlowPosterior, LowFidelity, PosteriorModel,
    SequentialConfig, TruncatedProposal,
};
use mfsbi_core::data::FidelityDataset;
use mfsbi_core::prior::Prior;
use mfsbi_core::simulators::{simulate_dataset, ConjugateGaussian};
use mfsbi_core::tensor::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Standard normal in `d` dimensions, whatever the observation.
struct StdNormal(usize);

impl PosteriorModel for StdNormal {
    fn theta_dim(&self) -> usize {
        self.0
    }
    fn is_amortized(&self) -> bool {
        true
    }
    fn log_prob(&self, theta: &Tensor, _: &[f64]) -> Result<Vec<f64>, AlgoError> {
        let c = -0.5 * self.0 as f64 * (2.0 * std::f64::consts::PI).ln();
        Ok(theta.iter_rows().map(|r| c - 0.5 * r.iter().map(|v| v * v).sum::<f64>()).collect())
    }
    fn sample(&self, n: usize, _: &[f64], rng: &mut dyn RngCore) -> Result<Tensor, AlgoError> {
        let data = (0..n * self.0).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Tensor::matrix(n, self.0, data)?)
    }
}

fn quick_config(max_epochs: usize) -> EstimatorConfig {
    let mut c = EstimatorConfig { hidden_units: 32, transforms: 3, ..EstimatorConfig::default() };
    c.train.max_epochs = max_epochs;
    c
}

#[test]
fn threshold_is_the_chi_square_quantile() {
    for (d, eps) in [(2usize, 0.05), (3, 0.2)] {
        let t = hpr_threshold(&StdNormal(d), &[0.0], eps, 200_000, 1).unwrap();
        let q = ChiSquared::new(d as f64).unwrap().inverse_cdf(1.0 - eps);
        let expect = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln() - 0.5 * q;
        assert!((t - expect).abs() < 0.02, "d={d}: {t} vs {expect}");
    }
}

#[test]
fn truncated_acceptance_is_the_region_mass_under_the_prior() {
    let prior = Prior::uniform(&[-5.0, -5.0], &[5.0, 5.0]).unwrap();
    let post = StdNormal(2);
    let q = ChiSquared::new(2.0).unwrap().inverse_cdf(0.95);
    let threshold = -(2.0 * std::f64::consts::PI).ln() - 0.5 * q;
    let proposal = TruncatedProposal { prior: &prior, posterior: &post, x_o: &[0.0], threshold };
    let (theta, rate) = sample_truncated(&proposal, 20_000, 3).unwrap();
    // disc of radius √q inside a 10×10 box
    let area = std::f64::consts::PI * q / 100.0;
    assert!((rate - area).abs() < 0.01, "{rate} vs {area}");
    assert!(theta.iter_rows().all(|r| r[0] * r[0] + r[1] * r[1] <= q + 1e-9));
}

#[test]
fn degenerate_truncation_is_an_error() {
    let prior = Prior::uniform(&[-5.0], &[5.0]).unwrap();
    let post = StdNormal(1);
    let proposal = TruncatedProposal { prior: &prior, posterior: &post, x_o: &[0.0], threshold: 10.0 };
    assert!(matches!(sample_truncated(&proposal, 10, 0), Err(AlgoError::DegenerateTruncation { .. })));
}

fn jittered(seed: u64, amount: f64) -> FlowPosterior {
    let prior = Prior::uniform(&[-3.0, -3.0], &[3.0, 3.0]).unwrap();
    let mut flow = quick_config(1).build(&prior, 1, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
    for t in flow.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += amount * rng.random_range(-1.0..1.0);
        }
    }
    FlowPosterior::amortized(flow, prior)
}

fn grid() -> Tensor {
    let mut rows = Vec::new();
    for i in 0..9 {
        for j in 0..9 {
            rows.push(-2.4 + 0.6 * i as f64);
            rows.push(-2.4 + 0.6 * j as f64);
        }
    }
    Tensor::matrix(81, 2, rows).unwrap()
}

#[test]
fn identical_members_have_zero_acquisition_scores() {
    let a = jittered(4, 0.2);
    let ens = EnsemblePosterior::new(vec![a.clone(), a.clone(), a]).unwrap();
    let s = acquisition_scores(&grid(), &ens, &[0.3]).unwrap();
    assert!(s.iter().all(|&v| v == 0.0));
}

#[test]
fn acquisition_is_the_member_density_variance() {
    let members = vec![jittered(1, 0.1), jittered(2, 0.1), jittered(3, 0.1)];
    let g = grid();
    let dens: Vec<Vec<f64>> = members.iter().map(|m| m.log_prob(&g, &[0.3]).unwrap().iter().map(|l| l.exp()).collect()).collect();
    let ens = EnsemblePosterior::new(members).unwrap();
    let s = acquisition_scores(&g, &ens, &[0.3]).unwrap();
    let lp = ens.log_prob(&g, &[0.3]).unwrap();
    for i in 0..g.rows() {
        let v = [dens[0][i], dens[1][i], dens[2][i]];
        let m = (v[0] + v[1] + v[2]) / 3.0;
        let var = v.iter().map(|d| (d - m).powi(2)).sum::<f64>() / 2.0;
        assert!((s[i] - var).abs() <= 1e-12 * var.max(1e-300), "{} vs {var}", s[i]);
        assert!((lp[i] - m.ln()).abs() < 1e-10);
    }
    assert!(s.iter().any(|&v| v > 0.0));
    let single = EnsemblePosterior::new(vec![jittered(1, 0.1)]).unwrap();
    assert!(acquisition_scores(&g, &single, &[0.3]).is_err());
}

#[test]
fn focused_posterior_refuses_other_observations() {
    let p = jittered(1, 0.0);
    let f = FlowPosterior::focused(p.flow, p.prior, vec![0.5]);
    assert!(matches!(f.log_prob(&grid(), &[0.6]), Err(AlgoError::ObservationMismatch)));
    assert!(f.log_prob(&grid(), &[0.5]).is_ok());
}

#[test]
fn seeds_derive_distinct_streams() {
    let mut seen = std::collections::HashSet::new();
    for s in 0..4u64 {
        for k in [0u64, 1, 2, 1000, 1001, 2000, 3000, 6000, 7000] {
            assert!(seen.insert(derive_seed(s, k)));
        }
    }
}

fn conjugate_data(n: usize, seed: u64) -> (Prior, FidelityDataset) {
    let task = ConjugateGaussian::default();
    let prior = task.prior();
    let d = simulate_dataset("gaussian", 1, &task, &prior, n, seed).unwrap();
    (prior, d)
}

#[test]
fn npe_learns_the_conjugate_posterior() {
    let (prior, data) = conjugate_data(3000, 1);
    let (post, report) = run_npe(&prior, &data, &quick_config(300), 2).unwrap();
    assert!(report.best_epoch <= report.stop_epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for x in [-1.0, 1.5] {
        let s = post.sample(4000, &[x], &mut rng).unwrap();
        let v: Vec<f64> = s.iter_rows().map(|r| r[0]).collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let (tm, ts) = mfsbi_core::simulators::conjugate_posterior(x, 0.5);
        assert!((m - tm).abs() < 0.1 && (sd / ts - 1.0).abs() < 0.15, "x={x}: {m} {sd} vs {tm} {ts}");
    }
}

#[test]
fn multifidelity_runs_are_reproducible() {
    let (prior, lf) = conjugate_data(600, 10);
    let (_, hf) = conjugate_data(100, 11);
    let cfg = quick_config(15);
    let (a, ra) = run_mf_npe(&prior, &lf, &hf, &cfg, 5).unwrap();
    let (b, _) = run_mf_npe(&prior, &lf, &hf, &cfg, 5).unwrap();
    assert_eq!(ra.len(), 2);
    let g = Tensor::matrix(3, 1, vec![-0.5, 0.0, 0.7]).unwrap();
    assert_eq!(a.log_prob(&g, &[0.2]).unwrap(), b.log_prob(&g, &[0.2]).unwrap());
    let empty = lf.head(0);
    assert!(matches!(run_mf_npe(&prior, &empty, &hf, &cfg, 5), Err(AlgoError::NoLowFidelity)));
}

#[test]
fn sequential_rounds_stay_in_the_truncated_region() {
    let (prior, lf) = conjugate_data(600, 20);
    let task = ConjugateGaussian::default();
    let cfg = quick_config(15);
    let seq = SequentialConfig { rounds: 3, per_round: 100, n_mc: 2000, epsilon: 1e-3, ..SequentialConfig::default() };
    let (post, report) = run_mf_tsnpe(&prior, LowFidelity::Data(&lf), &task, &[1.0], &seq, &cfg, 1).unwrap();
    assert_eq!(report.rounds.len(), 3);
    assert_eq!(report.hf_calls, 300);
    assert!(report.pretrain.is_some());
    assert_eq!(report.rounds[0].threshold, f64::NEG_INFINITY);
    assert!(report.rounds[1].threshold.is_finite());
    assert!(report.rounds.iter().all(|r| r.acceptance_rate > 0.0 && r.acceptance_rate <= 1.0));
    assert!(!post.is_amortized());
}

#[test]
fn active_rounds_mix_proposal_and_acquired_draws() {
    let (prior, lf) = conjugate_data(400, 30);
    let task = ConjugateGaussian::default();
    let cfg = quick_config(10);
    let seq = SequentialConfig { rounds: 2, per_round: 50, n_mc: 1000, epsilon: 1e-3, ..SequentialConfig::default() };
    let active = ActiveConfig { ensemble_size: 2, ..ActiveConfig::default() };
    let (ens, report) = run_a_mf_tsnpe(&prior, LowFidelity::Data(&lf), &task, &[0.5], &seq, &active, &cfg, 4).unwrap();
    assert_eq!(ens.len(), 2);
    assert_eq!(report.pretrain.len(), 2);
    for r in &report.rounds {
        assert_eq!(r.record.n_active, 10);
        assert_eq!(r.record.n_proposal, 40);
    }
    assert_eq!(report.rounds[0].pool_left, 1000 - 10);
    assert_eq!(report.rounds[1].pool_left, 1000 - 20);
}
