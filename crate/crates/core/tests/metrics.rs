use mfsbi_core::algorithms::{AlgoError, PosteriorModel, PriorPosterior};
use mfsbi_core::metrics::{c2st, mmd, nltp, nrmse, sbc_ranks, MetricError};
use mfsbi_core::prior::Prior;
use mfsbi_core::simulators::ConjugateGaussian;
use mfsbi_core::tensor::Tensor;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_rows(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..n * d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(n, d, data).unwrap()
}

/// Gaussian posterior for x = θ + N(0, 0.5²), θ ~ N(0, 1), with its
/// standard deviation multiplied by `scale`.
struct Conjugate {
    scale: f64,
}

impl Conjugate {
    fn moments(&self, x: f64) -> (f64, f64) {
        (x * 4.0 / 5.0, self.scale * (1.0f64 / 5.0).sqrt())
    }
}

impl PosteriorModel for Conjugate {
    fn theta_dim(&self) -> usize {
        1
    }
    fn is_amortized(&self) -> bool {
        true
    }
    fn log_prob(&self, theta: &Tensor, x: &[f64]) -> Result<Vec<f64>, AlgoError> {
        let (m, s) = self.moments(x[0]);
        Ok(theta
            .iter_rows()
            .map(|r| -0.5 * ((r[0] - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln())
            .collect())
    }
    fn sample(&self, n: usize, x: &[f64], rng: &mut dyn RngCore) -> Result<Tensor, AlgoError> {
        let (m, s) = self.moments(x[0]);
        let data = (0..n).map(|_| m + s * rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Tensor::matrix(n, 1, data)?)
    }
}

#[test]
fn c2st_of_identical_distributions_is_chance() {
    let a = normal_rows(1000, 2, 0.0, 1);
    let b = normal_rows(1000, 2, 0.0, 2);
    let acc = c2st(&a, &b, 3).unwrap();
    assert!((0.45..=0.55).contains(&acc), "{acc}");
}

#[test]
fn c2st_reaches_bayes_accuracy() {
    // N(0, 1) vs N(1, 1): the Bayes rule thresholds at 1/2, accuracy Φ(1/2).
    let bayes = 0.691_462_461_274_013_1;
    let a = normal_rows(5000, 1, 0.0, 4);
    let b = normal_rows(5000, 1, 1.0, 5);
    let acc = c2st(&a, &b, 6).unwrap();
    assert!((acc - bayes).abs() < 0.02, "{acc}");
}

#[test]
fn c2st_rejects_mismatched_widths() {
    let a = normal_rows(200, 2, 0.0, 1);
    let b = normal_rows(200, 3, 0.0, 2);
    assert!(matches!(c2st(&a, &b, 0), Err(MetricError::DimensionMismatch(..))));
}

#[test]
fn mmd_matches_direct_kernel_sums() {
    let a = Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap();
    let b = Tensor::matrix(2, 1, vec![0.5, 3.0]).unwrap();
    let h = 1.3;
    let k = |u: f64, v: f64| (-(u - v) * (u - v) / (2.0 * h * h)).exp();
    let (av, bv) = (a.data(), b.data());
    let mut kaa = 0.0;
    for &u in av {
        for &v in av {
            kaa += k(u, v) / 9.0;
        }
    }
    let mut kbb = 0.0;
    for &u in bv {
        for &v in bv {
            kbb += k(u, v) / 4.0;
        }
    }
    let mut kab = 0.0;
    for &u in av {
        for &v in bv {
            kab += k(u, v) / 6.0;
        }
    }
    let expect = kaa + kbb - 2.0 * kab;
    assert!((mmd(&a, &b, Some(h)).unwrap() - expect).abs() < 1e-14);
}

#[test]
fn mmd_separates_shifted_samples() {
    let a = normal_rows(500, 2, 0.0, 1);
    let same = normal_rows(500, 2, 0.0, 2);
    let shifted = normal_rows(500, 2, 1.0, 3);
    let null = mmd(&a, &same, None).unwrap();
    let alt = mmd(&a, &shifted, None).unwrap();
    assert!(null < 0.01 && alt > 10.0 * null, "{null} {alt}");
}

#[test]
fn nltp_of_the_prior_is_its_entropy_term() {
    let prior = Prior::uniform(&[0.0, -1.0], &[2.0, 3.0]).unwrap();
    let pairs = vec![(vec![1.0, 0.0], vec![0.0]), (vec![0.5, 2.5], vec![1.0])];
    let r = nltp(&PriorPosterior(&prior), &pairs).unwrap();
    assert!((r.value - 8.0f64.ln()).abs() < 1e-12);
    assert_eq!(r.evaluated, 2);
}

#[test]
fn nltp_of_a_gaussian_posterior() {
    let post = Conjugate { scale: 1.0 };
    let r = nltp(&post, &[(vec![0.3], vec![1.0])]).unwrap();
    let (m, s) = (0.8, 0.2f64.sqrt());
    let expect = 0.5 * ((0.3 - m) / s).powi(2) + s.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    assert!((r.value - expect).abs() < 1e-12);
}

#[test]
fn nrmse_of_uniform_samples_about_the_centre() {
    let n = 100_001;
    let data: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let s = Tensor::matrix(n, 1, data).unwrap();
    let v = nrmse(&s, &[0.0], &[2.0]).unwrap();
    assert!((v - 1.0 / 3.0f64.sqrt()).abs() < 1e-4, "{v}");
}

#[test]
fn sbc_accepts_the_true_posterior_and_flags_overconfidence() {
    let task = ConjugateGaussian::default();
    let prior = task.prior();
    let good = sbc_ranks(&Conjugate { scale: 1.0 }, &prior, &task, 1000, 99, 1).unwrap();
    assert!(good.min_p_value() > 1e-3, "{:?}", good.p_values);
    let narrow = sbc_ranks(&Conjugate { scale: 0.5 }, &prior, &task, 1000, 99, 1).unwrap();
    assert!(narrow.min_p_value() < 1e-6, "{:?}", narrow.p_values);
    // overconfidence piles ranks into the outer bins
    let h = &narrow.histograms[0];
    assert!(h[0] + h[h.len() - 1] > 4 * h[h.len() / 2]);
}

#[test]
fn sbc_of_the_prior_is_calibrated() {
    let task = ConjugateGaussian::default();
    let prior = task.prior();
    let r = sbc_ranks(&PriorPosterior(&prior), &prior, &task, 500, 99, 2).unwrap();
    assert!(r.min_p_value() > 1e-3);
}
