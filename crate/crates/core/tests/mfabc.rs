use mfsbi_core::mfabc::{rejection_abc, run_mf_abc, FidelityPath, MfAbcConfig, MfAbcError};
use mfsbi_core::prior::Prior;
use mfsbi_core::simulators::{simulate_one, OuHigh, OuLow, OuVariant, SimOutput, Simulator};
use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;

/// Deterministic scalar simulator θ ↦ θ + shift.
struct Shift(f64);

impl Simulator for Shift {
    fn name(&self) -> &str {
        "shift"
    }
    fn theta_dim(&self) -> usize {
        1
    }
    fn x_dim(&self) -> usize {
        1
    }
    fn simulate(&self, theta: &[f64], _: &mut ChaCha8Rng) -> SimOutput {
        SimOutput::summary(vec![theta[0] + self.0])
    }
}

fn interval_mass(centre: f64, half: f64) -> f64 {
    ((centre + half).min(1.0) - (centre - half).max(0.0)).max(0.0)
}

#[test]
fn full_continuation_reproduces_rejection_abc() {
    let v = OuVariant::Ou2;
    let prior = v.prior();
    let (hi, lo) = (OuHigh::new(v), OuLow::new(v));
    let x_o = simulate_one(&hi, &[1.5, 0.3], 99).summary;
    let cfg = MfAbcConfig { epsilon: (2.0, 2.0), eta: (1.0, 1.0), pilot: 2000 };
    let mf = run_mf_abc(&prior, &lo, &hi, &x_o, 3000, &cfg, 5).unwrap();
    let rej = rejection_abc(&prior, &hi, &x_o, 3000, 2.0, 2000, 5).unwrap();
    assert_eq!(mf.hf_calls, 3000);
    for (a, b) in mf.particles.iter().zip(&rej) {
        assert_eq!(a.theta, b.theta);
        assert_eq!(a.weight, b.weight);
    }
    assert!(rej.iter().any(|p| p.weight > 0.0));
}

#[test]
fn high_fidelity_share_follows_continuation_rates() {
    let v = OuVariant::Ou2;
    let prior = v.prior();
    let (hi, lo) = (OuHigh::new(v), OuLow::new(v));
    let x_o = simulate_one(&hi, &[1.5, 0.3], 1).summary;
    let cfg = MfAbcConfig { epsilon: (2.5, 2.5), eta: (0.9, 0.3), pilot: 2000 };
    let n = 20_000;
    let r = run_mf_abc(&prior, &lo, &hi, &x_o, n, &cfg, 2).unwrap();
    // Recover the low-fidelity decision from path and weight: continued
    // particles carry 1 + (a_H − 1)/η₁ after an accept and a_H/η₂ otherwise.
    let n_accept = r
        .particles
        .iter()
        .filter(|p| match p.path {
            FidelityPath::LowOnly => p.weight == 1.0,
            FidelityPath::LowAndHigh => p.weight == 1.0 || (p.weight - (1.0 - 1.0 / 0.9)).abs() < 1e-12,
        })
        .count() as f64;
    let expect = 0.9 * n_accept + 0.3 * (n as f64 - n_accept);
    let sd = (0.09 * n_accept + 0.21 * (n as f64 - n_accept)).sqrt();
    assert!(n_accept > 100.0);
    assert!((r.hf_calls as f64 - expect).abs() < 5.0 * sd, "{} vs {expect}", r.hf_calls);
    assert_eq!(r.lf_calls, n);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// The weights estimate the high-fidelity acceptance probability
    /// without bias, for any continuation rates.
    #[test]
    fn weights_are_unbiased(e1 in 0.05f64..1.0, e2 in 0.05f64..1.0, shift in -0.3f64..0.3, seed in 0u64..1000) {
        let prior = Prior::uniform(&[0.0], &[1.0]).unwrap();
        let cfg = MfAbcConfig { epsilon: (0.5, 0.4), eta: (e1, e2), pilot: 5000 };
        let n = 20_000;
        let x_o = [0.5];
        let r = run_mf_abc(&prior, &Shift(0.0), &Shift(shift), &x_o, n, &cfg, seed).unwrap();
        let w: Vec<f64> = r.particles.iter().map(|p| p.weight).collect();
        let mean = w.iter().sum::<f64>() / n as f64;
        let var = w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // accept when |θ + shift − 0.5| < ε_H · s_H
        let half = 0.4 * r.scale_high.std[0];
        let truth = interval_mass(0.5 - shift, half);
        prop_assert!((mean - truth).abs() < 5.0 * (var / n as f64).sqrt() + 1e-3, "{mean} vs {truth}");
    }
}

#[test]
fn zero_acceptance_is_reported() {
    let prior = Prior::uniform(&[0.0], &[1.0]).unwrap();
    let cfg = MfAbcConfig { epsilon: (0.01, 0.01), eta: (0.5, 0.5), pilot: 1000 };
    let r = run_mf_abc(&prior, &Shift(0.0), &Shift(0.0), &[10.0], 500, &cfg, 0);
    assert!(matches!(r, Err(MfAbcError::AllZero)));
}

#[test]
fn observation_length_is_checked() {
    let prior = Prior::uniform(&[0.0], &[1.0]).unwrap();
    let r = run_mf_abc(&prior, &Shift(0.0), &Shift(0.0), &[1.0, 2.0], 10, &MfAbcConfig::default(), 0);
    assert!(matches!(r, Err(MfAbcError::Observation { expected: 1, got: 2 })));
}
