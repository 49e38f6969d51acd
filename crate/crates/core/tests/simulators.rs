use mfsbi_core::simulators::{
    row_rng, simulate_batch, simulate_given, sir_trajectory, BlobConfig, BlobHigh, BlobLow, OuHigh, OuLow,
    OuPerturbed, OuVariant, PerturbationSpec, SimOutput, Simulator, SirConfig, SlcpHigh, SlcpLow,
};
use mfsbi_core::tensor::Tensor;

fn repeated(theta: &[f64], n: usize) -> Tensor {
    Tensor::matrix(n, theta.len(), theta.repeat(n)).unwrap()
}

fn column(x: &Tensor, j: usize) -> Vec<f64> {
    x.iter_rows().map(|r| r[j]).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cov(a: &[f64], b: &[f64]) -> f64 {
    let (ma, mb) = (mean(a), mean(b));
    a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() - 1) as f64
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    cov(a, b) / (cov(a, a) * cov(b, b)).sqrt()
}

/// Moments of the Euler-Maruyama chain x_{t+1} = a x_t + (1 − a) μ + s z,
/// started from N(μ + offset, 1), against the simulated subsample.
#[test]
fn ou_subsample_moments_follow_the_ar1_recursion() {
    let (mu, sigma) = (1.2, 0.4);
    let (gamma, offset, dt) = (0.5, 3.0, 0.1);
    let n = 20_000;
    let sim = OuHigh::new(OuVariant::Ou2);
    let prior = OuVariant::Ou2.prior();
    let (_, x, _) = simulate_given(&sim, &repeated(&[mu, sigma], n), &prior, 7).unwrap();
    let a: f64 = 1.0 - gamma * dt;
    let v_inf = sigma * sigma * dt / (1.0 - a * a);
    for k in [0usize, 1, 3, 9] {
        let steps = 11 * k as i32;
        let m = mu + offset * a.powi(steps);
        let v = a.powi(2 * steps) + v_inf * (1.0 - a.powi(2 * steps));
        let col = column(&x, k);
        let se_m = (v / n as f64).sqrt();
        let se_v = v * (2.0 / n as f64).sqrt();
        assert!((mean(&col) - m).abs() < 5.0 * se_m, "k={k}: mean {} vs {m}", mean(&col));
        assert!((cov(&col, &col) - v).abs() < 5.0 * se_v, "k={k}: var {} vs {v}", cov(&col, &col));
    }
    // lag-one covariance between observations 8 and 9
    let c = cov(&column(&x, 8), &column(&x, 9));
    let v8 = a.powi(176) + v_inf * (1.0 - a.powi(176));
    let expect = a.powi(11) * v8;
    assert!((c - expect).abs() < 0.01, "{c} vs {expect}");
}

#[test]
fn ou_low_fidelity_is_iid_normal() {
    let n = 20_000;
    let (_, x, _) = simulate_given(&OuLow::new(OuVariant::Ou2), &repeated(&[2.0, 0.5], n), &OuVariant::Ou2.prior(), 3).unwrap();
    for k in [0, 5, 9] {
        let col = column(&x, k);
        assert!((mean(&col) - 2.0).abs() < 5.0 * 0.5 / (n as f64).sqrt());
        assert!((cov(&col, &col) - 0.25).abs() < 5.0 * 0.25 * (2.0 / n as f64).sqrt());
    }
    assert!(cov(&column(&x, 0), &column(&x, 1)).abs() < 5.0 * 0.25 / (n as f64).sqrt());
}

#[test]
fn slcp_covariance_matches_construction() {
    let theta = [0.5, -1.0, 1.1, -0.8, 0.7];
    let (s1, s2, rho) = (1.21, 0.64, 0.7f64.tanh());
    let n = 10_000;
    let (_, x, _) = simulate_given(&SlcpHigh, &repeated(&theta, n), &mfsbi_core::simulators::slcp_prior(), 1).unwrap();
    let (_, x0, _) = simulate_given(&SlcpLow, &repeated(&theta, n), &mfsbi_core::simulators::slcp_prior(), 1).unwrap();
    for draw in 0..4 {
        let (a, b) = (column(&x, 2 * draw), column(&x, 2 * draw + 1));
        assert!((mean(&a) - 0.5).abs() < 5.0 * s1 / (n as f64).sqrt());
        assert!((mean(&b) + 1.0).abs() < 5.0 * s2 / (n as f64).sqrt());
        let expect = [s1 * s1, rho * s1 * s2, s2 * s2];
        let got = [cov(&a, &a), cov(&a, &b), cov(&b, &b)];
        for (g, e) in got.iter().zip(expect) {
            assert!((g - e).abs() < 0.05 * expect[0].max(expect[2]), "{got:?} vs {expect:?}");
        }
        assert!(mean(&column(&x0, 2 * draw)).abs() < 5.0 * s1 / (n as f64).sqrt());
    }
}

#[test]
fn blob_pixel_means_follow_the_probability_map() {
    let theta = [120.0, 90.0, 1.0];
    let sim = BlobHigh::default();
    let reps = 40;
    let mut acc = vec![0.0; 256 * 256];
    for r in 0..reps {
        let out = sim.simulate(&theta, &mut row_rng(5, r));
        for (a, v) in acc.iter_mut().zip(out.summary) {
            *a += v / reps as f64;
        }
    }
    for (px, py) in [(120usize, 90usize), (130, 95), (150, 90), (10, 200)] {
        let r = (px as f64 - 120.0).powi(2) + (py as f64 - 90.0).powi(2);
        let p = 0.9 - 0.8 * (-0.5 * r / 144.0).exp();
        let sd = (255.0 * p * (1.0 - p) / reps as f64).sqrt();
        let got = acc[py * 256 + px];
        assert!((got - 255.0 * p).abs() < 5.0 * sd, "({px},{py}): {got} vs {}", 255.0 * p);
    }
}

#[test]
fn blob_fidelities_are_correlated() {
    let config = BlobConfig { output_side: 32, ..BlobConfig::default() };
    let (hi, lo) = (BlobHigh { config }, BlobLow { config });
    for theta in [[128.0, 128.0, 1.0], [60.0, 200.0, 0.6]] {
        let a = hi.simulate(&theta, &mut row_rng(2, 0)).summary;
        let b = lo.simulate(&theta, &mut row_rng(2, 1)).summary;
        let c = corr(&a, &b);
        assert!(c > 0.6, "{theta:?}: {c}");
        // a blob elsewhere is much less similar
        let far = lo.simulate(&[(theta[0] + 128.0) % 256.0, theta[1], theta[2]], &mut row_rng(2, 2)).summary;
        let cf = corr(&a, &far);
        assert!(cf < c - 0.3, "{c} {cf}");
    }
}

#[test]
fn perturbation_weakens_but_keeps_correlation() {
    let prior = OuVariant::Ou2.prior();
    let n = 3000;
    let (theta, x_hi, _) = simulate_batch(&OuHigh::new(OuVariant::Ou2), &prior, n, 4).unwrap();
    let spec = PerturbationSpec { delta: 0.5, invert: false };
    let (_, x_p, _) = simulate_given(&OuPerturbed::new(OuVariant::Ou2, spec), &theta, &prior, 4).unwrap();
    let spread = |x: &Tensor| -> Vec<f64> { x.iter_rows().map(|r| (r[9] - r[6]).abs() + (r[8] - r[5]).abs()).collect() };
    let sig = column(&theta, 1);
    let c_hi = corr(&sig, &spread(&x_hi));
    let c_p = corr(&sig, &spread(&x_p));
    assert!(c_hi > 0.3 && c_p > 0.05 && c_p < c_hi, "{c_hi} {c_p}");
}

#[test]
fn sir_conserved_quantity_along_trajectory() {
    // dS/dR = −β S / (γ N), so S(t) = S(0) exp(−β R(t) / (γ N)).
    let c = SirConfig::default();
    for (beta, gamma) in [(0.4, 0.125), (1.2, 0.3), (0.2, 0.15)] {
        let tr = sir_trajectory(beta, gamma, &c, true).unwrap();
        let r = tr.r.unwrap();
        for k in (0..tr.t.len()).step_by(50) {
            let expect = (c.population - 1.0) * (-beta * r[k] / (gamma * c.population)).exp();
            assert!((tr.s[k] - expect).abs() < 1e-6 * c.population, "β={beta} t={}: {} vs {expect}", tr.t[k], tr.s[k]);
        }
    }
}

#[test]
fn invalid_output_has_right_length() {
    let out = SimOutput::invalid(4);
    assert!(!out.is_valid());
    assert_eq!(out.summary.len(), 4);
}
