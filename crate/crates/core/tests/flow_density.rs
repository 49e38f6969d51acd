use mfsbi_core::flow::{ConditionalFlow, FlowArchitecture, LogitBox};
use mfsbi_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Flow with every parameter jittered away from the identity init.
fn jittered_flow(x_dim: usize, seed: u64) -> ConditionalFlow {
    let arch = FlowArchitecture::new(2, x_dim);
    let bx = LogitBox::new(vec![-1.0, 0.0], vec![2.0, 3.0]).unwrap();
    let mut flow = ConditionalFlow::new(arch, bx, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in flow.params_mut().values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.15..0.15);
        }
    }
    flow
}

/// Midpoint-rule integral of q(θ | x) over logit coordinates u ∈ [-l, l]²,
/// θ = lower + width·σ(u), and the mean of θ₀.
fn quadrature(flow: &ConditionalFlow, x: &[f64], m: usize, l: f64) -> (f64, f64) {
    let h = 2.0 * l / m as f64;
    let sig = |u: f64| 1.0 / (1.0 + (-u).exp());
    let mut rows = Vec::with_capacity(m * m * 2);
    let mut jac = Vec::with_capacity(m * m);
    for i in 0..m {
        for j in 0..m {
            let (s0, s1) = (sig(-l + (i as f64 + 0.5) * h), sig(-l + (j as f64 + 0.5) * h));
            rows.push(-1.0 + 3.0 * s0);
            rows.push(3.0 * s1);
            jac.push(9.0 * s0 * (1.0 - s0) * s1 * (1.0 - s1));
        }
    }
    let theta = Tensor::matrix(m * m, 2, rows).unwrap();
    let xs = Tensor::matrix(m * m, x.len(), x.repeat(m * m)).unwrap();
    let lp = flow.log_prob(&theta, &xs).unwrap();
    let mut mass = 0.0;
    let mut mean = 0.0;
    for (k, lq) in lp.iter().enumerate() {
        let w = lq.exp() * jac[k] * h * h;
        mass += w;
        mean += w * theta.data()[2 * k];
    }
    (mass, mean / mass)
}

#[test]
fn density_integrates_to_one() {
    for (seed, x) in [(3u64, vec![0.4, -1.2]), (9, vec![2.0, 0.1])] {
        let flow = jittered_flow(2, seed);
        let (mass, _) = quadrature(&flow, &x, 300, 10.0);
        assert!((mass - 1.0).abs() < 2e-3, "seed {seed}: mass {mass}");
    }
}

#[test]
fn samples_agree_with_density() {
    let flow = jittered_flow(2, 5);
    let x = [0.7, 0.3];
    let (_, q_mean) = quadrature(&flow, &x, 300, 10.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (s, lp) = flow.sample_with_log_prob(20_000, &x, &mut rng).unwrap();
    let col: Vec<f64> = s.iter_rows().map(|r| r[0]).collect();
    let mean = col.iter().sum::<f64>() / col.len() as f64;
    let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64).sqrt();
    assert!((mean - q_mean).abs() < 4.0 * sd / (col.len() as f64).sqrt(), "{mean} vs {q_mean}");

    let xs = Tensor::matrix(200, 2, x.repeat(200)).unwrap();
    let head = Tensor::matrix(200, 2, s.data()[..400].to_vec()).unwrap();
    let direct = flow.log_prob(&head, &xs).unwrap();
    for (a, b) in direct.iter().zip(&lp) {
        assert!((a - b).abs() < 1e-8, "{a} {b}");
    }
}

