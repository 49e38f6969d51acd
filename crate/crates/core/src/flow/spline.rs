//! Monotone rational-quadratic spline on `[-B, B]` with identity tails.
//!
//! Per transformed dimension the conditioner emits `3K - 1` unnormalized
//! values laid out as `[K widths, K heights, K - 1 interior derivatives]`.
//! Boundary derivatives are fixed to 1 so the spline joins the identity tails
//! with a continuous first derivative.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplineConfig {
    pub bins: usize,
    pub tail_bound: f64,
    pub min_bin_width: f64,
    pub min_bin_height: f64,
    pub min_derivative: f64,
}

impl Default for SplineConfig {
    fn default() -> Self {
        Self {
            bins: 8,
            tail_bound: 5.0,
            min_bin_width: 1e-3,
            min_bin_height: 1e-3,
            min_derivative: 1e-3,
        }
    }
}

impl SplineConfig {
    pub fn params_per_dim(&self) -> usize {
        3 * self.bins - 1
    }

    /// Raw derivative value that maps to a derivative of exactly 1.
    pub fn identity_derivative_raw(&self) -> f64 {
        (1.0 - self.min_derivative).exp_m1().ln()
    }

    /// Raw parameters of the identity spline.
    pub fn identity_raw(&self) -> Vec<f64> {
        let k = self.bins;
        let mut raw = vec![0.0; self.params_per_dim()];
        raw[2 * k..].iter_mut().for_each(|v| *v = self.identity_derivative_raw());
        raw
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Softmax probabilities of `raw`, written into `p`.
fn softmax_into(raw: &[f64], p: &mut [f64]) {
    let m = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (pi, &r) in p.iter_mut().zip(raw) {
        *pi = (r - m).exp();
        z += *pi;
    }
    p.iter_mut().for_each(|v| *v /= z);
}

/// Normalized knot geometry for one dimension.
struct Knots {
    xs: [f64; 65],
    ys: [f64; 65],
    ds: [f64; 65],
    pw: [f64; 64],
    ph: [f64; 64],
}

const MAX_BINS: usize = 64;

impl Knots {
    fn new(raw: &[f64], cfg: &SplineConfig) -> Self {
        let k = cfg.bins;
        assert!(k >= 1 && k <= MAX_BINS, "bin count must be in 1..=64");
        let b = cfg.tail_bound;
        let mut kn = Knots {
            xs: [0.0; 65],
            ys: [0.0; 65],
            ds: [1.0; 65],
            pw: [0.0; 64],
            ph: [0.0; 64],
        };
        softmax_into(&raw[..k], &mut kn.pw[..k]);
        softmax_into(&raw[k..2 * k], &mut kn.ph[..k]);
        let sw = 1.0 - cfg.min_bin_width * k as f64;
        let sh = 1.0 - cfg.min_bin_height * k as f64;
        kn.xs[0] = -b;
        kn.ys[0] = -b;
        for i in 0..k {
            kn.xs[i + 1] = kn.xs[i] + 2.0 * b * (cfg.min_bin_width + sw * kn.pw[i]);
            kn.ys[i + 1] = kn.ys[i] + 2.0 * b * (cfg.min_bin_height + sh * kn.ph[i]);
        }
        kn.xs[k] = b;
        kn.ys[k] = b;
        for i in 1..k {
            kn.ds[i] = cfg.min_derivative + softplus(raw[2 * k + i - 1]);
        }
        kn
    }
}

/// Bin index `i` with `knots[i] <= v < knots[i + 1]`.
fn locate(knots: &[f64], v: f64) -> usize {
    let k = knots.len() - 1;
    knots[1..k].partition_point(|&kn| kn <= v)
}

struct Local {
    s: f64,
    hk: f64,
    dk: f64,
    dk1: f64,
    t: f64,
    num: f64,
    den: f64,
    a: f64,
}

impl Local {
    fn new(xi: f64, wk: f64, hk: f64, dk: f64, dk1: f64) -> Self {
        let s = hk / wk;
        let t = xi * (1.0 - xi);
        let num = s * xi * xi + dk * t;
        let den = s + (dk1 + dk - 2.0 * s) * t;
        let a = dk1 * xi * xi + 2.0 * s * t + dk * (1.0 - xi) * (1.0 - xi);
        Local {
            s,
            hk,
            dk,
            dk1,
            t,
            num,
            den,
            a,
        }
    }

    fn logdet(&self) -> f64 {
        2.0 * self.s.ln() + self.a.ln() - 2.0 * self.den.ln()
    }
}

/// Apply the spline to `u`, returning `(y, log |dy/du|)`.
pub fn forward(u: f64, raw: &[f64], cfg: &SplineConfig) -> (f64, f64) {
    let b = cfg.tail_bound;
    if u <= -b || u >= b {
        return (u, 0.0);
    }
    let kn = Knots::new(raw, cfg);
    let k = cfg.bins;
    let i = locate(&kn.xs[..=k], u);
    let wk = kn.xs[i + 1] - kn.xs[i];
    let hk = kn.ys[i + 1] - kn.ys[i];
    let xi = ((u - kn.xs[i]) / wk).clamp(0.0, 1.0);
    let l = Local::new(xi, wk, hk, kn.ds[i], kn.ds[i + 1]);
    (kn.ys[i] + hk * l.num / l.den, l.logdet())
}

/// Invert the spline at `y`, returning `(u, log |du/dy|)`.
pub fn inverse(y: f64, raw: &[f64], cfg: &SplineConfig) -> (f64, f64) {
    let b = cfg.tail_bound;
    if y <= -b || y >= b {
        return (y, 0.0);
    }
    let kn = Knots::new(raw, cfg);
    let k = cfg.bins;
    let i = locate(&kn.ys[..=k], y);
    let wk = kn.xs[i + 1] - kn.xs[i];
    let hk = kn.ys[i + 1] - kn.ys[i];
    let (dk, dk1) = (kn.ds[i], kn.ds[i + 1]);
    let s = hk / wk;
    let dy = y - kn.ys[i];
    let a = hk * (s - dk) + dy * (dk1 + dk - 2.0 * s);
    let bq = hk * dk - dy * (dk1 + dk - 2.0 * s);
    let c = -s * dy;
    let disc = (bq * bq - 4.0 * a * c).max(0.0);
    let mut xi = (2.0 * c / (-bq - disc.sqrt())).clamp(0.0, 1.0);
    // One Newton step on the forward map polishes the closed-form root.
    let l = Local::new(xi, wk, hk, dk, dk1);
    let slope = hk * l.s * l.a / (l.den * l.den);
    if slope > 0.0 {
        xi = (xi - (hk * l.num / l.den - dy) / slope).clamp(0.0, 1.0);
    }
    let u = xi * wk + kn.xs[i];
    let l = Local::new(xi, wk, hk, dk, dk1);
    (u, -l.logdet())
}

/// Backward pass of [`forward`]: accumulates `d(gy*y + gl*logdet)/d raw`
/// into `graw` and returns the derivative with respect to `u`.
pub fn forward_backward(u: f64, raw: &[f64], cfg: &SplineConfig, gy: f64, gl: f64, graw: &mut [f64]) -> f64 {
    let b = cfg.tail_bound;
    if u <= -b || u >= b {
        return gy;
    }
    let kn = Knots::new(raw, cfg);
    let k = cfg.bins;
    let i = locate(&kn.xs[..=k], u);
    let wk = kn.xs[i + 1] - kn.xs[i];
    let hk = kn.ys[i + 1] - kn.ys[i];
    let xi = ((u - kn.xs[i]) / wk).clamp(0.0, 1.0);
    let l = Local::new(xi, wk, hk, kn.ds[i], kn.ds[i + 1]);
    let Local {
        s,
        dk,
        dk1,
        t,
        num,
        den,
        a,
        ..
    } = l;
    let den2 = den * den;
    let lam = dk1 + dk - 2.0 * s;

    // Partials of f = y - y_k and L = logdet with respect to local quantities.
    let n_xi = 2.0 * s * xi + dk * (1.0 - 2.0 * xi);
    let d_xi = lam * (1.0 - 2.0 * xi);
    let f_xi = l.hk * (n_xi * den - num * d_xi) / den2;
    let f_s = l.hk * (xi * xi * den - num * (1.0 - 2.0 * t)) / den2;
    let f_h = num / den;
    let f_dk = l.hk * t * (den - num) / den2;
    let f_dk1 = -l.hk * num * t / den2;

    let a_xi = 2.0 * dk1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * dk * (1.0 - xi);
    let l_xi = a_xi / a - 2.0 * d_xi / den;
    let l_s = 2.0 / s + 2.0 * t / a - 2.0 * (1.0 - 2.0 * t) / den;
    let l_dk = (1.0 - xi) * (1.0 - xi) / a - 2.0 * t / den;
    let l_dk1 = xi * xi / a - 2.0 * t / den;

    let g_xi = gy * f_xi + gl * l_xi;
    let g_s = gy * f_s + gl * l_s;
    let g_dk = gy * f_dk + gl * l_dk;
    let g_dk1 = gy * f_dk1 + gl * l_dk1;

    let gu = g_xi / wk;
    let g_xk = -g_xi / wk;
    let g_wk = -g_xi * xi / wk - g_s * s / wk;
    let g_hk = gy * f_h + g_s / wk;
    let g_yk = gy;

    // Knot positions are cumulative sums of bin sizes.
    let mut gw = [0.0; MAX_BINS];
    let mut gh = [0.0; MAX_BINS];
    for j in 0..i {
        gw[j] = g_xk;
        gh[j] = g_yk;
    }
    gw[i] = g_wk;
    gh[i] = g_hk;

    let cw = 2.0 * b * (1.0 - cfg.min_bin_width * k as f64);
    let ch = 2.0 * b * (1.0 - cfg.min_bin_height * k as f64);
    let dot_w: f64 = (0..k).map(|j| gw[j] * kn.pw[j]).sum();
    let dot_h: f64 = (0..k).map(|j| gh[j] * kn.ph[j]).sum();
    for j in 0..k {
        graw[j] += cw * kn.pw[j] * (gw[j] - dot_w);
        graw[k + j] += ch * kn.ph[j] * (gh[j] - dot_h);
    }
    if i >= 1 {
        graw[2 * k + i - 1] += g_dk * sigmoid(raw[2 * k + i - 1]);
    }
    if i + 1 <= k - 1 {
        graw[2 * k + i] += g_dk1 * sigmoid(raw[2 * k + i]);
    }
    gu
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_raw(rng: &mut ChaCha8Rng, cfg: &SplineConfig, scale: f64) -> Vec<f64> {
        (0..cfg.params_per_dim()).map(|_| scale * (rng.random::<f64>() * 2.0 - 1.0)).collect()
    }

    #[test]
    fn identity_init() {
        let cfg = SplineConfig::default();
        let raw = cfg.identity_raw();
        for &u in &[-4.9, -1.0, 0.0, 0.3, 2.5, 4.99] {
            let (y, ld) = forward(u, &raw, &cfg);
            assert!((y - u).abs() < 1e-12, "{u} -> {y}");
            assert!(ld.abs() < 1e-12);
            let (v, ld) = inverse(u, &raw, &cfg);
            assert!((v - u).abs() < 1e-12);
            assert!(ld.abs() < 1e-12);
        }
    }

    #[test]
    fn identity_tails() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = random_raw(&mut rng, &cfg, 3.0);
        assert_eq!(forward(6.0, &raw, &cfg), (6.0, 0.0));
        assert_eq!(forward(-7.5, &raw, &cfg), (-7.5, 0.0));
    }

    #[test]
    fn round_trip_and_logdet() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst = 0.0f64;
        for _ in 0..10_000 {
            let raw = random_raw(&mut rng, &cfg, 3.0);
            let u = rng.random::<f64>() * 12.0 - 6.0;
            let (y, ld) = forward(u, &raw, &cfg);
            let (v, ild) = inverse(y, &raw, &cfg);
            worst = worst.max((u - v).abs());
            assert!((ld + ild).abs() < 1e-8);
        }
        assert!(worst < 1e-8, "round-trip error {worst}");
    }

    #[test]
    fn strictly_monotone() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw = random_raw(&mut rng, &cfg, 4.0);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=2000 {
            let u = -6.0 + 12.0 * i as f64 / 2000.0;
            let (y, _) = forward(u, &raw, &cfg);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn logdet_matches_finite_difference() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..500 {
            let raw = random_raw(&mut rng, &cfg, 2.0);
            let u = rng.random::<f64>() * 9.8 - 4.9;
            let (_, ld) = forward(u, &raw, &cfg);
            let fd = (forward(u + h, &raw, &cfg).0 - forward(u - h, &raw, &cfg).0) / (2.0 * h);
            assert!((ld - fd.ln()).abs() < 1e-4, "u={u} ld={ld} fd={}", fd.ln());
        }
    }

    #[test]
    fn backward_matches_finite_difference() {
        let cfg = SplineConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let h = 1e-6;
        for _ in 0..200 {
            let raw = random_raw(&mut rng, &cfg, 2.0);
            let u = rng.random::<f64>() * 9.0 - 4.5;
            let (gy, gl) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
            let obj = |u: f64, raw: &[f64]| {
                let (y, l) = forward(u, raw, &cfg);
                gy * y + gl * l
            };
            let mut graw = vec![0.0; raw.len()];
            let gu = forward_backward(u, &raw, &cfg, gy, gl, &mut graw);
            let fd_u = (obj(u + h, &raw) - obj(u - h, &raw)) / (2.0 * h);
            assert!((gu - fd_u).abs() < 1e-6 * (1.0 + fd_u.abs()), "du {gu} vs {fd_u}");
            for j in 0..raw.len() {
                let mut rp = raw.clone();
                rp[j] += h;
                let mut rm = raw.clone();
                rm[j] -= h;
                let fd = (obj(u, &rp) - obj(u, &rm)) / (2.0 * h);
                assert!((graw[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "raw[{j}] {} vs {fd}", graw[j]);
            }
        }
    }
}
