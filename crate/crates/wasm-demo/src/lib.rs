//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Build with `wasm-pack build crates/wasm-demo --target web --out-dir www/pkg`
//! (or `wasm-bindgen --target web` on the cdylib)
//! and serve `crates/wasm-demo/www`.

use mfsbi_core::flow::spline::{forward, SplineConfig};
use mfsbi_core::reference::ou_euler_loglik;
use mfsbi_core::simulators::{row_rng, OuConfig, OuParams, OuVariant};
use rand::Rng;
use wasm_bindgen::prelude::*;

/// Full Euler-Maruyama trace, 101 points at Δt = 0.1.
#[wasm_bindgen]
pub fn ou_trace(mu: f64, sigma: f64, gamma: f64, offset: f64, seed: u64) -> Vec<f64> {
    let p = OuParams { mu, sigma: sigma.max(0.0), gamma, offset };
    OuConfig::default().trace(&p, &mut row_rng(seed, 0))
}

/// The ten observed points of a trace.
#[wasm_bindgen]
pub fn ou_observed(trace: &[f64]) -> Vec<f64> {
    let c = OuConfig::default();
    if trace.len() < c.points {
        return Vec::new();
    }
    c.subsample(trace)
}

/// Prior box of the OU2 task as `[μ_lo, μ_hi, σ_lo, σ_hi]`.
#[wasm_bindgen]
pub fn ou2_bounds() -> Vec<f64> {
    let (lo, hi) = OuVariant::Ou2.prior().support_box().expect("bounded prior");
    vec![lo[0], hi[0], lo[1], hi[1]]
}

/// Posterior of (μ, σ) given ten observed points on a `side × side` grid
/// of cell centres over the prior box, row-major with σ along rows.
/// Values sum to one; an empty vector means the input was unusable.
#[wasm_bindgen]
pub fn ou2_posterior_grid(x: &[f64], side: usize) -> Vec<f64> {
    let c = OuConfig::default();
    if x.len() != c.observed || side == 0 || x.iter().any(|v| !v.is_finite()) {
        return Vec::new();
    }
    let b = ou2_bounds();
    let mut ll = Vec::with_capacity(side * side);
    for i in 0..side {
        let sigma = b[2] + (i as f64 + 0.5) / side as f64 * (b[3] - b[2]);
        for j in 0..side {
            let mu = b[0] + (j as f64 + 0.5) / side as f64 * (b[1] - b[0]);
            let p = OuVariant::Ou2.params(&[mu, sigma]);
            ll.push(ou_euler_loglik(&p, x, &c).unwrap_or(f64::NEG_INFINITY));
        }
    }
    let m = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Vec::new();
    }
    let w: Vec<f64> = ll.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// A random monotone spline: `points` triples `(u, y, dy/du)` over
/// `[-6, 6]`, with raw bin parameters drawn uniformly from `±scale`.
#[wasm_bindgen]
pub fn spline_curve(seed: u64, scale: f64, points: usize) -> Vec<f64> {
    let cfg = SplineConfig::default();
    let mut rng = row_rng(seed, 0);
    let mut raw = cfg.identity_raw();
    if scale > 0.0 {
        for v in raw.iter_mut() {
            *v += rng.random_range(-scale..scale);
        }
    }
    let n = points.max(2);
    let mut out = Vec::with_capacity(3 * n);
    for k in 0..n {
        let u = -6.0 + 12.0 * k as f64 / (n - 1) as f64;
        let (y, logdet) = forward(u, &raw, &cfg);
        out.extend([u, y, logdet.exp()]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_starts_offset_and_subsamples() {
        let t = ou_trace(1.0, 0.3, 0.5, 3.0, 1);
        assert_eq!(t.len(), 101);
        let obs = ou_observed(&t);
        assert_eq!(obs, vec![t[0], t[11], t[22], t[33], t[44], t[55], t[66], t[77], t[88], t[99]]);
        assert!(ou_observed(&t[..50]).is_empty());
    }

    #[test]
    fn posterior_grid_peaks_near_the_truth() {
        let t = ou_trace(2.0, 0.3, 0.5, 3.0, 4);
        let side = 40;
        let g = ou2_posterior_grid(&ou_observed(&t), side);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let b = ou2_bounds();
        let mean_mu: f64 = g
            .iter()
            .enumerate()
            .map(|(k, w)| w * (b[0] + ((k % side) as f64 + 0.5) / side as f64 * (b[1] - b[0])))
            .sum();
        assert!((mean_mu - 2.0).abs() < 0.5, "{mean_mu}");
        assert!(ou2_posterior_grid(&[1.0; 3], side).is_empty());
    }

    #[test]
    fn spline_curve_is_monotone_with_identity_tails() {
        let c = spline_curve(3, 2.0, 200);
        let ys: Vec<f64> = c.chunks(3).map(|p| p[1]).collect();
        assert!(ys.windows(2).all(|w| w[1] > w[0]));
        assert!(c.chunks(3).all(|p| p[2] > 0.0));
        assert_eq!(ys[0], -6.0);
        assert_eq!(*ys.last().unwrap(), 6.0);
        let id = spline_curve(3, 0.0, 5);
        assert!(id.chunks(3).all(|p| (p[1] - p[0]).abs() < 1e-12 && (p[2] - 1.0).abs() < 1e-12));
    }
}
