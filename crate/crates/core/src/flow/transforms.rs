//! Fixed (non-trainable) bijections applied around the spline stack.

use super::FlowError;
use serde::{Deserialize, Serialize};

/// Per-dimension logit map from `(lower, upper)` onto the real line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl LogitBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, FlowError> {
        if lower.len() != upper.len() {
            return Err(FlowError::Invalid(format!(
                "box has {} lower and {} upper bounds",
                lower.len(),
                upper.len()
            )));
        }
        for (i, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !(l < u) || !l.is_finite() || !u.is_finite() {
                return Err(FlowError::Invalid(format!("box dimension {i}: need finite lower < upper, got ({l}, {u})")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Map one row into logit space; returns the log-Jacobian of the map.
    pub fn forward(&self, theta: &[f64], out: &mut [f64]) -> Result<f64, FlowError> {
        let mut logdet = 0.0;
        for (i, &t) in theta.iter().enumerate() {
            let (l, u) = (self.lower[i], self.upper[i]);
            if !(t > l && t < u) {
                return Err(FlowError::OutsideBox { dim: i, value: t, lower: l, upper: u });
            }
            let (a, b) = (t - l, u - t);
            out[i] = a.ln() - b.ln();
            logdet += (u - l).ln() - a.ln() - b.ln();
        }
        Ok(logdet)
    }

    /// Map one row back into the box, kept strictly inside the bounds.
    pub fn inverse(&self, z: &[f64], out: &mut [f64]) {
        for (i, &v) in z.iter().enumerate() {
            let (l, u) = (self.lower[i], self.upper[i]);
            let s = if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            };
            out[i] = (l + (u - l) * s).clamp(l.next_up(), u.next_down());
        }
    }
}

/// Per-dimension affine z-scoring with a floor on the scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub eps: f64,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
            eps: STD_FLOOR,
        }
    }

    /// Fit column statistics of the given rows.
    pub fn fit<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for r in rows {
            n += 1;
            for j in 0..dim {
                let d = r[j] - mean[j];
                mean[j] += d / n as f64;
                m2[j] += d * (r[j] - mean[j]);
            }
        }
        let std = m2
            .iter()
            .map(|&s| if n > 1 { (s / (n - 1) as f64).sqrt().max(STD_FLOOR) } else { 1.0 })
            .collect();
        Self { mean, std, eps: STD_FLOOR }
    }

    /// One shared mean/std over all entries, for images.
    pub fn fit_scalar<'a>(dim: usize, rows: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let (mut mean, mut m2) = (0.0, 0.0);
        for r in rows {
            for &v in r {
                n += 1;
                let d = v - mean;
                mean += d / n as f64;
                m2 += d * (v - mean);
            }
        }
        let std = if n > 1 { (m2 / (n - 1) as f64).sqrt().max(STD_FLOOR) } else { 1.0 };
        Self {
            mean: vec![mean; dim],
            std: vec![std; dim],
            eps: STD_FLOOR,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = (row[j] - self.mean[j]) / self.std[j].max(self.eps);
        }
    }

    pub fn invert(&self, row: &[f64], out: &mut [f64]) {
        for j in 0..row.len() {
            out[j] = row[j] * self.std[j].max(self.eps) + self.mean[j];
        }
    }

    /// Log-Jacobian of [`Standardizer::apply`].
    pub fn logdet(&self) -> f64 {
        -self.std.iter().map(|s| s.max(self.eps).ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_round_trip() {
        let b = LogitBox::new(vec![0.1, -10.0], vec![3.0, 10.0]).unwrap();
        let theta = [1.7, -9.999];
        let mut z = [0.0; 2];
        let mut back = [0.0; 2];
        b.forward(&theta, &mut z).unwrap();
        b.inverse(&z, &mut back);
        for i in 0..2 {
            assert!((theta[i] - back[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn boundary_names_dimension() {
        let b = LogitBox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        let mut z = [0.0; 2];
        match b.forward(&[0.5, 1.0], &mut z) {
            Err(FlowError::OutsideBox { dim, .. }) => assert_eq!(dim, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extreme_inverse_stays_inside() {
        let b = LogitBox::new(vec![0.0], vec![1.0]).unwrap();
        let mut out = [0.0];
        b.inverse(&[800.0], &mut out);
        assert!(out[0] < 1.0);
        b.inverse(&[-800.0], &mut out);
        assert!(out[0] > 0.0);
    }

    #[test]
    fn standardizer_fit() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert!((s.std[0] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.std[1], STD_FLOOR);
    }
}
