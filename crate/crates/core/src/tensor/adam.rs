use super::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers, one per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
///
/// `grads[i] == None` is treated as an all-zero gradient. Nothing is modified
/// when any gradient is non-finite.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    names: &[String],
) -> Result<(), TensorError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TensorError::InvalidArgument {
            op: "adam_step",
            msg: format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
                return Err(TensorError::NonFiniteGradient(name));
            }
        }
    }
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mj = c.beta1 * *mj + (1.0 - c.beta1) * gj;
            *vj = c.beta2 * *vj + (1.0 - c.beta2) * gj * gj;
            let mhat = *mj / bc1;
            let vhat = *vj / bc2;
            *pj -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::scalar(1.0)];
        let cfg = AdamConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut st = AdamState::new(cfg, &p);
        adam_step(&mut st, &mut p, &[Some(Tensor::scalar(1.0))], &["p".into()]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_is_identity() {
        let mut p = vec![Tensor::vector(vec![0.3, -2.0])];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            adam_step(&mut st, &mut p, &[Some(Tensor::zeros(&[2]))], &["w".into()]).unwrap();
        }
        assert_eq!(p[0].data(), &[0.3, -2.0]);
        assert!(st.m[0].iter().chain(&st.v[0]).all(|&x| x == 0.0));
        assert_eq!(st.t, 5);
    }

    #[test]
    fn nan_grad_names_param() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut st = AdamState::new(AdamConfig::default(), &p);
        let err = adam_step(
            &mut st,
            &mut p,
            &[Some(Tensor::scalar(0.0)), Some(Tensor::scalar(f64::NAN))],
            &["a".into(), "layer1.bias".into()],
        )
        .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("layer1.bias".into()));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn default_lr() {
        assert_eq!(AdamConfig::default().lr, 5e-4);
    }
}
