//! Named parameter storage and small feedforward networks on the tape.

use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Ordered, named collection of parameter tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.values[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Put every parameter on the tape, as gradient leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| {
                if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect()
    }

    pub fn grads(&self, tape: &Tape, vars: &[Var]) -> Vec<Option<Tensor>> {
        vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Result<Var, TensorError> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

/// Affine layer `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialization for weights and bias.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let w = Tensor::matrix(in_dim, out_dim, draw(in_dim * out_dim)).expect("sized");
        let b = Tensor::vector(draw(out_dim));
        Self {
            w: store.add(format!("{name}.weight"), w),
            b: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        let h = tape.matmul(x, vars[self.w])?;
        tape.add(h, vars[self.b])
    }
}

/// Feedforward network with a shared hidden activation and linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, vars, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mlp_shapes_and_names() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "net", &[3, 5, 2], Activation::Tanh, &mut rng);
        assert_eq!(store.names(), &["net.0.weight", "net.0.bias", "net.1.weight", "net.1.bias"]);
        assert_eq!(store.num_scalars(), 3 * 5 + 5 + 5 * 2 + 2);
        let mut tape = Tape::new();
        let vars = store.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[4, 3]));
        let y = mlp.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 2]);
    }
}
