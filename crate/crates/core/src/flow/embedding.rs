//! Networks mapping (standardized) observations to conditioning features.

use crate::nn::{Activation, Linear, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingSpec {
    /// Summary statistics are consumed directly.
    Identity,
    Mlp { hidden: Vec<usize>, out: usize },
    /// Single-channel `height x width` image, stride-2 3x3 convolutions with
    /// the given channel counts, then a linear map to `out` features.
    Cnn {
        height: usize,
        width: usize,
        channels: Vec<usize>,
        out: usize,
    },
}

impl EmbeddingSpec {
    /// Convolution stack used for blob images.
    pub fn blob_cnn(side: usize) -> Self {
        EmbeddingSpec::Cnn {
            height: side,
            width: side,
            channels: vec![8, 16, 32],
            out: 32,
        }
    }

    pub fn out_dim(&self, x_dim: usize) -> usize {
        match self {
            EmbeddingSpec::Identity => x_dim,
            EmbeddingSpec::Mlp { out, .. } | EmbeddingSpec::Cnn { out, .. } => *out,
        }
    }
}

#[derive(Clone)]
pub(crate) struct Conv {
    w: usize,
    b: usize,
}

#[derive(Clone)]
pub(crate) enum Embedding {
    Identity,
    Mlp(Mlp),
    Cnn {
        height: usize,
        width: usize,
        convs: Vec<Conv>,
        head: Linear,
    },
}

fn conv_out(n: usize) -> usize {
    // kernel 3, stride 2, padding 1
    (n + 2 - 3) / 2 + 1
}

impl Embedding {
    pub(crate) fn build<R: Rng + ?Sized>(
        spec: &EmbeddingSpec,
        x_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self, TensorError> {
        Ok(match spec {
            EmbeddingSpec::Identity => Embedding::Identity,
            EmbeddingSpec::Mlp { hidden, out } => {
                let mut sizes = vec![x_dim];
                sizes.extend(hidden);
                sizes.push(*out);
                Embedding::Mlp(Mlp::new(store, "embedding", &sizes, Activation::Relu, rng))
            }
            EmbeddingSpec::Cnn {
                height,
                width,
                channels,
                out,
            } => {
                if height * width != x_dim {
                    return Err(TensorError::InvalidArgument {
                        op: "embedding",
                        msg: format!("image {height}x{width} does not match observation length {x_dim}"),
                    });
                }
                let mut convs = Vec::new();
                let (mut h, mut w, mut cin) = (*height, *width, 1usize);
                for (i, &cout) in channels.iter().enumerate() {
                    let fan_in = (cin * 9) as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    let wt: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-bound..bound)).collect();
                    let bs: Vec<f64> = (0..cout).map(|_| rng.random_range(-bound..bound)).collect();
                    convs.push(Conv {
                        w: store.add(format!("embedding.conv{i}.weight"), Tensor::new(vec![cout, cin, 3, 3], wt)?),
                        b: store.add(format!("embedding.conv{i}.bias"), Tensor::vector(bs)),
                    });
                    h = conv_out(h);
                    w = conv_out(w);
                    cin = cout;
                }
                let head = Linear::new(store, "embedding.head", cin * h * w, *out, rng);
                Embedding::Cnn {
                    height: *height,
                    width: *width,
                    convs,
                    head,
                }
            }
        })
    }

    pub(crate) fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var, TensorError> {
        match self {
            Embedding::Identity => Ok(x),
            Embedding::Mlp(m) => m.forward(tape, vars, x),
            Embedding::Cnn {
                height,
                width,
                convs,
                head,
            } => {
                let n = tape.value(x).rows();
                let mut h = tape.reshape(x, &[n, 1, *height, *width])?;
                for c in convs {
                    h = tape.conv2d(h, vars[c.w], vars[c.b], 2, 1)?;
                    h = tape.relu(h)?;
                }
                let feat = tape.value(h).cols();
                let flat = tape.reshape(h, &[n, feat])?;
                head.forward(tape, vars, flat)
            }
        }
    }
}

/// Bilinear resize of a row-major single-channel image (align-corners=false).
pub fn bilinear_resize(img: &[f64], h: usize, w: usize, nh: usize, nw: usize) -> Vec<f64> {
    let mut out = vec![0.0; nh * nw];
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    for oy in 0..nh {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..nw {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = img[y0 * w + x0] * (1.0 - tx) + img[y0 * w + x1] * tx;
            let bot = img[y1 * w + x0] * (1.0 - tx) + img[y1 * w + x1] * tx;
            out[oy * nw + ox] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Average-pool a row-major image by an integer factor.
pub fn average_pool(img: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (nh, nw) = (h / factor, w / factor);
    let mut out = vec![0.0; nh * nw];
    let norm = (factor * factor) as f64;
    for y in 0..nh * factor {
        for x in 0..nw * factor {
            out[(y / factor) * nw + x / factor] += img[y * w + x] / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_resizes_to_constant() {
        let img = vec![3.0; 16];
        assert!(bilinear_resize(&img, 4, 4, 32, 32).iter().all(|&v| (v - 3.0).abs() < 1e-12));
        assert_eq!(average_pool(&img, 4, 4, 2), vec![3.0; 4]);
    }

    #[test]
    fn cnn_output_dim() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let spec = EmbeddingSpec::blob_cnn(16);
        let emb = Embedding::build(&spec, 256, &mut store, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = store.register(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 256]));
        let y = emb.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 32]);
    }
}
