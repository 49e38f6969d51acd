//! Conditional neural spline flow `q(θ | x)`.
//!
//! Density evaluation runs θ → z: logit box, θ z-scoring, then a stack of
//! coupling layers whose conditioners see the untouched half of the vector
//! and the embedded observation. Sampling inverts the stack analytically.

mod checkpoint;
mod embedding;
pub mod spline;
mod transforms;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, FORMAT_VERSION};
pub use embedding::{average_pool, bilinear_resize, EmbeddingSpec};
pub use spline::SplineConfig;
pub use transforms::{LogitBox, Standardizer};

use crate::nn::{Activation, Mlp, ParamStore};
use crate::tensor::{Tape, Tensor, TensorError, Var};
use embedding::Embedding;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
const CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("θ dimension {dim} = {value} is not strictly inside ({lower}, {upper})")]
    OutsideBox {
        dim: usize,
        value: f64,
        lower: f64,
        upper: f64,
    },
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("architecture mismatch: {}", .0.join("; "))]
    ArchitectureMismatch(Vec<String>),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Everything that determines parameter shapes and layer wiring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArchitecture {
    pub theta_dim: usize,
    pub x_dim: usize,
    pub embedding: EmbeddingSpec,
    pub transforms: usize,
    pub hidden_units: usize,
    pub hidden_layers: usize,
    pub spline: SplineConfig,
    pub permutation_seed: u64,
}

impl FlowArchitecture {
    /// Default stack: 5 spline couplings, 2x50 tanh conditioners, 8 bins.
    pub fn new(theta_dim: usize, x_dim: usize) -> Self {
        Self {
            theta_dim,
            x_dim,
            embedding: EmbeddingSpec::Identity,
            transforms: 5,
            hidden_units: 50,
            hidden_layers: 2,
            spline: SplineConfig::default(),
            permutation_seed: 0,
        }
    }

    pub fn with_embedding(mut self, embedding: EmbeddingSpec) -> Self {
        self.embedding = embedding;
        self
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("architecture serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Names of the fields that differ from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let mut d = Vec::new();
        let mut check = |name: &str, same: bool, a: String, b: String| {
            if !same {
                d.push(format!("{name}: {a} vs {b}"));
            }
        };
        check("theta_dim", self.theta_dim == other.theta_dim, self.theta_dim.to_string(), other.theta_dim.to_string());
        check("x_dim", self.x_dim == other.x_dim, self.x_dim.to_string(), other.x_dim.to_string());
        check("embedding", self.embedding == other.embedding, format!("{:?}", self.embedding), format!("{:?}", other.embedding));
        check("transforms", self.transforms == other.transforms, self.transforms.to_string(), other.transforms.to_string());
        check("hidden_units", self.hidden_units == other.hidden_units, self.hidden_units.to_string(), other.hidden_units.to_string());
        check("hidden_layers", self.hidden_layers == other.hidden_layers, self.hidden_layers.to_string(), other.hidden_layers.to_string());
        check("spline", self.spline == other.spline, format!("{:?}", self.spline), format!("{:?}", other.spline));
        check(
            "permutation_seed",
            self.permutation_seed == other.permutation_seed,
            self.permutation_seed.to_string(),
            other.permutation_seed.to_string(),
        );
        d
    }
}

#[derive(Debug, Clone)]
struct Coupling {
    cond: Vec<usize>,
    trans: Vec<usize>,
    /// Column gather turning `[cond, trans]` back into the original order.
    restore: Vec<usize>,
    net: Mlp,
}

/// Observation and parameters mapped into the flow's working coordinates.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub z: Tensor,
    pub x: Tensor,
    /// Log-Jacobian of the fixed θ transforms, per row.
    pub logdet: Vec<f64>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Prepared {
        Prepared {
            z: self.z.select_rows(rows),
            x: self.x.select_rows(rows),
            logdet: rows.iter().map(|&i| self.logdet[i]).collect(),
        }
    }
}

#[derive(Clone)]
pub struct ConditionalFlow {
    arch: FlowArchitecture,
    params: ParamStore,
    embedding: Embedding,
    layers: Vec<Coupling>,
    theta_box: LogitBox,
    x_standardizer: Standardizer,
    theta_standardizer: Standardizer,
    init_seed: u64,
}

impl std::fmt::Debug for ConditionalFlow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConditionalFlow")
            .field("arch", &self.arch)
            .field("parameters", &self.params.num_scalars())
            .finish()
    }
}

impl ConditionalFlow {
    /// Fresh flow whose spline layers are all the identity.
    pub fn new(arch: FlowArchitecture, theta_box: LogitBox, seed: u64) -> Result<Self, FlowError> {
        let d = arch.theta_dim;
        if d == 0 || arch.x_dim == 0 {
            return Err(FlowError::Invalid("θ and x dimensions must be positive".into()));
        }
        if theta_box.dim() != d {
            return Err(FlowError::Invalid(format!("box has {} dims, θ has {d}", theta_box.dim())));
        }
        if arch.transforms == 0 || arch.spline.bins == 0 {
            return Err(FlowError::Invalid("need at least one transform and one bin".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embedding = Embedding::build(&arch.embedding, arch.x_dim, &mut params, &mut rng)?;
        let e = arch.embedding.out_dim(arch.x_dim);
        let p = arch.spline.params_per_dim();
        let identity = arch.spline.identity_raw();

        let mut perm_rng = ChaCha8Rng::seed_from_u64(arch.permutation_seed);
        let mut order: Vec<usize> = (0..d).collect();
        let nc = d / 2;
        let mut layers = Vec::with_capacity(arch.transforms);
        for l in 0..arch.transforms {
            if l > 0 && d > 2 {
                order.shuffle(&mut perm_rng);
            }
            let (cond, trans) = if l % 2 == 0 {
                (order[..nc].to_vec(), order[nc..].to_vec())
            } else {
                (order[d - nc..].to_vec(), order[..d - nc].to_vec())
            };
            let joined: Vec<usize> = cond.iter().chain(&trans).copied().collect();
            let restore = (0..d).map(|k| joined.iter().position(|&j| j == k).unwrap()).collect();
            let mut sizes = vec![cond.len() + e];
            sizes.extend(std::iter::repeat_n(arch.hidden_units, arch.hidden_layers));
            sizes.push(trans.len() * p);
            let net = Mlp::new(&mut params, &format!("transform{l}.conditioner"), &sizes, Activation::Tanh, &mut rng);
            let last = net.layers.last().unwrap();
            params.values_mut()[last.w].data_mut().iter_mut().for_each(|v| *v = 0.0);
            let bias = params.values_mut()[last.b].data_mut();
            for (i, v) in bias.iter_mut().enumerate() {
                *v = identity[i % p];
            }
            layers.push(Coupling {
                cond,
                trans,
                restore,
                net,
            });
        }
        Ok(Self {
            x_standardizer: Standardizer::identity(arch.x_dim),
            theta_standardizer: Standardizer::identity(d),
            arch,
            params,
            embedding,
            layers,
            theta_box,
            init_seed: seed,
        })
    }

    pub fn architecture(&self) -> &FlowArchitecture {
        &self.arch
    }

    pub fn theta_dim(&self) -> usize {
        self.arch.theta_dim
    }

    pub fn x_dim(&self) -> usize {
        self.arch.x_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn theta_box(&self) -> &LogitBox {
        &self.theta_box
    }

    pub fn x_standardizer(&self) -> &Standardizer {
        &self.x_standardizer
    }

    pub fn theta_standardizer(&self) -> &Standardizer {
        &self.theta_standardizer
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn set_standardizers(&mut self, x: Standardizer, theta: Standardizer) -> Result<(), FlowError> {
        if x.dim() != self.arch.x_dim || theta.dim() != self.arch.theta_dim {
            return Err(FlowError::Invalid("standardizer dimension mismatch".into()));
        }
        self.x_standardizer = x;
        self.theta_standardizer = theta;
        Ok(())
    }

    /// Replace all parameters; names and shapes must match exactly.
    pub fn set_params(&mut self, params: ParamStore) -> Result<(), FlowError> {
        let mut diffs = Vec::new();
        if params.names() != self.params.names() {
            diffs.push("parameter names".to_string());
        }
        for (i, (a, b)) in params.values().iter().zip(self.params.values()).enumerate() {
            if a.shape() != b.shape() {
                diffs.push(format!("parameter {i} shape {:?} vs {:?}", a.shape(), b.shape()));
            }
        }
        if !diffs.is_empty() {
            return Err(FlowError::ArchitectureMismatch(diffs));
        }
        self.params = params;
        Ok(())
    }

    /// Copy every parameter and the preprocessing state of `source`.
    pub fn clone_weights_from(&mut self, source: &ConditionalFlow) -> Result<(), FlowError> {
        let mut diffs = self.arch.diff(&source.arch);
        if self.theta_box != source.theta_box {
            diffs.push("theta_box".into());
        }
        if !diffs.is_empty() {
            return Err(FlowError::ArchitectureMismatch(diffs));
        }
        self.params = source.params.clone();
        self.x_standardizer = source.x_standardizer.clone();
        self.theta_standardizer = source.theta_standardizer.clone();
        Ok(())
    }

    /// Logit-transform and z-score θ rows; standardize x rows.
    ///
    /// A single x row is broadcast over all θ rows.
    pub fn prepare(&self, theta: &Tensor, x: &Tensor) -> Result<Prepared, FlowError> {
        let d = self.arch.theta_dim;
        let n = theta.rows();
        if theta.cols() != d {
            return Err(FlowError::Invalid(format!("θ has {} columns, expected {d}", theta.cols())));
        }
        if x.cols() != self.arch.x_dim {
            return Err(FlowError::Invalid(format!("x has {} columns, expected {}", x.cols(), self.arch.x_dim)));
        }
        if x.rows() != n && x.rows() != 1 {
            return Err(FlowError::Invalid(format!("{} θ rows but {} x rows", n, x.rows())));
        }
        if !theta.all_finite() {
            return Err(FlowError::NonFiniteInput("θ"));
        }
        if !x.all_finite() {
            return Err(FlowError::NonFiniteInput("x"));
        }
        let mut z = vec![0.0; n * d];
        let mut logdet = vec![0.0; n];
        let mut tmp = vec![0.0; d];
        let std_ld = self.theta_standardizer.logdet();
        for i in 0..n {
            let ld = self.theta_box.forward(theta.row(i), &mut tmp)?;
            self.theta_standardizer.apply(&tmp, &mut z[i * d..(i + 1) * d]);
            logdet[i] = ld + std_ld;
        }
        let p = self.arch.x_dim;
        let mut xs = vec![0.0; n * p];
        for i in 0..n {
            let src = if x.rows() == 1 { x.row(0) } else { x.row(i) };
            self.x_standardizer.apply(src, &mut xs[i * p..(i + 1) * p]);
        }
        Ok(Prepared {
            z: Tensor::new(vec![n, d], z)?,
            x: Tensor::new(vec![n, p], xs)?,
            logdet,
        })
    }

    /// Log density of prepared rows, recorded on `tape` (shape `[n]`).
    pub fn log_prob_tape(&self, tape: &mut Tape, vars: &[Var], data: &Prepared) -> Result<Var, FlowError> {
        let z = tape.constant(data.z.clone());
        let x = tape.constant(data.x.clone());
        let e = self.embedding.forward(tape, vars, x)?;
        let mut cur = z;
        let mut total: Option<Var> = None;
        let cfg = self.arch.spline;
        for layer in &self.layers {
            let t = layer.trans.len();
            let yc = if layer.cond.is_empty() {
                None
            } else {
                Some(tape.select_cols(cur, &layer.cond)?)
            };
            let inp = match yc {
                Some(c) => tape.concat(&[c, e])?,
                None => e,
            };
            let raw = layer.net.forward(tape, vars, inp)?;
            let yt = tape.select_cols(cur, &layer.trans)?;
            let out = tape.rq_spline(yt, raw, cfg)?;
            let ynew = tape.slice_cols(out, 0, t)?;
            let ld = tape.slice_cols(out, t, 2 * t)?;
            let lds = tape.sum_last(ld)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, lds)?,
                None => lds,
            });
            let joined = match yc {
                Some(c) => tape.concat(&[c, ynew])?,
                None => ynew,
            };
            cur = tape.select_cols(joined, &layer.restore)?;
        }
        let sq = tape.pow(cur, 2.0)?;
        let ss = tape.sum_last(sq)?;
        let d = self.arch.theta_dim as f64;
        let base = tape.scale(ss, -0.5)?;
        let base = tape.add_scalar(base, -d * HALF_LN_2PI)?;
        let fixed = tape.constant(Tensor::vector(data.logdet.clone()));
        let lp = tape.add(base, total.expect("at least one transform"))?;
        Ok(tape.add(lp, fixed)?)
    }

    /// `log q(θ | x)` per row, in original θ coordinates.
    pub fn log_prob(&self, theta: &Tensor, x: &Tensor) -> Result<Vec<f64>, FlowError> {
        let prepared = self.prepare(theta, x)?;
        self.log_prob_prepared(&prepared)
    }

    pub fn log_prob_prepared(&self, data: &Prepared) -> Result<Vec<f64>, FlowError> {
        let n = data.len();
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = if start == 0 && end == n { data.clone() } else { data.select(&rows) };
            let mut tape = Tape::new();
            let vars = self.params.register(&mut tape, false);
            let lp = self.log_prob_tape(&mut tape, &vars, &chunk)?;
            out.extend_from_slice(tape.value(lp).data());
            start = end;
        }
        Ok(out)
    }

    fn embed_one(&self, x: &[f64]) -> Result<Vec<f64>, FlowError> {
        if x.len() != self.arch.x_dim {
            return Err(FlowError::Invalid(format!("x has length {}, expected {}", x.len(), self.arch.x_dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteInput("x"));
        }
        let mut xs = vec![0.0; x.len()];
        self.x_standardizer.apply(x, &mut xs);
        let mut tape = Tape::new();
        let vars = self.params.register(&mut tape, false);
        let xv = tape.constant(Tensor::new(vec![1, xs.len()], xs)?);
        let e = self.embedding.forward(&mut tape, &vars, xv)?;
        Ok(tape.value(e).data().to_vec())
    }

    /// Draw `n` samples given one observation.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, x: &[f64], rng: &mut R) -> Result<Tensor, FlowError> {
        Ok(self.sample_with_log_prob(n, x, rng)?.0)
    }

    /// Samples together with their log density, computed along the inverse
    /// pass (no separate density evaluation).
    pub fn sample_with_log_prob<R: Rng + ?Sized>(
        &self,
        n: usize,
        x: &[f64],
        rng: &mut R,
    ) -> Result<(Tensor, Vec<f64>), FlowError> {
        let d = self.arch.theta_dim;
        let mut z: Vec<f64> = (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let lp = self.inverse_in_place(&mut z, n, x)?;
        Ok((Tensor::new(vec![n, d], z)?, lp))
    }

    /// Map base-space rows to θ rows in place; returns `log q(θ)` per row.
    pub fn inverse_in_place(&self, z: &mut [f64], n: usize, x: &[f64]) -> Result<Vec<f64>, FlowError> {
        let d = self.arch.theta_dim;
        let e = self.embed_one(x)?;
        let ed = e.len();
        let cfg = self.arch.spline;
        let p = cfg.params_per_dim();
        let mut lp: Vec<f64> = (0..n)
            .map(|i| {
                let ss: f64 = z[i * d..(i + 1) * d].iter().map(|v| v * v).sum();
                -0.5 * ss - d as f64 * HALF_LN_2PI
            })
            .collect();
        for start in (0..n).step_by(CHUNK) {
            let end = (start + CHUNK).min(n);
            let m = end - start;
            for layer in self.layers.iter().rev() {
                let nc = layer.cond.len();
                let mut inp = Vec::with_capacity(m * (nc + ed));
                for i in start..end {
                    inp.extend(layer.cond.iter().map(|&j| z[i * d + j]));
                    inp.extend_from_slice(&e);
                }
                let mut tape = Tape::new();
                let vars = self.params.register(&mut tape, false);
                let iv = tape.constant(Tensor::new(vec![m, nc + ed], inp)?);
                let raw = layer.net.forward(&mut tape, &vars, iv)?;
                let raw = tape.value(raw).data();
                let t = layer.trans.len();
                for (r, i) in (start..end).enumerate() {
                    for (jj, &j) in layer.trans.iter().enumerate() {
                        let off = (r * t + jj) * p;
                        let (u, ld) = spline::inverse(z[i * d + j], &raw[off..off + p], &cfg);
                        z[i * d + j] = u;
                        lp[i] -= ld;
                    }
                }
            }
        }
        let std_ld = self.theta_standardizer.logdet();
        let mut tmp = vec![0.0; d];
        let mut check = vec![0.0; d];
        for i in 0..n {
            let row = &mut z[i * d..(i + 1) * d];
            self.theta_standardizer.invert(row, &mut tmp);
            self.theta_box.inverse(&tmp, row);
            let box_ld = self.theta_box.forward(row, &mut check)?;
            lp[i] += std_ld + box_ld;
        }
        Ok(lp)
    }
}
