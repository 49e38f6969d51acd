use super::{Tensor, TensorError};
use crate::flow::spline::{self, SplineConfig};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Which operand (if any) is broadcast over the leading batch dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Bcast {
    Same,
    Rhs,
    Lhs,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Relu,
    Pow(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var, bc: Bcast },
    Unary { kind: UnKind, a: Var },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    Softmax(Var),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
    RqSpline { u: Var, raw: Var, cfg: SplineConfig },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of forward operations.
///
/// Nodes are appended in execution order, so inputs always precede outputs.
/// Gradients of leaves accumulate across calls to [`Tape::backward`] until
/// [`Tape::zero_grads`] is called.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `out[n, m] += a[n, k] * b[k, m]`, all row-major.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    // Four rows of A at a time so each row of B is loaded once per block.
    let mut i = 0;
    while i + 4 <= n {
        let (o0, rest) = out[i * m..(i + 4) * m].split_at_mut(m);
        let (o1, rest) = rest.split_at_mut(m);
        let (o2, o3) = rest.split_at_mut(m);
        for kk in 0..k {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                let bv = brow[j];
                o0[j] += a0 * bv;
                o1[j] += a1 * bv;
                o2[j] += a2 * bv;
                o3[j] += a3 * bv;
            }
        }
        i += 4;
    }
    for i in i..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose(src: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = src[r * cols + c];
        }
    }
    t
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn checked(
        &mut self,
        op_name: &'static str,
        value: Tensor,
        requires_grad: bool,
        op: Op,
    ) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        Ok(self.push(value, requires_grad, op))
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Leaf without gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, shaped like its value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- elementwise binary -----------------------------------------

    fn broadcast(
        op: &'static str,
        a: &[usize],
        b: &[usize],
    ) -> Result<(Bcast, Vec<usize>), TensorError> {
        if a == b {
            return Ok((Bcast::Same, a.to_vec()));
        }
        let row_of = |big: &[usize], small: &[usize]| {
            !big.is_empty()
                && (small == &big[1..] || (small.len() == big.len() && small[0] == 1 && small[1..] == big[1..]))
        };
        if row_of(a, b) {
            return Ok((Bcast::Rhs, a.to_vec()));
        }
        if row_of(b, a) {
            return Ok((Bcast::Lhs, b.to_vec()));
        }
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let (bc, shape) = Self::broadcast(name, &av.shape, &bv.shape)?;
        let n: usize = shape.iter().product();
        let f = |x: f64, y: f64| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let mut out = Vec::with_capacity(n);
        match bc {
            Bcast::Same => out.extend(av.data.iter().zip(&bv.data).map(|(&x, &y)| f(x, y))),
            Bcast::Rhs => {
                let c = bv.data.len();
                for (i, &x) in av.data.iter().enumerate() {
                    out.push(f(x, bv.data[i % c]));
                }
            }
            Bcast::Lhs => {
                let c = av.data.len();
                for (i, &y) in bv.data.iter().enumerate() {
                    out.push(f(av.data[i % c], y));
                }
            }
        }
        if kind == BinKind::Div && out.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::Domain {
                op: "div",
                value: 0.0,
            });
        }
        let rg = self.rg(&[a, b]);
        self.checked(name, Tensor { shape, data: out }, rg, Op::Binary { kind, a, b, bc })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    // ----- elementwise unary ------------------------------------------

    fn unary(&mut self, kind: UnKind, a: Var) -> Result<Var, TensorError> {
        let name = match kind {
            UnKind::Exp => "exp",
            UnKind::Log => "log",
            UnKind::Tanh => "tanh",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Softplus => "softplus",
            UnKind::Relu => "relu",
            UnKind::Pow(_) => "pow",
            UnKind::Scale(_) => "scale",
            UnKind::AddScalar(_) => "add_scalar",
        };
        let av = &self.nodes[a.0].value;
        match kind {
            UnKind::Log => {
                if let Some(&bad) = av.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(TensorError::Domain { op: name, value: bad });
                }
            }
            UnKind::Pow(p) if p.fract() != 0.0 => {
                if let Some(&bad) = av.data.iter().find(|&&x| x < 0.0) {
                    return Err(TensorError::Domain { op: name, value: bad });
                }
            }
            _ => {}
        }
        let data: Vec<f64> = av
            .data
            .iter()
            .map(|&x| match kind {
                UnKind::Exp => x.exp(),
                UnKind::Log => x.ln(),
                UnKind::Tanh => x.tanh(),
                UnKind::Sigmoid => sigmoid(x),
                UnKind::Softplus => softplus(x),
                UnKind::Relu => x.max(0.0),
                UnKind::Pow(p) => {
                    if p == 2.0 {
                        x * x
                    } else {
                        x.powf(p)
                    }
                }
                UnKind::Scale(c) => c * x,
                UnKind::AddScalar(c) => x + c,
            })
            .collect();
        let shape = av.shape.clone();
        let rg = self.rg(&[a]);
        self.checked(name, Tensor { shape, data }, rg, Op::Unary { kind, a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Log, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Softplus, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnKind::Relu, a)
    }

    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        self.unary(UnKind::Pow(p), a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnKind::Scale(c), a)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        self.unary(UnKind::AddScalar(c), a)
    }

    // ----- reductions -------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s: f64 = self.nodes[a.0].value.data.iter().sum();
        let rg = self.rg(&[a]);
        self.checked("sum", Tensor::scalar(s), rg, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.0].value;
        if v.data.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s: f64 = v.data.iter().sum::<f64>() / v.data.len() as f64;
        let rg = self.rg(&[a]);
        self.checked("mean", Tensor::scalar(s), rg, Op::Mean(a))
    }

    /// Sum over every dimension but the leading one: `[n, ...] -> [n]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.0].value;
        if v.shape.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "sum_last",
                msg: "scalar input".into(),
            });
        }
        let n = v.shape[0];
        let c = v.cols();
        let data: Vec<f64> = (0..n).map(|i| v.data[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(&[a]);
        self.checked("sum_last", Tensor::vector(data), rg, Op::SumLast(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let v = &self.nodes[a.0].value;
        let c = *v.shape.last().ok_or(TensorError::InvalidArgument {
            op: "softmax",
            msg: "scalar input".into(),
        })?;
        let mut data = v.data.clone();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let shape = v.shape.clone();
        let rg = self.rg(&[a]);
        self.checked("softmax", Tensor { shape, data }, rg, Op::Softmax(a))
    }

    // ----- linear algebra and layout ----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        if av.shape.len() != 2 || bv.shape.len() != 2 || av.shape[1] != bv.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: av.shape.clone(),
                rhs: bv.shape.clone(),
            });
        }
        let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
        let mut out = vec![0.0; n * m];
        matmul_into(&av.data, &bv.data, &mut out, n, k, m);
        let rg = self.rg(&[a, b]);
        self.checked(
            "matmul",
            Tensor {
                shape: vec![n, m],
                data: out,
            },
            rg,
            Op::MatMul(a, b),
        )
    }

    /// Column-wise concatenation of 2-D tensors with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let n = self.nodes[first.0].value.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &self.nodes[p.0].value;
            if v.shape.len() != 2 || v.shape[0] != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: self.nodes[first.0].value.shape.clone(),
                    rhs: v.shape.clone(),
                });
            }
            widths.push(v.shape[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].value.data[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        self.checked(
            "concat",
            Tensor {
                shape: vec![n, total],
                data,
            },
            rg,
            Op::Concat(parts.to_vec()),
        )
    }

    /// Gather columns of a 2-D tensor in the given order.
    pub fn select_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let v = &self.nodes[a.0].value;
        if v.shape.len() != 2 {
            return Err(TensorError::InvalidArgument {
                op: "select_cols",
                msg: format!("expected 2-D input, got {:?}", v.shape),
            });
        }
        let (n, c) = (v.shape[0], v.shape[1]);
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::InvalidArgument {
                op: "select_cols",
                msg: format!("column {bad} out of range for width {c}"),
            });
        }
        let mut data = Vec::with_capacity(n * cols.len());
        for i in 0..n {
            let row = &v.data[i * c..(i + 1) * c];
            data.extend(cols.iter().map(|&j| row[j]));
        }
        let rg = self.rg(&[a]);
        self.checked(
            "select_cols",
            Tensor {
                shape: vec![n, cols.len()],
                data,
            },
            rg,
            Op::SelectCols(a, cols.to_vec()),
        )
    }

    /// Contiguous column range `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let cols: Vec<usize> = (start..end).collect();
        self.select_cols(a, &cols)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.nodes[a.0].value.clone();
        let rg = self.rg(&[a]);
        let value = v.reshape(shape.to_vec())?;
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    // ----- fused ops --------------------------------------------------

    /// Monotone rational-quadratic spline applied elementwise to `u: [n, d]`
    /// with unnormalized parameters `raw: [n, d * (3K - 1)]`.
    ///
    /// Output is `[n, 2d]`: transformed values in the first `d` columns and
    /// per-dimension log-derivatives in the last `d`.
    pub fn rq_spline(&mut self, u: Var, raw: Var, cfg: SplineConfig) -> Result<Var, TensorError> {
        let uv = &self.nodes[u.0].value;
        let rv = &self.nodes[raw.0].value;
        let p = cfg.params_per_dim();
        if uv.shape.len() != 2 || rv.shape.len() != 2 || uv.shape[0] != rv.shape[0] || rv.shape[1] != uv.shape[1] * p {
            return Err(TensorError::ShapeMismatch {
                op: "rq_spline",
                lhs: uv.shape.clone(),
                rhs: rv.shape.clone(),
            });
        }
        let (n, d) = (uv.shape[0], uv.shape[1]);
        let mut out = vec![0.0; n * 2 * d];
        for i in 0..n {
            for j in 0..d {
                let r = &rv.data[(i * d + j) * p..(i * d + j + 1) * p];
                let (y, ld) = spline::forward(uv.data[i * d + j], r, &cfg);
                out[i * 2 * d + j] = y;
                out[i * 2 * d + d + j] = ld;
            }
        }
        let rg = self.rg(&[u, raw]);
        self.checked(
            "rq_spline",
            Tensor {
                shape: vec![n, 2 * d],
                data: out,
            },
            rg,
            Op::RqSpline { u, raw, cfg },
        )
    }

    /// 2-D convolution: `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        if xv.shape.len() != 4 || wv.shape.len() != 4 || xv.shape[1] != wv.shape[1] || bv.shape != [wv.shape[0]] || wv.shape[2] != wv.shape[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: xv.shape.clone(),
                rhs: wv.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be positive".into(),
            });
        }
        let g = ConvGeom::new(&xv.shape, &wv.shape, stride, pad)?;
        let mut out = vec![0.0; g.n * g.co * g.ho * g.wo];
        conv_forward(&xv.data, &wv.data, &bv.data, &mut out, &g);
        let rg = self.rg(&[x, w, b]);
        self.checked(
            "conv2d",
            Tensor {
                shape: vec![g.n, g.co, g.ho, g.wo],
                data: out,
            },
            rg,
            Op::Conv2d { x, w, b, stride, pad },
        )
    }

    // ----- backward ---------------------------------------------------

    /// Accumulate `d loss / d leaf` into every gradient-requiring leaf.
    ///
    /// A loss that does not depend on any parameter is a no-op.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = &self.nodes[loss.0].value;
        if lv.data.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape.clone()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.leaf_grads[idx];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                *slot = Some(vec![0.0; nodes[v.0].value.data.len()]);
            }
            f(slot.as_mut().unwrap());
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Binary { kind, a, b, bc } => {
                let av = &nodes[a.0].value.data;
                let bv = &nodes[b.0].value.data;
                let (ca, cb) = (av.len(), bv.len());
                let ia = |i: usize| if *bc == Bcast::Lhs { i % ca } else { i };
                let ib = |i: usize| if *bc == Bcast::Rhs { i % cb } else { i };
                if wants(*a) {
                    acc(*a, &mut |ga| {
                        for (i, &gi) in g.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add | BinKind::Sub => gi,
                                BinKind::Mul => gi * bv[ib(i)],
                                BinKind::Div => gi / bv[ib(i)],
                            };
                            ga[ia(i)] += d;
                        }
                    });
                }
                if wants(*b) {
                    acc(*b, &mut |gb| {
                        for (i, &gi) in g.iter().enumerate() {
                            let d = match kind {
                                BinKind::Add => gi,
                                BinKind::Sub => -gi,
                                BinKind::Mul => gi * av[ia(i)],
                                BinKind::Div => {
                                    let y = bv[ib(i)];
                                    -gi * av[ia(i)] / (y * y)
                                }
                            };
                            gb[ib(i)] += d;
                        }
                    });
                }
            }
            Op::Unary { kind, a } => {
                let x = &nodes[a.0].value.data;
                let y = &out.data;
                acc(*a, &mut |ga| {
                    for i in 0..g.len() {
                        let d = match kind {
                            UnKind::Exp => y[i],
                            UnKind::Log => 1.0 / x[i],
                            UnKind::Tanh => 1.0 - y[i] * y[i],
                            UnKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnKind::Softplus => sigmoid(x[i]),
                            UnKind::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnKind::Pow(p) => p * x[i].powf(p - 1.0),
                            UnKind::Scale(c) => *c,
                            UnKind::AddScalar(_) => 1.0,
                        };
                        ga[i] += g[i] * d;
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.data.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|v| *v += g[0] / n))
            }
            Op::SumLast(a) => {
                let c = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (i, v) in ga.iter_mut().enumerate() {
                        *v += g[i / c];
                    }
                })
            }
            Op::Softmax(a) => {
                let c = *out.shape.last().unwrap();
                let y = &out.data;
                acc(*a, &mut |ga| {
                    for r in 0..y.len() / c {
                        let (ys, gs) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[r * c + j] += ys[j] * (gs[j] - dot);
                        }
                    }
                })
            }
            Op::MatMul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let (n, k, m) = (av.shape[0], av.shape[1], bv.shape[1]);
                acc(*a, &mut |ga| {
                    // dA = G·Bᵀ
                    let bt = transpose(&bv.data, k, m);
                    matmul_into(g, &bt, ga, n, m, k);
                });
                acc(*b, &mut |gb| {
                    // dB = Aᵀ·G
                    let at = transpose(&av.data, n, k);
                    matmul_into(&at, g, gb, k, n, m);
                });
            }
            Op::Concat(parts) => {
                let n = out.shape[0];
                let total = out.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape[1];
                    acc(*p, &mut |gp| {
                        for i in 0..n {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::SelectCols(a, cols) => {
                let c = nodes[a.0].value.shape[1];
                let w = cols.len();
                acc(*a, &mut |ga| {
                    for i in 0..out.shape[0] {
                        for (jj, &j) in cols.iter().enumerate() {
                            ga[i * c + j] += g[i * w + jj];
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y)),
            Op::RqSpline { u, raw, cfg } => {
                let uv = &nodes[u.0].value;
                let rv = &nodes[raw.0].value;
                let (n, d) = (uv.shape[0], uv.shape[1]);
                let p = cfg.params_per_dim();
                let mut gu = vec![0.0; n * d];
                let mut graw = vec![0.0; n * d * p];
                for i in 0..n {
                    for j in 0..d {
                        let e = i * d + j;
                        let gy = g[i * 2 * d + j];
                        let gl = g[i * 2 * d + d + j];
                        if gy == 0.0 && gl == 0.0 {
                            continue;
                        }
                        gu[e] = spline::forward_backward(
                            uv.data[e],
                            &rv.data[e * p..(e + 1) * p],
                            cfg,
                            gy,
                            gl,
                            &mut graw[e * p..(e + 1) * p],
                        );
                    }
                }
                acc(*u, &mut |gx| gx.iter_mut().zip(&gu).for_each(|(a, b)| *a += b));
                acc(*raw, &mut |gx| gx.iter_mut().zip(&graw).for_each(|(a, b)| *a += b));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let geom = ConvGeom::new(&xv.shape, &wv.shape, *stride, *pad).expect("validated in forward");
                if wants(*x) {
                    acc(*x, &mut |gx| conv_backward_input(g, &wv.data, gx, &geom));
                }
                if wants(*w) {
                    acc(*w, &mut |gw| conv_backward_weight(g, &xv.data, gw, &geom));
                }
                acc(*b, &mut |gb| {
                    let plane = geom.ho * geom.wo;
                    for nn in 0..geom.n {
                        for c in 0..geom.co {
                            let base = (nn * geom.co + c) * plane;
                            gb[c] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                });
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let (n, ci, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(TensorError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel {k} larger than padded input {h}x{w}"),
            });
        }
        Ok(Self {
            n,
            ci,
            h,
            w,
            co,
            k,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
            stride,
            pad,
        })
    }

    /// Input coordinate for an output coordinate and kernel offset.
    #[inline]
    fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn conv_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64], g: &ConvGeom) {
    let plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.co {
            let ob = (n * g.co + co) * plane;
            out[ob..ob + plane].iter_mut().for_each(|v| *v = b[co]);
            for ci in 0..g.ci {
                let xb = (n * g.ci + ci) * g.h * g.w;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[((co * g.ci + ci) * g.k + ky) * g.k + kx];
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    out[ob + oy * g.wo + ox] += wv * x[xb + iy * g.w + ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_input(gout: &[f64], w: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.co {
            let ob = (n * g.co + co) * plane;
            for ci in 0..g.ci {
                let xb = (n * g.ci + ci) * g.h * g.w;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[((co * g.ci + ci) * g.k + ky) * g.k + kx];
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    gx[xb + iy * g.w + ix] += wv * gout[ob + oy * g.wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_weight(gout: &[f64], x: &[f64], gw: &mut [f64], g: &ConvGeom) {
    let plane = g.ho * g.wo;
    for n in 0..g.n {
        for co in 0..g.co {
            let ob = (n * g.co + co) * plane;
            for ci in 0..g.ci {
                let xb = (n * g.ci + ci) * g.h * g.w;
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let mut s = 0.0;
                        for oy in 0..g.ho {
                            let Some(iy) = g.src(oy, ky, g.h) else { continue };
                            for ox in 0..g.wo {
                                if let Some(ix) = g.src(ox, kx, g.w) {
                                    s += x[xb + iy * g.w + ix] * gout[ob + oy * g.wo + ox];
                                }
                            }
                        }
                        gw[((co * g.ci + ci) * g.k + ky) * g.k + kx] += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_elementwise() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut tape = Tape::new();
        let i3 = tape.constant(Tensor::eye(3));
        let a = t(&[3, 4], &(0..12).map(|v| v as f64 * 0.5 - 1.0).collect::<Vec<_>>());
        let av = tape.constant(a.clone());
        let c = tape.matmul(i3, av).unwrap();
        assert_eq!(tape.value(c), &a);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.0));
        let s = tape.softplus(a).unwrap();
        assert!((tape.value(s).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("matmul"));
        let c = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.add(a, c), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(TensorError::Domain { op: "log", .. })));
    }

    #[test]
    fn non_finite_forward_raises() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(800.0));
        assert!(matches!(tape.exp(a), Err(TensorError::NonFinite { op: "exp" })));
    }

    #[test]
    fn leading_batch_broadcast() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(Tensor::vector(vec![10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0; 4]);
        // Broadcast along a trailing dimension is rejected.
        let col = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert!(tape.add(a, col).is_err());
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.pow(x, 2.0).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_is_noop() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(1.0));
        let c = tape.constant(Tensor::scalar(3.0));
        tape.backward(c).unwrap();
        assert!(tape.grad(w).is_none());
    }

    #[test]
    fn log_sigmoid_grad_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0));
        let x = tape.constant(Tensor::scalar(1.0));
        let wx = tape.mul(w, x).unwrap();
        let s = tape.sigmoid(wx).unwrap();
        let l = tape.log(s).unwrap();
        tape.backward(l).unwrap();
        assert!((tape.grad(w).unwrap().data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.pow(x, 2.0).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0, 8.0]);
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn reuse_accumulates_additively() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        tape.backward(z).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn conv_shapes() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 1, 8, 8], 1.0));
        let w = tape.param(Tensor::full(&[4, 1, 3, 3], 1.0));
        let b = tape.param(Tensor::zeros(&[4]));
        let y = tape.conv2d(x, w, b, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 4, 4]);
        // Interior output sees all nine inputs, the corner only four.
        let v = tape.value(y).data();
        assert_eq!(v[0], 4.0);
        assert_eq!(v[5], 9.0);
    }
}
