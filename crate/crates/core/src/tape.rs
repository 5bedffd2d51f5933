//! Reverse-mode gradient tape over [`Tensor`] values.
//!
//! Every node holds its forward value. Leaves are either trainable
//! parameters or frozen constants; only nodes that depend on a trainable
//! leaf get a gradient buffer during [`GradientTape::backward`]. All
//! operands are 2-D (`rows x cols`); vectors are `1 x d` rows.

use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

/// Probability floor used by [`GradientTape::nll`].
pub const LOG_EPSILON: f64 = 1e-12;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        tau: f64,
        probs: Tensor,
    },
    CosineRows {
        w: Var,
        f: Var,
    },
    ClassProbs {
        sims: Var,
        tau: f64,
    },
    Nll {
        probs: Var,
        label: usize,
    },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for nodes that do not depend on a trainable leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of gradient buffers that were allocated.
    pub fn allocated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

#[derive(Default)]
pub struct GradientTape {
    nodes: Vec<Node>,
    non_finite: Option<String>,
    clamped: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl GradientTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(op_name(&op).to_string());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, true)
    }

    /// Frozen leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = as_matrix(value);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Errors if any recorded op produced a NaN or infinity.
    pub fn ensure_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    /// Number of [`nll`](Self::nll) evaluations that hit the probability floor.
    pub fn clamp_events(&self) -> usize {
        self.clamped
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul inner dimension");
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a @ b^T`; with `b` as an `out x in` weight this is a linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.cols(), "matmul_nt inner dimension");
        let out = av.matmul_nt(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds the `1 x m` row `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!(xv.cols(), bv.len(), "add_row width");
        let mut out = xv.clone();
        for i in 0..out.rows() {
            for (o, bb) in out.row_mut(i).iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        self.push(out, Op::AddRow(x, b), rg)
    }

    /// `x @ w^T + b` with `w: out x in`, `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul_nt(x, w);
        self.add_row(h, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(av.shape().to_vec(), data).expect("shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let rg = self.rg(a);
        self.push(out, Op::Gelu(a), rg)
    }

    /// Row-wise layer normalization with `1 x d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (r, d) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), d, "layer_norm gain width");
        assert_eq!(b.len(), d, "layer_norm bias width");
        let mut xhat = Tensor::zeros(&[r, d]);
        let mut out = Tensor::zeros(&[r, d]);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat.row_mut(i)[j] = h;
                out.row_mut(i)[j] = g[j] * h + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Row-wise softmax where row `i` only attends to columns `<= i`.
    pub fn causal_softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let cut = (i + 1).min(row.len());
            softmax_in_place(&mut row[..cut]);
            row[cut..].fill(0.0);
        }
        // Masked entries are exactly zero, so the plain softmax backward applies.
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols range");
        let r = xv.rows();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let out = Tensor::matrix(r, len, data).expect("shape");
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), r, "concat_cols rows");
                data.extend_from_slice(pv.row(i));
            }
        }
        let out = Tensor::matrix(r, total, data).expect("shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows range");
        let c = xv.cols();
        let data = xv.data()[start * c..(start + len) * c].to_vec();
        let out = Tensor::matrix(len, c, data).expect("shape");
        let rg = self.rg(x);
        self.push(out, Op::SliceRows { x, start }, rg)
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.slice_rows(x, i, 1)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut r = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), c, "concat_rows cols");
            data.extend_from_slice(pv.data());
            r += pv.rows();
        }
        let out = Tensor::matrix(r, c, data).expect("shape");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let n = dot(row, row).sqrt();
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows { x, norms }, rg)
    }

    /// Mean softmax cross-entropy of `logits / tau` against `labels`.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize], tau: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per row");
        let n = labels.len() as f64;
        let mut probs = lv.map(|v| v / tau);
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = probs.row_mut(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y];
            softmax_in_place(row);
        }
        let out = Tensor::filled(&[1, 1], total / n);
        let rg = self.rg(logits);
        self.push(
            out,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                tau,
                probs,
            },
            rg,
        )
    }

    /// Cosine similarity of each row of `w` with the single row `f`.
    pub fn cosine_rows(&mut self, w: Var, f: Var) -> Var {
        let (wv, fv) = (self.value(w), self.value(f));
        assert_eq!(fv.rows(), 1, "cosine_rows query is one row");
        assert_eq!(wv.cols(), fv.cols(), "cosine_rows width");
        let fnorm = fv.norm();
        let sims = (0..wv.rows())
            .map(|i| {
                let r = wv.row(i);
                dot(r, fv.data()) / (dot(r, r).sqrt() * fnorm)
            })
            .collect();
        let out = Tensor::matrix(1, wv.rows(), sims).expect("shape");
        let rg = self.rg(w) || self.rg(f);
        self.push(out, Op::CosineRows { w, f }, rg)
    }

    /// `softmax(sims / tau)` over a single row.
    pub fn class_probs(&mut self, sims: Var, tau: f64) -> Var {
        let mut out = self.value(sims).map(|v| v / tau);
        for i in 0..out.rows() {
            softmax_in_place(out.row_mut(i));
        }
        let rg = self.rg(sims);
        self.push(out, Op::ClassProbs { sims, tau }, rg)
    }

    /// `-ln max(p[label], LOG_EPSILON)` for a single probability row.
    pub fn nll(&mut self, probs: Var, label: usize) -> Var {
        let p = self.value(probs).data()[label];
        if p < LOG_EPSILON {
            self.clamped += 1;
        }
        let out = Tensor::filled(&[1, 1], -p.max(LOG_EPSILON).ln());
        let rg = self.rg(probs);
        self.push(out, Op::Nll { probs, label }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::filled(&[1, 1], self.value(x).data().iter().sum());
        let rg = self.rg(x);
        self.push(out, Op::Sum(x), rg)
    }

    /// Backward pass from a `1 x 1` output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let shape = self.value(output).shape();
        if shape != [1, 1] {
            return Err(Error::Shape(format!(
                "backward needs a scalar output, got {shape:?}"
            )));
        }
        self.backward_with(output, Tensor::filled(&[1, 1], 1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`).
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.ensure_finite()?;
        let seed = as_matrix(seed);
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Shape("seed shape differs from output".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.axpy(1.0, &g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul_nt(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = self.value(*a).matmul_tn(g);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulNt(a, b) => {
                if self.rg(*a) {
                    let ga = g.matmul(self.value(*b));
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = g.matmul_tn(self.value(*a));
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(&[1, g.cols()]);
                    for i in 0..g.rows() {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let ga = zip_map(g, self.value(*b), |x, y| x * y);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let gb = zip_map(g, self.value(*a), |x, y| x * y);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.map(|v| v * s)),
            Op::Sigmoid(a) => {
                let ga = zip_map(g, y, |gv, s| gv * s * (1.0 - s));
                self.accumulate(grads, *a, ga);
            }
            Op::Tanh(a) => {
                let ga = zip_map(g, y, |gv, t| gv * (1.0 - t * t));
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let ga = zip_map(g, self.value(*a), |gv, x| gv * gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, d) = (g.rows(), g.cols());
                let gv = self.value(*gain).data();
                if self.rg(*x) {
                    let mut gx = Tensor::zeros(&[r, d]);
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, hr) / d as f64;
                        for j in 0..d {
                            gx.row_mut(i)[j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*gain) {
                    let mut gg = Tensor::zeros(&[1, d]);
                    for i in 0..r {
                        for j in 0..d {
                            gg.data_mut()[j] += g.row(i)[j] * xhat.row(i)[j];
                        }
                    }
                    self.accumulate(grads, *gain, gg);
                }
                if self.rg(*bias) {
                    let mut gb = Tensor::zeros(&[1, d]);
                    for i in 0..r {
                        for (acc, v) in gb.data_mut().iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *bias, gb);
                }
            }
            Op::Softmax(x) => {
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - s);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let len = g.cols();
                for i in 0..g.rows() {
                    gx.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut gp = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            gp.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        let gp = Tensor::matrix(g.rows(), w, gp).expect("shape");
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                let c = g.cols();
                gx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    if self.rg(p) {
                        let gp = g.data()[offset * c..(offset + r) * c].to_vec();
                        let gp = Tensor::matrix(r, c, gp).expect("shape");
                        self.accumulate(grads, p, gp);
                    }
                    offset += r;
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let mut gx = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for (o, (yv, gv)) in gx.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gv - yv * s) / norms[i];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                tau,
                probs,
            } => {
                let scale = g.data()[0] / (tau * labels.len() as f64);
                let mut gl = probs.clone();
                for (i, &lab) in labels.iter().enumerate() {
                    let row = gl.row_mut(i);
                    row[lab] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                self.accumulate(grads, *logits, gl);
            }
            Op::CosineRows { w, f } => {
                let (wv, fv) = (self.value(*w), self.value(*f));
                let fd = fv.data();
                let fnorm = fv.norm();
                let mut gw = Tensor::zeros(wv.shape());
                let mut gf = Tensor::zeros(fv.shape());
                for i in 0..wv.rows() {
                    let wr = wv.row(i);
                    let wnorm = dot(wr, wr).sqrt();
                    let s = y.data()[i];
                    let gi = g.data()[i];
                    for j in 0..wv.cols() {
                        gw.row_mut(i)[j] =
                            gi * (fd[j] / (wnorm * fnorm) - s * wr[j] / (wnorm * wnorm));
                        gf.data_mut()[j] +=
                            gi * (wr[j] / (wnorm * fnorm) - s * fd[j] / (fnorm * fnorm));
                    }
                }
                self.accumulate(grads, *w, gw);
                self.accumulate(grads, *f, gf);
            }
            Op::ClassProbs { sims, tau } => {
                let mut gs = Tensor::zeros(y.shape());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let s = dot(yr, gr);
                    for (o, (yv, gv)) in gs.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yv * (gv - s) / tau;
                    }
                }
                self.accumulate(grads, *sims, gs);
            }
            Op::Nll { probs, label } => {
                let pv = self.value(*probs);
                let mut gp = Tensor::zeros(pv.shape());
                let p = pv.data()[*label];
                if p >= LOG_EPSILON {
                    gp.data_mut()[*label] = -g.data()[0] / p;
                }
                self.accumulate(grads, *probs, gp);
            }
            Op::Sum(x) => {
                let gx = Tensor::filled(self.value(*x).shape(), g.data()[0]);
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    match t.shape().len() {
        2 => t,
        _ => {
            let n = t.len();
            t.reshape(&[1, n]).expect("vector reshape")
        }
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape")
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sigmoid(_) => "sigmoid",
        Op::Tanh(_) => "tanh",
        Op::Relu(_) => "relu",
        Op::Gelu(_) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Softmax(_) => "softmax",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(_) => "concat_cols",
        Op::SliceRows { .. } => "slice_rows",
        Op::ConcatRows(_) => "concat_rows",
        Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        Op::SoftmaxXent { .. } => "softmax_xent",
        Op::CosineRows { .. } => "cosine_rows",
        Op::ClassProbs { .. } => "class_probs",
        Op::Nll { .. } => "nll",
        Op::Sum(_) => "sum",
    }
}
