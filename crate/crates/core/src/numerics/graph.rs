//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Operations are recorded in execution order; `backward` replays them in
//! exact reverse order, accumulating gradients into every node that
//! requires them. One graph services one forward/backward pass.

use crate::error::{Error, Result};
use crate::numerics::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel spatial reduction used by the global image branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    Gem,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId },
    Transpose { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f64 },
    AddColVec { x: TensorId, v: TensorId },
    AddRowVec { x: TensorId, v: TensorId },
    Relu { x: TensorId },
    Sigmoid { x: TensorId },
    Tanh { x: TensorId },
    SoftmaxRows { x: TensorId },
    LogSumExpRows { x: TensorId },
    LayerNormRows { x: TensorId, gain: TensorId, bias: TensorId, eps: f64 },
    L2NormalizeCols { x: TensorId, eps: f64 },
    Pool { x: TensorId, kind: PoolKind, p: f64 },
    Conv2d { x: TensorId, w: TensorId, b: TensorId, stride: usize, pad: usize },
    GatherCols { x: TensorId, ids: Vec<usize> },
    SliceRows { x: TensorId, start: usize },
    SliceCols { x: TensorId, start: usize },
    ConcatCols { xs: Vec<TensorId> },
    ConcatRows { xs: Vec<TensorId> },
    Reshape { x: TensorId },
    Diag { x: TensorId },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// A recorded forward computation. Confined to one thread per pass;
/// independent graphs may run on independent threads.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a leaf value. Only leaves with `requires_grad` collect gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> TensorId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Clones the value out of the graph.
    pub fn detach(&self, id: TensorId) -> Tensor {
        self.nodes[id.0].value.clone()
    }

    /// Gradient of the last `backward` target w.r.t. this node, if any.
    pub fn grad(&self, id: TensorId) -> Option<Tensor> {
        self.grads[id.0]
            .as_ref()
            .map(|g| Tensor::new(self.nodes[id.0].value.shape(), g.clone()).expect("grad shape"))
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> TensorId {
        debug_assert!(value.all_finite(), "non-finite values produced by {op:?}");
        // Recording new work after a backward pass starts a fresh forward.
        if self.backward_done {
            self.backward_done = false;
            for g in &mut self.grads {
                *g = None;
            }
        }
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        TensorId(self.nodes.len() - 1)
    }

    fn needs_grad(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn mat(&self, op: &'static str, id: TensorId) -> Result<&Tensor> {
        let t = self.value(id);
        if !t.is_matrix() {
            return Err(Error::dim(op, format!("expected rank-2, got shape {:?}", t.shape())));
        }
        Ok(t)
    }

    // ── op builders ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.mat("matmul", a)?, self.mat("matmul", b)?);
        if ta.cols() != tb.rows() {
            return Err(Error::dim(
                "matmul",
                format!("inner extents differ: {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &ta.data()[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &av) in a_row.iter().enumerate() {
                let b_row = &tb.data()[kk * n..(kk + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.mat("transpose", x)?;
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = t.data()[i * n + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[n, m], out)?, rg, Op::Transpose { x }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.zip_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn zip_elementwise(
        &mut self,
        name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(
                name,
                format!("shape mismatch {:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(out, rg, op))
    }

    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(out, rg, Op::Scale { x, c })
    }

    /// `x[m,n] + v[m]` broadcast across columns (fully-connected bias).
    pub fn add_col_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let tx = self.mat("add_col_vec", x)?;
        let tv = self.value(v);
        if tv.shape() != [tx.rows()] {
            return Err(Error::dim(
                "add_col_vec",
                format!("vector shape {:?} vs matrix {:?}", tv.shape(), tx.shape()),
            ));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        for i in 0..m {
            let vi = tv.data()[i];
            for o in &mut out[i * n..(i + 1) * n] {
                *o += vi;
            }
        }
        let rg = self.needs_grad(&[x, v]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::AddColVec { x, v }))
    }

    /// `x[m,n] + v[n]` broadcast across rows (attention key mask).
    pub fn add_row_vec(&mut self, x: TensorId, v: TensorId) -> Result<TensorId> {
        let tx = self.mat("add_row_vec", x)?;
        let tv = self.value(v);
        if tv.shape() != [tx.cols()] {
            return Err(Error::dim(
                "add_row_vec",
                format!("vector shape {:?} vs matrix {:?}", tv.shape(), tx.shape()),
            ));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut out = tx.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += tv.data()[j];
            }
        }
        let rg = self.needs_grad(&[x, v]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::AddRowVec { x, v }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(out, rg, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(out, rg, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.tanh()).collect();
        let out = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.needs_grad(&[x]);
        self.push(out, rg, Op::Tanh { x })
    }

    /// Row-wise softmax with max-subtraction for stability.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.mat("softmax_rows", x)?;
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= sum;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::SoftmaxRows { x }))
    }

    /// Row-wise log(sum(exp(x))) with max-subtraction, output `[m]`.
    pub fn logsumexp_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.mat("logsumexp_rows", x)?;
        let (m, n) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            out[i] = max + sum.ln();
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[m], out)?, rg, Op::LogSumExpRows { x }))
    }

    /// Normalizes each row of `x[m,n]` to mean 0 / variance 1, then applies
    /// the affine `gain[n] ⊙ x̂ + bias[n]`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let t = self.mat("layer_norm", x)?;
        let (m, n) = (t.rows(), t.cols());
        if n < 2 {
            return Err(Error::dim("layer_norm", format!("normalized axis must be >= 2, got {n}")));
        }
        if self.value(gain).shape() != [n] || self.value(bias).shape() != [n] {
            return Err(Error::dim("layer_norm", "gain/bias must have shape [n]".to_string()));
        }
        let (tg, tb) = (self.value(gain).data().to_vec(), self.value(bias).data().to_vec());
        let t = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &t.data()[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out[i * n + j] = tg[j] * (row[j] - mean) * inv + tb[j];
            }
        }
        let rg = self.needs_grad(&[x, gain, bias]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::LayerNormRows { x, gain, bias, eps }))
    }

    /// Scales every column of `x[m,n]` to unit Euclidean norm. Norms below
    /// `eps` are clamped to `eps`, so zero columns stay zero.
    pub fn l2_normalize_columns(&mut self, x: TensorId, eps: f64) -> Result<TensorId> {
        let t = self.mat("l2_normalize_columns", x)?;
        let (m, n) = (t.rows(), t.cols());
        let mut out = t.data().to_vec();
        for j in 0..n {
            let norm = (0..m).map(|i| out[i * n + j] * out[i * n + j]).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            for i in 0..m {
                out[i * n + j] /= denom;
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[m, n], out)?, rg, Op::L2NormalizeCols { x, eps }))
    }

    /// Per-channel reduction of `x[C,H,W]` over the spatial grid, output `[C]`.
    /// Gem computes `((1/HW)·Σ x^p)^(1/p)` and requires non-negative input.
    pub fn pool(&mut self, x: TensorId, kind: PoolKind, p: f64) -> Result<TensorId> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::dim("pool", format!("expected [C,H,W], got {:?}", t.shape())));
        }
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let hw = h * w;
        if kind == PoolKind::Gem {
            if p < 1.0 {
                return Err(Error::domain("pool", format!("gem exponent must be >= 1, got {p}")));
            }
            if let Some(v) = t.data().iter().find(|v| **v < 0.0) {
                return Err(Error::domain("pool", format!("gem requires non-negative input, found {v}")));
            }
        }
        let mut out = vec![0.0; c];
        for ch in 0..c {
            let plane = &t.data()[ch * hw..(ch + 1) * hw];
            out[ch] = match kind {
                PoolKind::Max => plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                PoolKind::Avg => plane.iter().sum::<f64>() / hw as f64,
                PoolKind::Gem => {
                    let s = plane.iter().map(|&v| v.powf(p)).sum::<f64>() / hw as f64;
                    s.powf(1.0 / p)
                }
            };
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[c], out)?, rg, Op::Pool { x, kind, p }))
    }

    /// 2-D convolution of `x[Ci,H,W]` with `w[Co,Ci,kh,kw]` and bias `b[Co]`,
    /// zero padding `pad` and stride `stride`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 3 || tw.rank() != 4 {
            return Err(Error::dim(
                "conv2d",
                format!("expected x[Ci,H,W], w[Co,Ci,kh,kw]; got {:?}, {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (ci, h, ww) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (co, wci, kh, kw) = (tw.shape()[0], tw.shape()[1], tw.shape()[2], tw.shape()[3]);
        if wci != ci || tb.shape() != [co] || stride == 0 {
            return Err(Error::dim("conv2d", "channel/bias/stride mismatch".to_string()));
        }
        if h + 2 * pad < kh || ww + 2 * pad < kw {
            return Err(Error::dim("conv2d", "kernel larger than padded input".to_string()));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (ww + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; co * ho * wo];
        for o in 0..co {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = tb.data()[o];
                    for i in 0..ci {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= ww as isize {
                                    continue;
                                }
                                acc += tw.data()[((o * ci + i) * kh + ky) * kw + kx]
                                    * tx.data()[(i * h + iy as usize) * ww + ix as usize];
                            }
                        }
                    }
                    out[(o * ho + oy) * wo + ox] = acc;
                }
            }
        }
        let rg = self.needs_grad(&[x, w, b]);
        Ok(self.push(Tensor::new(&[co, ho, wo], out)?, rg, Op::Conv2d { x, w, b, stride, pad }))
    }

    /// Column gather: `y[:,j] = x[:,ids[j]]` (embedding lookup).
    pub fn gather_cols(&mut self, x: TensorId, ids: &[usize]) -> Result<TensorId> {
        let t = self.mat("gather_cols", x)?;
        let (m, n) = (t.rows(), t.cols());
        if ids.is_empty() {
            return Err(Error::dim("gather_cols", "empty index list".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&j| j >= n) {
            return Err(Error::dim("gather_cols", format!("index {bad} out of {n} columns")));
        }
        let mut out = vec![0.0; m * ids.len()];
        for (jj, &j) in ids.iter().enumerate() {
            for i in 0..m {
                out[i * ids.len() + jj] = t.data()[i * n + j];
            }
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[m, ids.len()], out)?,
            rg,
            Op::GatherCols { x, ids: ids.to_vec() },
        ))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let t = self.mat("slice_rows", x)?;
        let (m, n) = (t.rows(), t.cols());
        if start + len > m || len == 0 {
            return Err(Error::dim("slice_rows", format!("range {start}+{len} out of {m} rows")));
        }
        let out = t.data()[start * n..(start + len) * n].to_vec();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[len, n], out)?, rg, Op::SliceRows { x, start }))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let t = self.mat("slice_cols", x)?;
        let (m, n) = (t.rows(), t.cols());
        if start + len > n || len == 0 {
            return Err(Error::dim("slice_cols", format!("range {start}+{len} out of {n} columns")));
        }
        let mut out = vec![0.0; m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&t.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[m, len], out)?, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::dim("concat_cols", "empty input list".to_string()));
        }
        let m = self.mat("concat_cols", xs[0])?.rows();
        let mut total = 0;
        for &x in xs {
            let t = self.mat("concat_cols", x)?;
            if t.rows() != m {
                return Err(Error::dim("concat_cols", "row counts differ".to_string()));
            }
            total += t.cols();
        }
        let mut out = vec![0.0; m * total];
        let mut offset = 0;
        for &x in xs {
            let t = self.value(x);
            let n = t.cols();
            for i in 0..m {
                out[i * total + offset..i * total + offset + n]
                    .copy_from_slice(&t.data()[i * n..(i + 1) * n]);
            }
            offset += n;
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(Tensor::new(&[m, total], out)?, rg, Op::ConcatCols { xs: xs.to_vec() }))
    }

    pub fn concat_rows(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::dim("concat_rows", "empty input list".to_string()));
        }
        let n = self.mat("concat_rows", xs[0])?.cols();
        let mut out = Vec::new();
        let mut total = 0;
        for &x in xs {
            let t = self.mat("concat_rows", x)?;
            if t.cols() != n {
                return Err(Error::dim("concat_rows", "column counts differ".to_string()));
            }
            total += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = self.needs_grad(xs);
        Ok(self.push(Tensor::new(&[total, n], out)?, rg, Op::ConcatRows { xs: xs.to_vec() }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let t = self.value(x);
        let out = t.reshaped(shape)?;
        let rg = self.needs_grad(&[x]);
        Ok(self.push(out, rg, Op::Reshape { x }))
    }

    /// Main diagonal of a square matrix, output `[n]`.
    pub fn diag(&mut self, x: TensorId) -> Result<TensorId> {
        let t = self.mat("diag", x)?;
        if t.rows() != t.cols() {
            return Err(Error::dim("diag", format!("matrix not square: {:?}", t.shape())));
        }
        let n = t.rows();
        let out: Vec<f64> = (0..n).map(|i| t.data()[i * n + i]).collect();
        let rg = self.needs_grad(&[x]);
        Ok(self.push(Tensor::new(&[n], out)?, rg, Op::Diag { x }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::SumAll { x })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let t = self.value(x);
        let s: f64 = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.needs_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::MeanAll { x })
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar output. Erroring on a second call
    /// without new recorded work since the last one.
    pub fn backward(&mut self, output: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph("backward called twice without a new forward"));
        }
        if self.value(output).len() != 1 {
            return Err(Error::dim("backward", "output must be scalar".to_string()));
        }
        if !self.nodes[output.0].requires_grad {
            return Err(Error::Graph("backward target does not require gradients"));
        }
        self.grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            let g = self.grads[idx].take().expect("grad present");
            Self::apply_backward(&self.nodes, &mut self.grads, idx, &g);
            self.grads[idx] = Some(g);
        }
        self.backward_done = true;
        Ok(())
    }

    fn apply_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
        let acc = |grads: &mut [Option<Vec<f64>>], id: TensorId, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[id.0].requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; nodes[id.0].value.len()]);
            f(buf);
        };
        let val = |id: TensorId| nodes[id.0].value.data();
        let out_val = nodes[idx].value.data();

        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                acc(grads, *a, &mut |ga| {
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let b_row = &tb.data()[kk * n..(kk + 1) * n];
                            ga[i * k + kk] +=
                                g_row.iter().zip(b_row).map(|(&x, &y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for kk in 0..k {
                        let gb_row = &mut gb[kk * n..(kk + 1) * n];
                        for i in 0..m {
                            let av = ta.data()[i * k + kk];
                            if av != 0.0 {
                                let g_row = &g[i * n..(i + 1) * n];
                                for (o, &gv) in gb_row.iter_mut().zip(g_row) {
                                    *o += av * gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose { x } => {
                let (n, m) = (nodes[idx].value.rows(), nodes[idx].value.cols());
                acc(grads, *x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..m {
                            gx[j * n + i] += g[i * m + j];
                        }
                    }
                });
            }
            Op::Add { a, b } => {
                acc(grads, *a, &mut |ga| add_assign(ga, g));
                acc(grads, *b, &mut |gb| add_assign(gb, g));
            }
            Op::Sub { a, b } => {
                acc(grads, *a, &mut |ga| add_assign(ga, g));
                acc(grads, *b, &mut |gb| {
                    for (o, &gv) in gb.iter_mut().zip(g) {
                        *o -= gv;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a).to_vec(), val(*b).to_vec());
                acc(grads, *a, &mut |ga| {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(&vb) {
                        *o += gv * bv;
                    }
                });
                acc(grads, *b, &mut |gb| {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(&va) {
                        *o += gv * av;
                    }
                });
            }
            Op::Scale { x, c } => {
                let c = *c;
                acc(grads, *x, &mut |gx| {
                    for (o, &gv) in gx.iter_mut().zip(g) {
                        *o += c * gv;
                    }
                });
            }
            Op::AddColVec { x, v } => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(grads, *x, &mut |gx| add_assign(gx, g));
                acc(grads, *v, &mut |gv| {
                    for i in 0..m {
                        gv[i] += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                });
            }
            Op::AddRowVec { x, v } => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                acc(grads, *x, &mut |gx| add_assign(gx, g));
                acc(grads, *v, &mut |gv| {
                    for i in 0..m {
                        for j in 0..n {
                            gv[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Relu { x } => {
                let vx = val(*x).to_vec();
                acc(grads, *x, &mut |gx| {
                    for ((o, &gv), &xv) in gx.iter_mut().zip(g).zip(&vx) {
                        if xv > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sigmoid { x } => {
                acc(grads, *x, &mut |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out_val) {
                        *o += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh { x } => {
                acc(grads, *x, &mut |gx| {
                    for ((o, &gv), &y) in gx.iter_mut().zip(g).zip(out_val) {
                        *o += gv * (1.0 - y * y);
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (nodes[idx].value.rows(), nodes[idx].value.cols());
                acc(grads, *x, &mut |gx| {
                    for i in 0..m {
                        let y = &out_val[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gx[i * n + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSumExpRows { x } => {
                let tx = &nodes[x.0].value;
                let (m, n) = (tx.rows(), tx.cols());
                acc(grads, *x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i] * (tx.data()[i * n + j] - out_val[i]).exp();
                        }
                    }
                });
            }
            Op::LayerNormRows { x, gain, bias, eps } => {
                let tx = &nodes[x.0].value;
                let tg = val(*gain).to_vec();
                let (m, n) = (tx.rows(), tx.cols());
                let nf = n as f64;
                // Recompute normalization statistics per row.
                let mut xhat = vec![0.0; m * n];
                let mut inv = vec![0.0; m];
                for i in 0..m {
                    let row = &tx.data()[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / nf;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                    inv[i] = 1.0 / (var + eps).sqrt();
                    for j in 0..n {
                        xhat[i * n + j] = (row[j] - mean) * inv[i];
                    }
                }
                acc(grads, *x, &mut |gx| {
                    for i in 0..m {
                        let gr = &g[i * n..(i + 1) * n];
                        let xh = &xhat[i * n..(i + 1) * n];
                        let ghat: Vec<f64> = gr.iter().zip(&tg).map(|(&a, &b)| a * b).collect();
                        let m1: f64 = ghat.iter().sum::<f64>() / nf;
                        let m2: f64 = ghat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<f64>() / nf;
                        for j in 0..n {
                            gx[i * n + j] += inv[i] * (ghat[j] - m1 - xh[j] * m2);
                        }
                    }
                });
                acc(grads, *gain, &mut |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(grads, *bias, &mut |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::L2NormalizeCols { x, eps } => {
                let tx = &nodes[x.0].value;
                let (m, n) = (tx.rows(), tx.cols());
                acc(grads, *x, &mut |gx| {
                    for j in 0..n {
                        let norm =
                            (0..m).map(|i| tx.data()[i * n + j].powi(2)).sum::<f64>().sqrt();
                        if norm > *eps {
                            let dot: f64 =
                                (0..m).map(|i| out_val[i * n + j] * g[i * n + j]).sum();
                            for i in 0..m {
                                gx[i * n + j] +=
                                    (g[i * n + j] - out_val[i * n + j] * dot) / norm;
                            }
                        } else {
                            for i in 0..m {
                                gx[i * n + j] += g[i * n + j] / eps;
                            }
                        }
                    }
                });
            }
            Op::Pool { x, kind, p } => {
                let tx = &nodes[x.0].value;
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let hw = h * w;
                acc(grads, *x, &mut |gx| {
                    for ch in 0..c {
                        let plane = &tx.data()[ch * hw..(ch + 1) * hw];
                        match kind {
                            PoolKind::Max => {
                                let arg = plane
                                    .iter()
                                    .enumerate()
                                    .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                                        if v > best.1 {
                                            (i, v)
                                        } else {
                                            best
                                        }
                                    })
                                    .0;
                                gx[ch * hw + arg] += g[ch];
                            }
                            PoolKind::Avg => {
                                for i in 0..hw {
                                    gx[ch * hw + i] += g[ch] / hw as f64;
                                }
                            }
                            PoolKind::Gem => {
                                let s = plane.iter().map(|&v| v.powf(*p)).sum::<f64>()
                                    / hw as f64;
                                if s > 0.0 {
                                    let outer = s.powf(1.0 / p - 1.0) / hw as f64;
                                    for i in 0..hw {
                                        gx[ch * hw + i] +=
                                            g[ch] * outer * plane[i].powf(p - 1.0);
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let tx = &nodes[x.0].value;
                let tw = &nodes[w.0].value;
                let (ci, h, ww) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let (co, kh, kw) = (tw.shape()[0], tw.shape()[2], tw.shape()[3]);
                let out = &nodes[idx].value;
                let (ho, wo) = (out.shape()[1], out.shape()[2]);
                acc(grads, *b, &mut |gb| {
                    for o in 0..co {
                        gb[o] += g[o * ho * wo..(o + 1) * ho * wo].iter().sum::<f64>();
                    }
                });
                acc(grads, *w, &mut |gw| {
                    for o in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(o * ho + oy) * wo + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for i in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= ww as isize {
                                                continue;
                                            }
                                            gw[((o * ci + i) * kh + ky) * kw + kx] += gv
                                                * tx.data()
                                                    [(i * h + iy as usize) * ww + ix as usize];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
                acc(grads, *x, &mut |gx| {
                    for o in 0..co {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[(o * ho + oy) * wo + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for i in 0..ci {
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - *pad as isize;
                                        if iy < 0 || iy >= h as isize {
                                            continue;
                                        }
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - *pad as isize;
                                            if ix < 0 || ix >= ww as isize {
                                                continue;
                                            }
                                            gx[(i * h + iy as usize) * ww + ix as usize] += gv
                                                * tw.data()[((o * ci + i) * kh + ky) * kw + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GatherCols { x, ids } => {
                let n = nodes[x.0].value.cols();
                let m = nodes[x.0].value.rows();
                acc(grads, *x, &mut |gx| {
                    for (jj, &j) in ids.iter().enumerate() {
                        for i in 0..m {
                            gx[i * n + j] += g[i * ids.len() + jj];
                        }
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let n = nodes[x.0].value.cols();
                let len = nodes[idx].value.rows();
                acc(grads, *x, &mut |gx| {
                    add_assign(&mut gx[start * n..(start + len) * n], g);
                });
            }
            Op::SliceCols { x, start } => {
                let (m, n) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
                let len = nodes[idx].value.cols();
                acc(grads, *x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] += g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let m = nodes[idx].value.rows();
                let total = nodes[idx].value.cols();
                let mut offset = 0;
                for &xid in xs {
                    let n = nodes[xid.0].value.cols();
                    let off = offset;
                    acc(grads, xid, &mut |gx| {
                        for i in 0..m {
                            for j in 0..n {
                                gx[i * n + j] += g[i * total + off + j];
                            }
                        }
                    });
                    offset += n;
                }
            }
            Op::ConcatRows { xs } => {
                let n = nodes[idx].value.cols();
                let mut offset = 0;
                for &xid in xs {
                    let m = nodes[xid.0].value.rows();
                    let off = offset;
                    acc(grads, xid, &mut |gx| {
                        add_assign(gx, &g[off * n..(off + m) * n]);
                    });
                    offset += m;
                }
            }
            Op::Reshape { x } => {
                acc(grads, *x, &mut |gx| add_assign(gx, g));
            }
            Op::Diag { x } => {
                let n = nodes[idx].value.len();
                acc(grads, *x, &mut |gx| {
                    for i in 0..n {
                        gx[i * n + i] += g[i];
                    }
                });
            }
            Op::SumAll { x } => {
                acc(grads, *x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                });
            }
            Op::MeanAll { x } => {
                let len = nodes[x.0].value.len() as f64;
                acc(grads, *x, &mut |gx| {
                    for o in gx.iter_mut() {
                        *o += g[0] / len;
                    }
                });
            }
        }
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (o, &s) in dst.iter_mut().zip(src) {
        *o += s;
    }
}
