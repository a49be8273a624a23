use super::kernels::{self, HeadLayout};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Rope { x: Var, cos: Vec<f64>, sin: Vec<f64>, head_dim: usize },
    GatherRows { x: Var, index: Vec<usize> },
    ScatterRows { x: Var, fill: Var, index: Vec<usize> },
    MeanSquare(Var),
    Sum(Var),
    SegmentMeanSquare { x: Var, seg_len: usize },
    WeightedMean { x: Var, weights: Vec<f64> },
    Concat { axis: Axis, parts: Vec<Var> },
    SliceCols { x: Var, start: usize },
    LinearAttention { q: Var, k: Var, v: Var, hl: HeadLayout, scale: f64 },
    WindowAttention { q: Var, k: Var, v: Var, hl: HeadLayout, windows: Vec<Vec<usize>> },
    SoftmaxAttention { q: Var, k: Var, v: Var, hl: HeadLayout },
    GatedSum { gates: Var, global: Var, local: Var, groups: usize },
    EulerCombine { x: Var, f: Var, dt: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode recording of a computation. Nodes are appended in execution
/// order, so inputs always precede outputs and the tape is acyclic.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::dim(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: &[f64]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient after [`Tape::backward`]; `None` for nodes that do
    /// not require gradients or were not reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if value.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input (no gradient).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true, grad: None });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push(name, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a[n×d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (_, d) = rank2("add_row", ta)?;
        if tb.rank() != 1 || tb.numel() != d {
            return Err(Error::dim("add_row", format!("bias {:?} for width {d}", tb.shape())));
        }
        let bias = tb.data();
        let data = ta.data().chunks(d).flat_map(|r| r.iter().zip(bias).map(|(x, y)| x + y)).collect();
        let out = Tensor::raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        self.push("add_row", out, Op::AddRow(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::raw(ta.shape().to_vec(), ta.data().iter().map(|x| x * c).collect());
        let rg = self.rg(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::raw(ta.shape().to_vec(), ta.data().iter().map(|x| x + c).collect());
        let rg = self.rg(&[a]);
        self.push("add_scalar", out, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = Tensor::raw(ta.shape().to_vec(), ta.data().iter().map(|&x| sigmoid(x)).collect());
        let rg = self.rg(&[a]);
        self.push("sigmoid", out, Op::Sigmoid(a), rg)
    }

    /// `x · sigmoid(x)`, composed from primitives.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let s = self.sigmoid(a)?;
        self.mul(a, s)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = rank2("matmul", ta)?;
        let (k2, n) = rank2("matmul", tb)?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let out = Tensor::raw(vec![m, n], kernels::matmul(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = rank2("transpose", ta)?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = ta.data()[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push("transpose", Tensor::raw(vec![n, m], data), Op::Transpose(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (_, d) = rank2("softmax_rows", ta)?;
        let mut data = ta.data().to_vec();
        data.chunks_mut(d).for_each(kernels::softmax_in_place);
        let out = Tensor::raw(ta.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), rg)
    }

    /// `y[i,:] = gain ⊙ x[i,:] / sqrt(mean(x[i,:]²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("rms_norm eps must be positive, got {eps}")));
        }
        let (tx, tg) = (self.value(x), self.value(gain));
        let (_, d) = rank2("rms_norm", tx)?;
        if tg.rank() != 1 || tg.numel() != d {
            return Err(Error::dim("rms_norm", format!("gain {:?} for width {d}", tg.shape())));
        }
        let mut inv_rms = Vec::with_capacity(tx.rows());
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mut ms = 0.0;
            for v in row {
                ms += v * v;
            }
            let r = 1.0 / (ms / d as f64 + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(tg.data()).map(|(v, g)| g * v * r));
        }
        let out = Tensor::raw(tx.shape().to_vec(), data);
        let rg = self.rg(&[x, gain]);
        self.push("rms_norm", out, Op::RmsNorm { x, gain, inv_rms }, rg)
    }

    /// Rotary embedding applied independently to each `head_dim`-wide column
    /// block: pair `(2i, 2i+1)` of a row at position `p` is rotated by
    /// `p · base^(-2i/head_dim)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64, head_dim: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = rank2("rope", tx)?;
        if head_dim == 0 || head_dim % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head dimension, got {head_dim}")));
        }
        if d % head_dim != 0 {
            return Err(Error::dim("rope", format!("width {d} is not a multiple of head dim {head_dim}")));
        }
        if positions.len() != n {
            return Err(Error::dim("rope", format!("{} positions for {n} rows", positions.len())));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for &p in positions {
            for i in 0..half {
                let theta = p as f64 * base.powf(-2.0 * i as f64 / head_dim as f64);
                cos.push(theta.cos());
                sin.push(theta.sin());
            }
        }
        let data = rotate(tx.data(), d, head_dim, &cos, &sin, 1.0);
        let out = Tensor::raw(tx.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        self.push("rope", out, Op::Rope { x, cos, sin, head_dim }, rg)
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = rank2("gather_rows", tx)?;
        if index.is_empty() {
            return Err(Error::dim("gather_rows", "empty index list"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} out of range for {n} rows")));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::raw(vec![index.len(), d], data);
        let rg = self.rg(&[x]);
        self.push("gather_rows", out, Op::GatherRows { x, index: index.to_vec() }, rg)
    }

    /// Lifts `x[k×d]` to `n` rows: row `index[r]` receives `x[r]`, every other
    /// row receives `fill[d]`.
    pub fn scatter_rows_with_fill(&mut self, x: Var, index: &[usize], n: usize, fill: Var) -> Result<Var> {
        let (tx, tf) = (self.value(x), self.value(fill));
        let (k, d) = rank2("scatter_rows_with_fill", tx)?;
        if tf.rank() != 1 || tf.numel() != d {
            return Err(Error::dim("scatter_rows_with_fill", format!("fill {:?} for width {d}", tf.shape())));
        }
        if index.len() != k {
            return Err(Error::dim("scatter_rows_with_fill", format!("{} indices for {k} rows", index.len())));
        }
        let mut seen = vec![false; n];
        for &i in index {
            if i >= n || seen[i] {
                return Err(Error::dim("scatter_rows_with_fill", format!("index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n {
            data.extend_from_slice(tf.data());
        }
        for (r, &i) in index.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(tx.row(r));
        }
        let out = Tensor::raw(vec![n, d], data);
        let rg = self.rg(&[x, fill]);
        self.push("scatter_rows_with_fill", out, Op::ScatterRows { x, fill, index: index.to_vec() }, rg)
    }

    /// Scalar `mean(x²)`.
    pub fn mean_square(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut acc = 0.0;
        for v in tx.data() {
            acc += v * v;
        }
        let out = Tensor::scalar(acc / tx.numel() as f64);
        let rg = self.rg(&[x]);
        self.push("mean_square", out, Op::MeanSquare(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        let rg = self.rg(&[x]);
        self.push("sum", Tensor::scalar(acc), Op::Sum(x), rg)
    }

    /// Per-sample mean of squares over consecutive blocks of `seg_len` rows;
    /// returns a vector with one entry per block.
    pub fn segment_mean_square(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = rank2("segment_mean_square", tx)?;
        if seg_len == 0 || n % seg_len != 0 {
            return Err(Error::dim("segment_mean_square", format!("{n} rows do not split into blocks of {seg_len}")));
        }
        let denom = (seg_len * d) as f64;
        let data = tx
            .data()
            .chunks(seg_len * d)
            .map(|blk| {
                let mut acc = 0.0;
                for v in blk {
                    acc += v * v;
                }
                acc / denom
            })
            .collect();
        let out = Tensor::raw(vec![n / seg_len], data);
        let rg = self.rg(&[x]);
        self.push("segment_mean_square", out, Op::SegmentMeanSquare { x, seg_len }, rg)
    }

    /// Scalar `Σ_b weights[b]·x[b] / B` with constant weights.
    pub fn weighted_mean(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() != weights.len() {
            return Err(Error::dim("weighted_mean", format!("{} weights for {} values", weights.len(), tx.numel())));
        }
        let mut acc = 0.0;
        for (v, w) in tx.data().iter().zip(weights) {
            acc += w * v;
        }
        let out = Tensor::scalar(acc / weights.len() as f64);
        let rg = self.rg(&[x]);
        self.push("weighted_mean", out, Op::WeightedMean { x, weights: weights.to_vec() }, rg)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat", "nothing to concatenate"))?;
        let (n0, d0) = rank2("concat", self.value(*first))?;
        let mut shape = [n0, d0];
        for p in &parts[1..] {
            let (n, d) = rank2("concat", self.value(*p))?;
            match axis {
                Axis::Rows if d == d0 => shape[0] += n,
                Axis::Cols if n == n0 => shape[1] += d,
                _ => return Err(Error::dim("concat", format!("cannot join {n}×{d} onto {n0}×{d0} along {axis:?}"))),
            }
        }
        let mut data = Vec::with_capacity(shape[0] * shape[1]);
        match axis {
            Axis::Rows => parts.iter().for_each(|p| data.extend_from_slice(self.value(*p).data())),
            Axis::Cols => {
                for i in 0..n0 {
                    for p in parts {
                        data.extend_from_slice(self.value(*p).row(i));
                    }
                }
            }
        }
        let out = Tensor::raw(shape.to_vec(), data);
        let rg = self.rg(parts);
        self.push("concat", out, Op::Concat { axis, parts: parts.to_vec() }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (n, d) = rank2("slice_cols", tx)?;
        if len == 0 || start + len > d {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of {d}", start + len)));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        self.push("slice_cols", Tensor::raw(vec![n, len], data), Op::SliceCols { x, start }, rg)
    }

    fn attention_layout(&self, op: &'static str, q: Var, k: Var, v: Var, heads: usize, seg_len: usize) -> Result<HeadLayout> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape(op, tq, tk)?;
        same_shape(op, tq, tv)?;
        let (rows, width) = rank2(op, tq)?;
        if heads == 0 || width % heads != 0 {
            return Err(Error::dim(op, format!("width {width} not divisible by {heads} heads")));
        }
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Error::dim(op, format!("{rows} rows do not split into segments of {seg_len}")));
        }
        Ok(HeadLayout { rows, width, heads, seg_len })
    }

    /// Denominator-free linear attention, per segment and head.
    pub fn linear_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg_len: usize, scale: f64) -> Result<Var> {
        let hl = self.attention_layout("linear_attention", q, k, v, heads, seg_len)?;
        let data = kernels::linear_attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), hl, scale);
        let rg = self.rg(&[q, k, v]);
        let out = Tensor::raw(vec![hl.rows, hl.width], data);
        self.push("linear_attention", out, Op::LinearAttention { q, k, v, hl, scale }, rg)
    }

    /// Sliding-window softmax attention. Row `i` attends to rows of its segment
    /// whose `positions` entry is within `half_span` of its own.
    pub fn window_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seg_len: usize,
        positions: &[usize],
        half_span: usize,
    ) -> Result<Var> {
        let hl = self.attention_layout("window_attention", q, k, v, heads, seg_len)?;
        if positions.len() != hl.rows {
            return Err(Error::dim("window_attention", format!("{} positions for {} rows", positions.len(), hl.rows)));
        }
        let windows = kernels::window_rows(positions, seg_len, half_span);
        let data = kernels::windowed_softmax_attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), hl, &windows);
        let rg = self.rg(&[q, k, v]);
        let out = Tensor::raw(vec![hl.rows, hl.width], data);
        self.push("window_attention", out, Op::WindowAttention { q, k, v, hl, windows }, rg)
    }

    /// Full scaled dot-product attention over all pairs in each segment.
    pub fn softmax_attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seg_len: usize) -> Result<Var> {
        let hl = self.attention_layout("softmax_attention", q, k, v, heads, seg_len)?;
        let data = kernels::full_softmax_attention(self.value(q).data(), self.value(k).data(), self.value(v).data(), hl);
        let rg = self.rg(&[q, k, v]);
        let out = Tensor::raw(vec![hl.rows, hl.width], data);
        self.push("softmax_attention", out, Op::SoftmaxAttention { q, k, v, hl }, rg)
    }

    /// `out = g_glob ⊙ global + g_loc ⊙ local` where `gates[n × 2G]` holds `G`
    /// global gates followed by `G` local gates, each scaling a `d/G` column block.
    pub fn gated_sum(&mut self, gates: Var, global: Var, local: Var) -> Result<Var> {
        let (tg, ta, tb) = (self.value(gates), self.value(global), self.value(local));
        same_shape("gated_sum", ta, tb)?;
        let (n, d) = rank2("gated_sum", ta)?;
        let (gn, gw) = rank2("gated_sum", tg)?;
        let groups = gw / 2;
        if gn != n || gw % 2 != 0 || groups == 0 || d % groups != 0 {
            return Err(Error::dim("gated_sum", format!("gates {gn}×{gw} for {n}×{d} branches")));
        }
        let block = d / groups;
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let g = tg.row(i);
            for c in 0..d {
                let h = c / block;
                data.push(g[h] * ta.at(i, c) + g[groups + h] * tb.at(i, c));
            }
        }
        let rg = self.rg(&[gates, global, local]);
        self.push("gated_sum", Tensor::raw(vec![n, d], data), Op::GatedSum { gates, global, local, groups }, rg)
    }

    /// `x + dt[r]·f` row-wise; rows with `dt == 0` copy `x` bit for bit.
    pub fn euler_combine(&mut self, x: Var, f: Var, dt: &[f64]) -> Result<Var> {
        let (tx, tf) = (self.value(x), self.value(f));
        same_shape("euler_combine", tx, tf)?;
        let (n, d) = rank2("euler_combine", tx)?;
        if dt.len() != n {
            return Err(Error::dim("euler_combine", format!("{} steps for {n} rows", dt.len())));
        }
        let mut data = tx.data().to_vec();
        for (i, &h) in dt.iter().enumerate() {
            if h != 0.0 {
                for c in 0..d {
                    data[i * d + c] += h * tf.at(i, c);
                }
            }
        }
        let rg = self.rg(&[x, f]);
        self.push("euler_combine", Tensor::raw(vec![n, d], data), Op::EulerCombine { x, f, dt: dt.to_vec() }, rg)
    }

    /// Populates gradients of every node reachable from the scalar `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.nodes[output.0].grad = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else { continue };
            let contributions = self.vjp(idx, &g);
            self.nodes[idx].grad = Some(g);
            for (var, delta) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut self.nodes[var.0].grad, &delta);
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn vjp(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.value(v).data();
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|x| -x).collect())],
            Op::Mul(a, b) => {
                let da = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let db = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, b) => {
                let d = self.value(*b).numel();
                let mut db = vec![0.0; d];
                for row in g.chunks(d) {
                    db.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|x| x * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Sigmoid(a) => {
                let y = node.value.data();
                vec![(*a, g.iter().zip(y).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect())]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                let da = kernels::matmul_nt(g, tb.data(), m, n, k);
                let db = kernels::matmul_tn(ta.data(), g, m, k, n);
                vec![(*a, da), (*b, db)]
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.rows(), node.value.cols());
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[j * m + i] = g[i * n + j];
                    }
                }
                vec![(*a, da)]
            }
            Op::SoftmaxRows(a) => {
                let d = node.value.cols();
                let y = node.value.data();
                let mut da = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(d).zip(g.chunks(d)) {
                    let mut dotp = 0.0;
                    for (yi, gi) in yr.iter().zip(gr) {
                        dotp += yi * gi;
                    }
                    da.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dotp)));
                }
                vec![(*a, da)]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let gv = tg.data();
                let mut dx = Vec::with_capacity(tx.numel());
                let mut dg = vec![0.0; d];
                for ((xr, gr), &r) in tx.data().chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                    let mut s = 0.0;
                    for c in 0..d {
                        s += gv[c] * gr[c] * xr[c];
                        dg[c] += gr[c] * xr[c] * r;
                    }
                    let coef = r * r * r * s / d as f64;
                    dx.extend((0..d).map(|c| r * gv[c] * gr[c] - coef * xr[c]));
                }
                vec![(*x, dx), (*gain, dg)]
            }
            Op::Rope { x, cos, sin, head_dim } => {
                let d = node.value.cols();
                vec![(*x, rotate(g, d, *head_dim, cos, sin, -1.0))]
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let d = tx.cols();
                let mut dx = vec![0.0; tx.numel()];
                for (r, &i) in index.iter().enumerate() {
                    dx[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                }
                vec![(*x, dx)]
            }
            Op::ScatterRows { x, fill, index } => {
                let d = node.value.cols();
                let n = node.value.rows();
                let mut kept = vec![false; n];
                let mut dx = Vec::with_capacity(index.len() * d);
                for &i in index {
                    kept[i] = true;
                    dx.extend_from_slice(&g[i * d..(i + 1) * d]);
                }
                let mut df = vec![0.0; d];
                for i in (0..n).filter(|&i| !kept[i]) {
                    df.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, b)| *a += b);
                }
                vec![(*x, dx), (*fill, df)]
            }
            Op::MeanSquare(x) => {
                let tx = self.value(*x);
                let c = 2.0 * g[0] / tx.numel() as f64;
                vec![(*x, tx.data().iter().map(|v| c * v).collect())]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; self.value(*x).numel()])],
            Op::SegmentMeanSquare { x, seg_len } => {
                let tx = self.value(*x);
                let blk = seg_len * tx.cols();
                let dx = tx
                    .data()
                    .chunks(blk)
                    .zip(g)
                    .flat_map(|(chunk, gb)| chunk.iter().map(move |v| 2.0 * gb * v / blk as f64))
                    .collect();
                vec![(*x, dx)]
            }
            Op::WeightedMean { x, weights } => {
                let n = weights.len() as f64;
                vec![(*x, weights.iter().map(|w| g[0] * w / n).collect())]
            }
            Op::Concat { axis, parts } => {
                let total_cols = node.value.cols();
                let mut out = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for p in parts {
                    let tp = self.value(*p);
                    let dp = match axis {
                        Axis::Rows => {
                            let s = g[offset..offset + tp.numel()].to_vec();
                            offset += tp.numel();
                            s
                        }
                        Axis::Cols => {
                            let w = tp.cols();
                            let s = (0..tp.rows())
                                .flat_map(|i| g[i * total_cols + offset..i * total_cols + offset + w].iter().copied())
                                .collect();
                            offset += w;
                            s
                        }
                    };
                    out.push((*p, dp));
                }
                out
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (n, d) = (tx.rows(), tx.cols());
                let len = node.value.cols();
                let mut dx = vec![0.0; n * d];
                for i in 0..n {
                    dx[i * d + start..i * d + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(*x, dx)]
            }
            Op::LinearAttention { q, k, v, hl, scale } => {
                let (dq, dk, dv) = kernels::linear_attention_backward(val(*q), val(*k), val(*v), g, *hl, *scale);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::WindowAttention { q, k, v, hl, windows } => {
                let (dq, dk, dv) = kernels::windowed_softmax_attention_backward(val(*q), val(*k), val(*v), g, *hl, windows);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::SoftmaxAttention { q, k, v, hl } => {
                let (dq, dk, dv) = kernels::full_softmax_attention_backward(val(*q), val(*k), val(*v), g, *hl);
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::GatedSum { gates, global, local, groups } => {
                let (tg, ta, tb) = (self.value(*gates), self.value(*global), self.value(*local));
                let (n, d) = (ta.rows(), ta.cols());
                let block = d / groups;
                let mut dgates = vec![0.0; n * 2 * groups];
                let mut da = vec![0.0; n * d];
                let mut db = vec![0.0; n * d];
                for i in 0..n {
                    let gr = tg.row(i);
                    for c in 0..d {
                        let h = c / block;
                        let up = g[i * d + c];
                        da[i * d + c] = gr[h] * up;
                        db[i * d + c] = gr[groups + h] * up;
                        dgates[i * 2 * groups + h] += up * ta.at(i, c);
                        dgates[i * 2 * groups + groups + h] += up * tb.at(i, c);
                    }
                }
                vec![(*gates, dgates), (*global, da), (*local, db)]
            }
            Op::EulerCombine { x, f, dt } => {
                let d = node.value.cols();
                let df = g.chunks(d).zip(dt).flat_map(|(row, h)| row.iter().map(move |v| v * h)).collect();
                vec![(*x, g.to_vec()), (*f, df)]
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Applies the per-row pair rotations; `sign = -1` rotates backwards.
fn rotate(x: &[f64], width: usize, head_dim: usize, cos: &[f64], sin: &[f64], sign: f64) -> Vec<f64> {
    let half = head_dim / 2;
    let mut out = x.to_vec();
    for (r, row) in out.chunks_mut(width).enumerate() {
        let (c, s) = (&cos[r * half..(r + 1) * half], &sin[r * half..(r + 1) * half]);
        for head in row.chunks_mut(head_dim) {
            for i in 0..half {
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                let sn = sign * s[i];
                head[2 * i] = a * c[i] - b * sn;
                head[2 * i + 1] = a * sn + b * c[i];
            }
        }
    }
    out
}
