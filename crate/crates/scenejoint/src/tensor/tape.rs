//! Reverse-mode tape over dense tensors.
//!
//! Operations append nodes in topological order; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients into per-node buffers. Nodes
//! that do not lie on a path to the loss keep an exactly-zero gradient.
//!
//! Reductions whose operand order depends on token order (attention value
//! mixing, token pooling, softmax denominators) accumulate their addends in
//! value-sorted order, which makes forward results invariant to input row
//! permutations at the bit level.

use super::{Tensor, TensorError};

pub const LAYER_NORM_EPS: f64 = 1e-5;
const HUBER_DELTA: f64 = 1.0;
const CONV_KERNEL: usize = 3;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    #[inline]
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// One affine layer of an MLP: weights `[Din, Dout]`, bias `[Dout]`.
#[derive(Debug, Clone, Copy)]
pub struct MlpLayer {
    pub weight: NodeId,
    pub bias: NodeId,
    pub activation: Activation,
}

/// Learned projections for multi-head attention.
#[derive(Debug, Clone, Copy)]
pub struct AttentionProjections {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, sorted: bool },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Relu { a: NodeId },
    Scale { a: NodeId, factor: f32 },
    Softmax { a: NodeId },
    LayerNorm { x: NodeId, gain: NodeId, shift: NodeId },
    GatherRows { a: NodeId, indices: Vec<usize> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { a: NodeId, start: usize, len: usize },
    Reshape { a: NodeId },
    Sum { a: NodeId },
    SegmentMax { a: NodeId, offsets: Vec<usize> },
    Conv1dSame { x: NodeId, w: NodeId, b: NodeId, seg_len: usize },
    SmoothL1 { pred: NodeId, target: Tensor, mask: Tensor },
    SoftmaxXent { logits: NodeId, target: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients produced by one backward pass, indexed by node id.
#[derive(Debug)]
pub struct GradStore {
    grads: Vec<Option<Vec<f32>>>,
}

impl GradStore {
    /// Gradient buffer for `id`; `None` means the node is not on any path to
    /// the loss (its gradient is exactly zero).
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    /// Gradient of `id` as a dense slice, treating absent buffers as zero.
    pub fn dense(&self, id: NodeId, len: usize) -> Vec<f32> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; len],
        }
    }
}

/// Sum of already-sorted f64 addends; sorting makes the result independent of
/// the order the addends were produced in.
#[inline]
fn sorted_sum(buf: &mut Vec<f64>) -> f64 {
    buf.sort_unstable_by(f64::total_cmp);
    buf.iter().sum()
}

pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch { op, detail }
    }

    fn require_rank2(&self, op: &'static str, id: NodeId) -> Result<(usize, usize), TensorError> {
        let s = self.value(id).shape();
        if s.len() != 2 {
            return Err(Self::shape_err(op, format!("expected rank 2, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    /// Records an input value. Leaves are the only nodes gradients stop at.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_inner(a, b, false)
    }

    /// Matrix product whose inner sums accumulate in value-sorted order.
    ///
    /// Use when the contracted axis ranges over scene tokens, so that the
    /// result does not depend on token ordering.
    pub fn matmul_sorted(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.matmul_inner(a, b, true)
    }

    fn matmul_inner(&mut self, a: NodeId, b: NodeId, sorted: bool) -> Result<NodeId, TensorError> {
        let (m, ka) = self.require_rank2("matmul", a)?;
        let (kb, n) = self.require_rank2("matmul", b)?;
        if ka != kb {
            return Err(Self::shape_err(
                "matmul",
                format!("[{m},{ka}] x [{kb},{n}]"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; m * n];
        let mut buf: Vec<f64> = Vec::with_capacity(ka);
        for i in 0..m {
            for j in 0..n {
                if sorted {
                    buf.clear();
                    for k in 0..ka {
                        buf.push(av[i * ka + k] as f64 * bv[k * n + j] as f64);
                    }
                    out[i * n + j] = sorted_sum(&mut buf) as f32;
                } else {
                    let mut acc = 0.0f64;
                    for k in 0..ka {
                        acc += av[i * ka + k] as f64 * bv[k * n + j] as f64;
                    }
                    out[i * n + j] = acc as f32;
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, sorted }, value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (m, n) = self.require_rank2("transpose", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let value = Tensor::from_vec(&[n, m], out)?;
        Ok(self.push(Op::Transpose { a }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn elementwise_pair(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<NodeId, TensorError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Self::shape_err(
                name,
                format!(
                    "{:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_vec(&shape, data)?;
        Ok(self.push(op, value))
    }

    /// Adds a `[D]` bias to every row of a `[R, D]` tensor.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        let (r, d) = self.require_rank2("add_bias", a)?;
        let bs = self.value(bias).shape();
        if bs != [d] {
            return Err(Self::shape_err(
                "add_bias",
                format!("rows of [{r},{d}] vs bias {bs:?}"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut out = vec![0.0f32; r * d];
        for i in 0..r {
            for j in 0..d {
                out[i * d + j] = av[i * d + j] + bv[j];
            }
        }
        let value = Tensor::from_vec(&[r, d], out)?;
        Ok(self.push(Op::AddBias { a, bias }, value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_vec(&shape, data).expect("same shape");
        self.push(Op::Relu { a }, value)
    }

    pub fn scale(&mut self, a: NodeId, factor: f32) -> NodeId {
        let shape = self.value(a).shape().to_vec();
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let value = Tensor::from_vec(&shape, data).expect("same shape");
        self.push(Op::Scale { a, factor }, value)
    }

    /// Row-wise softmax of a `[R, C]` tensor. Rows sum to 1.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let (r, c) = self.require_rank2("softmax", a)?;
        let av = self.value(a).data();
        let mut out = vec![0.0f32; r * c];
        let mut buf: Vec<f64> = Vec::with_capacity(c);
        for i in 0..r {
            let row = &av[i * c..(i + 1) * c];
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            buf.clear();
            for &v in row {
                buf.push((v as f64 - max).exp());
            }
            let exps: Vec<f64> = buf.clone();
            let denom = sorted_sum(&mut buf);
            for j in 0..c {
                out[i * c + j] = (exps[j] / denom) as f32;
            }
        }
        let value = Tensor::from_vec(&[r, c], out)?;
        Ok(self.push(Op::Softmax { a }, value))
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
    ) -> Result<NodeId, TensorError> {
        let (r, d) = self.require_rank2("layer_norm", x)?;
        if self.value(gain).shape() != [d] || self.value(shift).shape() != [d] {
            return Err(Self::shape_err(
                "layer_norm",
                format!(
                    "rows of [{r},{d}] vs gain {:?} shift {:?}",
                    self.value(gain).shape(),
                    self.value(shift).shape()
                ),
            ));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let mut out = vec![0.0f32; r * d];
        for i in 0..r {
            let row = &xv[i * d..(i + 1) * d];
            let (mean, rstd) = row_stats(row);
            for j in 0..d {
                let xhat = (row[j] as f64 - mean) * rstd;
                out[i * d + j] = (xhat * gv[j] as f64 + sv[j] as f64) as f32;
            }
        }
        let value = Tensor::from_vec(&[r, d], out)?;
        Ok(self.push(Op::LayerNorm { x, gain, shift }, value))
    }

    /// Picks rows of a `[R, D]` tensor by index; duplicates allowed.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let (r, d) = self.require_rank2("gather_rows", a)?;
        for &ix in indices {
            if ix >= r {
                return Err(TensorError::IndexOutOfRange { index: ix, len: r });
            }
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &ix in indices {
            out.extend_from_slice(&av[ix * d..(ix + 1) * d]);
        }
        let value = Tensor::from_vec(&[indices.len(), d], out)?;
        Ok(self.push(
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// Concatenates rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        if parts.is_empty() {
            return Err(Self::shape_err("concat_cols", "no parts".into()));
        }
        let (r, _) = self.require_rank2("concat_cols", parts[0])?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.require_rank2("concat_cols", p)?;
            if pr != r {
                return Err(Self::shape_err(
                    "concat_cols",
                    format!("row counts differ: {pr} vs {r}"),
                ));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                let pc = self.value(p).cols();
                out.extend_from_slice(&self.value(p).data()[i * pc..(i + 1) * pc]);
            }
        }
        let value = Tensor::from_vec(&[r, total], out)?;
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            value,
        ))
    }

    /// Contiguous column slice `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(
        &mut self,
        a: NodeId,
        start: usize,
        len: usize,
    ) -> Result<NodeId, TensorError> {
        let (r, c) = self.require_rank2("slice_cols", a)?;
        if start + len > c {
            return Err(Self::shape_err(
                "slice_cols",
                format!("[{start}, {}) of {c} cols", start + len),
            ));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&av[i * c + start..i * c + start + len]);
        }
        let value = Tensor::from_vec(&[r, len], out)?;
        Ok(self.push(Op::SliceCols { a, start, len }, value))
    }

    /// Reinterprets the value under a new shape of equal length.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let value = self.value(a).reshaped(shape)?;
        Ok(self.push(Op::Reshape { a }, value))
    }

    /// Sum of all elements, as a `[1]` scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.value(a).data() {
            acc += v as f64;
        }
        self.push(Op::Sum { a }, Tensor::scalar(acc as f32))
    }

    /// Column-wise max over row segments.
    ///
    /// `offsets` are segment boundaries (`offsets[0] == 0`, strictly
    /// increasing, last equals the row count); the output has one row per
    /// segment. Ties route the gradient to the lowest row index.
    pub fn segment_max(&mut self, a: NodeId, offsets: &[usize]) -> Result<NodeId, TensorError> {
        let (r, d) = self.require_rank2("segment_max", a)?;
        if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != r {
            return Err(Self::shape_err(
                "segment_max",
                format!("offsets {offsets:?} for {r} rows"),
            ));
        }
        for w in offsets.windows(2) {
            if w[1] <= w[0] {
                return Err(Self::shape_err(
                    "segment_max",
                    format!("non-increasing offsets {offsets:?}"),
                ));
            }
        }
        let segments = offsets.len() - 1;
        let av = self.value(a).data();
        let mut out = vec![f32::NEG_INFINITY; segments * d];
        for s in 0..segments {
            for row in offsets[s]..offsets[s + 1] {
                for j in 0..d {
                    let v = av[row * d + j];
                    if v > out[s * d + j] {
                        out[s * d + j] = v;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[segments, d], out)?;
        Ok(self.push(
            Op::SegmentMax {
                a,
                offsets: offsets.to_vec(),
            },
            value,
        ))
    }

    /// Same-padded 1D convolution over time, kernel 3, stride 1, applied
    /// independently to each length-`seg_len` row segment.
    ///
    /// `x` is `[S·seg_len, Din]`, `w` is `[3·Din, Dout]`, `b` is `[Dout]`.
    pub fn conv1d_same(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        seg_len: usize,
    ) -> Result<NodeId, TensorError> {
        let (rows, din) = self.require_rank2("conv1d_same", x)?;
        let (wr, dout) = self.require_rank2("conv1d_same", w)?;
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Self::shape_err(
                "conv1d_same",
                format!("{rows} rows not divisible by segment length {seg_len}"),
            ));
        }
        if wr != CONV_KERNEL * din {
            return Err(Self::shape_err(
                "conv1d_same",
                format!("weight rows {wr} vs kernel*Din {}", CONV_KERNEL * din),
            ));
        }
        if self.value(b).shape() != [dout] {
            return Err(Self::shape_err(
                "conv1d_same",
                format!("bias {:?} vs Dout {dout}", self.value(b).shape()),
            ));
        }
        let segments = rows / seg_len;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0f32; rows * dout];
        for s in 0..segments {
            let base = s * seg_len;
            for t in 0..seg_len {
                for o in 0..dout {
                    let mut acc = bv[o] as f64;
                    for (tap, dt) in (-1i64..=1).enumerate() {
                        let src = t as i64 + dt;
                        if src < 0 || src >= seg_len as i64 {
                            continue;
                        }
                        let row = base + src as usize;
                        for i in 0..din {
                            acc += xv[row * din + i] as f64
                                * wv[(tap * din + i) * dout + o] as f64;
                        }
                    }
                    out[(base + t) * dout + o] = acc as f32;
                }
            }
        }
        let value = Tensor::from_vec(&[rows, dout], out)?;
        Ok(self.push(Op::Conv1dSame { x, w, b, seg_len }, value))
    }

    /// Masked smooth-L1 (Huber, threshold 1) between `pred` and a constant
    /// target, averaged over elements whose mask is nonzero.
    pub fn smooth_l1(
        &mut self,
        pred: NodeId,
        target: &Tensor,
        mask: &Tensor,
    ) -> Result<NodeId, TensorError> {
        let shape = self.value(pred).shape();
        if target.shape() != shape || mask.shape() != shape {
            return Err(Self::shape_err(
                "smooth_l1",
                format!(
                    "pred {shape:?} vs target {:?} vs mask {:?}",
                    target.shape(),
                    mask.shape()
                ),
            ));
        }
        let count = mask.data().iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(TensorError::EmptyMask);
        }
        let pv = self.value(pred).data();
        let mut acc = 0.0f64;
        for i in 0..pv.len() {
            if mask.data()[i] == 0.0 {
                continue;
            }
            let e = pv[i] as f64 - target.data()[i] as f64;
            acc += huber(e);
        }
        let value = Tensor::scalar((acc / count as f64) as f32);
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                target: target.clone(),
                mask: mask.clone(),
            },
            value,
        ))
    }

    /// Cross-entropy of a `[K]` logit vector against a hard target index.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        target: usize,
    ) -> Result<NodeId, TensorError> {
        let s = self.value(logits).shape();
        if s.len() != 1 {
            return Err(Self::shape_err(
                "softmax_cross_entropy",
                format!("expected rank 1 logits, got {s:?}"),
            ));
        }
        let k = s[0];
        if target >= k {
            return Err(TensorError::IndexOutOfRange {
                index: target,
                len: k,
            });
        }
        let lv = self.value(logits).data();
        let max = lv.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
        let mut denom = 0.0f64;
        for &v in lv {
            denom += (v as f64 - max).exp();
        }
        let loss = max + denom.ln() - lv[target] as f64;
        let value = Tensor::scalar(loss as f32);
        Ok(self.push(Op::SoftmaxXent { logits, target }, value))
    }

    /// Chains affine layers with optional ReLU activations.
    pub fn mlp_forward(&mut self, x: NodeId, layers: &[MlpLayer]) -> Result<NodeId, TensorError> {
        let mut h = x;
        for layer in layers {
            h = self.matmul(h, layer.weight)?;
            h = self.add_bias(h, layer.bias)?;
            if layer.activation == Activation::Relu {
                h = self.relu(h);
            }
        }
        Ok(h)
    }

    /// Scaled dot-product multi-head attention with learned projections.
    ///
    /// `query` is `[Nq, D]`, `key`/`value` are `[Nk, D]`; the output is
    /// `[Nq, D]`. Reductions over keys use value-sorted accumulation.
    pub fn multihead_attention(
        &mut self,
        query: NodeId,
        key: NodeId,
        value: NodeId,
        heads: usize,
        proj: &AttentionProjections,
    ) -> Result<NodeId, TensorError> {
        let (_, d) = self.require_rank2("multihead_attention", query)?;
        let (nk, dk) = self.require_rank2("multihead_attention", key)?;
        let (nv, dv) = self.require_rank2("multihead_attention", value)?;
        if dk != d || dv != d || nk != nv {
            return Err(Self::shape_err(
                "multihead_attention",
                format!("query [*,{d}] vs key [{nk},{dk}] vs value [{nv},{dv}]"),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::HeadsIndivisible { dim: d, heads });
        }
        let dh = d / heads;

        let q = self.matmul(query, proj.wq)?;
        let q = self.add_bias(q, proj.bq)?;
        let k = self.matmul(key, proj.wk)?;
        let k = self.add_bias(k, proj.bk)?;
        let v = self.matmul(value, proj.wv)?;
        let v = self.add_bias(v, proj.bv)?;

        let mut head_outputs = Vec::with_capacity(heads);
        let scale = 1.0 / (dh as f32).sqrt();
        for h in 0..heads {
            let qh = self.slice_cols(q, h * dh, dh)?;
            let kh = self.slice_cols(k, h * dh, dh)?;
            let vh = self.slice_cols(v, h * dh, dh)?;
            let kt = self.transpose(kh)?;
            let scores = self.matmul(qh, kt)?;
            let scores = self.scale(scores, scale);
            let weights = self.softmax(scores)?;
            let mixed = self.matmul_sorted(weights, vh)?;
            head_outputs.push(mixed);
        }
        let merged = self.concat_cols(&head_outputs)?;
        let out = self.matmul(merged, proj.wo)?;
        self.add_bias(out, proj.bo)
    }

    /// Reverse-mode gradient accumulation from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore, TensorError> {
        if self.value(loss).shape() != [1] {
            return Err(TensorError::NonScalarLoss(
                self.value(loss).shape().to_vec(),
            ));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.accumulate(&self.nodes[id].op, id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(GradStore { grads })
    }

    fn grad_buf<'g>(
        &self,
        grads: &'g mut Vec<Option<Vec<f32>>>,
        id: NodeId,
    ) -> &'g mut Vec<f32> {
        let len = self.nodes[id.0].value.len();
        grads[id.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn accumulate(&self, op: &Op, id: usize, gout: &[f32], grads: &mut Vec<Option<Vec<f32>>>) {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, .. } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let av: Vec<f32> = self.value(*a).data().to_vec();
                let bv: Vec<f32> = self.value(*b).data().to_vec();
                {
                    let ga = self.grad_buf(grads, *a);
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0f64;
                            for j in 0..n {
                                acc += gout[i * n + j] as f64 * bv[l * n + j] as f64;
                            }
                            ga[i * k + l] += acc as f32;
                        }
                    }
                }
                {
                    let gb = self.grad_buf(grads, *b);
                    for l in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0f64;
                            for i in 0..m {
                                acc += av[i * k + l] as f64 * gout[i * n + j] as f64;
                            }
                            gb[l * n + j] += acc as f32;
                        }
                    }
                }
            }
            Op::Transpose { a } => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let ga = self.grad_buf(grads, *a);
                for i in 0..m {
                    for j in 0..n {
                        ga[i * n + j] += gout[j * m + i];
                    }
                }
            }
            Op::Add { a, b } => {
                {
                    let ga = self.grad_buf(grads, *a);
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o;
                    }
                }
                let gb = self.grad_buf(grads, *b);
                for (g, &o) in gb.iter_mut().zip(gout) {
                    *g += o;
                }
            }
            Op::Sub { a, b } => {
                {
                    let ga = self.grad_buf(grads, *a);
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o;
                    }
                }
                let gb = self.grad_buf(grads, *b);
                for (g, &o) in gb.iter_mut().zip(gout) {
                    *g -= o;
                }
            }
            Op::Mul { a, b } => {
                let av: Vec<f32> = self.value(*a).data().to_vec();
                let bv: Vec<f32> = self.value(*b).data().to_vec();
                {
                    let ga = self.grad_buf(grads, *a);
                    for i in 0..gout.len() {
                        ga[i] += gout[i] * bv[i];
                    }
                }
                let gb = self.grad_buf(grads, *b);
                for i in 0..gout.len() {
                    gb[i] += gout[i] * av[i];
                }
            }
            Op::AddBias { a, bias } => {
                let (r, d) = (self.value(*a).rows(), self.value(*a).cols());
                {
                    let ga = self.grad_buf(grads, *a);
                    for (g, &o) in ga.iter_mut().zip(gout) {
                        *g += o;
                    }
                }
                let gb = self.grad_buf(grads, *bias);
                for j in 0..d {
                    let mut acc = 0.0f64;
                    for i in 0..r {
                        acc += gout[i * d + j] as f64;
                    }
                    gb[j] += acc as f32;
                }
            }
            Op::Relu { a } => {
                let av: Vec<f32> = self.value(*a).data().to_vec();
                let ga = self.grad_buf(grads, *a);
                for i in 0..gout.len() {
                    if av[i] > 0.0 {
                        ga[i] += gout[i];
                    }
                }
            }
            Op::Scale { a, factor } => {
                let ga = self.grad_buf(grads, *a);
                for (g, &o) in ga.iter_mut().zip(gout) {
                    *g += o * factor;
                }
            }
            Op::Softmax { a } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let yv: Vec<f32> = self.nodes[id].value.data().to_vec();
                let ga = self.grad_buf(grads, *a);
                for i in 0..r {
                    let mut dot = 0.0f64;
                    for j in 0..c {
                        dot += gout[i * c + j] as f64 * yv[i * c + j] as f64;
                    }
                    for j in 0..c {
                        ga[i * c + j] +=
                            (yv[i * c + j] as f64 * (gout[i * c + j] as f64 - dot)) as f32;
                    }
                }
            }
            Op::LayerNorm { x, gain, shift } => {
                let (r, d) = (self.value(*x).rows(), self.value(*x).cols());
                let xv: Vec<f32> = self.value(*x).data().to_vec();
                let gv: Vec<f32> = self.value(*gain).data().to_vec();
                {
                    let gx = self.grad_buf(grads, *x);
                    for i in 0..r {
                        let row = &xv[i * d..(i + 1) * d];
                        let (mean, rstd) = row_stats(row);
                        let mut mean_dxhat = 0.0f64;
                        let mut mean_dxhat_xhat = 0.0f64;
                        for j in 0..d {
                            let xhat = (row[j] as f64 - mean) * rstd;
                            let dxhat = gout[i * d + j] as f64 * gv[j] as f64;
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                        }
                        mean_dxhat /= d as f64;
                        mean_dxhat_xhat /= d as f64;
                        for j in 0..d {
                            let xhat = (row[j] as f64 - mean) * rstd;
                            let dxhat = gout[i * d + j] as f64 * gv[j] as f64;
                            gx[i * d + j] +=
                                (rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)) as f32;
                        }
                    }
                }
                {
                    let gg = self.grad_buf(grads, *gain);
                    for j in 0..d {
                        let mut acc = 0.0f64;
                        for i in 0..r {
                            let row = &xv[i * d..(i + 1) * d];
                            let (mean, rstd) = row_stats(row);
                            let xhat = (row[j] as f64 - mean) * rstd;
                            acc += gout[i * d + j] as f64 * xhat;
                        }
                        gg[j] += acc as f32;
                    }
                }
                let gs = self.grad_buf(grads, *shift);
                for j in 0..d {
                    let mut acc = 0.0f64;
                    for i in 0..r {
                        acc += gout[i * d + j] as f64;
                    }
                    gs[j] += acc as f32;
                }
            }
            Op::GatherRows { a, indices } => {
                let d = self.value(*a).cols();
                let ga = self.grad_buf(grads, *a);
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        ga[ix * d + j] += gout[r * d + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let r = self.nodes[id].value.rows();
                let total = self.nodes[id].value.cols();
                let mut start = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    let gp = self.grad_buf(grads, p);
                    for i in 0..r {
                        for j in 0..pc {
                            gp[i * pc + j] += gout[i * total + start + j];
                        }
                    }
                    start += pc;
                }
            }
            Op::SliceCols { a, start, len } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let ga = self.grad_buf(grads, *a);
                for i in 0..r {
                    for j in 0..*len {
                        ga[i * c + start + j] += gout[i * len + j];
                    }
                }
            }
            Op::Reshape { a } => {
                let ga = self.grad_buf(grads, *a);
                for (g, &o) in ga.iter_mut().zip(gout) {
                    *g += o;
                }
            }
            Op::Sum { a } => {
                let ga = self.grad_buf(grads, *a);
                for g in ga.iter_mut() {
                    *g += gout[0];
                }
            }
            Op::SegmentMax { a, offsets } => {
                let d = self.value(*a).cols();
                let av: Vec<f32> = self.value(*a).data().to_vec();
                let ga = self.grad_buf(grads, *a);
                for s in 0..offsets.len() - 1 {
                    for j in 0..d {
                        let mut best_row = offsets[s];
                        let mut best = av[offsets[s] * d + j];
                        for row in offsets[s] + 1..offsets[s + 1] {
                            if av[row * d + j] > best {
                                best = av[row * d + j];
                                best_row = row;
                            }
                        }
                        ga[best_row * d + j] += gout[s * d + j];
                    }
                }
            }
            Op::Conv1dSame { x, w, b, seg_len } => {
                let (rows, din) = (self.value(*x).rows(), self.value(*x).cols());
                let dout = self.value(*w).cols();
                let segments = rows / seg_len;
                let xv: Vec<f32> = self.value(*x).data().to_vec();
                let wv: Vec<f32> = self.value(*w).data().to_vec();
                {
                    let gx = self.grad_buf(grads, *x);
                    for s in 0..segments {
                        let base = s * seg_len;
                        for t in 0..*seg_len {
                            for (tap, dt) in (-1i64..=1).enumerate() {
                                let src = t as i64 + dt;
                                if src < 0 || src >= *seg_len as i64 {
                                    continue;
                                }
                                let row = base + src as usize;
                                for i in 0..din {
                                    let mut acc = 0.0f64;
                                    for o in 0..dout {
                                        acc += gout[(base + t) * dout + o] as f64
                                            * wv[(tap * din + i) * dout + o] as f64;
                                    }
                                    gx[row * din + i] += acc as f32;
                                }
                            }
                        }
                    }
                }
                {
                    let gw = self.grad_buf(grads, *w);
                    for (tap, dt) in (-1i64..=1).enumerate() {
                        for i in 0..din {
                            for o in 0..dout {
                                let mut acc = 0.0f64;
                                for s in 0..segments {
                                    let base = s * seg_len;
                                    for t in 0..*seg_len {
                                        let src = t as i64 + dt;
                                        if src < 0 || src >= *seg_len as i64 {
                                            continue;
                                        }
                                        acc += xv[(base + src as usize) * din + i] as f64
                                            * gout[(base + t) * dout + o] as f64;
                                    }
                                }
                                gw[(tap * din + i) * dout + o] += acc as f32;
                            }
                        }
                    }
                }
                let gb = self.grad_buf(grads, *b);
                for o in 0..dout {
                    let mut acc = 0.0f64;
                    for row in 0..rows {
                        acc += gout[row * dout + o] as f64;
                    }
                    gb[o] += acc as f32;
                }
            }
            Op::SmoothL1 { pred, target, mask } => {
                let pv: Vec<f32> = self.value(*pred).data().to_vec();
                let count = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
                let gp = self.grad_buf(grads, *pred);
                for i in 0..pv.len() {
                    if mask.data()[i] == 0.0 {
                        continue;
                    }
                    let e = pv[i] as f64 - target.data()[i] as f64;
                    gp[i] += (gout[0] as f64 * huber_grad(e) / count) as f32;
                }
            }
            Op::SoftmaxXent { logits, target } => {
                let lv: Vec<f32> = self.value(*logits).data().to_vec();
                let max = lv.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
                let mut denom = 0.0f64;
                for &v in &lv {
                    denom += (v as f64 - max).exp();
                }
                let gl = self.grad_buf(grads, *logits);
                for j in 0..lv.len() {
                    let p = (lv[j] as f64 - max).exp() / denom;
                    let delta = if j == *target { 1.0 } else { 0.0 };
                    gl[j] += (gout[0] as f64 * (p - delta)) as f32;
                }
            }
        }
    }

    /// Re-evaluates the recorded graph in f64 with one leaf overridden,
    /// returning the scalar value of `target`.
    ///
    /// Forward-only; used by finite-difference gradient checks, which need
    /// more precision than the f32 pipeline to resolve the stated tolerances.
    pub fn eval_scalar_f64(
        &self,
        target: NodeId,
        override_leaf: NodeId,
        override_data: &[f64],
    ) -> Result<f64, TensorError> {
        if self.value(target).shape() != [1] {
            return Err(TensorError::NonScalarLoss(
                self.value(target).shape().to_vec(),
            ));
        }
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(target.0 + 1);
        for id in 0..=target.0 {
            let node = &self.nodes[id];
            let v = if id == override_leaf.0 {
                if override_data.len() != node.value.len() {
                    return Err(TensorError::LengthMismatch {
                        len: override_data.len(),
                        shape: node.value.shape().to_vec(),
                    });
                }
                override_data.to_vec()
            } else {
                self.forward_f64(node, &values)
            };
            values.push(v);
        }
        Ok(values[target.0][0])
    }

    fn forward_f64(&self, node: &Node, values: &[Vec<f64>]) -> Vec<f64> {
        let val = |id: NodeId| &values[id.0];
        match &node.op {
            Op::Leaf => node.value.data().iter().map(|&v| v as f64).collect(),
            Op::MatMul { a, b, sorted } => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let av = val(*a);
                let bv = val(*b);
                let mut out = vec![0.0f64; m * n];
                let mut buf: Vec<f64> = Vec::with_capacity(k);
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = if *sorted {
                            buf.clear();
                            for l in 0..k {
                                buf.push(av[i * k + l] * bv[l * n + j]);
                            }
                            sorted_sum(&mut buf)
                        } else {
                            let mut acc = 0.0;
                            for l in 0..k {
                                acc += av[i * k + l] * bv[l * n + j];
                            }
                            acc
                        };
                    }
                }
                out
            }
            Op::Transpose { a } => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                let av = val(*a);
                let mut out = vec![0.0f64; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[j * m + i] = av[i * n + j];
                    }
                }
                out
            }
            Op::Add { a, b } => val(*a).iter().zip(val(*b)).map(|(x, y)| x + y).collect(),
            Op::Sub { a, b } => val(*a).iter().zip(val(*b)).map(|(x, y)| x - y).collect(),
            Op::Mul { a, b } => val(*a).iter().zip(val(*b)).map(|(x, y)| x * y).collect(),
            Op::AddBias { a, bias } => {
                let (r, d) = (self.value(*a).rows(), self.value(*a).cols());
                let av = val(*a);
                let bv = val(*bias);
                let mut out = vec![0.0f64; r * d];
                for i in 0..r {
                    for j in 0..d {
                        out[i * d + j] = av[i * d + j] + bv[j];
                    }
                }
                out
            }
            Op::Relu { a } => val(*a).iter().map(|&x| x.max(0.0)).collect(),
            Op::Scale { a, factor } => val(*a).iter().map(|&x| x * *factor as f64).collect(),
            Op::Softmax { a } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let av = val(*a);
                let mut out = vec![0.0f64; r * c];
                for i in 0..r {
                    let row = &av[i * c..(i + 1) * c];
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let denom: f64 = exps.iter().sum();
                    for j in 0..c {
                        out[i * c + j] = exps[j] / denom;
                    }
                }
                out
            }
            Op::LayerNorm { x, gain, shift } => {
                let (r, d) = (self.value(*x).rows(), self.value(*x).cols());
                let xv = val(*x);
                let gv = val(*gain);
                let sv = val(*shift);
                let mut out = vec![0.0f64; r * d];
                for i in 0..r {
                    let row = &xv[i * d..(i + 1) * d];
                    let mean: f64 = row.iter().sum::<f64>() / d as f64;
                    let var: f64 =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    for j in 0..d {
                        out[i * d + j] = (row[j] - mean) * rstd * gv[j] + sv[j];
                    }
                }
                out
            }
            Op::GatherRows { a, indices } => {
                let d = self.value(*a).cols();
                let av = val(*a);
                let mut out = Vec::with_capacity(indices.len() * d);
                for &ix in indices {
                    out.extend_from_slice(&av[ix * d..(ix + 1) * d]);
                }
                out
            }
            Op::ConcatCols { parts } => {
                let r = node.value.rows();
                let mut out = Vec::with_capacity(node.value.len());
                for i in 0..r {
                    for &p in parts {
                        let pc = self.value(p).cols();
                        out.extend_from_slice(&val(p)[i * pc..(i + 1) * pc]);
                    }
                }
                out
            }
            Op::SliceCols { a, start, len } => {
                let (r, c) = (self.value(*a).rows(), self.value(*a).cols());
                let av = val(*a);
                let mut out = Vec::with_capacity(r * len);
                for i in 0..r {
                    out.extend_from_slice(&av[i * c + start..i * c + start + len]);
                }
                out
            }
            Op::Reshape { a } => val(*a).clone(),
            Op::Sum { a } => vec![val(*a).iter().sum()],
            Op::SegmentMax { a, offsets } => {
                let d = self.value(*a).cols();
                let av = val(*a);
                let segments = offsets.len() - 1;
                let mut out = vec![f64::NEG_INFINITY; segments * d];
                for s in 0..segments {
                    for row in offsets[s]..offsets[s + 1] {
                        for j in 0..d {
                            if av[row * d + j] > out[s * d + j] {
                                out[s * d + j] = av[row * d + j];
                            }
                        }
                    }
                }
                out
            }
            Op::Conv1dSame { x, w, b, seg_len } => {
                let (rows, din) = (self.value(*x).rows(), self.value(*x).cols());
                let dout = self.value(*w).cols();
                let segments = rows / seg_len;
                let xv = val(*x);
                let wv = val(*w);
                let bv = val(*b);
                let mut out = vec![0.0f64; rows * dout];
                for s in 0..segments {
                    let base = s * seg_len;
                    for t in 0..*seg_len {
                        for o in 0..dout {
                            let mut acc = bv[o];
                            for (tap, dt) in (-1i64..=1).enumerate() {
                                let src = t as i64 + dt;
                                if src < 0 || src >= *seg_len as i64 {
                                    continue;
                                }
                                let row = base + src as usize;
                                for i in 0..din {
                                    acc += xv[row * din + i] * wv[(tap * din + i) * dout + o];
                                }
                            }
                            out[(base + t) * dout + o] = acc;
                        }
                    }
                }
                out
            }
            Op::SmoothL1 { pred, target, mask } => {
                let pv = val(*pred);
                let count = mask.data().iter().filter(|&&m| m != 0.0).count() as f64;
                let mut acc = 0.0f64;
                for i in 0..pv.len() {
                    if mask.data()[i] == 0.0 {
                        continue;
                    }
                    acc += huber(pv[i] - target.data()[i] as f64);
                }
                vec![acc / count]
            }
            Op::SoftmaxXent { logits, target } => {
                let lv = val(*logits);
                let max = lv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = lv.iter().map(|&v| (v - max).exp()).sum();
                vec![max + denom.ln() - lv[*target]]
            }
        }
    }
}

#[inline]
fn huber(e: f64) -> f64 {
    if e.abs() < HUBER_DELTA {
        0.5 * e * e
    } else {
        e.abs() - 0.5
    }
}

#[inline]
fn huber_grad(e: f64) -> f64 {
    if e.abs() < HUBER_DELTA {
        e
    } else {
        e.signum()
    }
}

/// Mean and reciprocal standard deviation of a row, in f64.
fn row_stats(row: &[f32]) -> (f64, f64) {
    let d = row.len() as f64;
    let mut mean = 0.0f64;
    for &v in row {
        mean += v as f64;
    }
    mean /= d;
    let mut var = 0.0f64;
    for &v in row {
        let c = v as f64 - mean;
        var += c * c;
    }
    var /= d;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}
