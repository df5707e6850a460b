//! Dense-tensor arithmetic with reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a tape: every operation appends one node holding the
//! computed [`Tensor`], so node ids are already in topological order and
//! [`Graph::backward`] is a single reverse sweep. Graphs are rebuilt per
//! forward pass; tensors on the tape are never mutated in place. A graph is
//! confined to one thread; finished tensors can be copied out and shared.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheckReport, ParamSpec};

use thiserror::Error;

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: unsupported rank for shape {shape:?} (expected {expected})")]
    Rank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    DataLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error(
        "conv2d: invalid geometry: input {h}x{w}x{c}, kernel {kh}x{kw}, \
         stride {stride}, padding {padding} would give output {oh}x{ow}"
    )]
    Geometry {
        h: usize,
        w: usize,
        c: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        oh: isize,
        ow: isize,
    },
    #[error("l2_normalize: row {row} has zero norm")]
    ZeroRow { row: usize },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("grad_check: eps must be positive, got {eps}")]
    NonPositiveEps { eps: f64 },
    #[error("grad_check: builder is not deterministic ({0})")]
    Nondeterministic(String),
}

/// A dense row-major f64 tensor living on a graph tape.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub node_id: NodeId,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRowVec(NodeId, NodeId),
    AddChanVec(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    ConcatVec(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    SoftmaxRows(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Clamp(NodeId, f64, f64),
    BceWithLogits(NodeId, Vec<f64>),
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
        depthwise: bool,
    },
    MaxPool2(NodeId),
    GlobalAvgPool(NodeId),
    RowSum(NodeId),
    RowMean(NodeId),
    L2NormalizeRows(NodeId),
    Sum(NodeId),
}

/// Append-only tape of tensors and the primitive ops that produced them.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0]
    }

    pub fn data(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Scalar value of a 1-element tensor.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn leaf(
        &mut self,
        shape: &[usize],
        data: Vec<f64>,
        requires_grad: bool,
    ) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(TensorError::DataLength {
                op: "leaf",
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId, TensorError> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            node_id: id,
        });
        self.ops.push(op);
        id
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<Vec<usize>, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(sa.to_vec())
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.same_shape("add", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x + y);
        Ok(self.push(shape, data, false, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.same_shape("sub", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x - y);
        Ok(self.push(shape, data, false, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.same_shape("mul", a, b)?;
        let data = zip_map(self.data(a), self.data(b), |x, y| x * y);
        Ok(self.push(shape, data, false, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x * factor).collect();
        self.push(shape, data, false, Op::Scale(a, factor))
    }

    /// `[m,n] + [n]`, the vector broadcast over rows (bias add).
    pub fn add_row_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 2 || sv.len() != 1 || sa[1] != sv[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row_vec",
                lhs: sa,
                rhs: sv,
            });
        }
        let (m, n) = (sa[0], sa[1]);
        let vd = self.data(v);
        let mut data = self.data(a).to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += vd[j];
            }
        }
        Ok(self.push(sa, data, false, Op::AddRowVec(a, v)))
    }

    /// `[h,w,c] + [c]`, the vector broadcast over every spatial site
    /// (channel bias add).
    pub fn add_chan_vec(&mut self, a: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sv = self.shape(v).to_vec();
        if sa.len() != 3 || sv.len() != 1 || sa[2] != sv[0] {
            return Err(TensorError::ShapeMismatch {
                op: "add_chan_vec",
                lhs: sa,
                rhs: sv,
            });
        }
        let c = sa[2];
        let vd = self.data(v).to_vec();
        let mut data = self.data(a).to_vec();
        for chunk in data.chunks_exact_mut(c) {
            for (x, b) in chunk.iter_mut().zip(&vd) {
                *x += b;
            }
        }
        Ok(self.push(sa, data, false, Op::AddChanVec(a, v)))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| kernels::gelu(x)).collect();
        self.push(shape, data, false, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data = self
            .data(a)
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        self.push(shape, data, false, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x.exp()).collect();
        self.push(shape, data, false, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x.ln()).collect();
        self.push(shape, data, false, Op::Ln(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        debug_assert!(lo <= hi);
        let shape = self.shape(a).to_vec();
        let data = self.data(a).iter().map(|&x| x.clamp(lo, hi)).collect();
        self.push(shape, data, false, Op::Clamp(a, lo, hi))
    }

    /// Mean binary cross-entropy straight from logits:
    /// max(l,0) - l*y + ln(1+exp(-|l|)) per sample. Unlike the clipped
    /// probability form, the gradient sigmoid(l) - y survives saturation.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        labels: &[f64],
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 1 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "bce_with_logits",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        let mut total = 0.0;
        for (&l, &y) in self.data(logits).iter().zip(labels) {
            total += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        let mean = total / labels.len() as f64;
        Ok(self.push(
            vec![1],
            vec![mean],
            false,
            Op::BceWithLogits(logits, labels.to_vec()),
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], data, false, Op::Matmul(a, b)))
    }

    /// `[k] · [k,n] -> [n]`
    pub fn vecmat(&mut self, v: NodeId, w: NodeId) -> Result<NodeId, TensorError> {
        let sv = self.shape(v).to_vec();
        let sw = self.shape(w).to_vec();
        if sv.len() != 1 || sw.len() != 2 || sv[0] != sw[0] {
            return Err(TensorError::ShapeMismatch {
                op: "vecmat",
                lhs: sv,
                rhs: sw,
            });
        }
        let (k, n) = (sw[0], sw[1]);
        let data = kernels::matmul(self.data(v), self.data(w), 1, k, n);
        Ok(self.push(vec![n], data, false, Op::VecMat(v, w)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            return Err(TensorError::Rank {
                op: "transpose",
                expected: "2",
                shape: sa,
            });
        }
        let data = kernels::transpose(self.data(a), sa[0], sa[1]);
        Ok(self.push(vec![sa[1], sa[0]], data, false, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.tensor(a).numel() {
            return Err(TensorError::DataLength {
                op: "reshape",
                len: self.tensor(a).numel(),
                shape: shape.to_vec(),
            });
        }
        let data = self.data(a).to_vec();
        Ok(self.push(shape.to_vec(), data, false, Op::Reshape(a)))
    }

    // ── Structural ──────────────────────────────────────────────────────

    /// Concatenate rank-1 tensors into one vector.
    pub fn concat_vec(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 1 {
                return Err(TensorError::Rank {
                    op: "concat_vec",
                    expected: "1",
                    shape: s.to_vec(),
                });
            }
            data.extend_from_slice(self.data(p));
        }
        let n = data.len();
        Ok(self.push(vec![n], data, false, Op::ConcatVec(parts.to_vec())))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, TensorError> {
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.data(p);
            for i in 0..rows {
                data[i * total + off..i * total + off + w]
                    .copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            vec![rows, total],
            data,
            false,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Stack rank-1 tensors of equal length into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId, TensorError> {
        let width = self.shape(rows[0])[0];
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let s = self.shape(r);
            if s.len() != 1 || s[0] != width {
                return Err(TensorError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![width],
                    rhs: s.to_vec(),
                });
            }
            data.extend_from_slice(self.data(r));
        }
        let n = rows.len();
        Ok(self.push(vec![n, width], data, false, Op::StackRows(rows.to_vec())))
    }

    // ── Normalization and reductions ────────────────────────────────────

    /// Row-stabilized softmax; accepts `[n]` or `[m,n]`.
    pub fn softmax_rows(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            2 => (shape[0], shape[1]),
            _ => {
                return Err(TensorError::Rank {
                    op: "softmax_rows",
                    expected: "1 or 2",
                    shape,
                })
            }
        };
        if self.data(a).iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let data = kernels::softmax_rows(self.data(a), rows, cols);
        Ok(self.push(shape, data, false, Op::SoftmaxRows(a)))
    }

    /// Normalization over the trailing axis followed by the learned affine.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| TensorError::Rank {
            op: "layer_norm",
            expected: ">=1",
            shape: shape.clone(),
        })?;
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let sp = self.shape(p);
            if sp != [d] {
                let _ = name;
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape,
                    rhs: sp.to_vec(),
                });
            }
        }
        let data = kernels::layer_norm(self.data(x), self.data(gamma), self.data(beta), d, eps);
        Ok(self.push(shape, data, false, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Mean over all non-channel axes: `[h,w,c] -> [c]` or `[n,d] -> [d]`.
    pub fn global_avg_pool(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let (count, channels) = match shape.len() {
            2 => (shape[0], shape[1]),
            3 => (shape[0] * shape[1], shape[2]),
            _ => {
                return Err(TensorError::Rank {
                    op: "global_avg_pool",
                    expected: "2 or 3",
                    shape,
                })
            }
        };
        let mut out = vec![0.0; channels];
        for chunk in self.data(a).chunks_exact(channels) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= count as f64;
        }
        Ok(self.push(vec![channels], out, false, Op::GlobalAvgPool(a)))
    }

    /// `[m,n] -> [m]`, sums over each row.
    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "row_sum",
                expected: "2",
                shape,
            });
        }
        let data = self
            .data(a)
            .chunks_exact(shape[1])
            .map(|r| r.iter().sum())
            .collect();
        Ok(self.push(vec![shape[0]], data, false, Op::RowSum(a)))
    }

    /// `[m,n] -> [m]`, means over each row.
    pub fn row_mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::Rank {
                op: "row_mean",
                expected: "2",
                shape,
            });
        }
        let n = shape[1] as f64;
        let data = self
            .data(a)
            .chunks_exact(shape[1])
            .map(|r| r.iter().sum::<f64>() / n)
            .collect();
        Ok(self.push(vec![shape[0]], data, false, Op::RowMean(a)))
    }

    /// Scales each row to unit Euclidean norm; accepts `[p]` or `[b,p]`.
    pub fn l2_normalize(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a).to_vec();
        let p = match shape.len() {
            1 => shape[0],
            2 => shape[1],
            _ => {
                return Err(TensorError::Rank {
                    op: "l2_normalize",
                    expected: "1 or 2",
                    shape,
                })
            }
        };
        let mut data = self.data(a).to_vec();
        for (row, chunk) in data.chunks_exact_mut(p).enumerate() {
            let norm = chunk.iter().map(|&v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::ZeroRow { row });
            }
            for v in chunk.iter_mut() {
                *v /= norm;
            }
        }
        Ok(self.push(shape, data, false, Op::L2NormalizeRows(a)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.data(a).iter().sum();
        self.push(vec![1], vec![s], false, Op::Sum(a))
    }

    // ── Convolution ─────────────────────────────────────────────────────

    /// Cross-correlation of `x: [h,w,cin]` with `kernel: [kh,kw,cin,cout]`
    /// (`[kh,kw,c,1]` when depthwise).
    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
        depthwise: bool,
    ) -> Result<NodeId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kc, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kc != cin || (depthwise && cout != 1) {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: sx,
                rhs: sk,
            });
        }
        let oh = (h + 2 * padding) as isize - kh as isize;
        let ow = (w + 2 * padding) as isize - kw as isize;
        if stride == 0 || oh < 0 || ow < 0 {
            return Err(TensorError::Geometry {
                h,
                w,
                c: cin,
                kh,
                kw,
                stride: stride.max(1),
                padding,
                oh: oh / stride.max(1) as isize + 1,
                ow: ow / stride.max(1) as isize + 1,
            });
        }
        let (oh, ow) = (oh as usize / stride + 1, ow as usize / stride + 1);
        let out_c = if depthwise { cin } else { cout };
        let data = if depthwise {
            kernels::depthwise_conv2d(
                self.data(x),
                h,
                w,
                cin,
                self.data(kernel),
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
            )
        } else {
            // im2col route: rows are output positions, then one matmul.
            let cols = kernels::im2col(self.data(x), h, w, cin, kh, kw, stride, padding, oh, ow);
            kernels::matmul(&cols, self.data(kernel), oh * ow, kh * kw * cin, cout)
        };
        Ok(self.push(
            vec![oh, ow, out_c],
            data,
            false,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                depthwise,
            },
        ))
    }

    /// 2x2 max pooling, stride 2; extents must be even.
    pub fn max_pool2(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || s[0] % 2 != 0 || s[1] % 2 != 0 {
            return Err(TensorError::Rank {
                op: "max_pool2",
                expected: "3 with even extents",
                shape: s,
            });
        }
        let data = kernels::max_pool2(self.data(a), s[0], s[1], s[2]);
        Ok(self.push(
            vec![s[0] / 2, s[1] / 2, s[2]],
            data,
            false,
            Op::MaxPool2(a),
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-topological gradient accumulation from a scalar loss.
    /// Every `requires_grad` leaf ends up with a gradient buffer, zeros if
    /// the loss does not depend on it.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..self.nodes.len()).rev() {
            // Leaves keep their accumulated gradients; interior nodes hand
            // theirs off to their inputs and drop them.
            if matches!(self.ops[i], Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let op = self.ops[i].clone();
            match op {
                Op::Leaf => unreachable!("leaves are skipped above"),
                Op::Add(a, b) => {
                    self.accum(a, &grad);
                    self.accum(b, &grad);
                }
                Op::Sub(a, b) => {
                    self.accum(a, &grad);
                    let neg: Vec<f64> = grad.iter().map(|g| -g).collect();
                    self.accum(b, &neg);
                }
                Op::Mul(a, b) => {
                    let da = zip_map(&grad, self.data(b), |g, y| g * y);
                    let db = zip_map(&grad, self.data(a), |g, x| g * x);
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::Scale(a, factor) => {
                    let da: Vec<f64> = grad.iter().map(|g| g * factor).collect();
                    self.accum(a, &da);
                }
                Op::AddRowVec(a, v) => {
                    self.accum(a, &grad);
                    let n = self.shape(v)[0];
                    let mut dv = vec![0.0; n];
                    for row in grad.chunks_exact(n) {
                        for (d, g) in dv.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.accum(v, &dv);
                }
                Op::AddChanVec(a, v) => {
                    self.accum(a, &grad);
                    let c = self.shape(v)[0];
                    let mut dv = vec![0.0; c];
                    for chunk in grad.chunks_exact(c) {
                        for (d, g) in dv.iter_mut().zip(chunk) {
                            *d += g;
                        }
                    }
                    self.accum(v, &dv);
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let da = kernels::matmul_a_bt(&grad, self.data(b), m, n, k);
                    let db = kernels::matmul_at_b(self.data(a), &grad, m, k, n);
                    self.accum(a, &da);
                    self.accum(b, &db);
                }
                Op::VecMat(v, w) => {
                    let (k, n) = (self.shape(w)[0], self.shape(w)[1]);
                    let dv = kernels::matmul_a_bt(&grad, self.data(w), 1, n, k);
                    let dw = kernels::matmul_at_b(self.data(v), &grad, 1, k, n);
                    self.accum(v, &dv);
                    self.accum(w, &dw);
                }
                Op::Transpose(a) => {
                    let (rows, cols) = (self.shape(a)[0], self.shape(a)[1]);
                    let da = kernels::transpose(&grad, cols, rows);
                    self.accum(a, &da);
                }
                Op::Reshape(a) => {
                    self.accum(a, &grad);
                }
                Op::ConcatVec(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.tensor(p).numel();
                        let dp = grad[off..off + len].to_vec();
                        self.accum(p, &dp);
                        off += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = self.shape(parts[0])[0];
                    let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(p)[1];
                        let mut dp = vec![0.0; rows * w];
                        for i in 0..rows {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&grad[i * total + off..i * total + off + w]);
                        }
                        self.accum(p, &dp);
                        off += w;
                    }
                }
                Op::StackRows(rows) => {
                    let width = self.shape(rows[0])[0];
                    for (i, r) in rows.into_iter().enumerate() {
                        let dr = grad[i * width..(i + 1) * width].to_vec();
                        self.accum(r, &dr);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let shape = self.shape(i_node(i)).to_vec();
                    let cols = *shape.last().unwrap();
                    let out = &self.nodes[i].data;
                    let mut da = vec![0.0; out.len()];
                    for r in 0..out.len() / cols {
                        let s = &out[r * cols..(r + 1) * cols];
                        let g = &grad[r * cols..(r + 1) * cols];
                        let dot: f64 = s.iter().zip(g).map(|(sv, gv)| sv * gv).sum();
                        for j in 0..cols {
                            da[r * cols + j] = s[j] * (g[j] - dot);
                        }
                    }
                    self.accum(a, &da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let d = *self.shape(x).last().unwrap();
                    let (dx, dgamma, dbeta) = kernels::layer_norm_backward(
                        self.data(x),
                        self.data(gamma),
                        d,
                        eps,
                        &grad,
                    );
                    self.accum(x, &dx);
                    self.accum(gamma, &dgamma);
                    self.accum(beta, &dbeta);
                }
                Op::Gelu(a) => {
                    let da = zip_map(&grad, self.data(a), |g, x| g * kernels::gelu_grad(x));
                    self.accum(a, &da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&grad, &self.nodes[i].data, |g, s| g * s * (1.0 - s));
                    self.accum(a, &da);
                }
                Op::Exp(a) => {
                    let da = zip_map(&grad, &self.nodes[i].data, |g, e| g * e);
                    self.accum(a, &da);
                }
                Op::Ln(a) => {
                    let da = zip_map(&grad, self.data(a), |g, x| g / x);
                    self.accum(a, &da);
                }
                Op::Clamp(a, lo, hi) => {
                    let da = zip_map(&grad, self.data(a), |g, x| {
                        if x >= lo && x <= hi {
                            g
                        } else {
                            0.0
                        }
                    });
                    self.accum(a, &da);
                }
                Op::BceWithLogits(a, labels) => {
                    let scale = grad[0] / labels.len() as f64;
                    let da = zip_map(self.data(a), &labels, |l, y| {
                        scale * (1.0 / (1.0 + (-l).exp()) - y)
                    });
                    self.accum(a, &da);
                }
                Op::Conv2d {
                    x,
                    kernel,
                    stride,
                    padding,
                    depthwise,
                } => {
                    let sx = self.shape(x).to_vec();
                    let sk = self.shape(kernel).to_vec();
                    let so = self.shape(i_node(i)).to_vec();
                    let (h, w, cin) = (sx[0], sx[1], sx[2]);
                    let (kh, kw) = (sk[0], sk[1]);
                    let (oh, ow) = (so[0], so[1]);
                    if depthwise {
                        let (dx, dk) = kernels::depthwise_conv2d_backward(
                            self.data(x),
                            h,
                            w,
                            cin,
                            self.data(kernel),
                            kh,
                            kw,
                            stride,
                            padding,
                            oh,
                            ow,
                            &grad,
                        );
                        self.accum(x, &dx);
                        self.accum(kernel, &dk);
                    } else {
                        let cout = sk[3];
                        let cols = kernels::im2col(
                            self.data(x),
                            h,
                            w,
                            cin,
                            kh,
                            kw,
                            stride,
                            padding,
                            oh,
                            ow,
                        );
                        let dk =
                            kernels::matmul_at_b(&cols, &grad, oh * ow, kh * kw * cin, cout);
                        let dcols = kernels::matmul_a_bt(
                            &grad,
                            self.data(kernel),
                            oh * ow,
                            cout,
                            kh * kw * cin,
                        );
                        let dx =
                            kernels::col2im(&dcols, h, w, cin, kh, kw, stride, padding, oh, ow);
                        self.accum(x, &dx);
                        self.accum(kernel, &dk);
                    }
                }
                Op::MaxPool2(a) => {
                    let s = self.shape(a).to_vec();
                    let da = kernels::max_pool2_backward(self.data(a), s[0], s[1], s[2], &grad);
                    self.accum(a, &da);
                }
                Op::GlobalAvgPool(a) => {
                    let s = self.shape(a).to_vec();
                    let channels = *s.last().unwrap();
                    let count = self.tensor(a).numel() / channels;
                    let scale = 1.0 / count as f64;
                    let mut da = vec![0.0; self.tensor(a).numel()];
                    for chunk in da.chunks_exact_mut(channels) {
                        for (d, g) in chunk.iter_mut().zip(&grad) {
                            *d = g * scale;
                        }
                    }
                    self.accum(a, &da);
                }
                Op::RowSum(a) => {
                    let n = self.shape(a)[1];
                    let mut da = vec![0.0; self.tensor(a).numel()];
                    for (r, chunk) in da.chunks_exact_mut(n).enumerate() {
                        chunk.fill(grad[r]);
                    }
                    self.accum(a, &da);
                }
                Op::RowMean(a) => {
                    let n = self.shape(a)[1];
                    let scale = 1.0 / n as f64;
                    let mut da = vec![0.0; self.tensor(a).numel()];
                    for (r, chunk) in da.chunks_exact_mut(n).enumerate() {
                        chunk.fill(grad[r] * scale);
                    }
                    self.accum(a, &da);
                }
                Op::L2NormalizeRows(a) => {
                    let shape = self.shape(a).to_vec();
                    let p = *shape.last().unwrap();
                    let xd = self.data(a);
                    let mut da = vec![0.0; xd.len()];
                    for r in 0..xd.len() / p {
                        let x = &xd[r * p..(r + 1) * p];
                        let g = &grad[r * p..(r + 1) * p];
                        let norm = x.iter().map(|&v| v * v).sum::<f64>().sqrt();
                        let y: Vec<f64> = x.iter().map(|&v| v / norm).collect();
                        let dot: f64 = y.iter().zip(g).map(|(yv, gv)| yv * gv).sum();
                        for j in 0..p {
                            da[r * p + j] = (g[j] - y[j] * dot) / norm;
                        }
                    }
                    self.accum(a, &da);
                }
                Op::Sum(a) => {
                    let da = vec![grad[0]; self.tensor(a).numel()];
                    self.accum(a, &da);
                }
            }
        }

        // Unreached parameters still report zero gradients.
        for node in self.nodes.iter_mut() {
            if node.requires_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.data.len()]);
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, src: &[f64]) {
        let node = &mut self.nodes[id.0];
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(src) {
                    *a += b;
                }
            }
            None => node.grad = Some(src.to_vec()),
        }
    }
}

fn i_node(i: usize) -> NodeId {
    NodeId(i)
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

#[cfg(test)]
mod tests;
