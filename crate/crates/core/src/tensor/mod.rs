//! Dense f64 tensors with tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and accumulates gradients for nodes that need them. Tensors
//! are rank 1 or 2, row-major. There is no broadcasting beyond the few
//! explicit ops that need it (bias rows, scalar factors), which keeps every
//! backward rule small enough to audit by hand.

pub mod checkpoint;
pub mod gradcheck;
pub mod nn;
pub mod optim;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("numeric error in {op}: {detail}")]
    Numeric { op: &'static str, detail: String },
    #[error("index out of range in {op}: {detail}")]
    Index { op: &'static str, detail: String },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn shape_err(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::Shape { op, detail: detail.into() }
}

/// Row-major f64 tensor of rank 1 or 2.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(shape_err("new", format!("rank {} unsupported", shape.len())));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v], requires_grad: false }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data, requires_grad: false }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(shape_err("from_rows", "ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Row count; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Column count; for vectors this is the length.
    pub fn cols(&self) -> usize {
        if self.rank() == 2 {
            self.shape[1]
        } else {
            self.shape[0]
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Max,
    Min,
    Sum,
    Mean,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Max, Aggregator::Min, Aggregator::Sum, Aggregator::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Max => "max",
            Aggregator::Min => "min",
            Aggregator::Sum => "sum",
            Aggregator::Mean => "mean",
        }
    }
}

impl std::str::FromStr for Aggregator {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregator::Max),
            "min" => Ok(Aggregator::Min),
            "sum" => Ok(Aggregator::Sum),
            "mean" => Ok(Aggregator::Mean),
            other => Err(TensorError::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `[n,d] + [d]`-ish bias add, broadcast over rows.
    AddRow(NodeId, NodeId),
    ScaleConst(NodeId, f64),
    AddConst(NodeId),
    MulScalar(NodeId, NodeId),
    DivScalar(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sqrt(NodeId),
    Softmax(NodeId, usize),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceCols { x: NodeId, start: usize },
    GatherRows { x: NodeId, idx: Vec<usize> },
    SegmentAgg { x: NodeId, seg: Vec<usize>, agg: Aggregator, arg: Vec<usize> },
    ScaleRows { x: NodeId, factors: Vec<f64> },
    MeanRows(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    BceWithLogits { logits: NodeId, labels: Vec<f64> },
    L1 { pred: NodeId, target: Vec<f64> },
    Detach,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Eager tape: ops compute immediately and record enough to run backward.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
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

    /// Gradient of the last `backward` target w.r.t. this node, if tracked.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        let needs = t.requires_grad;
        self.push(t, needs, Op::Leaf)
    }

    pub fn constant(&mut self, mut t: Tensor) -> NodeId {
        t.requires_grad = false;
        self.push(t, false, Op::Leaf)
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        v.requires_grad = false;
        self.push(v, false, Op::Detach)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(shape_err("matmul", format!("want matrices, got {:?} x {:?}", va.shape, vb.shape)));
        }
        let (m, k) = (va.shape[0], va.shape[1]);
        let (k2, n) = (vb.shape[0], vb.shape[1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for kk in 0..k {
                let aik = va.data[i * k + kk];
                let brow = &vb.data[kk * n..kk * n + n];
                let orow = &mut out[i * n..i * n + n];
                for j in 0..n {
                    orow[j] += aik * brow[j];
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out, requires_grad: false }, needs, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.rank() != 2 {
            return Err(shape_err("transpose", format!("want matrix, got {:?}", v.shape)));
        }
        let (r, c) = (v.shape[0], v.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.data[i * c + j];
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape: vec![c, r], data: out, requires_grad: false }, needs, Op::Transpose(x)))
    }

    fn zip_same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err(op, format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let data = va.data.iter().zip(&vb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor { shape: va.shape.clone(), data, requires_grad: false })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same_shape("sub", a, b, |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let t = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul(a, b)))
    }

    /// `a + row` where `row` has one row and the same column count as `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (va, vr) = (self.value(a), self.value(row));
        if vr.rows() != 1 || va.cols() != vr.cols() {
            return Err(shape_err("add_row", format!("{:?} + {:?}", va.shape, vr.shape)));
        }
        let c = va.cols();
        let mut data = va.data.clone();
        for (i, v) in data.iter_mut().enumerate() {
            *v += vr.data[i % c];
        }
        let t = Tensor { shape: va.shape.clone(), data, requires_grad: false };
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(t, needs, Op::AddRow(a, row)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * c).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::ScaleConst(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a + c).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::AddConst(x))
    }

    fn scalar_val(&self, op: &'static str, s: NodeId) -> Result<f64> {
        let v = self.value(s);
        if v.numel() != 1 {
            return Err(shape_err(op, format!("scalar operand has shape {:?}", v.shape)));
        }
        Ok(v.data[0])
    }

    pub fn mul_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_val("mul_scalar", s)?;
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a * sv).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(t, needs, Op::MulScalar(x, s)))
    }

    pub fn div_scalar(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.scalar_val("div_scalar", s)?;
        if sv == 0.0 {
            return Err(TensorError::Numeric { op: "div_scalar", detail: "division by zero".into() });
        }
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a / sv).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(t, needs, Op::DivScalar(x, s)))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.tanh()).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| sigmoid(a)).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        self.push(t, needs, Op::Sigmoid(x))
    }

    pub fn sqrt(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.data.iter().any(|&a| a < 0.0) {
            return Err(TensorError::Numeric { op: "sqrt", detail: "negative input".into() });
        }
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.sqrt()).collect(),
            requires_grad: false,
        };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Sqrt(x)))
    }

    /// Numerically stable softmax along `axis` (max subtraction per lane).
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let v = self.value(x);
        if axis >= v.rank() {
            return Err(shape_err("softmax", format!("axis {axis} for shape {:?}", v.shape)));
        }
        if !v.is_finite() {
            return Err(TensorError::Numeric { op: "softmax", detail: "non-finite input".into() });
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut data = v.data.clone();
        let row_wise = v.rank() == 1 || axis == 1;
        let (lanes, lane_len, stride, step) = if row_wise {
            (rows, cols, cols, 1)
        } else {
            (cols, rows, 1, cols)
        };
        for lane in 0..lanes {
            let base = lane * stride;
            let mut max = f64::NEG_INFINITY;
            for i in 0..lane_len {
                max = max.max(data[base + i * step]);
            }
            let mut sum = 0.0;
            for i in 0..lane_len {
                let e = (data[base + i * step] - max).exp();
                data[base + i * step] = e;
                sum += e;
            }
            for i in 0..lane_len {
                data[base + i * step] /= sum;
            }
        }
        let t = Tensor { shape: v.shape.clone(), data, requires_grad: false };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::Softmax(x, axis)))
    }

    /// Per-row layer normalization with affine gain/bias (population variance).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let d = self.value(x).cols();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain/bias {:?}/{:?} for width {d}",
                    self.value(gain).shape,
                    self.value(bias).shape
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let v = self.value(x);
        let rows = v.rows();
        let mut data = vec![0.0; v.numel()];
        let g = &self.nodes[gain.0].value.data;
        let b = &self.nodes[bias.0].value.data;
        let xd = &self.nodes[x.0].value.data;
        for r in 0..rows {
            let row = &xd[r * d..r * d + d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[r * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let t = Tensor { shape: self.value(x).shape.clone(), data, requires_grad: false };
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(t, needs, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// Stack inputs vertically; all must share a column count.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs"));
        }
        let c = self.value(parts[0]).cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(shape_err("concat_rows", format!("column mismatch {} vs {}", v.cols(), c)));
            }
            rows += v.rows();
            data.extend_from_slice(&v.data);
        }
        let t = Tensor { shape: vec![rows, c], data, requires_grad: false };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, needs, Op::ConcatRows(parts.to_vec())))
    }

    /// Concatenate inputs horizontally; all must share a row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err("concat_cols", "no inputs"));
        }
        let r = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = vec![0.0; r * total];
        let mut off = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != r {
                return Err(shape_err("concat_cols", format!("row mismatch {} vs {}", v.rows(), r)));
            }
            let c = v.cols();
            for i in 0..r {
                data[i * total + off..i * total + off + c].copy_from_slice(&v.data[i * c..i * c + c]);
            }
            off += c;
        }
        let t = Tensor { shape: vec![r, total], data, requires_grad: false };
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, needs, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if start + len > c {
            return Err(TensorError::Index {
                op: "slice_cols",
                detail: format!("{start}..{} of width {c}", start + len),
            });
        }
        let mut data = vec![0.0; r * len];
        for i in 0..r {
            data[i * len..(i + 1) * len].copy_from_slice(&v.data[i * c + start..i * c + start + len]);
        }
        let t = Tensor { shape: vec![r, len], data, requires_grad: false };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::SliceCols { x, start }))
    }

    /// Select rows by index; duplicates allowed (gradients accumulate).
    pub fn gather_rows(&mut self, x: NodeId, idx: &[usize]) -> Result<NodeId> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        let mut data = vec![0.0; idx.len() * c];
        for (i, &ix) in idx.iter().enumerate() {
            if ix >= r {
                return Err(TensorError::Index { op: "gather_rows", detail: format!("row {ix} of {r}") });
            }
            data[i * c..(i + 1) * c].copy_from_slice(&v.data[ix * c..ix * c + c]);
        }
        let t = Tensor { shape: vec![idx.len(), c], data, requires_grad: false };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::GatherRows { x, idx: idx.to_vec() }))
    }

    /// Reduce rows of `x` into `n_seg` rows grouped by `seg`. Empty segments
    /// produce zero rows for every aggregator.
    pub fn segment_aggregate(&mut self, x: NodeId, seg: &[usize], n_seg: usize, agg: Aggregator) -> Result<NodeId> {
        let v = self.value(x);
        let (r, d) = (v.rows(), v.cols());
        if seg.len() != r {
            return Err(shape_err("segment_aggregate", format!("{} ids for {r} rows", seg.len())));
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(TensorError::Index {
                op: "segment_aggregate",
                detail: format!("segment id {bad} of {n_seg}"),
            });
        }
        let mut data = vec![0.0; n_seg * d];
        let mut counts = vec![0usize; n_seg];
        let mut arg = vec![usize::MAX; if matches!(agg, Aggregator::Max | Aggregator::Min) { n_seg * d } else { 0 }];
        for (row, &s) in seg.iter().enumerate() {
            let src = &v.data[row * d..row * d + d];
            let first = counts[s] == 0;
            counts[s] += 1;
            let dst = &mut data[s * d..s * d + d];
            match agg {
                Aggregator::Sum | Aggregator::Mean => {
                    for j in 0..d {
                        dst[j] += src[j];
                    }
                }
                Aggregator::Max => {
                    for j in 0..d {
                        if first || src[j] > dst[j] {
                            dst[j] = src[j];
                            arg[s * d + j] = row;
                        }
                    }
                }
                Aggregator::Min => {
                    for j in 0..d {
                        if first || src[j] < dst[j] {
                            dst[j] = src[j];
                            arg[s * d + j] = row;
                        }
                    }
                }
            }
        }
        if agg == Aggregator::Mean {
            for s in 0..n_seg {
                if counts[s] > 0 {
                    let inv = 1.0 / counts[s] as f64;
                    for j in 0..d {
                        data[s * d + j] *= inv;
                    }
                }
            }
        }
        let t = Tensor { shape: vec![n_seg, d], data, requires_grad: false };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::SegmentAgg { x, seg: seg.to_vec(), agg, arg }))
    }

    /// Multiply each row by a fixed factor (factors are not differentiated).
    pub fn scale_rows(&mut self, x: NodeId, factors: &[f64]) -> Result<NodeId> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if factors.len() != r {
            return Err(shape_err("scale_rows", format!("{} factors for {r} rows", factors.len())));
        }
        let mut data = v.data.clone();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] *= factors[i];
            }
        }
        let t = Tensor { shape: v.shape.clone(), data, requires_grad: false };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::ScaleRows { x, factors: factors.to_vec() }))
    }

    /// Column-wise mean over rows, result has one row.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let (r, c) = (v.rows(), v.cols());
        if r == 0 {
            return Err(shape_err("mean_rows", "no rows"));
        }
        let mut data = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                data[j] += v.data[i * c + j];
            }
        }
        for d in data.iter_mut() {
            *d /= r as f64;
        }
        let t = Tensor { shape: vec![1, c], data, requires_grad: false };
        let needs = self.needs(x);
        Ok(self.push(t, needs, Op::MeanRows(x)))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let s: f64 = v.data.iter().sum::<f64>() / v.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), needs, Op::MeanAll(x))
    }

    /// Mean binary cross-entropy on logits, stable for large magnitudes.
    pub fn bce_with_logits(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        let v = self.value(logits);
        if labels.len() != v.numel() {
            return Err(shape_err("bce_with_logits", format!("{} labels for {} logits", labels.len(), v.numel())));
        }
        if labels.is_empty() {
            return Err(shape_err("bce_with_logits", "empty input"));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Config(format!("bce label {bad} is not 0 or 1")));
        }
        let mut total = 0.0;
        for (&x, &y) in v.data.iter().zip(labels) {
            total += x.max(0.0) - x * y + (-x.abs()).exp().ln_1p();
        }
        let t = Tensor::scalar(total / labels.len() as f64);
        let needs = self.needs(logits);
        Ok(self.push(t, needs, Op::BceWithLogits { logits, labels: labels.to_vec() }))
    }

    /// Mean absolute error against fixed targets.
    pub fn l1_loss(&mut self, pred: NodeId, target: &[f64]) -> Result<NodeId> {
        let v = self.value(pred);
        if target.len() != v.numel() || target.is_empty() {
            return Err(shape_err("l1_loss", format!("{} targets for {} predictions", target.len(), v.numel())));
        }
        let total: f64 = v.data.iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum();
        let t = Tensor::scalar(total / target.len() as f64);
        let needs = self.needs(pred);
        Ok(self.push(t, needs, Op::L1 { pred, target: target.to_vec() }))
    }

    /// Reverse pass from a scalar node; gradients land on every node that
    /// transitively feeds it and tracks gradients.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", format!("loss has shape {:?}", self.value(loss).shape)));
        }
        if !self.value(loss).data[0].is_finite() {
            return Err(TensorError::Numeric { op: "backward", detail: "loss is not finite".into() });
        }
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
        if !self.nodes[loss.0].needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let gy = match self.nodes[id].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.apply_backward(id, &gy);
            if self.nodes[id].needs_grad {
                self.nodes[id].grad = Some(gy);
            }
        }
        Ok(())
    }

    fn accum(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let numel = self.nodes[id.0].value.numel();
        let slot = self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; numel]);
        // Work around the borrow of self inside the closure by taking the
        // buffer out for the duration of the update.
        let mut buf = std::mem::take(slot);
        f(&mut buf);
        self.nodes[id.0].grad = Some(buf);
    }

    fn apply_backward(&mut self, id: usize, gy: &[f64]) {
        // Clone small op metadata up front so `self` stays free for accum calls.
        match &self.nodes[id].op {
            Op::Leaf | Op::Detach => {}
            &Op::Matmul(a, b) => {
                let va = self.nodes[a.0].value.clone();
                let vb = self.nodes[b.0].value.clone();
                let (m, k) = (va.shape[0], va.shape[1]);
                let n = vb.shape[1];
                self.accum(a, |ga| {
                    for i in 0..m {
                        for j in 0..n {
                            let g = gy[i * n + j];
                            if g != 0.0 {
                                for kk in 0..k {
                                    ga[i * k + kk] += g * vb.data[kk * n + j];
                                }
                            }
                        }
                    }
                });
                self.accum(b, |gb| {
                    for i in 0..m {
                        for kk in 0..k {
                            let a_ik = va.data[i * k + kk];
                            if a_ik != 0.0 {
                                for j in 0..n {
                                    gb[kk * n + j] += a_ik * gy[i * n + j];
                                }
                            }
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (c, r) = {
                    let s = &self.nodes[id].value.shape;
                    (s[1], s[0])
                };
                self.accum(x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += gy[i * c + j];
                        }
                    }
                });
            }
            &Op::Add(a, b) => {
                self.accum(a, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += y;
                    }
                });
                self.accum(b, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += y;
                    }
                });
            }
            &Op::Sub(a, b) => {
                self.accum(a, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += y;
                    }
                });
                self.accum(b, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi -= y;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let va = self.nodes[a.0].value.data.clone();
                let vb = self.nodes[b.0].value.data.clone();
                self.accum(a, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * vb[i];
                    }
                });
                self.accum(b, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * va[i];
                    }
                });
            }
            &Op::AddRow(a, row) => {
                let c = self.nodes[row.0].value.numel();
                self.accum(a, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += y;
                    }
                });
                self.accum(row, |g| {
                    for (i, &y) in gy.iter().enumerate() {
                        g[i % c] += y;
                    }
                });
            }
            &Op::ScaleConst(x, c) => {
                self.accum(x, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += c * y;
                    }
                });
            }
            &Op::AddConst(x) => {
                self.accum(x, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += y;
                    }
                });
            }
            &Op::MulScalar(x, s) => {
                let sv = self.nodes[s.0].value.data[0];
                let vx = self.nodes[x.0].value.data.clone();
                self.accum(x, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += sv * y;
                    }
                });
                self.accum(s, |g| {
                    g[0] += gy.iter().zip(&vx).map(|(&y, &a)| y * a).sum::<f64>();
                });
            }
            &Op::DivScalar(x, s) => {
                let sv = self.nodes[s.0].value.data[0];
                let vx = self.nodes[x.0].value.data.clone();
                self.accum(x, |g| {
                    for (gi, &y) in g.iter_mut().zip(gy) {
                        *gi += y / sv;
                    }
                });
                self.accum(s, |g| {
                    g[0] -= gy.iter().zip(&vx).map(|(&y, &a)| y * a).sum::<f64>() / (sv * sv);
                });
            }
            &Op::Relu(x) => {
                let vx = self.nodes[x.0].value.data.clone();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        if vx[i] > 0.0 {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            &Op::Tanh(x) => {
                let vy = self.nodes[id].value.data.clone();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * (1.0 - vy[i] * vy[i]);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let vy = self.nodes[id].value.data.clone();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        g[i] += gy[i] * vy[i] * (1.0 - vy[i]);
                    }
                });
            }
            &Op::Sqrt(x) => {
                let vy = self.nodes[id].value.data.clone();
                self.accum(x, |g| {
                    for i in 0..g.len() {
                        // d sqrt(x) = 1 / (2 sqrt(x)); guard the zero case.
                        if vy[i] > 0.0 {
                            g[i] += gy[i] * 0.5 / vy[i];
                        }
                    }
                });
            }
            &Op::Softmax(x, axis) => {
                let y = self.nodes[id].value.clone();
                let (rows, cols) = (y.rows(), y.cols());
                let row_wise = y.rank() == 1 || axis == 1;
                let (lanes, lane_len, stride, step) = if row_wise {
                    (rows, cols, cols, 1)
                } else {
                    (cols, rows, 1, cols)
                };
                self.accum(x, |g| {
                    for lane in 0..lanes {
                        let base = lane * stride;
                        let mut dot = 0.0;
                        for i in 0..lane_len {
                            let p = base + i * step;
                            dot += gy[p] * y.data[p];
                        }
                        for i in 0..lane_len {
                            let p = base + i * step;
                            g[p] += y.data[p] * (gy[p] - dot);
                        }
                    }
                });
            }
            &Op::LayerNorm { x, gain, bias, eps } => {
                let vx = self.nodes[x.0].value.clone();
                let vg = self.nodes[gain.0].value.data.clone();
                let (rows, d) = (vx.rows(), vx.cols());
                // Precompute per-row xhat and inverse stddev once.
                let mut xhat = vec![0.0; vx.numel()];
                let mut inv = vec![0.0; rows];
                for r in 0..rows {
                    let row = &vx.data[r * d..r * d + d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
                    inv[r] = 1.0 / (var + eps).sqrt();
                    for j in 0..d {
                        xhat[r * d + j] = (row[j] - mean) * inv[r];
                    }
                }
                self.accum(x, |g| {
                    for r in 0..rows {
                        let mut mean_dg = 0.0;
                        let mut mean_dgx = 0.0;
                        for j in 0..d {
                            let dg = gy[r * d + j] * vg[j];
                            mean_dg += dg;
                            mean_dgx += dg * xhat[r * d + j];
                        }
                        mean_dg /= d as f64;
                        mean_dgx /= d as f64;
                        for j in 0..d {
                            let dg = gy[r * d + j] * vg[j];
                            g[r * d + j] += (dg - mean_dg - xhat[r * d + j] * mean_dgx) * inv[r];
                        }
                    }
                });
                self.accum(gain, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gy[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accum(bias, |g| {
                    for r in 0..rows {
                        for j in 0..d {
                            g[j] += gy[r * d + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut off = 0;
                for p in parts {
                    let numel = self.nodes[p.0].value.numel();
                    let chunk = gy[off..off + numel].to_vec();
                    self.accum(p, |g| {
                        for (gi, &y) in g.iter_mut().zip(&chunk) {
                            *gi += y;
                        }
                    });
                    off += numel;
                }
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let total = self.nodes[id].value.cols();
                let rows = self.nodes[id].value.rows();
                let mut off = 0;
                for p in parts {
                    let c = self.nodes[p.0].value.cols();
                    let mut chunk = vec![0.0; rows * c];
                    for i in 0..rows {
                        chunk[i * c..(i + 1) * c].copy_from_slice(&gy[i * total + off..i * total + off + c]);
                    }
                    self.accum(p, |g| {
                        for (gi, &y) in g.iter_mut().zip(&chunk) {
                            *gi += y;
                        }
                    });
                    off += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let c = self.nodes[x.0].value.cols();
                let len = self.nodes[id].value.cols();
                let rows = self.nodes[id].value.rows();
                self.accum(x, |g| {
                    for i in 0..rows {
                        for j in 0..len {
                            g[i * c + start + j] += gy[i * len + j];
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let (x, idx) = (*x, idx.clone());
                let c = self.nodes[id].value.cols();
                self.accum(x, |g| {
                    for (i, &ix) in idx.iter().enumerate() {
                        for j in 0..c {
                            g[ix * c + j] += gy[i * c + j];
                        }
                    }
                });
            }
            Op::SegmentAgg { x, seg, agg, arg } => {
                let (x, seg, agg, arg) = (*x, seg.clone(), *agg, arg.clone());
                let d = self.nodes[id].value.cols();
                let n_seg = self.nodes[id].value.rows();
                let mut counts = vec![0usize; n_seg];
                for &s in &seg {
                    counts[s] += 1;
                }
                self.accum(x, |g| match agg {
                    Aggregator::Sum => {
                        for (row, &s) in seg.iter().enumerate() {
                            for j in 0..d {
                                g[row * d + j] += gy[s * d + j];
                            }
                        }
                    }
                    Aggregator::Mean => {
                        for (row, &s) in seg.iter().enumerate() {
                            let inv = 1.0 / counts[s] as f64;
                            for j in 0..d {
                                g[row * d + j] += gy[s * d + j] * inv;
                            }
                        }
                    }
                    Aggregator::Max | Aggregator::Min => {
                        for s in 0..n_seg {
                            for j in 0..d {
                                let row = arg[s * d + j];
                                if row != usize::MAX {
                                    g[row * d + j] += gy[s * d + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::ScaleRows { x, factors } => {
                let (x, factors) = (*x, factors.clone());
                let c = self.nodes[id].value.cols();
                self.accum(x, |g| {
                    for (i, &f) in factors.iter().enumerate() {
                        for j in 0..c {
                            g[i * c + j] += gy[i * c + j] * f;
                        }
                    }
                });
            }
            &Op::MeanRows(x) => {
                let r = self.nodes[x.0].value.rows();
                let c = self.nodes[x.0].value.cols();
                self.accum(x, |g| {
                    let inv = 1.0 / r as f64;
                    for i in 0..r {
                        for j in 0..c {
                            g[i * c + j] += gy[j] * inv;
                        }
                    }
                });
            }
            &Op::SumAll(x) => {
                self.accum(x, |g| {
                    for gi in g.iter_mut() {
                        *gi += gy[0];
                    }
                });
            }
            &Op::MeanAll(x) => {
                let n = self.nodes[x.0].value.numel();
                self.accum(x, |g| {
                    let y = gy[0] / n as f64;
                    for gi in g.iter_mut() {
                        *gi += y;
                    }
                });
            }
            Op::BceWithLogits { logits, labels } => {
                let (logits, labels) = (*logits, labels.clone());
                let vx = self.nodes[logits.0].value.data.clone();
                self.accum(logits, |g| {
                    let inv = gy[0] / labels.len() as f64;
                    for i in 0..g.len() {
                        g[i] += inv * (sigmoid(vx[i]) - labels[i]);
                    }
                });
            }
            Op::L1 { pred, target } => {
                let (pred, target) = (*pred, target.clone());
                let vp = self.nodes[pred.0].value.data.clone();
                self.accum(pred, |g| {
                    let inv = gy[0] / target.len() as f64;
                    for i in 0..g.len() {
                        let diff = vp[i] - target[i];
                        if diff != 0.0 {
                            g[i] += inv * diff.signum();
                        }
                    }
                });
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf_grad(g: &mut Graph, t: Tensor) -> NodeId {
        g.leaf(t.with_grad())
    }

    #[test]
    fn tensor_shape_invariant() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        // Independent oracle: plain ijk loop on freshly generated values.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let m = rng.random_range(1..5usize);
            let k = rng.random_range(1..5usize);
            let n = rng.random_range(1..5usize);
            let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut want = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[i * k + kk] * b[kk * n + j];
                    }
                    want[i * n + j] = acc;
                }
            }
            let mut g = Graph::new();
            let na = g.leaf(Tensor::matrix(m, k, a).unwrap());
            let nb = g.leaf(Tensor::matrix(k, n, b).unwrap());
            let nc = g.matmul(na, nb).unwrap();
            for (got, want) in g.value(nc).data().iter().zip(&want) {
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = g.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn softmax_basic_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0, 3.0f64.ln()]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-12);

        // Large equal logits must not overflow thanks to max subtraction.
        let x = g.leaf(Tensor::vector(vec![1000.0, 1000.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![f64::NAN, 0.0]));
        assert!(matches!(g.softmax(x, 0), Err(TensorError::Numeric { .. })));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..12).map(|_| rng.random_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 4, data).unwrap());
        let y = g.softmax(x, 1).unwrap();
        for r in 0..3 {
            let s: f64 = (0..4).map(|c| g.value(y).get(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // Oracle by hand: mean 2, population var 1, eps 1e-5.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 2, vec![1.0, 3.0]).unwrap());
        let gain = g.leaf(Tensor::vector(vec![1.0, 1.0]));
        let bias = g.leaf(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        let want = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((g.value(y).data()[0] + want).abs() < 1e-12);
        assert!((g.value(y).data()[1] - want).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_bias() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![5.0, 5.0, 5.0]).unwrap());
        let gain = g.leaf(Tensor::vector(vec![2.0, 2.0, 2.0]));
        let bias = g.leaf(Tensor::vector(vec![0.5, 0.5, 0.5]));
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn segment_aggregate_all_aggregators() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(3, 2, vec![1.0, 10.0, 3.0, -2.0, 5.0, 0.0]).unwrap());
        // Rows 0 and 2 in segment 0, row 1 in segment 2, segment 1 empty.
        let seg = [0, 2, 0];
        let sum = g.segment_aggregate(x, &seg, 3, Aggregator::Sum).unwrap();
        assert_eq!(g.value(sum).data(), &[6.0, 10.0, 0.0, 0.0, 3.0, -2.0]);
        let mean = g.segment_aggregate(x, &seg, 3, Aggregator::Mean).unwrap();
        assert_eq!(g.value(mean).data(), &[3.0, 5.0, 0.0, 0.0, 3.0, -2.0]);
        let max = g.segment_aggregate(x, &seg, 3, Aggregator::Max).unwrap();
        assert_eq!(g.value(max).data(), &[5.0, 10.0, 0.0, 0.0, 3.0, -2.0]);
        let min = g.segment_aggregate(x, &seg, 3, Aggregator::Min).unwrap();
        assert_eq!(g.value(min).data(), &[1.0, 0.0, 0.0, 0.0, 3.0, -2.0]);
    }

    #[test]
    fn segment_aggregate_rejects_bad_ids() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.segment_aggregate(x, &[0, 5], 2, Aggregator::Sum),
            Err(TensorError::Index { .. })
        ));
    }

    #[test]
    fn bce_loss_matches_closed_form_gradient() {
        // Gradient of mean BCE w.r.t. logits is (sigmoid(x) - y) / n.
        let logits = [0.3, -1.2, 2.0, 0.0];
        let labels = [1.0, 0.0, 1.0, 0.0];
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, Tensor::vector(logits.to_vec()));
        let loss = g.bce_with_logits(x, &labels).unwrap();
        g.backward(loss).unwrap();
        let got = g.grad(x).unwrap();
        for i in 0..4 {
            let want = (sigmoid(logits[i]) - labels[i]) / 4.0;
            assert!((got[i] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn bce_rejects_non_binary_labels() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0.0]));
        assert!(g.bce_with_logits(x, &[0.5]).is_err());
    }

    #[test]
    fn l1_loss_value_and_gradient() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, Tensor::vector(vec![1.0, -2.0, 4.0]));
        let loss = g.l1_loss(x, &[0.0, 0.0, 4.0]).unwrap();
        assert!((g.value(loss).data()[0] - 1.0).abs() < 1e-12);
        g.backward(loss).unwrap();
        let got = g.grad(x).unwrap();
        assert_eq!(got, &[1.0 / 3.0, -1.0 / 3.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, Tensor::vector(vec![1.0, 2.0]));
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn gradients_accumulate_across_reuse() {
        // y = sum(x) + sum(x) so dy/dx = 2 everywhere.
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, Tensor::vector(vec![1.0, 2.0]));
        let s1 = g.sum_all(x);
        let s2 = g.sum_all(x);
        let y = g.add(s1, s2).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, Tensor::vector(vec![3.0]));
        let d = g.detach(x);
        let s = g.sum_all(d);
        // The detached branch contributes no gradient, so backward on it alone
        // leaves x untouched.
        g.backward(s).unwrap();
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap());
        let cat = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(cat).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = g.slice_cols(cat, 0, 2).unwrap();
        assert_eq!(g.value(back).data(), &[1.0, 2.0, 3.0, 4.0]);
        let rows = g.concat_rows(&[a, a]).unwrap();
        assert_eq!(g.value(rows).shape(), &[4, 2]);
    }

    #[test]
    fn gather_rows_accumulates_duplicate_gradients() {
        let mut g = Graph::new();
        let x = leaf_grad(&mut g, Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let picked = g.gather_rows(x, &[0, 0, 1]).unwrap();
        let s = g.sum_all(picked);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }
}
