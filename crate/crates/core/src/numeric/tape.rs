//! Reverse-mode differentiation on a flat tape.
//!
//! A `Tape` records primitive ops into an arena; `backward` walks the arena in
//! reverse creation order, touching each node exactly once. Tensors are
//! immutable once recorded. A tape is confined to one logical thread;
//! data-parallelism happens over utterances, never inside one tape.
//!
//! Every op validates shapes up front and traps non-finite outputs.

use super::tensor::{matmul_into, Tensor};
use super::NumericError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    /// Matrix plus a broadcast row vector.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    /// Elementwise product with a scalar node.
    ScaleBy(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
    Mse(NodeId, NodeId),
    DilatedConv1d {
        input: NodeId,
        kernel: NodeId,
        width: usize,
        dilation: usize,
    },
    ConcatCols(Vec<NodeId>),
    SliceCols {
        input: NodeId,
        start: usize,
        len: usize,
    },
    SliceRows {
        input: NodeId,
        start: usize,
        len: usize,
    },
    SubsampleRows {
        input: NodeId,
        stride: usize,
    },
    InterleaveRows(Vec<NodeId>),
    SelectRows {
        input: NodeId,
        indices: Vec<usize>,
    },
    WeightedSum(Vec<(f64, NodeId)>),
    /// Scalar with an externally supplied gradient w.r.t. `input`
    /// (used to splice graph-objective losses into the tape).
    ExternalGrad {
        input: NodeId,
        grad: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradient accumulators produced by `backward`.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        None => *slot = Some(delta),
        Some(g) => {
            debug_assert_eq!(g.shape(), delta.shape());
            for (a, b) in g.as_mut_slice().iter_mut().zip(delta.as_slice()) {
                *a += b;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Tensor, op: Op, opname: &'static str) -> Result<NodeId, NumericError> {
        if !value.all_finite() {
            return Err(NumericError::NonFinite { op: opname });
        }
        self.nodes.push(Node { value, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, NumericError> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let value = va.add_scaled(vb, 1.0)?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// `x` is `m x n`, `bias` is 1-D of length `n`, broadcast over rows.
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, NumericError> {
        let (m, n) = self.value(x).dims2()?;
        let bshape = self.value(bias).shape().to_vec();
        if bshape != [n] {
            return Err(NumericError::ShapeMismatch {
                op: "add_row",
                lhs: vec![m, n],
                rhs: bshape,
            });
        }
        let xv = self.value(x);
        let bv = self.value(bias);
        let mut out = xv.clone();
        for i in 0..m {
            let row = &mut out.as_mut_slice()[i * n..(i + 1) * n];
            for (o, b) in row.iter_mut().zip(bv.as_slice()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NumericError> {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c), "scale")
    }

    /// Elementwise `x * s` where `s` is a scalar node.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, NumericError> {
        if !self.value(s).is_scalar() {
            return Err(NumericError::InvalidShape {
                what: format!("scale_by expects scalar, got {:?}", self.value(s).shape()),
            });
        }
        let sv = self.value(s).scalar_value();
        let value = self.value(x).scale(sv);
        self.push(value, Op::ScaleBy(x, s), "scale_by")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let value = self.value(a).matmul_plain(self.value(b))?;
        self.push(value, Op::Matmul(a, b), "matmul")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        let value = self.value(x).map(f64::tanh);
        self.push(value, Op::Tanh(x), "tanh")
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, NumericError> {
        let (m, n) = self.value(x).dims2()?;
        let xv = self.value(x);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let row = xv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - mx).exp();
                out.set(i, j, e);
                sum += e;
            }
            for j in 0..n {
                let v = out.at(i, j) / sum;
                out.set(i, j, v);
            }
        }
        self.push(out, Op::Softmax(x), "softmax")
    }

    /// Mean categorical cross-entropy over rows of `logits` (`T x K`) against
    /// integer labels. Returns a scalar node.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, NumericError> {
        let (t, k) = self.value(logits).dims2()?;
        if labels.len() != t {
            return Err(NumericError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: vec![t, k],
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NumericError::InvalidShape {
                what: format!("label {bad} out of range for {k} classes"),
            });
        }
        let lv = self.value(logits);
        let mut probs = Tensor::zeros(&[t, k]);
        let mut loss = 0.0;
        for i in 0..t {
            let row = lv.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - mx).exp();
                probs.set(i, j, e);
                sum += e;
            }
            let lse = mx + sum.ln();
            for j in 0..k {
                let v = probs.at(i, j) / sum;
                probs.set(i, j, v);
            }
            loss += lse - row[labels[i]];
        }
        loss /= t as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean squared error over all elements; scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "mse",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let n = va.numel() as f64;
        let sum: f64 = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(sum / n), Op::Mse(a, b), "mse")
    }

    /// 1-D convolution over time with dilation `d` and odd kernel width `k`.
    ///
    /// `input` is `T x Din`; `kernel` is `(k * Din) x Dout` with tap `j`
    /// occupying rows `j*Din .. (j+1)*Din`. Output is `T x Dout` under
    /// symmetric zero padding, so the receptive field is `k + (k-1)(d-1)`.
    pub fn dilated_conv1d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        width: usize,
        dilation: usize,
    ) -> Result<NodeId, NumericError> {
        if width % 2 == 0 || width == 0 {
            return Err(NumericError::InvalidShape {
                what: format!("dilated_conv1d requires odd kernel width, got {width}"),
            });
        }
        if dilation == 0 {
            return Err(NumericError::InvalidShape {
                what: "dilated_conv1d requires dilation >= 1".into(),
            });
        }
        let (t, din) = self.value(input).dims2()?;
        let (krows, dout) = self.value(kernel).dims2()?;
        if krows != width * din {
            return Err(NumericError::ShapeMismatch {
                op: "dilated_conv1d",
                lhs: vec![t, din],
                rhs: vec![krows, dout],
            });
        }
        let xv = self.value(input);
        let wv = self.value(kernel);
        let mut out = Tensor::zeros(&[t, dout]);
        let center = (width / 2) as isize;
        for ti in 0..t {
            let orow = &mut out.as_mut_slice()[ti * dout..(ti + 1) * dout];
            for j in 0..width {
                let s = ti as isize + (j as isize - center) * dilation as isize;
                if s < 0 || s >= t as isize {
                    continue;
                }
                let xrow = xv.row(s as usize);
                for (i, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let wrow = wv.row(j * din + i);
                    for (o, &w) in orow.iter_mut().zip(wrow) {
                        *o += xval * w;
                    }
                }
            }
        }
        self.push(
            out,
            Op::DilatedConv1d {
                input,
                kernel,
                width,
                dilation,
            },
            "dilated_conv1d",
        )
    }

    /// Concatenate 2-D tensors along columns. All inputs share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::InvalidShape {
                what: "concat_cols of zero tensors".into(),
            });
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut total_cols = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(NumericError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            total_cols += c;
        }
        let mut out = Tensor::zeros(&[rows, total_cols]);
        let mut col0 = 0;
        for &p in parts {
            let v = self.value(p);
            let (_, c) = v.dims2()?;
            for i in 0..rows {
                let src = v.row(i);
                out.as_mut_slice()[i * total_cols + col0..i * total_cols + col0 + c]
                    .copy_from_slice(src);
            }
            col0 += c;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericError> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > cols {
            return Err(NumericError::InvalidShape {
                what: format!("slice_cols {start}..{} out of {cols} columns", start + len),
            });
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(&[rows, len]);
        for i in 0..rows {
            out.as_mut_slice()[i * len..(i + 1) * len]
                .copy_from_slice(&v.row(i)[start..start + len]);
        }
        self.push(out, Op::SliceCols { input: x, start, len }, "slice_cols")
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId, NumericError> {
        let (rows, cols) = self.value(x).dims2()?;
        if start + len > rows {
            return Err(NumericError::InvalidShape {
                what: format!("slice_rows {start}..{} out of {rows} rows", start + len),
            });
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(&[len, cols]);
        out.as_mut_slice()
            .copy_from_slice(&v.as_slice()[start * cols..(start + len) * cols]);
        self.push(out, Op::SliceRows { input: x, start, len }, "slice_rows")
    }

    /// Keep rows `0, stride, 2*stride, ...` — `ceil(T / stride)` of them.
    pub fn subsample_rows(&mut self, x: NodeId, stride: usize) -> Result<NodeId, NumericError> {
        if stride == 0 {
            return Err(NumericError::InvalidShape {
                what: "subsample stride must be >= 1".into(),
            });
        }
        let (rows, cols) = self.value(x).dims2()?;
        let out_rows = rows.div_ceil(stride);
        let v = self.value(x);
        let mut out = Tensor::zeros(&[out_rows, cols]);
        for (oi, si) in (0..rows).step_by(stride).enumerate() {
            out.as_mut_slice()[oi * cols..(oi + 1) * cols].copy_from_slice(v.row(si));
        }
        self.push(out, Op::SubsampleRows { input: x, stride }, "subsample_rows")
    }

    /// Interleave `r` tensors of equal shape `T x D` row-wise into `r*T x D`:
    /// output row `t*r + o` comes from input `o`, row `t`.
    pub fn interleave_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericError> {
        if parts.is_empty() {
            return Err(NumericError::InvalidShape {
                what: "interleave_rows of zero tensors".into(),
            });
        }
        let (rows, cols) = self.value(parts[0]).dims2()?;
        for &p in parts {
            if self.value(p).shape() != [rows, cols] {
                return Err(NumericError::ShapeMismatch {
                    op: "interleave_rows",
                    lhs: vec![rows, cols],
                    rhs: self.value(p).shape().to_vec(),
                });
            }
        }
        let r = parts.len();
        let mut out = Tensor::zeros(&[rows * r, cols]);
        for (o, &p) in parts.iter().enumerate() {
            let v = self.value(p);
            for t in 0..rows {
                out.as_mut_slice()[(t * r + o) * cols..(t * r + o + 1) * cols]
                    .copy_from_slice(v.row(t));
            }
        }
        self.push(out, Op::InterleaveRows(parts.to_vec()), "interleave_rows")
    }

    /// Gather rows by index; indices may repeat.
    pub fn select_rows(&mut self, x: NodeId, indices: &[usize]) -> Result<NodeId, NumericError> {
        let (rows, cols) = self.value(x).dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(NumericError::InvalidShape {
                what: format!("select_rows index {bad} out of {rows} rows"),
            });
        }
        let v = self.value(x);
        let mut out = Tensor::zeros(&[indices.len(), cols]);
        for (oi, &si) in indices.iter().enumerate() {
            out.as_mut_slice()[oi * cols..(oi + 1) * cols].copy_from_slice(v.row(si));
        }
        self.push(
            out,
            Op::SelectRows {
                input: x,
                indices: indices.to_vec(),
            },
            "select_rows",
        )
    }

    /// Weighted sum of scalar nodes; scalar node.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId, NumericError> {
        let mut total = 0.0;
        for &(w, id) in terms {
            if !self.value(id).is_scalar() {
                return Err(NumericError::InvalidShape {
                    what: format!(
                        "weighted_sum expects scalars, got {:?}",
                        self.value(id).shape()
                    ),
                });
            }
            total += w * self.value(id).scalar_value();
        }
        self.push(
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            "weighted_sum",
        )
    }

    /// Splice an externally computed scalar loss whose gradient w.r.t.
    /// `input` is already known. `grad` must match the input's shape.
    pub fn external_scalar(
        &mut self,
        input: NodeId,
        value: f64,
        grad: Tensor,
    ) -> Result<NodeId, NumericError> {
        if grad.shape() != self.value(input).shape() {
            return Err(NumericError::ShapeMismatch {
                op: "external_scalar",
                lhs: self.value(input).shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if !grad.all_finite() {
            return Err(NumericError::NonFinite {
                op: "external_scalar",
            });
        }
        self.push(
            Tensor::scalar(value),
            Op::ExternalGrad { input, grad },
            "external_scalar",
        )
    }

    /// Reverse pass from a scalar node. Returns per-node gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, NumericError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericError::InvalidShape {
                what: format!(
                    "backward needs a scalar root, got {:?}",
                    self.value(loss).shape()
                ),
            });
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(
        &self,
        id: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), NumericError> {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], g.clone());
                accumulate(&mut grads[b.0], g.clone());
            }
            Op::AddRow(x, bias) => {
                accumulate(&mut grads[x.0], g.clone());
                let (m, n) = g.dims2()?;
                let mut db = Tensor::zeros(&[n]);
                for i in 0..m {
                    for (dbj, gij) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *dbj += gij;
                    }
                }
                accumulate(&mut grads[bias.0], db);
            }
            Op::Scale(x, c) => {
                accumulate(&mut grads[x.0], g.scale(*c));
            }
            Op::ScaleBy(x, s) => {
                let sv = self.value(*s).scalar_value();
                accumulate(&mut grads[x.0], g.scale(sv));
                let xv = self.value(*x);
                let ds: f64 = g
                    .as_slice()
                    .iter()
                    .zip(xv.as_slice())
                    .map(|(gi, xi)| gi * xi)
                    .sum();
                accumulate(&mut grads[s.0], Tensor::scalar(ds));
            }
            Op::Matmul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = av.dims2()?;
                let (_, n) = bv.dims2()?;
                // dA = g . B^T
                let bt = bv.transpose()?;
                let mut da = Tensor::zeros(&[m, k]);
                matmul_into(g.as_slice(), bt.as_slice(), da.as_mut_slice(), m, n, k);
                accumulate(&mut grads[a.0], da);
                // dB = A^T . g
                let at = av.transpose()?;
                let mut db = Tensor::zeros(&[k, n]);
                matmul_into(at.as_slice(), g.as_slice(), db.as_mut_slice(), k, m, n);
                accumulate(&mut grads[b.0], db);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                for (d, &v) in dx.as_mut_slice().iter_mut().zip(xv.as_slice()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let yv = &self.nodes[id].value;
                let mut dx = g.clone();
                for (d, &y) in dx.as_mut_slice().iter_mut().zip(yv.as_slice()) {
                    *d *= y * (1.0 - y);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Tanh(x) => {
                let yv = &self.nodes[id].value;
                let mut dx = g.clone();
                for (d, &y) in dx.as_mut_slice().iter_mut().zip(yv.as_slice()) {
                    *d *= 1.0 - y * y;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Softmax(x) => {
                let yv = &self.nodes[id].value;
                let (m, n) = yv.dims2()?;
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let yrow = yv.row(i);
                    let grow = g.row(i);
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, gg)| y * gg).sum();
                    for j in 0..n {
                        dx.set(i, j, yrow[j] * (grow[j] - dot));
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let gs = g.scalar_value();
                let (t, k) = probs.dims2()?;
                let mut dl = probs.scale(gs / t as f64);
                for (i, &y) in labels.iter().enumerate() {
                    let v = dl.at(i, y) - gs / t as f64;
                    dl.set(i, y, v);
                }
                let _ = k;
                accumulate(&mut grads[logits.0], dl);
            }
            Op::Mse(a, b) => {
                let gs = g.scalar_value();
                let av = self.value(*a);
                let bv = self.value(*b);
                let n = av.numel() as f64;
                let diff = av.add_scaled(bv, -1.0)?;
                accumulate(&mut grads[a.0], diff.scale(2.0 * gs / n));
                accumulate(&mut grads[b.0], diff.scale(-2.0 * gs / n));
            }
            Op::DilatedConv1d {
                input,
                kernel,
                width,
                dilation,
            } => {
                let xv = self.value(*input);
                let wv = self.value(*kernel);
                let (t, din) = xv.dims2()?;
                let (_, dout) = wv.dims2()?;
                let mut dx = Tensor::zeros(&[t, din]);
                let mut dw = Tensor::zeros(&[width * din, dout]);
                let center = (*width / 2) as isize;
                for ti in 0..t {
                    let grow = g.row(ti);
                    for j in 0..*width {
                        let s = ti as isize + (j as isize - center) * *dilation as isize;
                        if s < 0 || s >= t as isize {
                            continue;
                        }
                        let s = s as usize;
                        let xrow = xv.row(s);
                        for i in 0..din {
                            let wrow = wv.row(j * din + i);
                            let mut acc = 0.0;
                            for (o, (&gv, &w)) in grow.iter().zip(wrow).enumerate() {
                                acc += gv * w;
                                dw.as_mut_slice()[(j * din + i) * dout + o] += xrow[i] * gv;
                            }
                            dx.as_mut_slice()[s * din + i] += acc;
                        }
                    }
                }
                accumulate(&mut grads[input.0], dx);
                accumulate(&mut grads[kernel.0], dw);
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = g.dims2()?;
                let mut col0 = 0;
                for &p in parts {
                    let (_, c) = self.value(p).dims2()?;
                    let mut dp = Tensor::zeros(&[rows, c]);
                    let total = g.dims2()?.1;
                    for i in 0..rows {
                        dp.as_mut_slice()[i * c..(i + 1) * c]
                            .copy_from_slice(&g.as_slice()[i * total + col0..i * total + col0 + c]);
                    }
                    accumulate(&mut grads[p.0], dp);
                    col0 += c;
                }
            }
            Op::SliceCols { input, start, len } => {
                let (rows, cols) = self.value(*input).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    dx.as_mut_slice()[i * cols + start..i * cols + start + len]
                        .copy_from_slice(g.row(i));
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::SliceRows { input, start, len } => {
                let (rows, cols) = self.value(*input).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                dx.as_mut_slice()[start * cols..(start + len) * cols]
                    .copy_from_slice(g.as_slice());
                accumulate(&mut grads[input.0], dx);
            }
            Op::SubsampleRows { input, stride } => {
                let (rows, cols) = self.value(*input).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for (oi, si) in (0..rows).step_by(*stride).enumerate() {
                    dx.as_mut_slice()[si * cols..(si + 1) * cols].copy_from_slice(g.row(oi));
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::InterleaveRows(parts) => {
                let r = parts.len();
                let (_, cols) = g.dims2()?;
                for (o, &p) in parts.iter().enumerate() {
                    let (prow, _) = self.value(p).dims2()?;
                    let mut dp = Tensor::zeros(&[prow, cols]);
                    for t in 0..prow {
                        dp.as_mut_slice()[t * cols..(t + 1) * cols]
                            .copy_from_slice(g.row(t * r + o));
                    }
                    accumulate(&mut grads[p.0], dp);
                }
            }
            Op::SelectRows { input, indices } => {
                let (rows, cols) = self.value(*input).dims2()?;
                let mut dx = Tensor::zeros(&[rows, cols]);
                for (oi, &si) in indices.iter().enumerate() {
                    for (d, gv) in dx.as_mut_slice()[si * cols..(si + 1) * cols]
                        .iter_mut()
                        .zip(g.row(oi))
                    {
                        *d += gv;
                    }
                }
                accumulate(&mut grads[input.0], dx);
            }
            Op::WeightedSum(terms) => {
                let gs = g.scalar_value();
                for &(w, id) in terms {
                    accumulate(&mut grads[id.0], Tensor::scalar(w * gs));
                }
            }
            Op::ExternalGrad { input, grad } => {
                let gs = g.scalar_value();
                accumulate(&mut grads[input.0], grad.scale(gs));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(data: &[f64], r: usize, c: usize) -> Tensor {
        Tensor::from_vec(data.to_vec(), &[r, c]).unwrap()
    }

    #[test]
    fn identity_kernel_dilated_conv_is_identity() {
        // width-1 kernel == plain per-frame projection; identity matrix
        // projection must return the input untouched for any dilation.
        let mut tape = Tape::new();
        let x = tape.leaf(t2(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], 3, 2)).unwrap();
        let w = tape.leaf(Tensor::identity(2)).unwrap();
        let y = tape.dilated_conv1d(x, w, 1, 3).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn impulse_response_taps_match_dilation() {
        // k=3, d=2, impulse at frame 4 of 9: taps land at offsets -2, 0, +2.
        let mut tape = Tape::new();
        let mut imp = Tensor::zeros(&[9, 1]);
        imp.set(4, 0, 1.0);
        let x = tape.leaf(imp).unwrap();
        let w = tape.leaf(t2(&[1.0, 1.0, 1.0], 3, 1)).unwrap();
        let y = tape.dilated_conv1d(x, w, 3, 2).unwrap();
        let hot: Vec<usize> = (0..9).filter(|&t| tape.value(y).at(t, 0) != 0.0).collect();
        assert_eq!(hot, vec![2, 4, 6]);
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        for k in [2usize, 5, 17] {
            let mut tape = Tape::new();
            let logits = tape.leaf(Tensor::zeros(&[3, k])).unwrap();
            let loss = tape.softmax_cross_entropy(logits, &[0, k - 1, k / 2]).unwrap();
            let expect = (k as f64).ln();
            assert!((tape.value(loss).scalar_value() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_then_slice_is_identity() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(&[1.0, 2.0, 3.0, 4.0], 2, 2)).unwrap();
        let b = tape.leaf(t2(&[5.0, 6.0, 7.0, 8.0, 9.0, 10.0], 2, 3)).unwrap();
        let cat = tape.concat_cols(&[a, b]).unwrap();
        let a2 = tape.slice_cols(cat, 0, 2).unwrap();
        let b2 = tape.slice_cols(cat, 2, 3).unwrap();
        assert_eq!(tape.value(a2), tape.value(a));
        assert_eq!(tape.value(b2), tape.value(b));
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        // d(l1 + l2)/dx == dl1/dx + dl2/dx within 1e-10.
        let xv = t2(&[0.3, -0.7, 1.2, 0.05, -1.4, 0.9], 2, 3);
        let grad_of = |combined: bool, which: usize| -> Tensor {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone()).unwrap();
            let y = tape.tanh(x).unwrap();
            let t = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
            let l1 = tape.mse(y, t).unwrap();
            let s = tape.sigmoid(x).unwrap();
            let l2 = tape.mse(s, t).unwrap();
            let root = if combined {
                tape.weighted_sum(&[(1.0, l1), (1.0, l2)]).unwrap()
            } else if which == 0 {
                l1
            } else {
                l2
            };
            let mut g = tape.backward(root).unwrap();
            g.take(x).unwrap()
        };
        let gsum = grad_of(true, 0);
        let g1 = grad_of(false, 0);
        let g2 = grad_of(false, 1);
        let expect = g1.add_scaled(&g2, 1.0).unwrap();
        for (a, b) in gsum.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn nonfinite_values_are_trapped() {
        let mut tape = Tape::new();
        let err = tape.leaf(Tensor::scalar(f64::NAN)).unwrap_err();
        assert!(matches!(err, NumericError::NonFinite { .. }));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(&[3, 3])).unwrap();
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 3]"), "{msg}");
    }
}
