use std::borrow::Cow;

use super::kernels::{axpy, gemm};
use super::{DiffTensor, NodeId, TensorError};

type Result<T> = std::result::Result<T, TensorError>;

/// Backward rule for an operation defined outside this module.
///
/// `grads[k]` is `Some` exactly when input `k` participates in the gradient;
/// implementations add their contribution into it.
pub trait CustomBackward {
    fn name(&self) -> &'static str;

    fn backward(
        &self,
        inputs: &[&[f64]],
        output: &[f64],
        out_grad: &[f64],
        grads: &mut [Option<&mut [f64]>],
    );
}

enum Op<'p> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    AddRowBias {
        a: NodeId,
        bias: NodeId,
        cols: usize,
    },
    AddScalar {
        a: NodeId,
        s: NodeId,
    },
    RowSoftmax {
        a: NodeId,
        cols: usize,
    },
    LayerNorm {
        a: NodeId,
        gain: NodeId,
        bias: NodeId,
        cols: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        guarded: Vec<bool>,
    },
    Gelu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    ConcatLast {
        a: NodeId,
        b: NodeId,
        p: usize,
        q: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    SliceCols {
        a: NodeId,
        cols: usize,
        start: usize,
        len: usize,
    },
    SliceRows {
        a: NodeId,
        offset: usize,
    },
    GatherRows {
        table: NodeId,
        cols: usize,
        indices: Vec<usize>,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Bce {
        probs: NodeId,
        targets: Vec<f64>,
        rows: usize,
        cols: usize,
        clip: f64,
    },
    Custom {
        inputs: Vec<NodeId>,
        rule: Box<dyn CustomBackward + 'p>,
    },
}

/// Operation-granularity reverse-mode tape.
///
/// Nodes are appended in evaluation order, so node ids are a topological
/// order of the computation graph. Parameters can be registered by borrowing
/// their storage for the lifetime `'p` of the tape.
pub struct Tape<'p> {
    tensors: Vec<DiffTensor<'p>>,
    ops: Vec<Op<'p>>,
    needs_grad: Vec<bool>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&cols, lead)) => (lead.iter().product(), cols),
        None => (1, 1),
    }
}

fn check_len(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().product::<usize>() != len {
        return Err(TensorError::BadLength {
            shape: shape.to_vec(),
            len,
        });
    }
    Ok(())
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            tensors: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, values: Cow<'p, [f64]>, op: Op<'p>, needs: bool) -> NodeId {
        let node = NodeId(self.tensors.len());
        self.tensors.push(DiffTensor {
            shape,
            values,
            grad: None,
            node,
        });
        self.ops.push(op);
        self.needs_grad.push(needs);
        node
    }

    fn any_needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.needs_grad[id.0])
    }

    /// Registers a differentiable leaf that owns its values.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        check_len(shape, values.len())?;
        Ok(self.push(shape.to_vec(), Cow::Owned(values), Op::Leaf, true))
    }

    /// Registers a differentiable leaf borrowing externally owned storage.
    pub fn param(&mut self, shape: &[usize], values: &'p [f64]) -> Result<NodeId> {
        check_len(shape, values.len())?;
        Ok(self.push(shape.to_vec(), Cow::Borrowed(values), Op::Leaf, true))
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<NodeId> {
        check_len(shape, values.len())?;
        Ok(self.push(shape.to_vec(), Cow::Owned(values), Op::Leaf, false))
    }

    pub fn tensor(&self, id: NodeId) -> &DiffTensor<'p> {
        &self.tensors[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.tensors[id.0].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.tensors[id.0].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.tensors[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.needs_grad[id.0]
    }

    fn matrix(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(id) {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Invalid {
                op,
                msg: format!("expected a matrix, got shape {s:?}"),
            }),
        }
    }

    /// `a [m x k] · b [k x n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul")?;
        let (k2, n) = self.matrix(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(
            vec![m, n],
            Cow::Owned(out),
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: false,
            },
            needs,
        ))
    }

    /// `a [m x k] · bᵀ` with `b` of shape `[n x k]`.
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.matrix(a, "matmul_t")?;
        let (n, k2) = self.matrix(b, "matmul_t")?;
        if k != k2 {
            return Err(self.mismatch("matmul_t", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, 0.0);
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(
            vec![m, n],
            Cow::Owned(out),
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b: true,
            },
            needs,
        ))
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.any_needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add { a, b }, needs))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.any_needs(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.any_needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Scale { a, factor }, needs))
    }

    /// Adds `bias [n]` to every row of `a [.. x n]`.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, cols) = rows_cols(self.shape(a));
        if self.shape(bias) != [cols] {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.value(bias);
        let out: Vec<f64> = self
            .value(a)
            .chunks(cols.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let needs = self.any_needs(&[a, bias]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddRowBias { a, bias, cols }, needs))
    }

    /// Adds a single-element tensor to every entry of `a`.
    pub fn add_scalar(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        if self.value(s).len() != 1 {
            return Err(self.mismatch("add_scalar", a, s));
        }
        let c = self.value(s)[0];
        let out: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let needs = self.any_needs(&[a, s]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddScalar { a, s }, needs))
    }

    /// Softmax over the last dimension, stabilised by subtracting the row max.
    pub fn row_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, cols) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        if cols > 0 {
            out.chunks_mut(cols).for_each(softmax_in_place);
        }
        let needs = self.any_needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::RowSoftmax { a, cols }, needs))
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias`. Rows whose variance falls below `eps` are divided by
    /// `sqrt(eps)` instead, so constant rows map to `bias`.
    pub fn layer_norm(&mut self, a: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        let (rows, cols) = rows_cols(self.shape(a));
        if cols == 0 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "rows must have at least one element".into(),
            });
        }
        if self.shape(gain) != [cols] {
            return Err(self.mismatch("layer_norm", a, gain));
        }
        if self.shape(bias) != [cols] {
            return Err(self.mismatch("layer_norm", a, bias));
        }
        let x = self.value(a);
        let g = self.value(gain);
        let b = self.value(bias);
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut guarded = vec![false; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            guarded[r] = var < eps;
            let inv = 1.0 / var.max(eps).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                normalized[r * cols + c] = xh;
                out[r * cols + c] = xh * g[c] + b[c];
            }
        }
        let needs = self.any_needs(&[a, gain, bias]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                a,
                gain,
                bias,
                cols,
                normalized,
                inv_std,
                guarded,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| gelu(x)).collect();
        let needs = self.any_needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Gelu { a }, needs))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let needs = self.any_needs(&[a]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Sigmoid { a }, needs))
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.is_empty() || sb.is_empty() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(self.mismatch("concat_last", a, b));
        }
        let (rows, p) = rows_cols(sa);
        let (_, q) = rows_cols(sb);
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = p + q;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(rows * (p + q));
        for r in 0..rows {
            out.extend_from_slice(&va[r * p..(r + 1) * p]);
            out.extend_from_slice(&vb[r * q..(r + 1) * q]);
        }
        let needs = self.any_needs(&[a, b]);
        Ok(self.push(shape, Cow::Owned(out), Op::ConcatLast { a, b, p, q }, needs))
    }

    /// Stacks matrices with equal column counts along the first dimension.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let (_, cols) = self.matrix(first, "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != cols {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let needs = self.any_needs(parts);
        Ok(self.push(
            vec![rows, cols],
            Cow::Owned(out),
            Op::ConcatRows { parts: parts.to_vec() },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix(a, "slice_cols")?;
        if start + len > cols {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of range for width {cols}", start + len),
            });
        }
        let va = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&va[r * cols + start..r * cols + start + len]);
        }
        let needs = self.any_needs(&[a]);
        Ok(self.push(vec![rows, len], Cow::Owned(out), Op::SliceCols { a, cols, start, len }, needs))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix(a, "slice_rows")?;
        if start + len > rows {
            return Err(TensorError::Invalid {
                op: "slice_rows",
                msg: format!("rows {start}..{} out of range for height {rows}", start + len),
            });
        }
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        let needs = self.any_needs(&[a]);
        Ok(self.push(
            vec![len, cols],
            Cow::Owned(out),
            Op::SliceRows {
                a,
                offset: start * cols,
            },
            needs,
        ))
    }

    /// Row lookup `table[indices[i]]`, used for embedding tables.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (rows, cols) = self.matrix(table, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let vt = self.value(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            out.extend_from_slice(&vt[i * cols..(i + 1) * cols]);
        }
        let needs = self.any_needs(&[table]);
        Ok(self.push(
            vec![indices.len(), cols],
            Cow::Owned(out),
            Op::GatherRows {
                table,
                cols,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.value(a).iter().sum::<f64>();
        let needs = self.any_needs(&[a]);
        Ok(self.push(vec![], Cow::Owned(vec![s]), Op::Sum { a }, needs))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let needs = self.any_needs(&[a]);
        Ok(self.push(vec![], Cow::Owned(vec![s]), Op::Mean { a }, needs))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        check_len(shape, self.value(a).len())?;
        let out = self.value(a).to_vec();
        let needs = self.any_needs(&[a]);
        Ok(self.push(shape.to_vec(), Cow::Owned(out), Op::Reshape { a }, needs))
    }

    /// Mean over rows of the per-row mean binary cross-entropy between
    /// `probs [rows x cols]` and `targets`, with probabilities clipped to
    /// `[clip, 1 - clip]`. Clipped entries pass no gradient.
    pub fn bce(&mut self, probs: NodeId, targets: &[f64], clip: f64) -> Result<NodeId> {
        let (rows, cols) = rows_cols(self.shape(probs));
        if targets.len() != rows * cols || rows * cols == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bce",
                lhs: self.shape(probs).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let p = self.value(probs);
        let mut total = 0.0;
        for r in 0..rows {
            let mut row = 0.0;
            for c in 0..cols {
                let i = r * cols + c;
                let pc = p[i].clamp(clip, 1.0 - clip);
                let y = targets[i];
                row -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
            }
            total += row / cols as f64;
        }
        let loss = total / rows as f64;
        let needs = self.any_needs(&[probs]);
        Ok(self.push(
            vec![],
            Cow::Owned(vec![loss]),
            Op::Bce {
                probs,
                targets: targets.to_vec(),
                rows,
                cols,
                clip,
            },
            needs,
        ))
    }

    /// Records an externally defined operation whose forward values were
    /// already computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[NodeId],
        shape: Vec<usize>,
        values: Vec<f64>,
        rule: impl CustomBackward + 'p,
    ) -> Result<NodeId> {
        check_len(&shape, values.len())?;
        let needs = self.any_needs(inputs);
        Ok(self.push(
            shape,
            Cow::Owned(values),
            Op::Custom {
                inputs: inputs.to_vec(),
                rule: Box::new(rule),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Afterwards every node that the
    /// loss depends on through differentiable paths holds a gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.tensors.len()];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.needs_grad[id] {
                self.backward_step(id, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            t.grad = g;
        }
        Ok(())
    }

    fn backward_step(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.tensors[id].values;
        let mut acc = Accumulator {
            tape: self,
            grads,
        };
        match &self.ops[id] {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                if let Some(mut ga) = acc.take(a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, self.value(b), !trans_b, &mut ga, 1.0);
                    acc.put(a, ga);
                }
                if let Some(mut gb) = acc.take(b) {
                    if trans_b {
                        // B is [n x k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, self.value(a), false, &mut gb, 1.0);
                    } else {
                        gemm(k, m, n, self.value(a), true, g, false, &mut gb, 1.0);
                    }
                    acc.put(b, gb);
                }
            }
            &Op::Add { a, b } => {
                acc.add(a, |buf| axpy(buf, 1.0, g));
                acc.add(b, |buf| axpy(buf, 1.0, g));
            }
            &Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                acc.add(a, |buf| {
                    for ((d, gi), y) in buf.iter_mut().zip(g).zip(vb) {
                        *d += gi * y;
                    }
                });
                acc.add(b, |buf| {
                    for ((d, gi), x) in buf.iter_mut().zip(g).zip(va) {
                        *d += gi * x;
                    }
                });
            }
            &Op::Scale { a, factor } => acc.add(a, |buf| axpy(buf, factor, g)),
            &Op::AddRowBias { a, bias, cols } => {
                acc.add(a, |buf| axpy(buf, 1.0, g));
                acc.add(bias, |buf| {
                    for row in g.chunks(cols.max(1)) {
                        axpy(buf, 1.0, row);
                    }
                });
            }
            &Op::AddScalar { a, s } => {
                acc.add(a, |buf| axpy(buf, 1.0, g));
                acc.add(s, |buf| buf[0] += g.iter().sum::<f64>());
            }
            &Op::RowSoftmax { a, cols } => acc.add(a, |buf| {
                if cols == 0 {
                    return;
                }
                for ((d, gr), yr) in buf.chunks_mut(cols).zip(g.chunks(cols)).zip(out.chunks(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for c in 0..cols {
                        d[c] += yr[c] * (gr[c] - dot);
                    }
                }
            }),
            Op::LayerNorm {
                a,
                gain,
                bias,
                cols,
                normalized,
                inv_std,
                guarded,
            } => {
                let cols = *cols;
                let gv = self.value(*gain);
                acc.add(*gain, |buf| {
                    for (gr, xr) in g.chunks(cols).zip(normalized.chunks(cols)) {
                        for c in 0..cols {
                            buf[c] += gr[c] * xr[c];
                        }
                    }
                });
                acc.add(*bias, |buf| {
                    for gr in g.chunks(cols) {
                        axpy(buf, 1.0, gr);
                    }
                });
                acc.add(*a, |buf| {
                    let nf = cols as f64;
                    let mut dxh = vec![0.0; cols];
                    for (r, (d, gr)) in buf.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let xr = &normalized[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxh[c] = gr[c] * gv[c];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let inv = inv_std[r];
                        if guarded[r] {
                            for c in 0..cols {
                                d[c] += inv * (dxh[c] - s1 / nf);
                            }
                        } else {
                            let s2: f64 = dxh.iter().zip(xr).map(|(u, v)| u * v).sum();
                            for c in 0..cols {
                                d[c] += inv / nf * (nf * dxh[c] - s1 - xr[c] * s2);
                            }
                        }
                    }
                });
            }
            &Op::Gelu { a } => {
                let va = self.value(a);
                acc.add(a, |buf| {
                    for ((d, gi), &x) in buf.iter_mut().zip(g).zip(va) {
                        *d += gi * gelu_grad(x);
                    }
                });
            }
            &Op::Sigmoid { a } => acc.add(a, |buf| {
                for ((d, gi), y) in buf.iter_mut().zip(g).zip(out.iter()) {
                    *d += gi * y * (1.0 - y);
                }
            }),
            &Op::ConcatLast { a, b, p, q } => {
                let w = p + q;
                acc.add(a, |buf| {
                    for (d, gr) in buf.chunks_mut(p.max(1)).zip(g.chunks(w.max(1))) {
                        axpy(&mut d[..p], 1.0, &gr[..p]);
                    }
                });
                acc.add(b, |buf| {
                    if q == 0 {
                        return;
                    }
                    for (d, gr) in buf.chunks_mut(q).zip(g.chunks(w)) {
                        axpy(d, 1.0, &gr[p..]);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &part in parts {
                    let len = self.value(part).len();
                    let slice = &g[offset..offset + len];
                    acc.add(part, |buf| axpy(buf, 1.0, slice));
                    offset += len;
                }
            }
            &Op::SliceCols { a, cols, start, len } => acc.add(a, |buf| {
                for (d, gr) in buf.chunks_mut(cols).zip(g.chunks(len.max(1))) {
                    axpy(&mut d[start..start + len], 1.0, &gr[..len]);
                }
            }),
            &Op::SliceRows { a, offset } => acc.add(a, |buf| axpy(&mut buf[offset..offset + g.len()], 1.0, g)),
            Op::GatherRows { table, cols, indices } => {
                let cols = *cols;
                acc.add(*table, |buf| {
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(&mut buf[i * cols..(i + 1) * cols], 1.0, &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            &Op::Sum { a } => acc.add(a, |buf| buf.iter_mut().for_each(|d| *d += g[0])),
            &Op::Mean { a } => acc.add(a, |buf| {
                let s = g[0] / buf.len() as f64;
                buf.iter_mut().for_each(|d| *d += s);
            }),
            &Op::Reshape { a } => acc.add(a, |buf| axpy(buf, 1.0, g)),
            Op::Bce {
                probs,
                targets,
                rows,
                cols,
                clip,
            } => {
                let p = self.value(*probs);
                let scale = g[0] / (*rows * *cols) as f64;
                acc.add(*probs, |buf| {
                    for ((d, &pi), &y) in buf.iter_mut().zip(p).zip(targets) {
                        if pi > *clip && pi < 1.0 - *clip {
                            *d += scale * ((1.0 - y) / (1.0 - pi) - y / pi);
                        }
                    }
                });
            }
            Op::Custom { inputs, rule } => {
                let values: Vec<&[f64]> = inputs.iter().map(|&i| self.value(i)).collect();
                let mut taken: Vec<Option<Vec<f64>>> = inputs.iter().map(|&i| acc.take(i)).collect();
                {
                    let mut views: Vec<Option<&mut [f64]>> =
                        taken.iter_mut().map(|t| t.as_deref_mut()).collect();
                    rule.backward(&values, out, g, &mut views);
                }
                for (&i, t) in inputs.iter().zip(taken) {
                    if let Some(t) = t {
                        acc.put(i, t);
                    }
                }
            }
        }
    }
}

struct Accumulator<'a, 'p> {
    tape: &'a Tape<'p>,
    grads: &'a mut [Option<Vec<f64>>],
}

impl Accumulator<'_, '_> {
    /// Detaches the gradient buffer for `id`, allocating zeros if needed.
    /// Returns `None` when `id` takes no gradient.
    fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        if !self.tape.needs_grad[id.0] {
            return None;
        }
        Some(
            self.grads[id.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.tape.value(id).len()]),
        )
    }

    /// Returns a buffer obtained from `take`; adds into any buffer that was
    /// stored meanwhile (the same node appearing twice as an input).
    fn put(&mut self, id: NodeId, buf: Vec<f64>) {
        match &mut self.grads[id.0] {
            Some(existing) => axpy(existing, 1.0, &buf),
            slot => *slot = Some(buf),
        }
    }

    fn add(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if let Some(mut buf) = self.take(id) {
            f(&mut buf);
            self.put(id, buf);
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
