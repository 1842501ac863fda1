use crate::autodiff::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose_data};
use crate::autodiff::{AutodiffError, OpKind, Tensor};
use crate::scalar::{gelu, normal_cdf, normal_pdf, sigmoid, Scalar};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    SoftmaxRows(Var),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    LayerNorm { x: Var, inv_std: Vec<S> },
    L2Norm(Var),
    Mean(Var),
    Sum(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<S> },
}

impl<S> Op<S> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Hadamard(..) => OpKind::Hadamard,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(..) => OpKind::Transpose,
            Op::SoftmaxRows(..) => OpKind::SoftmaxRows,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Log(..) => OpKind::Log,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::L2Norm(..) => OpKind::L2Norm,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::MeanRows(..) => OpKind::MeanRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::ConcatCols(..) => OpKind::ConcatCols,
            Op::SliceRows { .. } => OpKind::SliceRows,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::Gather { .. } => OpKind::Gather,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Hadamard(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SoftmaxRows(a)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::L2Norm(a)
            | Op::Mean(a)
            | Op::Sum(a)
            | Op::MeanRows(a) => vec![*a],
            Op::LayerNorm { x, .. } | Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Parameterised kernel selector for [`Graph::primitive`].
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive<S> {
    Matmul,
    Add,
    Sub,
    AddRow,
    MulRow,
    Hadamard,
    Scale(S),
    Transpose,
    SoftmaxRows,
    Gelu,
    Sigmoid,
    Log,
    LayerNorm { eps: S },
    L2Norm,
    Mean,
    Sum,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SliceRows { start: usize, end: usize },
    SliceCols { start: usize, end: usize },
    Gather(Vec<usize>),
    CrossEntropy(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

/// A computation graph recorded in creation (topological) order.
#[derive(Debug, Clone, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<(usize, usize)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `v`; zeros when `v` does not reach the loss.
    pub fn wrt(&self, v: Var) -> Tensor<S> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    /// Moves the gradient out, leaving `None` behind.
    pub fn take(&mut self, v: Var) -> Tensor<S> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }
}

fn mismatch<S: Scalar>(kind: OpKind, ts: &[&Tensor<S>]) -> AutodiffError {
    AutodiffError::ShapeMismatch { kind, shapes: ts.iter().map(|t| t.shape().to_vec()).collect() }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Input handles of node `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Option<S> {
        self.value(v).item()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        if !value.is_matrix() {
            let (r, c) = (value.rows(), value.cols());
            let data = value.into_data();
            return self.leaf(Tensor::from_parts(r, c, data), requires_grad);
        }
        self.nodes.push(Node { op: Op::Leaf, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Generic dispatch over every kernel.
    pub fn primitive(&mut self, p: Primitive<S>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let arity = |kind: OpKind, n: usize| -> Result<(), AutodiffError> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(AutodiffError::Arity { kind, expected: n, got: inputs.len() })
            }
        };
        match p {
            Primitive::Matmul => arity(OpKind::Matmul, 2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            Primitive::Add => arity(OpKind::Add, 2).and_then(|_| self.add(inputs[0], inputs[1])),
            Primitive::Sub => arity(OpKind::Sub, 2).and_then(|_| self.sub(inputs[0], inputs[1])),
            Primitive::AddRow => arity(OpKind::AddRow, 2).and_then(|_| self.add_row(inputs[0], inputs[1])),
            Primitive::MulRow => arity(OpKind::MulRow, 2).and_then(|_| self.mul_row(inputs[0], inputs[1])),
            Primitive::Hadamard => {
                arity(OpKind::Hadamard, 2).and_then(|_| self.hadamard(inputs[0], inputs[1]))
            }
            Primitive::Scale(s) => arity(OpKind::Scale, 1).map(|_| self.scale(inputs[0], s)),
            Primitive::Transpose => arity(OpKind::Transpose, 1).map(|_| self.transpose(inputs[0])),
            Primitive::SoftmaxRows => arity(OpKind::SoftmaxRows, 1).map(|_| self.softmax_rows(inputs[0])),
            Primitive::Gelu => arity(OpKind::Gelu, 1).map(|_| self.gelu(inputs[0])),
            Primitive::Sigmoid => arity(OpKind::Sigmoid, 1).map(|_| self.sigmoid(inputs[0])),
            Primitive::Log => arity(OpKind::Log, 1).map(|_| self.log(inputs[0])),
            Primitive::LayerNorm { eps } => arity(OpKind::LayerNorm, 1).map(|_| self.layer_norm(inputs[0], eps)),
            Primitive::L2Norm => arity(OpKind::L2Norm, 1).map(|_| self.l2_norm(inputs[0])),
            Primitive::Mean => arity(OpKind::Mean, 1).map(|_| self.mean(inputs[0])),
            Primitive::Sum => arity(OpKind::Sum, 1).map(|_| self.sum(inputs[0])),
            Primitive::MeanRows => arity(OpKind::MeanRows, 1).map(|_| self.mean_rows(inputs[0])),
            Primitive::ConcatRows => self.concat_rows(inputs),
            Primitive::ConcatCols => self.concat_cols(inputs),
            Primitive::SliceRows { start, end } => {
                arity(OpKind::SliceRows, 1).and_then(|_| self.slice_rows(inputs[0], start, end))
            }
            Primitive::SliceCols { start, end } => {
                arity(OpKind::SliceCols, 1).and_then(|_| self.slice_cols(inputs[0], start, end))
            }
            Primitive::Gather(ids) => arity(OpKind::Gather, 1).and_then(|_| self.gather(inputs[0], &ids)),
            Primitive::CrossEntropy(t) => {
                arity(OpKind::CrossEntropy, 1).and_then(|_| self.cross_entropy(inputs[0], &t))
            }
        }
    }

    // ── kernels ────────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != k {
            return Err(mismatch(OpKind::Matmul, &[ta, tb]));
        }
        let mut out = vec![S::zero(); r * c];
        gemm_acc(ta.data(), tb.data(), &mut out, r, k, c);
        Ok(self.push(Op::Matmul(a, b), Tensor::from_parts(r, c, out)))
    }

    fn zip_same(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(kind, &[ta, tb]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(ta.rows(), ta.cols(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_same(OpKind::Add, a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_same(OpKind::Sub, a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.zip_same(OpKind::Hadamard, a, b, |x, y| x * y)?;
        Ok(self.push(Op::Hadamard(a, b), t))
    }

    fn row_broadcast(
        &self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
    ) -> Result<Tensor<S>, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rows() != 1 || tb.cols() != ta.cols() {
            return Err(mismatch(kind, &[ta, tb]));
        }
        let c = ta.cols();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb.data()[i % c])).collect();
        Ok(Tensor::from_parts(ta.rows(), c, data))
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.row_broadcast(OpKind::AddRow, a, b, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a, b), t))
    }

    /// Multiplies every row of `a` elementwise by a `1 × c` row.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.row_broadcast(OpKind::MulRow, a, b, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a, b), t))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let t = Tensor::from_parts(c, r, transpose_data(ta.data(), r, c));
        self.push(Op::Transpose(a), t)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows(a), Tensor::from_parts(r, c, out))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        self.push(Op::Gelu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), t)
    }

    /// Per-row standardisation `(x − μ) / √(σ² + eps)` without affine terms.
    pub fn layer_norm(&mut self, a: Var, eps: S) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let n = S::from_usize(c).expect("width fits scalar");
        let mut out = ta.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in out.chunks_mut(c) {
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<S>() / n;
            let inv = S::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(Op::LayerNorm { x: a, inv_std }, Tensor::from_parts(r, c, out))
    }

    /// Euclidean norm over all elements, as a `1 × 1` node.
    pub fn l2_norm(&mut self, a: Var) -> Var {
        let n = self.value(a).data().iter().map(|&x| x * x).sum::<S>().sqrt();
        self.push(Op::L2Norm(a), Tensor::scalar(n))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let n = S::from_usize(ta.len()).expect("length fits scalar");
        let m = ta.data().iter().copied().sum::<S>() / n;
        self.push(Op::Mean(a), Tensor::scalar(m))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<S>();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Column-wise mean, `r × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        let inv = S::one() / S::from_usize(r).expect("rows fit scalar");
        let mut out = vec![S::zero(); c];
        for row in ta.data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o *= inv);
        self.push(Op::MeanRows(a), Tensor::from_parts(1, c, out))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Arity { kind: OpKind::ConcatRows, expected: 1, got: 0 });
        };
        let c = self.value(first).cols();
        if parts.iter().any(|&p| self.value(p).cols() != c) {
            let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
            return Err(mismatch(OpKind::ConcatRows, &ts));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let r = data.len() / c;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor::from_parts(r, c, data)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let Some(&first) = parts.first() else {
            return Err(AutodiffError::Arity { kind: OpKind::ConcatCols, expected: 1, got: 0 });
        };
        let r = self.value(first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            let ts: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
            return Err(mismatch(OpKind::ConcatCols, &ts));
        }
        let c: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), Tensor::from_parts(r, c, data)))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        if start >= end || end > ta.rows() {
            return Err(AutodiffError::IndexOutOfRange { kind: OpKind::SliceRows, index: end, bound: ta.rows() });
        }
        let c = ta.cols();
        let data = ta.data()[start * c..end * c].to_vec();
        Ok(self.push(Op::SliceRows { x: a, start }, Tensor::from_parts(end - start, c, data)))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let ta = self.value(a);
        if start >= end || end > ta.cols() {
            return Err(AutodiffError::IndexOutOfRange { kind: OpKind::SliceCols, index: end, bound: ta.cols() });
        }
        let r = ta.rows();
        let mut data = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            data.extend_from_slice(&ta.row_slice(i)[start..end]);
        }
        Ok(self.push(Op::SliceCols { x: a, start }, Tensor::from_parts(r, end - start, data)))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let tt = self.value(table);
        if ids.is_empty() {
            return Err(AutodiffError::Arity { kind: OpKind::Gather, expected: 1, got: 0 });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= tt.rows()) {
            return Err(AutodiffError::IndexOutOfRange { kind: OpKind::Gather, index: bad, bound: tt.rows() });
        }
        let c = tt.cols();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            data.extend_from_slice(tt.row_slice(i));
        }
        let t = Tensor::from_parts(ids.len(), c, data);
        Ok(self.push(Op::Gather { table, ids: ids.to_vec() }, t))
    }

    /// Mean over rows of `−log softmax(logits_i)[targets_i]`, as a `1 × 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, AutodiffError> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        if targets.len() != r {
            return Err(AutodiffError::ShapeMismatch {
                kind: OpKind::CrossEntropy,
                shapes: vec![tl.shape().to_vec(), vec![targets.len()]],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(AutodiffError::IndexOutOfRange { kind: OpKind::CrossEntropy, index: bad, bound: c });
        }
        let mut probs = tl.data().to_vec();
        let mut loss = S::zero();
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<S>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let n = S::from_usize(r).expect("rows fit scalar");
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), probs };
        Ok(self.push(op, Tensor::scalar(loss / n)))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse accumulation from a `1 × 1` loss node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(lv.shape().to_vec()));
        }
        let shapes: Vec<(usize, usize)> = self.nodes.iter().map(|n| (n.value.rows(), n.value.cols())).collect();
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads, &shapes);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(
        &self,
        node: &Node<S>,
        g: &Tensor<S>,
        grads: &mut [Option<Tensor<S>>],
        shapes: &[(usize, usize)],
    ) {
        let gd = g.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            if !needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| {
                let (r, c) = shapes[v.0];
                Tensor::zeros(r, c)
            });
            f(slot.data_mut());
        };
        let out = &node.value;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                acc(*a, &mut |da| gemm_nt_acc(gd, tb.data(), da, r, c, k));
                acc(*b, &mut |db| gemm_tn_acc(ta.data(), gd, db, r, k, c));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |da| add_into(da, gd));
                acc(*b, &mut |db| add_into(db, gd));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |da| add_into(da, gd));
                acc(*b, &mut |db| db.iter_mut().zip(gd).for_each(|(d, &x)| *d -= x));
            }
            Op::AddRow(a, b) => {
                let c = out.cols();
                acc(*a, &mut |da| add_into(da, gd));
                acc(*b, &mut |db| {
                    for row in gd.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::MulRow(a, b) => {
                let c = out.cols();
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += gd[i] * tb.data()[i % c];
                    }
                });
                acc(*b, &mut |db| {
                    for (i, (&gv, &av)) in gd.iter().zip(ta.data()).enumerate() {
                        db[i % c] += gv * av;
                    }
                });
            }
            Op::Hadamard(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, &mut |da| {
                    for ((d, &gv), &bv) in da.iter_mut().zip(gd).zip(tb.data()) {
                        *d += gv * bv;
                    }
                });
                acc(*b, &mut |db| {
                    for ((d, &gv), &av) in db.iter_mut().zip(gd).zip(ta.data()) {
                        *d += gv * av;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |da| da.iter_mut().zip(gd).for_each(|(d, &x)| *d += x * *s)),
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let gt = transpose_data(gd, r, c);
                acc(*a, &mut |da| add_into(da, &gt));
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                acc(*a, &mut |da| {
                    for ((d_row, g_row), y_row) in da.chunks_mut(c).zip(gd.chunks(c)).zip(out.data().chunks(c)) {
                        let dot: S = g_row.iter().zip(y_row).map(|(&gv, &y)| gv * y).sum();
                        for ((d, &gv), &y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                            *d += y * (gv - dot);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(gd).zip(ta.data()) {
                        *d += gv * (normal_cdf(x) + x * normal_pdf(x));
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |da| {
                for ((d, &gv), &y) in da.iter_mut().zip(gd).zip(out.data()) {
                    *d += gv * y * (S::one() - y);
                }
            }),
            Op::Log(a) => {
                let ta = self.value(*a);
                acc(*a, &mut |da| {
                    for ((d, &gv), &x) in da.iter_mut().zip(gd).zip(ta.data()) {
                        *d += gv / x;
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let c = out.cols();
                let n = S::from_usize(c).expect("width fits scalar");
                acc(*x, &mut |dx| {
                    for (i, (d_row, (g_row, y_row))) in
                        dx.chunks_mut(c).zip(gd.chunks(c).zip(out.data().chunks(c))).enumerate()
                    {
                        let g_mean = g_row.iter().copied().sum::<S>() / n;
                        let gy_mean = g_row.iter().zip(y_row).map(|(&gv, &y)| gv * y).sum::<S>() / n;
                        for ((d, &gv), &y) in d_row.iter_mut().zip(g_row).zip(y_row) {
                            *d += inv_std[i] * (gv - g_mean - y * gy_mean);
                        }
                    }
                });
            }
            Op::L2Norm(a) => {
                let norm = out.data()[0];
                if norm > S::zero() {
                    let ta = self.value(*a);
                    let scale = gd[0] / norm;
                    acc(*a, &mut |da| da.iter_mut().zip(ta.data()).for_each(|(d, &x)| *d += scale * x));
                }
            }
            Op::Mean(a) => {
                let n = S::from_usize(shapes[a.0].0 * shapes[a.0].1).expect("length fits scalar");
                let v = gd[0] / n;
                acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += v));
            }
            Op::Sum(a) => acc(*a, &mut |da| da.iter_mut().for_each(|d| *d += gd[0])),
            Op::MeanRows(a) => {
                let (r, c) = shapes[a.0];
                let inv = S::one() / S::from_usize(r).expect("rows fit scalar");
                acc(*a, &mut |da| {
                    for row in da.chunks_mut(c) {
                        row.iter_mut().zip(gd).for_each(|(d, &gv)| *d += gv * inv);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let c = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let n = shapes[p.0].0 * c;
                    acc(p, &mut |dp| add_into(dp, &gd[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let c = out.cols();
                let mut col = 0;
                for &p in parts {
                    let pc = shapes[p.0].1;
                    acc(p, &mut |dp| {
                        for (d_row, g_row) in dp.chunks_mut(pc).zip(gd.chunks(c)) {
                            add_into(d_row, &g_row[col..col + pc]);
                        }
                    });
                    col += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                let off = start * c;
                acc(*x, &mut |dx| add_into(&mut dx[off..off + gd.len()], gd));
            }
            Op::SliceCols { x, start } => {
                let (xc, oc) = (shapes[x.0].1, out.cols());
                acc(*x, &mut |dx| {
                    for (d_row, g_row) in dx.chunks_mut(xc).zip(gd.chunks(oc)) {
                        add_into(&mut d_row[*start..*start + oc], g_row);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = out.cols();
                acc(*table, &mut |dt| {
                    for (row, &id) in gd.chunks(c).zip(ids) {
                        add_into(&mut dt[id * c..(id + 1) * c], row);
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let c = shapes[logits.0].1;
                let scale = gd[0] / S::from_usize(targets.len()).expect("rows fit scalar");
                acc(*logits, &mut |dl| {
                    for (i, (d_row, p_row)) in dl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        for (j, (d, &p)) in d_row.iter_mut().zip(p_row).enumerate() {
                            let y = if j == targets[i] { S::one() } else { S::zero() };
                            *d += scale * (p - y);
                        }
                    }
                });
            }
        }
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Numerically stable in-place softmax of one row.
pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::new();
        let a = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_left() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let a = g.constant(t(&[&[1.5, -2.0, 3.0], &[0.25, 4.0, -1.0]]));
        let c = g.matmul(i, a).unwrap();
        assert_eq!(g.value(c), g.value(a));
    }

    #[test]
    fn matmul_shape_error_names_kind() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::zeros(2, 3));
        let b = g.constant(Tensor::<f64>::zeros(2, 3));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_gelu_zero() {
        let mut g = Graph::new();
        let z = g.constant(t(&[&[0.0, 0.0, 0.0]]));
        let s = g.softmax_rows(z);
        for &p in g.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let zero = g.constant(Tensor::scalar(0.0));
        let y = g.gelu(zero);
        assert_eq!(g.scalar(y), Some(0.0));
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.hadamard(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), Some(6.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.25));
        let y = g.add(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).item(), Some(2.0));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::new();
        let z = g.param(t(&[&[0.3, -1.2, 2.0, 0.0]]));
        let loss = g.cross_entropy(z, &[1]).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut p = vec![0.3, -1.2, 2.0, 0.0];
        softmax_in_place(&mut p);
        p[1] -= 1.0;
        for (a, b) in grads.wrt(z).data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::<f64>::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn unreachable_nodes_get_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let unused = g.param(t(&[&[1.0, 2.0]]));
        let y = g.scale(x, 4.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(unused).data(), &[0.0, 0.0]);
        assert_eq!(grads.wrt(x).item(), Some(4.0));
    }

    #[test]
    fn layer_norm_standardises_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 2.0, 3.0, 10.0], &[-4.0, 0.5, 0.5, 7.0]]));
        let y = g.layer_norm(x, 1e-12);
        for row in g.value(y).data().chunks(4) {
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gather_and_slice_bounds_checked() {
        let mut g = Graph::new();
        let table = g.constant(Tensor::<f64>::zeros(3, 2));
        assert!(g.gather(table, &[0, 3]).is_err());
        assert!(g.slice_rows(table, 1, 4).is_err());
        assert!(g.slice_cols(table, 1, 1).is_err());
    }

    #[test]
    fn primitive_dispatch_checks_arity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::<f64>::identity(2));
        assert!(matches!(
            g.primitive(Primitive::Matmul, &[a]),
            Err(AutodiffError::Arity { kind: OpKind::Matmul, .. })
        ));
        let b = g.primitive(Primitive::Matmul, &[a, a]).unwrap();
        assert_eq!(g.value(b), &Tensor::identity(2));
    }
}
