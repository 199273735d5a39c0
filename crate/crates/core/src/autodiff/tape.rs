use std::collections::BTreeMap;

use super::tensor::{gemm, Tensor};
use super::TensorError;

/// Index of a node on its [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

/// Primitive recorded on the tape together with its parents.
#[derive(Clone, Debug)]
pub enum Op {
    /// Constant input; never receives a gradient.
    Leaf,
    /// Differentiable input that is not trained (e.g. a network input).
    Variable,
    /// Trainable parameter.
    Parameter,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    /// `1 - tanh(x)^2`
    TanhDeriv(NodeId),
    /// `-2 tanh(x) (1 - tanh(x)^2)`
    TanhSecond(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    /// Per-row sum, `m×k -> m×1`.
    SumCols(NodeId),
    Concat(Vec<NodeId>, Axis),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    Transpose(NodeId),
    /// `m×k + 1×k` broadcast over rows.
    AddRow(NodeId, NodeId),
    /// `m×k ⊙ 1×k` broadcast over rows.
    MulRow(NodeId, NodeId),
    /// `m×k ⊙ m×1` broadcast over columns.
    MulCol(NodeId, NodeId),
    /// Per-row vector-matrix product. Row `i` of the `v: m×p` operand times
    /// the `p×q` matrix stored in row `i` of `mat: m×(p·q)`; with the flag set
    /// the stored matrix is `q×p` and used transposed.
    RowVecMat {
        v: NodeId,
        mat: NodeId,
        transpose: bool,
    },
}

impl Op {
    pub fn parents(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf | Variable | Parameter => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) | MulRow(a, b)
            | MulCol(a, b) => vec![*a, *b],
            RowVecMat { v, mat, .. } => vec![*v, *mat],
            Scale(a, _) | Tanh(a) | TanhDeriv(a) | TanhSecond(a) | Sin(a) | Cos(a) | Exp(a)
            | Ln(a) | Square(a) | Sum(a) | Mean(a) | SumCols(a) | Transpose(a)
            | SliceRows(a, ..) | SliceCols(a, ..) => vec![*a],
            Concat(parts, _) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        use Op::*;
        match self {
            Leaf => "leaf",
            Variable => "variable",
            Parameter => "parameter",
            MatMul(..) => "matmul",
            Add(..) => "add",
            Sub(..) => "sub",
            Mul(..) => "mul",
            Scale(..) => "scale",
            Tanh(..) => "tanh",
            TanhDeriv(..) => "tanh_deriv",
            TanhSecond(..) => "tanh_second",
            Sin(..) => "sin",
            Cos(..) => "cos",
            Exp(..) => "exp",
            Ln(..) => "ln",
            Square(..) => "square",
            Sum(..) => "sum",
            Mean(..) => "mean",
            SumCols(..) => "sum_cols",
            Concat(..) => "concat",
            SliceRows(..) => "slice_rows",
            SliceCols(..) => "slice_cols",
            Transpose(..) => "transpose",
            AddRow(..) => "add_row",
            MulRow(..) => "mul_row",
            MulCol(..) => "mul_col",
            RowVecMat { .. } => "row_vec_mat",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub value: Tensor,
    requires_grad: bool,
}

/// Single-writer record of a computation, replayed in reverse by
/// [`Tape::backward`]. Parents always precede their children.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    parameters: Vec<NodeId>,
}

fn tanh_second(t: f64) -> f64 {
    -2.0 * t * (1.0 - t * t)
}

fn tanh_third(t: f64) -> f64 {
    let s = 1.0 - t * t;
    -2.0 * s * (1.0 - 3.0 * t * t)
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

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    fn shape2(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id.0].value;
        (v.rows(), v.cols())
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<NodeId, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Variable | Op::Parameter => true,
            other => other.parents().iter().any(|p| self.requires(*p)),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Ok(id)
    }

    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.push(Op::Leaf, value)
    }

    pub fn variable(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        self.push(Op::Variable, value)
    }

    pub fn parameter(&mut self, value: Tensor) -> Result<NodeId, TensorError> {
        let id = self.push(Op::Parameter, value)?;
        self.parameters.push(id);
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        let (sa, sb) = (self.shape2(a), self.shape2(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![sa.0, sa.1],
                right: vec![sb.0, sb.1],
            });
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, TensorError> {
        self.same_shape(op.name(), a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(op, value)
    }

    fn unary(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId, TensorError> {
        let value = self.value(a).map(f);
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let ((m, k), (k2, n)) = (self.shape2(a), self.shape2(b));
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push(Op::MatMul(a, b), Tensor::from_matrix(m, n, out)?)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId, TensorError> {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn tanh_deriv(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::TanhDeriv(a), a, |x| {
            let t = x.tanh();
            1.0 - t * t
        })
    }

    pub fn tanh_second(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::TanhSecond(a), a, |x| tanh_second(x.tanh()))
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Sin(a), a, f64::sin)
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Cos(a), a, f64::cos)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Ln(a), a, f64::ln)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    /// Sum of all entries as a `1×1` tensor. Fixed left-to-right order.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Op::Mean(a), Tensor::scalar(s))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let v = self.value(a);
        let out: Vec<f64> = (0..v.rows()).map(|i| v.row_slice(i).iter().sum()).collect();
        self.push(Op::SumCols(a), Tensor::column(&out))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: Axis) -> Result<NodeId, TensorError> {
        let first = *parts.first().ok_or(TensorError::Empty { op: "concat" })?;
        let (r0, c0) = self.shape2(first);
        let value = match axis {
            Axis::Rows => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    if c != c0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: vec![r0, c0],
                            right: vec![r, c],
                        });
                    }
                    data.extend_from_slice(self.value(p).data());
                    rows += r;
                }
                Tensor::from_matrix(rows, c0, data)?
            }
            Axis::Cols => {
                let mut cols = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    if r != r0 {
                        return Err(TensorError::ShapeMismatch {
                            op: "concat",
                            left: vec![r0, c0],
                            right: vec![r, c],
                        });
                    }
                    cols += c;
                }
                let mut data = Vec::with_capacity(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::from_matrix(r0, cols, data)?
            }
        };
        self.push(Op::Concat(parts.to_vec(), axis), value)
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.shape2(a);
        if start + len > r {
            return Err(TensorError::OutOfRange {
                op: "slice_rows",
                start,
                len,
                extent: r,
            });
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        self.push(Op::SliceRows(a, start, len), Tensor::from_matrix(len, c, data)?)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let (r, c) = self.shape2(a);
        if start + len > c {
            return Err(TensorError::OutOfRange {
                op: "slice_cols",
                start,
                len,
                extent: c,
            });
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row_slice(i)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start, len), Tensor::from_matrix(r, len, data)?)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let value = self.value(a).transposed();
        self.push(Op::Transpose(a), value)
    }

    fn check_row_operand(&self, op: &'static str, a: NodeId, row: NodeId) -> Result<(), TensorError> {
        let ((r, c), (rr, rc)) = (self.shape2(a), self.shape2(row));
        if rr != 1 || rc != c {
            return Err(TensorError::ShapeMismatch {
                op,
                left: vec![r, c],
                right: vec![rr, rc],
            });
        }
        Ok(())
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        self.check_row_operand("add_row", a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        let c = r.len();
        for chunk in value.data_mut().chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x += y;
            }
        }
        self.push(Op::AddRow(a, row), value)
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, TensorError> {
        self.check_row_operand("mul_row", a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        let c = r.len();
        for chunk in value.data_mut().chunks_mut(c) {
            for (x, y) in chunk.iter_mut().zip(&r) {
                *x *= y;
            }
        }
        self.push(Op::MulRow(a, row), value)
    }

    pub fn mul_col(&mut self, a: NodeId, col: NodeId) -> Result<NodeId, TensorError> {
        let ((r, c), (cr, cc)) = (self.shape2(a), self.shape2(col));
        if cc != 1 || cr != r {
            return Err(TensorError::ShapeMismatch {
                op: "mul_col",
                left: vec![r, c],
                right: vec![cr, cc],
            });
        }
        let mut value = self.value(a).clone();
        let s = self.value(col).data().to_vec();
        if c > 0 {
            for (chunk, f) in value.data_mut().chunks_mut(c).zip(&s) {
                chunk.iter_mut().for_each(|x| *x *= f);
            }
        }
        self.push(Op::MulCol(a, col), value)
    }

    pub fn row_vec_mat(
        &mut self,
        v: NodeId,
        mat: NodeId,
        transpose: bool,
    ) -> Result<NodeId, TensorError> {
        let ((m, p), (mr, mc)) = (self.shape2(v), self.shape2(mat));
        if mr != m || p == 0 || mc % p != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "row_vec_mat",
                left: vec![m, p],
                right: vec![mr, mc],
            });
        }
        let q = mc / p;
        let (vv, mm) = (self.value(v).data(), self.value(mat).data());
        let mut out = vec![0.0; m * q];
        for i in 0..m {
            let vi = &vv[i * p..(i + 1) * p];
            let mi = &mm[i * mc..(i + 1) * mc];
            let oi = &mut out[i * q..(i + 1) * q];
            if transpose {
                for (c, o) in oi.iter_mut().enumerate() {
                    let row = &mi[c * p..(c + 1) * p];
                    *o = vi.iter().zip(row).map(|(a, b)| a * b).sum();
                }
            } else {
                for (r, &x) in vi.iter().enumerate() {
                    let row = &mi[r * q..(r + 1) * q];
                    for (o, y) in oi.iter_mut().zip(row) {
                        *o += x * y;
                    }
                }
            }
        }
        self.push(
            Op::RowVecMat { v, mat, transpose },
            Tensor::from_matrix(m, q, out)?,
        )
    }

    /// Reverse-mode accumulation of `∂root/∂node` for every parameter and
    /// variable node on the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::new(root_value.shape().to_vec(), vec![1.0])?);
        let mut out = BTreeMap::new();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Variable | Op::Parameter => {
                    out.insert(NodeId(i), g);
                }
                op => self.propagate(op, &node.value, &g, &mut grads)?,
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Variable | Op::Parameter) {
                out.entry(NodeId(i)).or_insert_with(|| {
                    Tensor::new(node.value.shape().to_vec(), vec![0.0; node.value.len()])
                        .expect("shape of existing node")
                });
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.requires(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn with_shape_of(&self, id: NodeId, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(id).shape().to_vec(), data).expect("shape preserved")
    }

    fn propagate(
        &self,
        op: &Op,
        value: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        use Op::*;
        let elementwise = |a: NodeId, f: &dyn Fn(f64, f64, f64) -> f64| -> Tensor {
            // f(input, output, upstream)
            let data = self
                .value(a)
                .data()
                .iter()
                .zip(value.data())
                .zip(g.data())
                .map(|((&x, &y), &gy)| f(x, y, gy))
                .collect();
            self.with_shape_of(a, data)
        };
        match *op {
            Leaf | Variable | Parameter => {}
            MatMul(a, b) => {
                let ((m, k), (_, n)) = (self.shape2(a), self.shape2(b));
                if self.requires(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(b).data(), true, &mut da, false);
                    self.accumulate(grads, a, Tensor::from_matrix(m, k, da)?);
                }
                if self.requires(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, self.value(a).data(), true, g.data(), false, &mut db, false);
                    self.accumulate(grads, b, Tensor::from_matrix(k, n, db)?);
                }
            }
            Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.requires(b) {
                    self.accumulate(grads, b, g.map(|x| -x));
                }
            }
            Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if self.requires(a) {
                    let d = g.data().iter().zip(vb).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, a, self.with_shape_of(a, d));
                }
                if self.requires(b) {
                    let d = g.data().iter().zip(va).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, b, self.with_shape_of(b, d));
                }
            }
            Scale(a, c) => self.accumulate(grads, a, g.map(|x| c * x)),
            Tanh(a) => {
                let d = elementwise(a, &|_, y, gy| gy * (1.0 - y * y));
                self.accumulate(grads, a, d);
            }
            TanhDeriv(a) => {
                let d = elementwise(a, &|x, _, gy| gy * tanh_second(x.tanh()));
                self.accumulate(grads, a, d);
            }
            TanhSecond(a) => {
                let d = elementwise(a, &|x, _, gy| gy * tanh_third(x.tanh()));
                self.accumulate(grads, a, d);
            }
            Sin(a) => {
                let d = elementwise(a, &|x, _, gy| gy * x.cos());
                self.accumulate(grads, a, d);
            }
            Cos(a) => {
                let d = elementwise(a, &|x, _, gy| -gy * x.sin());
                self.accumulate(grads, a, d);
            }
            Exp(a) => {
                let d = elementwise(a, &|_, y, gy| gy * y);
                self.accumulate(grads, a, d);
            }
            Ln(a) => {
                let d = elementwise(a, &|x, _, gy| gy / x);
                self.accumulate(grads, a, d);
            }
            Square(a) => {
                let d = elementwise(a, &|x, _, gy| 2.0 * x * gy);
                self.accumulate(grads, a, d);
            }
            Sum(a) => {
                let s = g.data()[0];
                let n = self.value(a).len();
                self.accumulate(grads, a, self.with_shape_of(a, vec![s; n]));
            }
            Mean(a) => {
                let n = self.value(a).len();
                let s = g.data()[0] / n as f64;
                self.accumulate(grads, a, self.with_shape_of(a, vec![s; n]));
            }
            SumCols(a) => {
                let (r, c) = self.shape2(a);
                let mut d = Vec::with_capacity(r * c);
                for &gi in g.data() {
                    d.extend(std::iter::repeat(gi).take(c));
                }
                self.accumulate(grads, a, self.with_shape_of(a, d));
            }
            Concat(ref parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.shape2(p);
                    if self.requires(p) {
                        let d = match axis {
                            Axis::Rows => g.data()[offset * c..(offset + r) * c].to_vec(),
                            Axis::Cols => {
                                let mut d = Vec::with_capacity(r * c);
                                for i in 0..r {
                                    d.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                                }
                                d
                            }
                        };
                        self.accumulate(grads, p, self.with_shape_of(p, d));
                    }
                    offset += match axis {
                        Axis::Rows => r,
                        Axis::Cols => c,
                    };
                }
            }
            SliceRows(a, start, len) => {
                let (r, c) = self.shape2(a);
                let mut d = vec![0.0; r * c];
                d[start * c..(start + len) * c].copy_from_slice(g.data());
                self.accumulate(grads, a, self.with_shape_of(a, d));
            }
            SliceCols(a, start, len) => {
                let (r, c) = self.shape2(a);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    d[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, a, self.with_shape_of(a, d));
            }
            Transpose(a) => {
                let d = g.transposed();
                self.accumulate(grads, a, self.with_shape_of(a, d.into_data()));
            }
            AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.requires(row) {
                    let c = g.cols();
                    let mut d = vec![0.0; c];
                    for chunk in g.data().chunks(c) {
                        for (x, y) in d.iter_mut().zip(chunk) {
                            *x += y;
                        }
                    }
                    self.accumulate(grads, row, self.with_shape_of(row, d));
                }
            }
            MulRow(a, row) => {
                let r = self.value(row).data();
                let c = r.len();
                if self.requires(a) {
                    let mut d = g.data().to_vec();
                    for chunk in d.chunks_mut(c) {
                        for (x, y) in chunk.iter_mut().zip(r) {
                            *x *= y;
                        }
                    }
                    self.accumulate(grads, a, self.with_shape_of(a, d));
                }
                if self.requires(row) {
                    let mut d = vec![0.0; c];
                    for (gc, ac) in g.data().chunks(c).zip(self.value(a).data().chunks(c)) {
                        for ((x, gy), av) in d.iter_mut().zip(gc).zip(ac) {
                            *x += gy * av;
                        }
                    }
                    self.accumulate(grads, row, self.with_shape_of(row, d));
                }
            }
            MulCol(a, col) => {
                let s = self.value(col).data();
                let c = self.shape2(a).1;
                if self.requires(a) {
                    let mut d = g.data().to_vec();
                    if c > 0 {
                        for (chunk, f) in d.chunks_mut(c).zip(s) {
                            chunk.iter_mut().for_each(|x| *x *= f);
                        }
                    }
                    self.accumulate(grads, a, self.with_shape_of(a, d));
                }
                if self.requires(col) {
                    let d = if c == 0 {
                        vec![0.0; s.len()]
                    } else {
                        g.data()
                            .chunks(c)
                            .zip(self.value(a).data().chunks(c))
                            .map(|(gc, ac)| gc.iter().zip(ac).map(|(x, y)| x * y).sum())
                            .collect()
                    };
                    self.accumulate(grads, col, self.with_shape_of(col, d));
                }
            }
            RowVecMat { v, mat, transpose } => {
                let ((m, p), mc) = (self.shape2(v), self.shape2(mat).1);
                let q = mc / p;
                let (vv, mm) = (self.value(v).data(), self.value(mat).data());
                let gd = g.data();
                // entry (r, c) of the p×q operand of row i
                let idx = |r: usize, c: usize| if transpose { c * p + r } else { r * q + c };
                if self.requires(v) {
                    let mut dv = vec![0.0; m * p];
                    for i in 0..m {
                        let mi = &mm[i * mc..(i + 1) * mc];
                        let gi = &gd[i * q..(i + 1) * q];
                        for r in 0..p {
                            dv[i * p + r] = (0..q).map(|c| gi[c] * mi[idx(r, c)]).sum();
                        }
                    }
                    self.accumulate(grads, v, self.with_shape_of(v, dv));
                }
                if self.requires(mat) {
                    let mut dm = vec![0.0; m * mc];
                    for i in 0..m {
                        let gi = &gd[i * q..(i + 1) * q];
                        let di = &mut dm[i * mc..(i + 1) * mc];
                        for r in 0..p {
                            let x = vv[i * p + r];
                            for c in 0..q {
                                di[idx(r, c)] = x * gi[c];
                            }
                        }
                    }
                    self.accumulate(grads, mat, self.with_shape_of(mat, dm));
                }
            }
        }
        Ok(())
    }
}

/// Gradients of a scalar root, keyed by parameter/variable node.
/// Nodes the root does not depend on hold exact zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&NodeId, &Tensor)> {
        self.grads.iter()
    }
}
