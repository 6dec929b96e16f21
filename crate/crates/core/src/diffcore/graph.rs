//! Eager computation graph with reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node. The
//! backward pass is itself expressed with graph operations, so a gradient is
//! an ordinary [`Var`] that can be differentiated again (reverse-over-reverse).

use std::sync::Arc;

use super::{DiffError, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

// Some shape fields are only read through Debug output.
#[allow(dead_code)]
#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivSafe(Var, Var),
    Affine { a: Var, scale: f64, shift: f64 },
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    RowNorm(Var),
    LogSumExpRows(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastRows { a: Var, rows: usize },
    BroadcastCols { a: Var, cols: usize },
    BroadcastScalar { a: Var, rows: usize, cols: usize },
    ConcatCols(Var, Var),
    SliceCols { a: Var, start: usize, end: usize },
    PadCols { a: Var, start: usize, total: usize },
    PickCols { a: Var, idx: Arc<[usize]> },
    ScatterCols { a: Var, idx: Arc<[usize]>, width: usize },
    GatherRows { a: Var, idx: Arc<[usize]> },
    ScatterAddRows { a: Var, idx: Arc<[usize]>, rows: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::DivSafe(..) => "div_safe",
            Op::Affine { .. } => "affine",
            Op::Tanh(_) => "tanh",
            Op::Relu(_) => "relu",
            Op::Exp(_) => "exp",
            Op::RowNorm(_) => "row_norm",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::SumAll(_) => "sum",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::BroadcastRows { .. } => "broadcast_rows",
            Op::BroadcastCols { .. } => "broadcast_cols",
            Op::BroadcastScalar { .. } => "broadcast_scalar",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::PadCols { .. } => "pad_cols",
            Op::PickCols { .. } => "pick_cols",
            Op::ScatterCols { .. } => "scatter_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
        }
    }

    fn inputs(&self) -> [Option<Var>; 2] {
        match *self {
            Op::Leaf => [None, None],
            Op::MatMul { a, b, .. }
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::DivSafe(a, b)
            | Op::ConcatCols(a, b) => [Some(a), Some(b)],
            Op::Affine { a, .. }
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::RowNorm(a)
            | Op::LogSumExpRows(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::BroadcastRows { a, .. }
            | Op::BroadcastCols { a, .. }
            | Op::BroadcastScalar { a, .. }
            | Op::SliceCols { a, .. }
            | Op::PadCols { a, .. }
            | Op::PickCols { a, .. }
            | Op::ScatterCols { a, .. }
            | Op::GatherRows { a, .. }
            | Op::ScatterAddRows { a, .. } => [Some(a), None],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only computation graph. Nodes are stored in topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::Shape { op, detail }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let t = &self.nodes[v.0].value;
        (t.rows(), t.cols())
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var, DiffError> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(DiffError::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(id))
    }

    /// Adds an input node. Leaves are differentiable only when requested in
    /// [`Graph::grad`]; otherwise they behave as constants.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let value = value.as_matrix();
        let id = self.nodes.len();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
        });
        Var(id)
    }

    /// A fresh leaf carrying `v`'s current value; gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.leaf(value)
    }

    fn elementwise(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if (va.rows(), va.cols()) != (vb.rows(), vb.cols()) {
            return Err(shape_err(
                op.name(),
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::from_raw(va.rows(), va.cols(), data);
        self.push(op, value)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let va = self.value(a);
        let value = Tensor::from_raw(va.rows(), va.cols(), va.data().iter().map(|&x| f(x)).collect());
        self.push(op, value)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, DiffError> {
        let (ar, ac) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dimensions {k} and {k2} differ ({ar}x{ac}{}, {br}x{bc}{})",
                    if ta { "^T" } else { "" }, if tb { "^T" } else { "" }),
            ));
        }
        let mut out = vec![0.0; m * n];
        let (rsa, csa) = if ta { (1, ac) } else { (ac, 1) };
        let (rsb, csb) = if tb { (1, bc) } else { (bc, 1) };
        // SAFETY: strides describe the row-major buffers owned by the two
        // input tensors and the freshly allocated m*n output.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                self.value(a).data().as_ptr(),
                rsa as isize,
                csa as isize,
                self.value(b).data().as_ptr(),
                rsb as isize,
                csb as isize,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.push(Op::MatMul { a, b, ta, tb }, Tensor::from_raw(m, n, out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Elementwise `a / b`, defined as 0 wherever `b == 0`.
    pub fn div_safe(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.elementwise(Op::DivSafe(a, b), a, b, |x, y| if y == 0.0 { 0.0 } else { x / y })
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var, DiffError> {
        self.unary(Op::Affine { a, scale, shift }, a, |x| scale * x + shift)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var, DiffError> {
        self.affine(a, scale, 0.0)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.affine(a, -1.0, 0.0)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Tanh(a), a, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(Op::Exp(a), a, f64::exp)
    }

    /// Euclidean norm of each row: `[B, n] -> [B, 1]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        let data = (0..va.rows())
            .map(|r| va.row_slice(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::from_raw(va.rows(), 1, data);
        self.push(Op::RowNorm(a), value)
    }

    /// Numerically stable `log Σ_j exp(a_ij)` per row: `[B, K] -> [B, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        let data = (0..va.rows())
            .map(|r| {
                let row = va.row_slice(r);
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let value = Tensor::from_raw(va.rows(), 1, data);
        self.push(Op::LogSumExpRows(a), value)
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a), Tensor::from_raw(1, 1, vec![s]))
    }

    /// Mean of all entries.
    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum across columns: `[B, n] -> [B, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        let data = (0..va.rows()).map(|r| va.row_slice(r).iter().sum()).collect();
        let value = Tensor::from_raw(va.rows(), 1, data);
        self.push(Op::SumRows(a), value)
    }

    /// Sum across rows: `[B, n] -> [1, n]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var, DiffError> {
        let va = self.value(a);
        let c = va.cols();
        let mut data = vec![0.0; c];
        for r in 0..va.rows() {
            for (acc, x) in data.iter_mut().zip(va.row_slice(r)) {
                *acc += x;
            }
        }
        self.push(Op::SumCols(a), Tensor::from_raw(1, c, data))
    }

    /// Repeats a `[1, n]` row `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        if va.rows() != 1 {
            return Err(shape_err("broadcast_rows", format!("expected one row, got {:?}", va.shape())));
        }
        let data = va.data().repeat(rows);
        let value = Tensor::from_raw(rows, va.cols(), data);
        self.push(Op::BroadcastRows { a, rows }, value)
    }

    /// Repeats a `[B, 1]` column `cols` times.
    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        if va.cols() != 1 {
            return Err(shape_err("broadcast_cols", format!("expected one column, got {:?}", va.shape())));
        }
        let data = va.data().iter().flat_map(|&x| std::iter::repeat(x).take(cols)).collect();
        let value = Tensor::from_raw(va.rows(), cols, data);
        self.push(Op::BroadcastCols { a, cols }, value)
    }

    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        if va.len() != 1 {
            return Err(shape_err("broadcast_scalar", format!("expected scalar, got {:?}", va.shape())));
        }
        let value = Tensor::from_raw(rows, cols, vec![va.data()[0]; rows * cols]);
        self.push(Op::BroadcastScalar { a, rows, cols }, value)
    }

    /// `[B, n] ++ [B, m] -> [B, n + m]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let (n, m) = (va.cols(), vb.cols());
        let mut data = Vec::with_capacity(va.rows() * (n + m));
        for r in 0..va.rows() {
            data.extend_from_slice(va.row_slice(r));
            data.extend_from_slice(vb.row_slice(r));
        }
        let value = Tensor::from_raw(va.rows(), n + m, data);
        self.push(Op::ConcatCols(a, b), value)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        if start >= end || end > va.cols() {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {:?}", va.shape())));
        }
        let mut data = Vec::with_capacity(va.rows() * (end - start));
        for r in 0..va.rows() {
            data.extend_from_slice(&va.row_slice(r)[start..end]);
        }
        let value = Tensor::from_raw(va.rows(), end - start, data);
        self.push(Op::SliceCols { a, start, end }, value)
    }

    /// Places `a` at columns `start..` of a zero matrix `total` wide.
    pub fn pad_cols(&mut self, a: Var, start: usize, total: usize) -> Result<Var, DiffError> {
        let va = self.value(a);
        if start + va.cols() > total {
            return Err(shape_err("pad_cols", format!("{:?} at {start} exceeds {total}", va.shape())));
        }
        let mut data = vec![0.0; va.rows() * total];
        for r in 0..va.rows() {
            data[r * total + start..r * total + start + va.cols()].copy_from_slice(va.row_slice(r));
        }
        let value = Tensor::from_raw(va.rows(), total, data);
        self.push(Op::PadCols { a, start, total }, value)
    }

    /// Picks column `idx[r]` from each row `r`: `[B, K] -> [B, 1]`.
    pub fn pick_cols(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var, DiffError> {
        let idx = idx.into();
        let va = self.value(a);
        if idx.len() != va.rows() || idx.iter().any(|&i| i >= va.cols()) {
            return Err(shape_err("pick_cols", format!("indices do not fit {:?}", va.shape())));
        }
        let data = idx.iter().enumerate().map(|(r, &i)| va.get(r, i)).collect();
        let value = Tensor::from_raw(va.rows(), 1, data);
        self.push(Op::PickCols { a, idx }, value)
    }

    /// Inverse layout of [`Graph::pick_cols`]: `[B, 1] -> [B, width]`, zero elsewhere.
    pub fn scatter_cols(&mut self, a: Var, idx: impl Into<Arc<[usize]>>, width: usize) -> Result<Var, DiffError> {
        let idx = idx.into();
        let va = self.value(a);
        if va.cols() != 1 || idx.len() != va.rows() || idx.iter().any(|&i| i >= width) {
            return Err(shape_err("scatter_cols", format!("indices do not fit {:?} -> {width}", va.shape())));
        }
        let mut data = vec![0.0; va.rows() * width];
        for (r, &i) in idx.iter().enumerate() {
            data[r * width + i] = va.data()[r];
        }
        let value = Tensor::from_raw(va.rows(), width, data);
        self.push(Op::ScatterCols { a, idx, width }, value)
    }

    /// Row lookup: `[S, n]` indexed by `idx` (length B) gives `[B, n]`.
    pub fn gather_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>) -> Result<Var, DiffError> {
        let idx = idx.into();
        let va = self.value(a);
        if idx.iter().any(|&i| i >= va.rows()) {
            return Err(shape_err("gather_rows", format!("index out of range for {:?}", va.shape())));
        }
        let value = va.select_rows(&idx);
        self.push(Op::GatherRows { a, idx }, value)
    }

    /// Accumulates row `r` of `a` into output row `idx[r]`: `[B, n] -> [rows, n]`.
    pub fn scatter_add_rows(&mut self, a: Var, idx: impl Into<Arc<[usize]>>, rows: usize) -> Result<Var, DiffError> {
        let idx = idx.into();
        let va = self.value(a);
        if idx.len() != va.rows() || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("scatter_add_rows", format!("indices do not fit {:?} -> {rows}", va.shape())));
        }
        let c = va.cols();
        let mut data = vec![0.0; rows * c];
        for (r, &i) in idx.iter().enumerate() {
            for (acc, x) in data[i * c..(i + 1) * c].iter_mut().zip(va.row_slice(r)) {
                *acc += x;
            }
        }
        let value = Tensor::from_raw(rows, c, data);
        self.push(Op::ScatterAddRows { a, idx, rows }, value)
    }

    /// Adds a `[1, n]` bias row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let rows = self.dims(a).0;
        let b = self.broadcast_rows(bias, rows)?;
        self.add(a, b)
    }

    /// Scales each row `r` of `a` by `col[r]` (`col` is `[B, 1]`).
    pub fn scale_rows(&mut self, a: Var, col: Var) -> Result<Var, DiffError> {
        let cols = self.dims(a).1;
        let s = self.broadcast_cols(col, cols)?;
        self.mul(a, s)
    }

    /// Squared Euclidean norm of each row: `[B, n] -> [B, 1]`.
    pub fn row_sq_norm(&mut self, a: Var) -> Result<Var, DiffError> {
        let sq = self.mul(a, a)?;
        self.sum_rows(sq)
    }

    /// Gradients of scalar `output` with respect to `wrt`, as new graph nodes.
    ///
    /// The returned nodes are differentiable: calling `grad` again on an
    /// expression built from them yields second-order derivatives. A `wrt`
    /// entry that `output` does not depend on gets a zero leaf.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, DiffError> {
        let out_shape = self.value(output).shape().to_vec();
        if self.value(output).len() != 1 {
            return Err(DiffError::NotScalar { shape: out_shape });
        }
        let end = output.0 + 1;
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] {
                relevant[i] = self.nodes[i]
                    .op
                    .inputs()
                    .iter()
                    .flatten()
                    .any(|v| relevant[v.0]);
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; end];
        if relevant[output.0] {
            adjoint[output.0] = Some(self.leaf(Tensor::from_raw(1, 1, vec![1.0])));
        }
        for i in (0..end).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let inputs = op.inputs();
            for (slot, input) in inputs.iter().enumerate() {
                let Some(input) = *input else { continue };
                if !relevant[input.0] {
                    continue;
                }
                let contrib = self.vjp(&op, Var(i), slot, g)?;
                adjoint[input.0] = Some(match adjoint[input.0] {
                    Some(prev) => self.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.0).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let (r, c) = self.dims(*w);
                    Ok(self.leaf(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian product of node `y = op(..)` for input `slot`, given upstream `g`.
    fn vjp(&mut self, op: &Op, y: Var, slot: usize, g: Var) -> Result<Var, DiffError> {
        match *op {
            Op::Leaf => unreachable!("leaves have no inputs"),
            Op::MatMul { a, b, ta, tb } => {
                if slot == 0 {
                    if ta {
                        self.matmul_t(b, g, tb, true)
                    } else {
                        self.matmul_t(g, b, false, !tb)
                    }
                } else if tb {
                    self.matmul_t(g, a, true, ta)
                } else {
                    self.matmul_t(a, g, !ta, false)
                }
            }
            Op::Add(..) => Ok(g),
            Op::Sub(..) => {
                if slot == 0 {
                    Ok(g)
                } else {
                    self.neg(g)
                }
            }
            Op::Mul(a, b) => self.mul(g, if slot == 0 { b } else { a }),
            Op::DivSafe(_, b) => {
                if slot == 0 {
                    self.div_safe(g, b)
                } else {
                    let gy = self.mul(g, y)?;
                    let q = self.div_safe(gy, b)?;
                    self.neg(q)
                }
            }
            Op::Affine { scale, .. } => self.scale(g, scale),
            Op::Tanh(_) => {
                let y2 = self.mul(y, y)?;
                let d = self.affine(y2, -1.0, 1.0)?;
                self.mul(g, d)
            }
            Op::Relu(a) => {
                let va = self.value(a);
                let mask = Tensor::from_raw(
                    va.rows(),
                    va.cols(),
                    va.data().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
                );
                let m = self.leaf(mask);
                self.mul(g, m)
            }
            Op::Exp(_) => self.mul(g, y),
            Op::RowNorm(a) => {
                let cols = self.dims(a).1;
                let q = self.div_safe(g, y)?;
                let q = self.broadcast_cols(q, cols)?;
                self.mul(q, a)
            }
            Op::LogSumExpRows(a) => {
                let cols = self.dims(a).1;
                let yb = self.broadcast_cols(y, cols)?;
                let shifted = self.sub(a, yb)?;
                let softmax = self.exp(shifted)?;
                let gb = self.broadcast_cols(g, cols)?;
                self.mul(gb, softmax)
            }
            Op::SumAll(a) => {
                let (r, c) = self.dims(a);
                self.broadcast_scalar(g, r, c)
            }
            Op::BroadcastScalar { .. } => self.sum(g),
            Op::SumRows(a) => {
                let c = self.dims(a).1;
                self.broadcast_cols(g, c)
            }
            Op::BroadcastCols { .. } => self.sum_rows(g),
            Op::SumCols(a) => {
                let r = self.dims(a).0;
                self.broadcast_rows(g, r)
            }
            Op::BroadcastRows { .. } => self.sum_cols(g),
            Op::ConcatCols(a, b) => {
                let n = self.dims(a).1;
                let m = self.dims(b).1;
                if slot == 0 {
                    self.slice_cols(g, 0, n)
                } else {
                    self.slice_cols(g, n, n + m)
                }
            }
            Op::SliceCols { a, start, .. } => {
                let total = self.dims(a).1;
                self.pad_cols(g, start, total)
            }
            Op::PadCols { a, start, .. } => {
                let w = self.dims(a).1;
                self.slice_cols(g, start, start + w)
            }
            Op::PickCols { a, ref idx } => {
                let width = self.dims(a).1;
                self.scatter_cols(g, idx.clone(), width)
            }
            Op::ScatterCols { ref idx, .. } => self.pick_cols(g, idx.clone()),
            Op::GatherRows { a, ref idx } => {
                let rows = self.dims(a).0;
                self.scatter_add_rows(g, idx.clone(), rows)
            }
            Op::ScatterAddRows { ref idx, .. } => self.gather_rows(g, idx.clone()),
        }
    }
}

/// Gradient values of scalar `output` with respect to each of `wrt`.
pub fn backward(graph: &mut Graph, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, DiffError> {
    let grads = graph.grad(output, wrt)?;
    Ok(grads.into_iter().map(|g| graph.value(g).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.leaf(Tensor::scalar(v).unwrap())
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let w = scalar(&mut g, 3.0);
        let y = g.mul(w, w).unwrap();
        let grads = backward(&mut g, y, &[w]).unwrap();
        assert_eq!(grads[0].item().unwrap(), 6.0);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let mut g = Graph::new();
        let w = scalar(&mut g, 3.0);
        let c = scalar(&mut g, 5.0);
        let y = g.mul(c, c).unwrap();
        let grads = backward(&mut g, y, &[w]).unwrap();
        assert_eq!(grads[0].item().unwrap(), 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::row(&[1.0, 2.0]).unwrap());
        assert!(matches!(g.grad(w, &[w]), Err(DiffError::NotScalar { .. })));
    }

    #[test]
    fn double_backward_through_gradient_norm() {
        // g(w) = ||grad_x (w . x)||^2 = ||w||^2, so dg/dw = 2w.
        let mut g = Graph::new();
        let w = g.leaf(Tensor::column(&[3.0, 4.0]).unwrap());
        let x = g.leaf(Tensor::row(&[0.3, -1.2]).unwrap());
        let dot = g.matmul(x, w).unwrap();
        let gx = g.grad(dot, &[x]).unwrap()[0];
        let n = g.row_sq_norm(gx).unwrap();
        let s = g.sum(n).unwrap();
        assert_eq!(g.value(s).item().unwrap(), 25.0);
        let dw = backward(&mut g, s, &[w]).unwrap();
        assert_eq!(dw[0].data(), &[6.0, 8.0]);
    }

    #[test]
    fn nonfinite_values_name_the_node() {
        let mut g = Graph::new();
        let a = scalar(&mut g, 800.0);
        let err = g.exp(a).unwrap_err();
        assert!(matches!(err, DiffError::NonFinite { op: "exp", node: 1 }));
    }

    #[test]
    fn row_norm_at_zero_has_zero_subgradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row(&[0.0, 0.0]).unwrap());
        let n = g.row_norm(a).unwrap();
        let s = g.sum(n).unwrap();
        let d = backward(&mut g, s, &[a]).unwrap();
        assert_eq!(d[0].data(), &[0.0, 0.0]);
    }

    #[test]
    fn transposed_matmul_matches_plain() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap());
        let b = g.leaf(Tensor::from_rows(&[[1.0, 0.5], [2.0, -1.0]]).unwrap());
        let c = g.matmul_t(a, b, true, false).unwrap();
        assert_eq!(g.value(c).shape(), &[3, 2]);
        assert_eq!(g.value(c).row_slice(0), &[9.0, -3.5]);
        let bad = g.matmul(a, b);
        assert!(matches!(bad, Err(DiffError::Shape { .. })));
    }

    #[test]
    fn logsumexp_is_stable() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::row(&[1000.0, 1000.0]).unwrap());
        let l = g.logsumexp_rows(a).unwrap();
        let v = g.value(l).item().unwrap();
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
