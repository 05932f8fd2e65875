use thiserror::Error;

use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Constant,
    MatMul,
    Transpose,
    Add,
    Sub,
    AddRow,
    MulRow,
    Scale,
    AddScalar,
    RowSoftmax,
    ColumnSoftmax,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    LayerNorm,
    GruCell,
    MeanPool,
    Concatenate,
    ElementwiseProduct,
    SquaredError,
    CosineSimilarity,
    Log,
    Clamp,
    GatherRows,
    StopGradient,
    Sum,
    RowNormalize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Stack vertically (rows).
    Rows,
    /// Stack horizontally (columns).
    Cols,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op:?}): {detail}")]
    Shape { node: usize, op: OpKind, detail: String },
    #[error("non-finite value produced at node {node} ({op:?})")]
    NonFinite { node: usize, op: OpKind },
    #[error("backward seed node {node} is not scalar (shape {rows}x{cols})")]
    NonScalarSeed { node: usize, rows: usize, cols: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// GRU cell parameters as graph variables. Gate column blocks are ordered
/// reset, update, candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_x: Var,
    pub w_h: Var,
    pub b_x: Var,
    pub b_h: Var,
}

enum Op<F> {
    Input,
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    RowSoftmax(Var),
    ColumnSoftmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    LayerNorm { x: Var, inv_std: Vec<F> },
    GruCell { x: Var, h: Var, p: GruVars, r: Tensor<F>, z: Tensor<F>, n: Tensor<F>, gh_n: Tensor<F> },
    MeanPool(Var),
    Concat { parts: Vec<Var>, axis: Axis },
    Mul(Var, Var),
    SquaredError(Var, Var),
    Cosine { a: Var, b: Var, norm_a: Vec<F>, norm_b: Vec<F> },
    Log(Var),
    Clamp { x: Var, lo: F, hi: F },
    GatherRows { x: Var, idx: Vec<usize> },
    StopGradient(Var),
    Sum(Var),
    RowNormalize { x: Var, eps: F },
}

impl<F> Op<F> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Scale(..) => OpKind::Scale,
            Op::AddScalar(_) => OpKind::AddScalar,
            Op::RowSoftmax(_) => OpKind::RowSoftmax,
            Op::ColumnSoftmax(_) => OpKind::ColumnSoftmax,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Relu(_) => OpKind::Relu,
            Op::Exp(_) => OpKind::Exp,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::GruCell { .. } => OpKind::GruCell,
            Op::MeanPool(_) => OpKind::MeanPool,
            Op::Concat { .. } => OpKind::Concatenate,
            Op::Mul(..) => OpKind::ElementwiseProduct,
            Op::SquaredError(..) => OpKind::SquaredError,
            Op::Cosine { .. } => OpKind::CosineSimilarity,
            Op::Log(_) => OpKind::Log,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::StopGradient(_) => OpKind::StopGradient,
            Op::Sum(_) => OpKind::Sum,
            Op::RowNormalize { .. } => OpKind::RowNormalize,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Mul(a, b)
            | Op::SquaredError(a, b)
            | Op::Cosine { a, b, .. } => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::RowSoftmax(a)
            | Op::ColumnSoftmax(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::MeanPool(a)
            | Op::Log(a)
            | Op::StopGradient(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { x, .. }
            | Op::Clamp { x, .. }
            | Op::GatherRows { x, .. }
            | Op::RowNormalize { x, .. } => vec![*x],
            Op::GruCell { x, h, p, .. } => vec![*x, *h, p.w_x, p.w_h, p.b_x, p.b_h],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

struct Node<F> {
    op: Op<F>,
    value: Tensor<F>,
    requires_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Define-by-run tape. Every op evaluates eagerly and records what its
/// adjoint needs; parents always precede children, so the node list is a
/// topological order by construction.
pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    macs: u64,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), macs: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds performed by matrix products and GRU cells so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Whether `to` depends on `from` through gradient-carrying edges.
    pub fn reaches(&self, from: Var, to: Var) -> bool {
        if from.0 > to.0 {
            return false;
        }
        let mut live = vec![false; to.0 + 1];
        live[from.0] = true;
        for i in from.0 + 1..=to.0 {
            let node = &self.nodes[i];
            if matches!(node.op, Op::StopGradient(_)) {
                continue;
            }
            if node.op.parents().iter().any(|p| live[p.0]) {
                live[i] = true;
            }
        }
        live[to.0]
    }

    /// Free input that receives a gradient.
    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op: Op::Input, value, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { op: Op::Constant, value, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { node: id, op: op.kind() });
        }
        let requires_grad = !matches!(op, Op::StopGradient(_))
            && op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        Ok(Var(id))
    }

    fn shape_err(&self, op: OpKind, detail: String) -> AutodiffError {
        AutodiffError::Shape { node: self.nodes.len(), op, detail }
    }

    fn same_shape(&self, op: OpKind, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn row_operand(&self, op: OpKind, a: Var, row: Var) -> Result<()> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != [1, sa[1]] {
            return Err(self.shape_err(op, format!("row operand {sr:?} for matrix {sa:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[1] != sb[0] {
            return Err(self.shape_err(OpKind::MatMul, format!("{sa:?} x {sb:?}")));
        }
        self.macs += (sa[0] * sa[1] * sb[1]) as u64;
        let value = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), value)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose();
        self.push(Op::Transpose(a), value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Add, a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), value)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::Sub, a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), value)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand(OpKind::AddRow, a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v = *v + b;
            }
        }
        self.push(Op::AddRow(a, row), value)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_operand(OpKind::MulRow, a, row)?;
        let mut value = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..value.rows() {
            for (v, &b) in value.row_mut(i).iter_mut().zip(&r) {
                *v = *v * b;
            }
        }
        self.push(Op::MulRow(a, row), value)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).map(|x| x * s);
        self.push(Op::Scale(a, s), value)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let value = self.value(a).map(|x| x + s);
        self.push(Op::AddScalar(a), value)
    }

    /// Softmax along each row, max-subtracted.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            softmax_in_place(value.row_mut(i));
        }
        self.push(Op::RowSoftmax(a), value)
    }

    /// Softmax along each column, max-subtracted.
    pub fn column_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (rows, cols) = (src.rows(), src.cols());
        let mut value = src.clone();
        let mut col = vec![F::zero(); rows];
        for c in 0..cols {
            for (r, slot) in col.iter_mut().enumerate() {
                *slot = src.get(r, c);
            }
            softmax_in_place(&mut col);
            for (r, &v) in col.iter().enumerate() {
                value.set(r, c, v);
            }
        }
        self.push(Op::ColumnSoftmax(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(F::zero()));
        self.push(Op::Relu(a), value)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.exp());
        self.push(Op::Exp(a), value)
    }

    /// Natural log. Callers guard the domain (see [`Graph::safe_log`]).
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.ln());
        self.push(Op::Log(a), value)
    }

    /// `log(clamp(x, 1e-12, 1))`.
    pub fn safe_log(&mut self, a: Var) -> Result<Var> {
        let c = self.clamp(a, F::lit(1e-12), F::one())?;
        self.log(c)
    }

    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(Op::Clamp { x: a, lo, hi }, value)
    }

    /// Per-row normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let n = F::from_usize(src.cols()).unwrap();
        let eps = F::lit(LAYER_NORM_EPS);
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<F>() / n;
            let r = F::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * r;
            }
            inv_std.push(r);
        }
        self.push(Op::LayerNorm { x: a, inv_std }, value)
    }

    /// Batched GRU cell: `x` is `S×n_in`, `h` is `S×n`; `w_x` is `n_in×3n`,
    /// `w_h` is `n×3n`, biases `1×3n`.
    pub fn gru_cell(&mut self, x: Var, h: Var, p: GruVars) -> Result<Var> {
        let [s, n_in] = self.shape(x);
        let [sh, n] = self.shape(h);
        let ok = sh == s
            && self.shape(p.w_x) == [n_in, 3 * n]
            && self.shape(p.w_h) == [n, 3 * n]
            && self.shape(p.b_x) == [1, 3 * n]
            && self.shape(p.b_h) == [1, 3 * n];
        if !ok {
            return Err(self.shape_err(
                OpKind::GruCell,
                format!(
                    "x {:?}, h {:?}, w_x {:?}, w_h {:?}",
                    self.shape(x),
                    self.shape(h),
                    self.shape(p.w_x),
                    self.shape(p.w_h)
                ),
            ));
        }
        self.macs += (s * n_in * 3 * n + s * n * 3 * n) as u64;
        let gx = self.value(x).matmul(self.value(p.w_x));
        let gh = self.value(h).matmul(self.value(p.w_h));
        let bx = self.value(p.b_x).data();
        let bh = self.value(p.b_h).data();
        let hv = self.value(h);
        let mut r = Tensor::zeros(s, n);
        let mut z = Tensor::zeros(s, n);
        let mut cand = Tensor::zeros(s, n);
        let mut gh_n = Tensor::zeros(s, n);
        let mut out = Tensor::zeros(s, n);
        for i in 0..s {
            for j in 0..n {
                let rv = sigmoid(gx.get(i, j) + bx[j] + gh.get(i, j) + bh[j]);
                let zv = sigmoid(gx.get(i, n + j) + bx[n + j] + gh.get(i, n + j) + bh[n + j]);
                let ghn = gh.get(i, 2 * n + j) + bh[2 * n + j];
                let nv = (gx.get(i, 2 * n + j) + bx[2 * n + j] + rv * ghn).tanh();
                r.set(i, j, rv);
                z.set(i, j, zv);
                cand.set(i, j, nv);
                gh_n.set(i, j, ghn);
                out.set(i, j, (F::one() - zv) * nv + zv * hv.get(i, j));
            }
        }
        self.push(Op::GruCell { x, h, p, r, z, n: cand, gh_n }, out)
    }

    /// Mean over rows, producing `1×n`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rows() == 0 {
            return Err(self.shape_err(OpKind::MeanPool, "mean over zero rows".into()));
        }
        let inv = F::one() / F::from_usize(src.rows()).unwrap();
        let value = src.col_sums().map(|v| v * inv);
        self.push(Op::MeanPool(a), value)
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis) -> Result<Var> {
        if parts.is_empty() {
            return Err(self.shape_err(OpKind::Concatenate, "no parts".into()));
        }
        let shapes: Vec<[usize; 2]> = parts.iter().map(|&p| self.shape(p)).collect();
        let value = match axis {
            Axis::Rows => {
                let cols = shapes[0][1];
                if shapes.iter().any(|s| s[1] != cols) {
                    return Err(self.shape_err(OpKind::Concatenate, format!("{shapes:?}")));
                }
                let rows = shapes.iter().map(|s| s[0]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for &p in parts {
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::from_vec(rows, cols, data).unwrap()
            }
            Axis::Cols => {
                let rows = shapes[0][0];
                if shapes.iter().any(|s| s[0] != rows) {
                    return Err(self.shape_err(OpKind::Concatenate, format!("{shapes:?}")));
                }
                let cols = shapes.iter().map(|s| s[1]).sum();
                let mut data = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row(r));
                    }
                }
                Tensor::from_vec(rows, cols, data).unwrap()
            }
        };
        self.push(Op::Concat { parts: parts.to_vec(), axis }, value)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::ElementwiseProduct, a, b)?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), value)
    }

    /// Mean of squared differences over all entries, as a scalar.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::SquaredError, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let n = F::from_usize(va.len().max(1)).unwrap();
        let s: F = va.data().iter().zip(vb.data()).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push(Op::SquaredError(a, b), Tensor::scalar(s / n))
    }

    /// Row-wise cosine similarity, `M×1`. Rows where either operand has zero
    /// norm yield 0 and carry no gradient.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(OpKind::CosineSimilarity, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let rows = va.rows();
        let mut norm_a = Vec::with_capacity(rows);
        let mut norm_b = Vec::with_capacity(rows);
        let mut out = Tensor::zeros(rows, 1);
        for i in 0..rows {
            let (ra, rb) = (va.row(i), vb.row(i));
            let na = ra.iter().map(|&x| x * x).sum::<F>().sqrt();
            let nb = rb.iter().map(|&x| x * x).sum::<F>().sqrt();
            if na > F::zero() && nb > F::zero() {
                let dot: F = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
                out.set(i, 0, dot / (na * nb));
            }
            norm_a.push(na);
            norm_b.push(nb);
        }
        self.push(Op::Cosine { a, b, norm_a, norm_b }, out)
    }

    /// Rows of `a` picked by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.shape(a)[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(self.shape_err(OpKind::GatherRows, format!("index {bad} >= {rows}")));
        }
        let value = self.value(a).select_rows(idx);
        self.push(Op::GatherRows { x: a, idx: idx.to_vec() }, value)
    }

    /// Identity forward, zero adjoint.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(Op::StopGradient(a), value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    /// Divides each row by `(row sum + eps)`.
    pub fn row_normalize(&mut self, a: Var, eps: F) -> Result<Var> {
        let mut value = self.value(a).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let d = row.iter().copied().sum::<F>() + eps;
            for x in row.iter_mut() {
                *x = *x / d;
            }
        }
        self.push(Op::RowNormalize { x: a, eps }, value)
    }

    /// `a · W` (+ `b`), the affine map used by every dense layer.
    pub fn linear(&mut self, a: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(a, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar seed.
    pub fn backward(&self, seed: Var) -> Result<Gradients<F>> {
        let sv = self.value(seed);
        if !sv.is_scalar() {
            return Err(AutodiffError::NonScalarSeed { node: seed.0, rows: sv.rows(), cols: sv.cols() });
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[seed.0] = Some(Tensor::scalar(F::one()));
        for i in (0..=seed.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<F>, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let mut acc = |v: Var, t: Tensor<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Input | Op::Constant | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul_t(self.value(*b)));
                acc(*b, self.value(*a).t_matmul(g));
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.col_sums());
            }
            Op::MulRow(a, row) => {
                let r = self.value(*row);
                let av = self.value(*a);
                let mut ga = g.clone();
                let mut gr = Tensor::zeros(1, r.cols());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        ga.set(i, j, g.get(i, j) * r.get(0, j));
                        let cur = gr.get(0, j);
                        gr.set(0, j, cur + g.get(i, j) * av.get(i, j));
                    }
                }
                acc(*a, ga);
                acc(*row, gr);
            }
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::RowSoftmax(a) => {
                let mut out = g.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (o, (&p, &q)) in out.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = p * (q - dot);
                    }
                }
                acc(*a, out);
            }
            Op::ColumnSoftmax(a) => {
                let mut out = g.clone();
                for c in 0..y.cols() {
                    let dot: F = (0..y.rows()).map(|r| y.get(r, c) * g.get(r, c)).sum();
                    for r in 0..y.rows() {
                        out.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                    }
                }
                acc(*a, out);
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(y, |q, s| q * s * (F::one() - s))),
            Op::Tanh(a) => acc(*a, g.zip_map(y, |q, t| q * (F::one() - t * t))),
            Op::Relu(a) => {
                acc(*a, g.zip_map(self.value(*a), |q, x| if x > F::zero() { q } else { F::zero() }))
            }
            Op::Exp(a) => acc(*a, g.zip_map(y, |q, e| q * e)),
            Op::Log(a) => acc(*a, g.zip_map(self.value(*a), |q, x| q / x)),
            Op::Clamp { x, lo, hi } => acc(
                *x,
                g.zip_map(self.value(*x), |q, v| if v >= *lo && v <= *hi { q } else { F::zero() }),
            ),
            Op::LayerNorm { x, inv_std } => {
                let n = F::from_usize(y.cols()).unwrap();
                let mut out = g.clone();
                for (i, &r) in inv_std.iter().enumerate() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let mg = gr.iter().copied().sum::<F>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&q, &v)| q * v).sum::<F>() / n;
                    for (o, (&q, &v)) in out.row_mut(i).iter_mut().zip(gr.iter().zip(yr)) {
                        *o = r * (q - mg - v * mgy);
                    }
                }
                acc(*x, out);
            }
            Op::GruCell { x, h, p, r, z, n, gh_n } => {
                let hv = self.value(*h);
                let (s, width) = (hv.rows(), hv.cols());
                let mut dgx = Tensor::zeros(s, 3 * width);
                let mut dgh = Tensor::zeros(s, 3 * width);
                let mut dh = Tensor::zeros(s, width);
                for i in 0..s {
                    for j in 0..width {
                        let q = g.get(i, j);
                        let (rv, zv, nv) = (r.get(i, j), z.get(i, j), n.get(i, j));
                        let dz = q * (hv.get(i, j) - nv);
                        let dn = q * (F::one() - zv);
                        dh.set(i, j, q * zv);
                        let dn_pre = dn * (F::one() - nv * nv);
                        let dr_pre = dn_pre * gh_n.get(i, j) * rv * (F::one() - rv);
                        let dz_pre = dz * zv * (F::one() - zv);
                        dgx.set(i, j, dr_pre);
                        dgx.set(i, width + j, dz_pre);
                        dgx.set(i, 2 * width + j, dn_pre);
                        dgh.set(i, j, dr_pre);
                        dgh.set(i, width + j, dz_pre);
                        dgh.set(i, 2 * width + j, dn_pre * rv);
                    }
                }
                acc(*x, dgx.matmul_t(self.value(p.w_x)));
                acc(p.w_x, self.value(*x).t_matmul(&dgx));
                acc(p.b_x, dgx.col_sums());
                dh.add_assign(&dgh.matmul_t(self.value(p.w_h)));
                acc(*h, dh);
                acc(p.w_h, hv.t_matmul(&dgh));
                acc(p.b_h, dgh.col_sums());
            }
            Op::MeanPool(a) => {
                let rows = self.shape(*a)[0];
                let inv = F::one() / F::from_usize(rows).unwrap();
                let mut out = Tensor::zeros(rows, g.cols());
                for i in 0..rows {
                    for (o, &q) in out.row_mut(i).iter_mut().zip(g.data()) {
                        *o = q * inv;
                    }
                }
                acc(*a, out);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let [pr, pc] = self.shape(p);
                    let mut part = Tensor::zeros(pr, pc);
                    match axis {
                        Axis::Rows => {
                            for i in 0..pr {
                                part.row_mut(i).copy_from_slice(g.row(offset + i));
                            }
                            offset += pr;
                        }
                        Axis::Cols => {
                            for i in 0..pr {
                                part.row_mut(i).copy_from_slice(&g.row(i)[offset..offset + pc]);
                            }
                            offset += pc;
                        }
                    }
                    acc(p, part);
                }
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |q, v| q * v));
                acc(*b, g.zip_map(self.value(*a), |q, v| q * v));
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = F::lit(2.0) * g.item() / F::from_usize(va.len().max(1)).unwrap();
                let da = va.zip_map(vb, |x, t| k * (x - t));
                acc(*b, da.map(|v| -v));
                acc(*a, da);
            }
            Op::Cosine { a, b, norm_a, norm_b } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(va.rows(), va.cols());
                let mut db = Tensor::zeros(va.rows(), va.cols());
                for i in 0..va.rows() {
                    let (na, nb) = (norm_a[i], norm_b[i]);
                    if na <= F::zero() || nb <= F::zero() {
                        continue;
                    }
                    let (q, c) = (g.get(i, 0), y.get(i, 0));
                    let inv = F::one() / (na * nb);
                    for j in 0..va.cols() {
                        let (x, t) = (va.get(i, j), vb.get(i, j));
                        da.set(i, j, q * (t * inv - c * x / (na * na)));
                        db.set(i, j, q * (x * inv - c * t / (nb * nb)));
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::GatherRows { x, idx } => {
                let [rows, cols] = self.shape(*x);
                let mut out = Tensor::zeros(rows, cols);
                for (k, &i) in idx.iter().enumerate() {
                    for (o, &q) in out.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o = *o + q;
                    }
                }
                acc(*x, out);
            }
            Op::Sum(a) => {
                let [rows, cols] = self.shape(*a);
                acc(*a, Tensor::full(rows, cols, g.item()));
            }
            Op::RowNormalize { x, eps } => {
                let xv = self.value(*x);
                let mut out = g.clone();
                for i in 0..xv.rows() {
                    let d = xv.row(i).iter().copied().sum::<F>() + *eps;
                    let dot: F = g.row(i).iter().zip(xv.row(i)).map(|(&q, &v)| q * v).sum();
                    let shift = dot / (d * d);
                    for (o, &q) in out.row_mut(i).iter_mut().zip(g.row(i)) {
                        *o = q / d - shift;
                    }
                }
                acc(*x, out);
            }
        }
    }
}

/// Adjoints from one backward sweep.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Gradients<F> {
    /// `None` when the node is unreachable from the seed.
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros when unreachable.
    pub fn wrt(&self, graph: &Graph<F>, v: Var) -> Tensor<F> {
        match self.get(v) {
            Some(g) if graph.requires_grad(v) => g.clone(),
            _ => {
                let [r, c] = graph.shape(v);
                Tensor::zeros(r, c)
            }
        }
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let max = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}
