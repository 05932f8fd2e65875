//! Reference inputs for every differentiable op, shared by the unit tests and
//! the acceptance gradient checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{finite_diff_check, Axis, Graph, GruVars, OpKind, Result, Tensor, Var};
use crate::scalar::Scalar;

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Random values whose magnitude stays at least `gap` away from `pivot`.
pub fn rand_away(rng: &mut ChaCha8Rng, rows: usize, cols: usize, pivot: f64, gap: f64) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let mag = rng.random_range(gap..1.5);
            if rng.random_bool(0.5) { pivot + mag } else { pivot - mag }
        })
        .collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

pub const CHECKED_OPS: [OpKind; 26] = [
    OpKind::MatMul,
    OpKind::Transpose,
    OpKind::Add,
    OpKind::Sub,
    OpKind::AddRow,
    OpKind::MulRow,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::RowSoftmax,
    OpKind::ColumnSoftmax,
    OpKind::Sigmoid,
    OpKind::Tanh,
    OpKind::Relu,
    OpKind::Exp,
    OpKind::LayerNorm,
    OpKind::GruCell,
    OpKind::MeanPool,
    OpKind::Concatenate,
    OpKind::ElementwiseProduct,
    OpKind::SquaredError,
    OpKind::CosineSimilarity,
    OpKind::Log,
    OpKind::Clamp,
    OpKind::GatherRows,
    OpKind::Sum,
    OpKind::RowNormalize,
];

pub fn case_point(kind: OpKind, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let m = |rng: &mut ChaCha8Rng, r, c| rand_tensor(rng, r, c, -1.5, 1.5);
    match kind {
        OpKind::MatMul => vec![m(rng, 3, 4), m(rng, 4, 2)],
        OpKind::Add | OpKind::Sub | OpKind::ElementwiseProduct | OpKind::SquaredError => {
            vec![m(rng, 3, 4), m(rng, 3, 4)]
        }
        OpKind::CosineSimilarity => vec![m(rng, 3, 4), m(rng, 3, 4)],
        OpKind::AddRow | OpKind::MulRow => vec![m(rng, 3, 4), m(rng, 1, 4)],
        OpKind::Relu => vec![rand_away(rng, 3, 4, 0.0, 0.05)],
        OpKind::Clamp => vec![rand_away(rng, 3, 4, 0.0, 0.05).map(|v| if v.abs() > 0.45 && v.abs() < 0.55 { v * 2.0 } else { v })],
        OpKind::Log | OpKind::RowNormalize => vec![rand_tensor(rng, 3, 4, 0.2, 2.0)],
        OpKind::LayerNorm => vec![m(rng, 3, 5)],
        OpKind::GruCell => vec![
            m(rng, 3, 4),
            m(rng, 3, 5),
            m(rng, 4, 15),
            m(rng, 5, 15),
            m(rng, 1, 15),
            m(rng, 1, 15),
        ],
        OpKind::Concatenate => vec![m(rng, 2, 3), m(rng, 3, 3), m(rng, 5, 2)],
        _ => vec![m(rng, 3, 4)],
    }
}

pub fn apply<F: Scalar>(kind: OpKind, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
    match kind {
        OpKind::MatMul => g.matmul(x[0], x[1]),
        OpKind::Transpose => g.transpose(x[0]),
        OpKind::Add => g.add(x[0], x[1]),
        OpKind::Sub => g.sub(x[0], x[1]),
        OpKind::AddRow => g.add_row(x[0], x[1]),
        OpKind::MulRow => g.mul_row(x[0], x[1]),
        OpKind::Scale => g.scale(x[0], F::lit(-1.7)),
        OpKind::AddScalar => g.add_scalar(x[0], F::lit(0.3)),
        OpKind::RowSoftmax => g.row_softmax(x[0]),
        OpKind::ColumnSoftmax => g.column_softmax(x[0]),
        OpKind::Sigmoid => g.sigmoid(x[0]),
        OpKind::Tanh => g.tanh(x[0]),
        OpKind::Relu => g.relu(x[0]),
        OpKind::Exp => g.exp(x[0]),
        OpKind::LayerNorm => g.layer_norm(x[0]),
        OpKind::GruCell => g.gru_cell(x[0], x[1], GruVars { w_x: x[2], w_h: x[3], b_x: x[4], b_h: x[5] }),
        OpKind::MeanPool => g.mean_pool(x[0]),
        OpKind::Concatenate => {
            let rows = g.concat(&[x[0], x[1]], Axis::Rows)?;
            g.concat(&[rows, x[2]], Axis::Cols)
        }
        OpKind::ElementwiseProduct => g.mul(x[0], x[1]),
        OpKind::SquaredError => g.squared_error(x[0], x[1]),
        OpKind::CosineSimilarity => g.cosine_similarity(x[0], x[1]),
        OpKind::Log => g.log(x[0]),
        OpKind::Clamp => g.clamp(x[0], F::lit(-0.5), F::lit(0.5)),
        OpKind::GatherRows => g.gather_rows(x[0], &[2, 0, 2, 1]),
        OpKind::Sum => g.sum(x[0]),
        OpKind::RowNormalize => g.row_normalize(x[0], F::lit(1e-8)),
        other => unreachable!("{other:?} has no checked case"),
    }
}

/// Reduces an op's output to a scalar through fixed random weights so every
/// output element contributes a distinct coefficient.
pub fn weighted<F: Scalar>(kind: OpKind, weight_seed: u64) -> impl Fn(&mut Graph<F>, &[Var]) -> Result<Var> {
    move |g, x| {
        let y = apply(kind, g, x)?;
        let [r, c] = g.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(weight_seed);
        let w = rand_away(&mut rng, r, c, 0.0, 0.5).map(|v| 2.0 * v).cast::<F>();
        let w = g.constant(w);
        let p = g.mul(y, w)?;
        g.sum(p)
    }
}

/// Worst 64-bit finite-difference error per op over `trials` random points.
pub fn check_every_op(seed: u64, trials: u64, step: f64) -> Result<Vec<(OpKind, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CHECKED_OPS
        .iter()
        .map(|&kind| {
            let mut worst = 0.0f64;
            for trial in 0..trials {
                let point = case_point(kind, &mut rng);
                worst = worst.max(finite_diff_check(weighted::<f64>(kind, trial), &point, step)?);
            }
            Ok((kind, worst))
        })
        .collect()
}
