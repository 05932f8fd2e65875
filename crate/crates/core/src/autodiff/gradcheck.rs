use super::graph::{AutodiffError, Graph, Var};
use super::tensor::Tensor;
use crate::scalar::Scalar;

/// Gradient of a scalar-valued builder at `point`, one tensor per input.
pub fn analytic_gradient<F, B, E>(build: &B, point: &[Tensor<F>]) -> Result<Vec<Tensor<F>>, E>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut g = Graph::new();
    let inputs: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &inputs)?;
    let grads = g.backward(out)?;
    Ok(inputs.iter().map(|&v| grads.wrt(&g, v)).collect())
}

/// Value of a scalar-valued builder at `point`.
pub fn evaluate<F, B, E>(build: &B, point: &[Tensor<F>]) -> Result<F, E>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut g = Graph::new();
    let inputs: Vec<Var> = point.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &inputs)?;
    Ok(g.value(out).sum())
}

/// Fourth-order central-difference gradient with the given step.
pub fn numeric_gradient<F, B, E>(build: &B, point: &[Tensor<F>], step: F) -> Result<Vec<Tensor<F>>, E>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let mut work: Vec<Tensor<F>> = point.to_vec();
    let twelve_h = F::lit(12.0) * step;
    let eight = F::lit(8.0);
    let mut out = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let mut grad = Tensor::zeros(point[i].rows(), point[i].cols());
        for k in 0..point[i].len() {
            let orig = work[i].data()[k];
            let mut at = |offset: F| {
                work[i].data_mut()[k] = orig + offset;
                evaluate(build, &work)
            };
            let p1 = at(step)?;
            let m1 = at(-step)?;
            let p2 = at(step + step)?;
            let m2 = at(-(step + step))?;
            work[i].data_mut()[k] = orig;
            grad.data_mut()[k] = (eight * (p1 - m1) - (p2 - m2)) / twelve_h;
        }
        out.push(grad);
    }
    Ok(out)
}

/// `max |a−b| / max(|a|, |b|, 1e-8)` over every element of every input.
pub fn max_relative_error<A: Scalar, B: Scalar>(a: &[Tensor<A>], b: &[Tensor<B>]) -> f64 {
    floored_relative_error(a, b, 0.0)
}

/// Like [`max_relative_error`], but entries smaller than `floor_fraction` of
/// the largest `|a|` or `|b|` anywhere are measured against that floor.
/// Gradients that are exactly zero (a bias whose shift a softmax cancels)
/// otherwise turn the stencil's rounding noise into an error of order one.
pub fn floored_relative_error<A: Scalar, B: Scalar>(a: &[Tensor<A>], b: &[Tensor<B>], floor_fraction: f64) -> f64 {
    let scale = |t: f64, x: f64| t.max(x.abs());
    let g_max = a.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())).fold(0.0, scale);
    let g_max = b.iter().flat_map(|t| t.data().iter().map(|v| v.as_f64())).fold(g_max, scale);
    let floor = (floor_fraction * g_max).max(1e-8);
    let mut worst = 0.0f64;
    for (ta, tb) in a.iter().zip(b) {
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let (x, y) = (x.as_f64(), y.as_f64());
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

/// Compares backward against central differences; reports the worst
/// element-wise relative error and never asserts.
pub fn finite_diff_check<F, B, E>(build: B, point: &[Tensor<F>], step: F) -> Result<f64, E>
where
    F: Scalar,
    B: Fn(&mut Graph<F>, &[Var]) -> Result<Var, E>,
    E: From<AutodiffError>,
{
    let analytic = analytic_gradient(&build, point)?;
    let numeric = numeric_gradient(&build, point, step)?;
    Ok(max_relative_error(&analytic, &numeric))
}
