use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::catalog::{case_point, rand_tensor, weighted, CHECKED_OPS};
use super::*;

/// Element-wise relative error whose denominator floor is a fraction of the
/// tensor's largest gradient entry. binary32 keeps about seven significant
/// digits, so entries that cancel far below the tensor's scale carry absolute
/// error near 1e-7 of that scale regardless of how the adjoint is computed.
fn scaled_relative_error(a: &[Tensor<f32>], b: &[Tensor<f64>], floor_fraction: f64) -> f64 {
    let mut worst = 0.0f64;
    for (ta, tb) in a.iter().zip(b) {
        let scale = tb.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (floor_fraction * scale).max(1e-8);
        for (&x, &y) in ta.data().iter().zip(tb.data()) {
            let x = x as f64;
            worst = worst.max((x - y).abs() / x.abs().max(y.abs()).max(floor));
        }
    }
    worst
}

#[test]
fn every_op_passes_gradient_check_in_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for kind in CHECKED_OPS {
        for trial in 0..20 {
            let point = case_point(kind, &mut rng);
            let err = finite_diff_check(weighted::<f64>(kind, trial), &point, 1e-3).unwrap();
            assert!(err < 1e-6, "{kind:?} trial {trial}: rel err {err:e}");
        }
    }
}

#[test]
fn every_op_passes_gradient_check_in_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for kind in CHECKED_OPS {
        for trial in 0..20 {
            let point = case_point(kind, &mut rng);
            let point32: Vec<Tensor<f32>> = point.iter().map(|t| t.cast()).collect();
            let point64: Vec<Tensor<f64>> = point32.iter().map(|t| t.cast()).collect();
            let analytic = analytic_gradient(&weighted::<f32>(kind, trial), &point32).unwrap();
            let numeric = numeric_gradient(&weighted::<f64>(kind, trial), &point64, 1e-3).unwrap();
            let err = scaled_relative_error(&analytic, &numeric, 1e-2);
            assert!(err < 1e-4, "{kind:?} trial {trial}: rel err {err:e}");
        }
    }
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_rows(&[[0.0, 0.0]]));
    let y = g.row_softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn sigmoid_midpoint() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.sigmoid(x).unwrap();
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn layer_norm_standardizes_rows() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_rows(&[[1.0, 2.0, 3.0]]));
    let y = g.layer_norm(x).unwrap();
    let v = g.value(y).data();
    let mean = v.iter().sum::<f64>() / 3.0;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-4);
}

#[test]
fn square_has_gradient_six_at_three() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(&g, x).item(), 6.0);
}

#[test]
fn stop_gradient_blocks_one_factor() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let s = g.stop_gradient(x).unwrap();
    let y = g.mul(s, x).unwrap();
    assert_eq!(g.value(y).item(), 9.0);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.wrt(&g, x).item(), 3.0);
}

#[test]
fn stop_gradient_contributes_exactly_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::from_rows(&[[1.0, -2.0], [0.5, 4.0]]));
    let s = g.stop_gradient(x).unwrap();
    assert_eq!(g.value(s), g.value(x));
    let y = g.sum(s).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.wrt(&g, x).data().iter().all(|&v| v == 0.0));
    assert!(!g.reaches(x, y));
}

#[test]
fn squared_error_of_linear_map_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = vec![rand_tensor(&mut rng, 3, 4, -1.0, 1.0), rand_tensor(&mut rng, 4, 2, -1.0, 1.0)];
    let target = rand_tensor(&mut rng, 3, 2, -1.0, 1.0);
    let err = finite_diff_check(
        |g: &mut Graph<f64>, x: &[Var]| {
            let wx = g.matmul(x[0], x[1])?;
            let y = g.constant(target.clone());
            g.squared_error(wx, y)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn relative_error_floor_tracks_gradient_scale() {
    let exact = vec![Tensor::<f64>::from_rows(&[[0.5, 2e-17], [1e-3, -0.25]])];
    let noisy = vec![Tensor::<f64>::from_rows(&[[0.5, -6e-11], [1e-3, -0.25]])];
    assert!(max_relative_error(&exact, &noisy) > 1e-3);
    assert!(floored_relative_error(&exact, &noisy, 1e-4) < 2e-6);
    let wrong = vec![Tensor::<f64>::from_rows(&[[0.5, 2e-17], [1.1e-3, -0.25]])];
    let err = floored_relative_error(&exact, &wrong, 1e-4);
    assert!((err - 1e-4 / 1.1e-3).abs() < 1e-9, "{err}");
}

#[test]
fn linear_function_has_exact_finite_difference() {
    let point = vec![Tensor::<f64>::from_rows(&[[0.25, -0.5], [1.0, 2.0]])];
    let err = finite_diff_check(|g: &mut Graph<f64>, x: &[Var]| g.sum(x[0]), &point, 0.125).unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn softmax_then_log_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let point = vec![rand_tensor(&mut rng, 2, 5, -2.0, 2.0)];
    let err = finite_diff_check(
        |g: &mut Graph<f64>, x: &[Var]| {
            let p = g.row_softmax(x[0])?;
            let l = g.safe_log(p)?;
            let w = g.constant(Tensor::from_f64(2, 5, &[0.3, 1.1, -0.7, 0.2, 0.9, -1.2, 0.4, 0.8, 0.1, -0.5]));
            let y = g.mul(l, w)?;
            g.sum(y)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn shape_mismatch_names_the_node() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(2, 3));
    let b = g.input(Tensor::zeros(2, 3));
    let err = g.matmul(a, b).unwrap_err();
    assert!(matches!(err, AutodiffError::Shape { node: 2, op: OpKind::MatMul, .. }), "{err:?}");
}

#[test]
fn non_finite_output_is_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::scalar(0.0));
    let err = g.log(a).unwrap_err();
    assert_eq!(err, AutodiffError::NonFinite { node: 1, op: OpKind::Log });
}

#[test]
fn non_scalar_seed_is_rejected() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(2, 2));
    assert!(matches!(g.backward(a), Err(AutodiffError::NonScalarSeed { .. })));
}

#[test]
fn unreachable_inputs_get_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let a = g.input(Tensor::scalar(2.0));
    let b = g.input(Tensor::from_rows(&[[1.0, 2.0]]));
    let y = g.mul(a, a).unwrap();
    let grads = g.backward(y).unwrap();
    assert!(grads.get(b).is_none());
    assert_eq!(grads.wrt(&g, b).data(), &[0.0, 0.0]);
}

#[test]
fn softmaxes_are_stochastic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.input(rand_tensor(&mut rng, 4, 6, -30.0, 30.0));
    let r = g.row_softmax(x).unwrap();
    let c = g.column_softmax(x).unwrap();
    for i in 0..4 {
        let s: f64 = g.value(r).row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    for j in 0..6 {
        let s: f64 = (0..4).map(|i| g.value(c).get(i, j)).sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
    assert!(g.value(r).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn repeated_forward_is_bit_identical() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let point = case_point(OpKind::GruCell, &mut rng);
        let point: Vec<Tensor<f32>> = point.iter().map(|t| t.cast()).collect();
        analytic_gradient(&weighted::<f32>(OpKind::GruCell, 1), &point).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn matmul_counts_multiply_adds() {
    let mut g = Graph::<f32>::new();
    let a = g.input(Tensor::zeros(3, 4));
    let b = g.input(Tensor::zeros(4, 5));
    g.matmul(a, b).unwrap();
    assert_eq!(g.macs(), 60);
}

