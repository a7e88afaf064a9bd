mod common;

use agcd::checks::op_cases;
use agcd::tensor::gradcheck::{compare, grad_check, numeric_grad, value_and_grad};
use agcd::tensor::{Graph, Result, Scalar, Tensor, TensorError, Var};
use common::oracle::{bilinear_ref, conv_ref, erf_series, matmul_ref};
use common::{assert_close, away_from_zero, rng, uniform, weighted_sum};
use proptest::prelude::*;
use rand::Rng;

fn run<T: Scalar>(f: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Tensor<T> {
    let mut g = Graph::new();
    let out = f(&mut g).unwrap();
    g.value(out).clone()
}

fn t64(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

#[test]
fn matmul_examples() {
    let b = t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let id = run(|g| {
        let i = g.constant(Tensor::eye(2));
        let bb = g.constant(b.clone());
        g.matmul(i, bb)
    });
    assert_eq!(id, b);
    let z = run(|g| {
        let z = g.constant(Tensor::zeros([3, 2]));
        let bb = g.constant(b.clone());
        g.matmul(z, bb)
    });
    assert!(z.data().iter().all(|&v| v == 0.0));
    let a = t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let expected = matmul_ref(a.data(), b.data(), 2, 2, 2);
    assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
    let c = run(|g| {
        let aa = g.constant(a.clone());
        let bb = g.constant(b.clone());
        g.matmul(aa, bb)
    });
    assert_eq!(c.data(), expected.as_slice());
}

#[test]
fn matmul_shape_mismatch_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([2, 3]));
    assert!(matches!(g.matmul(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn matmul_matches_triple_loop_on_random_instances() {
    let mut r = rng(11);
    for _ in 0..20 {
        let (m, k, n) = (r.random_range(1..7), r.random_range(1..7), r.random_range(1..7));
        let a = uniform::<f64>(&mut r, &[m, k], -2.0, 2.0);
        let b = uniform::<f64>(&mut r, &[k, n], -2.0, 2.0);
        let c = run(|g| {
            let aa = g.constant(a.clone());
            let bb = g.constant(b.clone());
            g.matmul(aa, bb)
        });
        assert_close(&c.to_f64_vec(), &matmul_ref(a.data(), b.data(), m, k, n), 1e-12);
    }
}

// ---------------------------------------------------------------------------
// conv2d
// ---------------------------------------------------------------------------

#[test]
fn conv2d_identity_and_zero_kernels() {
    let mut r = rng(3);
    let x = uniform::<f64>(&mut r, &[1, 1, 5, 4], -1.0, 1.0);
    let y = run(|g| {
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::ones([1, 1, 1, 1]));
        g.conv2d(xv, w, None, 1, 0, 1)
    });
    assert_eq!(y, x);
    let y = run(|g| {
        let xv = g.constant(x.clone());
        let w = g.constant(Tensor::zeros([1, 1, 3, 3]));
        g.conv2d(xv, w, None, 1, 1, 1)
    });
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_3x3_on_4x4_matches_nested_loops() {
    let x: Vec<f64> = (1..=16).map(f64::from).collect();
    let k = [1.0, 0.0, -1.0, 2.0, 0.5, -2.0, 1.0, 0.0, -1.0];
    let expected = conv_ref(&x, [1, 1, 4, 4], &k, [1, 1, 3, 3], None, 1, 1, 1);
    // Corner (0,0) sees only x[0,0..2] and x[1,0..2]: 0.5*1 - 2*2 + 0*5 - 1*6.
    assert_eq!(expected[0], 0.5 - 4.0 - 6.0);
    let y = run(|g| {
        let xv = g.constant(t64(&[1, 1, 4, 4], &x));
        let w = g.constant(t64(&[1, 1, 3, 3], &k));
        g.conv2d(xv, w, None, 1, 1, 1)
    });
    assert_eq!(y.shape(), &[1, 1, 4, 4]);
    assert_close(&y.to_f64_vec(), &expected, 1e-12);
}

#[test]
fn conv2d_rejects_bad_groups() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([1, 3, 4, 4]));
    let w = g.constant(Tensor::zeros([4, 1, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1, 2).is_err());
    let w = g.constant(Tensor::zeros([4, 2, 3, 3]));
    assert!(g.conv2d(x, w, None, 1, 1, 1).is_err());
}

#[test]
fn conv2d_matches_nested_loops_on_random_instances() {
    let mut r = rng(5);
    for case in 0..24 {
        let groups = [1, 2, 4][case % 3];
        let c = groups * r.random_range(1..=(4 / groups).max(1));
        let depthwise = case % 4 == 3;
        let (c, groups, co) = if depthwise { (c, c, c) } else { (c, groups, groups * r.random_range(1..=2)) };
        let (h, w) = (r.random_range(3..=8), r.random_range(3..=8));
        let k = r.random_range(1..=3);
        let stride = r.random_range(1..=2);
        let pad = r.random_range(0..=1);
        let n = r.random_range(1..=2);
        let x = uniform::<f64>(&mut r, &[n, c, h, w], -1.0, 1.0);
        let wt = uniform::<f64>(&mut r, &[co, c / groups, k, k], -1.0, 1.0);
        let b = uniform::<f64>(&mut r, &[co], -1.0, 1.0);
        let y = run(|g| {
            let xv = g.constant(x.clone());
            let wv = g.constant(wt.clone());
            let bv = g.constant(b.clone());
            g.conv2d(xv, wv, Some(bv), stride, pad, groups)
        });
        let expected = conv_ref(x.data(), [n, c, h, w], wt.data(), [co, c / groups, k, k], Some(b.data()), stride, pad, groups);
        assert_close(&y.to_f64_vec(), &expected, 1e-10);
    }
}

// ---------------------------------------------------------------------------
// layer_norm
// ---------------------------------------------------------------------------

fn ln(x: Tensor<f64>, gamma: Tensor<f64>, beta: Tensor<f64>, eps: f64) -> Tensor<f64> {
    run(|g| {
        let x = g.constant(x);
        let ga = g.constant(gamma);
        let be = g.constant(beta);
        g.layer_norm(x, ga, be, eps)
    })
}

#[test]
fn layer_norm_examples() {
    let y = ln(t64(&[4], &[3.0; 4]), Tensor::ones([4]), Tensor::zeros([4]), 1e-6);
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = ln(t64(&[2], &[1.0, 3.0]), Tensor::ones([2]), Tensor::zeros([2]), 1e-12);
    assert_close(&y.to_f64_vec(), &[-1.0, 1.0], 1e-9);
    let beta = t64(&[3], &[0.5, -1.0, 2.0]);
    let y = ln(t64(&[2, 3], &[1.0, 7.0, -2.0, 0.0, 0.1, 9.0]), Tensor::zeros([3]), beta.clone(), 1e-6);
    assert_eq!(y.data(), [beta.data(), beta.data()].concat().as_slice());
}

#[test]
fn layer_norm_rejects_bad_arguments() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([2, 3]));
    let ga = g.constant(Tensor::ones([2]));
    let be = g.constant(Tensor::zeros([2]));
    assert!(g.layer_norm(x, ga, be, 1e-6).is_err());
    let ga = g.constant(Tensor::ones([3]));
    let be = g.constant(Tensor::zeros([3]));
    assert!(g.layer_norm(x, ga, be, 0.0).is_err());
}

proptest! {
    #[test]
    fn layer_norm_output_is_standardized(rows in 1usize..4, d in 2usize..9, seed in any::<u64>()) {
        let x = uniform::<f64>(&mut rng(seed), &[rows, d], -5.0, 5.0);
        let eps = 1e-6;
        let y = ln(x.clone(), Tensor::ones([d]), Tensor::zeros([d]), eps);
        for (yr, xr) in y.data().chunks(d).zip(x.data().chunks(d)) {
            let mean = yr.iter().sum::<f64>() / d as f64;
            let var = yr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let xm = xr.iter().sum::<f64>() / d as f64;
            let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / d as f64;
            prop_assert!(mean.abs() <= 1e-10);
            // Expected variance is xv / (xv + eps).
            prop_assert!((var - xv / (xv + eps)).abs() <= 1e-10);
            prop_assert!((var - 1.0).abs() <= eps / xv + 1e-10);
        }
    }
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

#[test]
fn activation_examples() {
    let x = t64(&[4], &[0.0, -1.0, 10.0, 1.0]);
    let gelu = run(|g| {
        let v = g.constant(x.clone());
        g.gelu(v)
    });
    let relu = run(|g| {
        let v = g.constant(x.clone());
        g.relu(v)
    });
    let sig = run(|g| {
        let v = g.constant(x.clone());
        g.sigmoid(v)
    });
    assert_eq!(gelu.data()[0], 0.0);
    assert_eq!(relu.data()[1], 0.0);
    assert_eq!(sig.data()[0], 0.5);
    assert!((gelu.data()[2] - 10.0).abs() < 1e-6);
    let oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
    assert!((oracle - 0.841345).abs() < 1e-6, "oracle {oracle}");
    assert!((gelu.data()[3] - oracle).abs() < 1e-12);
}

#[test]
fn gelu_matches_series_erf_oracle() {
    let xs: Vec<f64> = (-30..=30).map(|i| i as f64 * 0.1).collect();
    let y = run(|g| {
        let v = g.constant(t64(&[xs.len()], &xs));
        g.gelu(v)
    });
    for (x, y) in xs.iter().zip(y.data()) {
        let oracle = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
        assert!((y - oracle).abs() < 1e-12, "x={x}: {y} vs {oracle}");
    }
}

// ---------------------------------------------------------------------------
// softmax
// ---------------------------------------------------------------------------

fn softmax(x: Tensor<f64>) -> Tensor<f64> {
    run(|g| {
        let v = g.constant(x);
        g.softmax(v)
    })
}

#[test]
fn softmax_examples() {
    for k in 1..8 {
        let y = softmax(Tensor::zeros([k]));
        assert!(y.data().iter().all(|&v| (v - 1.0 / k as f64).abs() < 1e-15));
    }
    let y = softmax(t64(&[2], &[1000.0, 0.0]));
    assert!((y.data()[0] - 1.0).abs() <= 1e-12 && y.data()[1].abs() <= 1e-12);
    // Shifts that are exact in binary floating point leave the result bit-identical.
    let x = t64(&[2, 3], &[0.5, -1.25, 2.0, 3.0, 3.0, -0.125]);
    let shifted = x.map(|v| v + 1024.0);
    assert_eq!(softmax(x).data(), softmax(shifted).data());
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, k in 1usize..10, seed in any::<u64>(), shift in -50.0f64..50.0) {
        let x = uniform::<f64>(&mut rng(seed), &[rows, k], -20.0, 20.0);
        let y = softmax(x.clone());
        for row in y.data().chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&p| p > 0.0 && p <= 1.0));
        }
        let ys = softmax(x.map(|v| v + shift));
        prop_assert!(ys.max_abs_diff(&y) <= 1e-12);
    }
}

// ---------------------------------------------------------------------------
// pooling and elementwise
// ---------------------------------------------------------------------------

#[test]
fn global_avg_pool_examples() {
    let gap = |x: Tensor<f64>| {
        run(|g| {
            let v = g.constant(x);
            g.global_avg_pool(v)
        })
    };
    let y = gap(Tensor::full([2, 3, 4, 5], 1.75));
    assert_eq!(y.shape(), &[2, 3]);
    assert!(y.data().iter().all(|&v| v == 1.75));
    assert_eq!(gap(t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).data(), &[2.5]);
    let mut r = rng(9);
    let a = uniform::<f64>(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    let b = uniform::<f64>(&mut r, &[2, 2, 3, 3], -1.0, 1.0);
    let sum = Tensor::new([2, 2, 3, 3], a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect()).unwrap();
    let lhs = gap(sum);
    let (pa, pb) = (gap(a), gap(b));
    let rhs: Vec<f64> = pa.data().iter().zip(pb.data()).map(|(x, y)| x + y).collect();
    assert_close(&lhs.to_f64_vec(), &rhs, 1e-15);
}

#[test]
fn elementwise_examples() {
    let x = t64(&[3], &[1.0, 2.0, 3.0]);
    let zero = run(|g| {
        let v = g.constant(x.clone());
        g.sub(v, v)
    });
    assert!(zero.data().iter().all(|&v| v == 0.0));
    let m = run(|g| {
        let v = g.constant(x.clone());
        g.mean(v)
    });
    assert_eq!(m.item(), 2.0);
    let a = run(|g| {
        let v = g.constant(Tensor::scalar(-2.0));
        g.abs(v)
    });
    assert_eq!(a.item(), 2.0);
    let s = run(|g| {
        let v = g.constant(x.clone());
        let c = g.constant(Tensor::from_f64([1], &[10.0]).unwrap());
        g.mul(c, v)
    });
    assert_eq!(s.data(), &[10.0, 20.0, 30.0]);
}

#[test]
fn elementwise_rejects_general_broadcasting() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros([2, 3]));
    let b = g.constant(Tensor::zeros([3]));
    assert!(matches!(g.add(a, b), Err(TensorError::Shape { .. })));
}

#[test]
fn non_finite_results_are_errors() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::full([2], 1e308));
    assert!(matches!(g.scale(a, 10.0), Err(TensorError::NonFinite { .. })));
}

// ---------------------------------------------------------------------------
// bilinear sampling and affine grids
// ---------------------------------------------------------------------------

#[test]
fn bilinear_examples() {
    let x = t64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let sample = |grid: Tensor<f64>| {
        run(|g| {
            let xv = g.constant(x.clone());
            let gv = g.constant(grid);
            g.bilinear_sample(xv, gv)
        })
    };
    assert_eq!(sample(t64(&[1, 1, 1, 2], &[0.0, 0.0])).item(), 2.5);
    assert_eq!(sample(t64(&[1, 1, 1, 2], &[-3.0, -3.0])).item(), 0.0);
    assert_eq!(bilinear_ref(x.data(), [1, 1, 2, 2], &[0.0, 0.0], 1, 1), vec![2.5]);
}

#[test]
fn bilinear_identity_grid_is_bit_exact() {
    let mut r = rng(21);
    for (h, w) in [(1, 1), (2, 3), (7, 5), (16, 16), (75, 9), (64, 64)] {
        let x = uniform::<f64>(&mut r, &[2, 3, h, w], -10.0, 10.0);
        let y = run(|g| {
            let xv = g.constant(x.clone());
            let theta = g.constant(Tensor::from_f64([2, 6], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap());
            let grid = g.affine_grid(theta, h, w)?;
            g.bilinear_sample(xv, grid)
        });
        assert!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "{h}x{w}");
    }
}

#[test]
fn bilinear_matches_four_corner_oracle_on_random_instances() {
    let mut r = rng(22);
    for _ in 0..20 {
        let (n, c, h, w) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..7), r.random_range(1..7));
        let (ho, wo) = (r.random_range(1..5), r.random_range(1..5));
        let x = uniform::<f64>(&mut r, &[n, c, h, w], -1.0, 1.0);
        let grid = uniform::<f64>(&mut r, &[n, ho, wo, 2], -1.3, 1.3);
        let y = run(|g| {
            let xv = g.constant(x.clone());
            let gv = g.constant(grid.clone());
            g.bilinear_sample(xv, gv)
        });
        assert_close(&y.to_f64_vec(), &bilinear_ref(x.data(), [n, c, h, w], grid.data(), ho, wo), 1e-10);
    }
}

#[test]
fn affine_grid_examples() {
    let grid = |theta: [f64; 6], h: usize, w: usize| {
        run(|g| {
            let t = g.constant(t64(&[1, 6], &theta));
            g.affine_grid(t, h, w)
        })
    };
    let id = grid([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 3, 3);
    let coords = [-1.0, 0.0, 1.0];
    for i in 0..3 {
        for j in 0..3 {
            assert_eq!(id.data()[(i * 3 + j) * 2], coords[j]);
            assert_eq!(id.data()[(i * 3 + j) * 2 + 1], coords[i]);
        }
    }
    let shifted = grid([1.0, 0.0, 2.0, 0.0, 1.0, 0.0], 4, 4);
    assert!(shifted.data().chunks(2).all(|p| p[0] >= 1.0));
    // 90 degree rotation: target (1, 0) -> source (0, 1). Target x=1 is column 2, y=0 is row 1.
    let rot = grid([0.0, -1.0, 0.0, 1.0, 0.0, 0.0], 3, 3);
    let at = (3 + 2) * 2;
    assert_eq!(&rot.data()[at..at + 2], &[0.0, 1.0]);
    // Translated sampling reads zero padding over the right part of the output.
    let x = t64(&[1, 1, 4, 4], &(1..=16).map(f64::from).collect::<Vec<_>>());
    let y = run(|g| {
        let xv = g.constant(x.clone());
        let t = g.constant(t64(&[1, 6], &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0]));
        let gr = g.affine_grid(t, 4, 4)?;
        g.bilinear_sample(xv, gr)
    });
    for row in 0..4 {
        assert_eq!(y.data()[row * 4], x.data()[row * 4 + 3]);
        assert!(y.data()[row * 4 + 1..row * 4 + 4].iter().all(|&v| v == 0.0));
    }
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

#[test]
fn backward_examples() {
    let x = t64(&[2, 2], &[0.5, -1.0, 2.0, 3.0]);
    let (_, g) = value_and_grad(&|g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]), &[x.clone()]).unwrap();
    assert!(g[0].data().iter().all(|&v| v == 1.0));
    let (_, g) = value_and_grad(
        &|g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        },
        &[x.clone()],
    )
    .unwrap();
    assert_eq!(g[0].data(), x.map(|v| 2.0 * v).data());
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::ones([3]));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert!(matches!(g.backward(s), Err(TensorError::BackwardTwice)));
    g.zero_grad();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn every_trainable_leaf_gets_a_gradient() {
    let mut g = Graph::<f64>::new();
    let used = g.param(Tensor::ones([2]));
    let unused = g.param(Tensor::ones([3]));
    let s = g.sum(used).unwrap();
    g.backward(s).unwrap();
    assert!(g.grad(used).is_some());
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0; 3]);
}

// ---------------------------------------------------------------------------
// gradient checks: every op, three shapes, f64 and f32
// ---------------------------------------------------------------------------

#[test]
fn gradients_match_finite_differences_f64() {
    let mut worst = 0.0f64;
    for (i, case) in op_cases::<f64>(77).into_iter().enumerate() {
        let build = &case.build;
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let out = build(g, v)?;
            weighted_sum(g, out, 1000 + i as u64)
        };
        let report = grad_check(f, &case.inputs, 1e-5).unwrap();
        assert!(report.passes(1e-6), "{} (case {i}): {report:?}", case.name);
        worst = worst.max(report.max_rel_error);
    }
    eprintln!("f64 max relative error across ops: {worst:.3e}");
}

/// f32 backward rules against central differences. The difference quotient
/// is evaluated in f64 on the same (f32-representable) inputs, since f32
/// function values cannot resolve a 1e-3 relative gradient error.
#[test]
fn gradients_match_finite_differences_f32() {
    let mut worst = 0.0f64;
    let cases32 = op_cases::<f32>(77);
    let cases64 = op_cases::<f64>(77);
    for (i, (c32, c64)) in cases32.into_iter().zip(cases64).enumerate() {
        assert_eq!(c32.name, c64.name);
        let (b32, b64) = (&c32.build, &c64.build);
        let f32fn = |g: &mut Graph<f32>, v: &[Var]| {
            let out = b32(g, v)?;
            weighted_sum(g, out, 1000 + i as u64)
        };
        let f64fn = |g: &mut Graph<f64>, v: &[Var]| {
            let out = b64(g, v)?;
            let w = g.constant(weighted_sum_weights(g.shape(out), 1000 + i as u64));
            let p = g.mul(out, w)?;
            g.sum(p)
        };
        let inputs64: Vec<Tensor<f64>> = c32.inputs.iter().map(|t| t.cast()).collect();
        let (_, analytic) = value_and_grad(&f32fn, &c32.inputs).unwrap();
        let numeric = numeric_grad(&f64fn, &inputs64, 1e-5).unwrap();
        let report = compare(&analytic, &numeric);
        assert!(report.passes(1e-3), "{} (case {i}): {report:?}", c32.name);
        worst = worst.max(report.max_rel_error);
    }
    eprintln!("f32 max relative error across ops: {worst:.3e}");
}

/// The f32 weights of `weighted_sum`, widened exactly to f64.
fn weighted_sum_weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    away_from_zero::<f32>(&mut rng(seed), shape, 0.5, 1.0).cast()
}

#[test]
fn composite_conv_layernorm_gelu_chain() {
    let mut r = rng(99);
    let x = uniform::<f64>(&mut r, &[1, 2, 4, 4], -1.0, 1.0);
    let w = uniform::<f64>(&mut r, &[3, 2, 3, 3], -0.5, 0.5);
    let gamma = uniform::<f64>(&mut r, &[3], 0.5, 1.5);
    let beta = uniform::<f64>(&mut r, &[3], -0.5, 0.5);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.conv2d(v[0], v[1], None, 1, 1, 1)?;
        let y = g.permute(y, &[0, 2, 3, 1])?;
        let y = g.layer_norm(y, v[2], v[3], 1e-6)?;
        let y = g.gelu(y)?;
        weighted_sum(g, y, 5)
    };
    let report = grad_check(f, &[x, w, gamma, beta], 1e-5).unwrap();
    assert!(report.passes(1e-6), "{report:?}");
}
