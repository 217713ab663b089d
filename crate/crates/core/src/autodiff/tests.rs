use rand::Rng;

use super::*;
use crate::error::{Error, Result};
use crate::rng::{stream, uniform_tensor};
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn relu_and_sigmoid_values() {
    let tape = Tape::new();
    let x = tape.constant(t(&[2], &[-1.0, 2.0]));
    assert_eq!(x.relu().value().data(), &[0.0, 2.0]);
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().item(), 0.5);
}

#[test]
fn sum_of_squares_gradient_matches_finite_differences() {
    let x = t(&[2], &[1.0, 2.0]);
    let tape = Tape::new();
    let v = tape.param(x.clone());
    let loss = v.mul(v).unwrap().sum();
    tape.backward(loss).unwrap();
    let g = v.grad().unwrap();
    assert_eq!(g.data(), &[2.0, 4.0]);

    let report = finite_diff_check(|_, p| Ok(p[0].mul(p[0])?.sum()), &[x], 1e-6, 1e-6).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn linear_map_gradient_replicates_input_per_row() {
    let tape = Tape::new();
    let w = tape.param(t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
    let x = tape.constant(t(&[3, 1], &[1.0, -2.0, 3.0]));
    let loss = w.matmul(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(w.grad().unwrap().data(), &[1.0, -2.0, 3.0, 1.0, -2.0, 3.0]);
}

#[test]
fn sigmoid_at_zero_has_quarter_slope() {
    let x = t(&[3, 1], &[0.5, -1.0, 2.0]);
    let tape = Tape::new();
    let w = tape.param(t(&[1, 3], &[0.0, 0.0, 0.0]));
    let xv = tape.constant(x.clone());
    let loss = w.matmul(xv).unwrap().sigmoid().sum();
    tape.backward(loss).unwrap();
    let g = w.grad().unwrap();
    for (gi, xi) in g.data().iter().zip(x.data()) {
        assert!((gi - 0.25 * xi).abs() < 1e-15);
    }
    let report = finite_diff_check(
        |tp, p| Ok(p[0].matmul(tp.constant(x.clone()))?.sigmoid().sum()),
        &[t(&[1, 3], &[0.0; 3])],
        1e-6,
        1e-6,
    )
    .unwrap();
    assert!(report.passed);
}

#[test]
fn constant_loss_gives_zero_gradients() {
    let tape = Tape::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(Tensor::scalar(3.0));
    tape.backward(c).unwrap();
    assert_eq!(w.grad().unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn backward_twice_is_an_error() {
    let tape = Tape::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    let loss = w.sum();
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::BackwardTwice)));
}

#[test]
fn reset_allows_reuse() {
    let mut tape = Tape::new();
    {
        let w = tape.param(t(&[1], &[1.0]));
        tape.backward(w.sum()).unwrap();
    }
    tape.reset();
    assert!(tape.is_empty());
    let w = tape.param(t(&[1], &[2.0]));
    tape.backward(w.mul(w).unwrap().sum()).unwrap();
    assert_eq!(w.grad().unwrap().data(), &[4.0]);
}

#[test]
fn non_scalar_and_foreign_losses_are_rejected() {
    let tape = Tape::new();
    let w = tape.param(t(&[2], &[1.0, 2.0]));
    assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));

    let other = Tape::new();
    let o = other.param(Tensor::scalar(1.0));
    assert!(matches!(tape.backward(o), Err(Error::Detached)));
    assert!(matches!(w.add(o), Err(Error::Detached)));
}

#[test]
fn shape_mismatch_reports_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = tape.constant(Tensor::<f64>::zeros(&[4, 5]));
    let msg = a.matmul(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    let msg = a.add(b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn broadcast_add_sums_gradient_over_rows() {
    let tape = Tape::new();
    let x = tape.param(Tensor::<f64>::zeros(&[3, 2]));
    let b = tape.param(t(&[2], &[1.0, 2.0]));
    let y = x.add(b).unwrap().sum();
    tape.backward(y).unwrap();
    assert_eq!(b.grad().unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn sign_and_heaviside_carry_no_gradient() {
    let tape = Tape::new();
    let x = tape.param(t(&[3], &[-2.0, 0.0, 3.0]));
    assert_eq!(x.sign().value().data(), &[-1.0, 0.0, 1.0]);
    assert_eq!(x.heaviside().value().data(), &[0.0, 0.0, 1.0]);
    let loss = x.sign().mul(x).unwrap().sum();
    tape.backward(loss).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[-1.0, 0.0, 1.0]);
}

#[test]
fn every_requires_grad_node_gets_a_gradient() {
    let tape = Tape::new();
    let a = tape.param(t(&[2], &[1.0, -1.0]));
    let unused = tape.param(t(&[2], &[5.0, 5.0]));
    let mid = a.exp();
    tape.backward(mid.sum()).unwrap();
    assert!(mid.grad().is_some());
    assert_eq!(unused.grad().unwrap().data(), &[0.0, 0.0]);
}

/// Applies a primitive, then contracts with fixed weights so the check exercises the
/// full vector-Jacobian product.
fn weighted<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let mut rng = stream(seed, "weights");
    let w = tape.constant(uniform_tensor(&mut rng, &y.shape(), -1.0, 1.0));
    Ok(y.mul(w)?.sum())
}

type Prim = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct Case {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    /// Inputs closer than this to zero are resampled (kinks at 0).
    kink_at_zero: bool,
    f: Prim,
}

fn cases() -> Vec<Case> {
    let c = |name, shapes: Vec<Vec<usize>>, range, kink_at_zero, f: Prim| Case {
        name,
        shapes,
        range,
        kink_at_zero,
        f,
    };
    vec![
        c("matmul", vec![vec![3, 4], vec![4, 2]], (-1.0, 1.0), false, |_, p| p[0].matmul(p[1])),
        c("add", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), false, |_, p| p[0].add(p[1])),
        c("add_bcast", vec![vec![3, 4], vec![4]], (-1.0, 1.0), false, |_, p| p[0].add(p[1])),
        c("sub", vec![vec![3, 4], vec![4]], (-1.0, 1.0), false, |_, p| p[0].sub(p[1])),
        c("mul", vec![vec![3, 4], vec![3, 4]], (-1.0, 1.0), false, |_, p| p[0].mul(p[1])),
        c("mul_bcast", vec![vec![3, 4], vec![4]], (-1.0, 1.0), false, |_, p| p[0].mul(p[1])),
        c("scale", vec![vec![3, 4]], (-1.0, 1.0), false, |_, p| Ok(p[0].scale(-2.5))),
        c("shift", vec![vec![3, 4]], (-1.0, 1.0), false, |_, p| Ok(p[0].shift(0.7))),
        c("relu", vec![vec![3, 4]], (-1.0, 1.0), true, |_, p| Ok(p[0].relu())),
        c("abs", vec![vec![3, 4]], (-1.0, 1.0), true, |_, p| Ok(p[0].abs())),
        c("gelu", vec![vec![3, 4]], (-3.0, 3.0), false, |_, p| Ok(p[0].gelu())),
        c("exp", vec![vec![3, 4]], (-2.0, 2.0), false, |_, p| Ok(p[0].exp())),
        c("log", vec![vec![3, 4]], (0.2, 3.0), false, |_, p| Ok(p[0].log())),
        c("sigmoid", vec![vec![3, 4]], (-4.0, 4.0), false, |_, p| Ok(p[0].sigmoid())),
        c("softmax", vec![vec![3, 5]], (-2.0, 2.0), false, |_, p| Ok(p[0].softmax())),
        c("log_softmax", vec![vec![3, 5]], (-2.0, 2.0), false, |_, p| Ok(p[0].log_softmax())),
        c("layer_norm", vec![vec![3, 5]], (-2.0, 2.0), false, |_, p| Ok(p[0].layer_norm(1e-5))),
        c("sum", vec![vec![3, 4]], (-1.0, 1.0), false, |_, p| Ok(p[0].sum())),
        c("mean", vec![vec![3, 4]], (-1.0, 1.0), false, |_, p| Ok(p[0].mean())),
        c("transpose", vec![vec![3, 4]], (-1.0, 1.0), false, |_, p| p[0].transpose()),
        c("reshape", vec![vec![3, 4]], (-1.0, 1.0), false, |_, p| p[0].reshape(&[2, 6])),
        c("gather_rows", vec![vec![5, 3]], (-1.0, 1.0), false, |_, p| p[0].gather_rows(&[4, 0, 4, 2])),
        c("gather_elements", vec![vec![4, 3]], (-1.0, 1.0), false, |_, p| {
            p[0].gather_elements(&[(0, 2), (3, 1), (0, 2)])
        }),
        c("slice_cols", vec![vec![3, 6]], (-1.0, 1.0), false, |_, p| p[0].slice_cols(2, 3)),
        c("concat_cols", vec![vec![3, 2], vec![3, 4]], (-1.0, 1.0), false, |t, p| {
            t.concat_cols(&[p[0], p[1], p[0]])
        }),
        c("concat_rows", vec![vec![2, 3], vec![1, 3]], (-1.0, 1.0), false, |t, p| {
            t.concat_rows(&[p[1], p[0]])
        }),
    ]
}

#[test]
fn every_primitive_matches_central_differences() {
    let h = 1e-6;
    for (ci, case) in cases().into_iter().enumerate() {
        let mut rng = stream(ci as u64, case.name);
        let f = case.f;
        for trial in 0..100 {
            let (params, _) = kink_safe_sample(h, 1000, || {
                let ps: Vec<Tensor<f64>> = case
                    .shapes
                    .iter()
                    .map(|s| uniform_tensor(&mut rng, s, case.range.0, case.range.1))
                    .collect();
                let margin = if case.kink_at_zero {
                    ps.iter().flat_map(|p| p.data()).fold(f64::INFINITY, |m, x| m.min(x.abs()))
                } else {
                    f64::INFINITY
                };
                Ok((ps, margin))
            })
            .unwrap();
            let seed = trial as u64;
            let report = finite_diff_check(
                move |tape, p| weighted(tape, f(tape, p)?, seed),
                &params,
                h,
                1e-6,
            )
            .unwrap();
            assert!(
                report.passed,
                "{} trial {trial}: max rel err {}",
                case.name, report.max_rel_error
            );
        }
    }
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = stream(3, "linearity");
    let w0 = uniform_tensor::<f64>(&mut rng, &[3, 3], -1.0, 1.0);
    let x0 = uniform_tensor::<f64>(&mut rng, &[3, 2], -1.0, 1.0);
    fn l1<'t>(w: Var<'t, f64>, x: Var<'t, f64>) -> Var<'t, f64> {
        w.matmul(x).unwrap().exp().sum()
    }
    fn l2<'t>(w: Var<'t, f64>, x: Var<'t, f64>) -> Var<'t, f64> {
        w.matmul(x).unwrap().sigmoid().mean()
    }

    let grad_of = |which: u8| {
        let tape = Tape::new();
        let w = tape.param(w0.clone());
        let x = tape.constant(x0.clone());
        let loss = match which {
            1 => l1(w, x),
            2 => l2(w, x),
            _ => l1(w, x).add(l2(w, x)).unwrap(),
        };
        tape.backward(loss).unwrap();
        w.grad().unwrap()
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(3));
    for ((a, b), c) in g1.data().iter().zip(g2.data()).zip(g12.data()) {
        assert!((a + b - c).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = stream(11, "det");
        let x = uniform_tensor::<f64>(&mut rng, &[4, 6], -1.0, 1.0);
        let w = uniform_tensor::<f64>(&mut rng, &[6, 6], -1.0, 1.0);
        let tape = Tape::new();
        let y = tape
            .constant(x)
            .matmul(tape.param(w))
            .unwrap()
            .layer_norm(1e-5)
            .softmax()
            .log()
            .sum();
        y.item().to_bits()
    };
    assert_eq!(run(), run());
}

#[test]
fn kink_safe_sampling_rejects_close_points() {
    let mut draws = vec![(1.0, 1e-7), (2.0, 1e-3)].into_iter();
    let (s, rejected) = kink_safe_sample(1e-5, 10, || Ok(draws.next().unwrap())).unwrap();
    assert_eq!(s, 2.0);
    assert_eq!(rejected, 1);
    assert!(kink_safe_sample(1e-5, 3, || Ok(((), 0.0))).is_err());
}

#[test]
fn non_finite_objective_is_reported() {
    let r = finite_diff_check(|_, p| Ok(p[0].log().sum()), &[t(&[1], &[-1.0])], 1e-6, 1e-6);
    assert!(matches!(r, Err(Error::NonFinite { .. })));
}

#[test]
fn custom_backward_rule_is_used() {
    struct Doubler;
    impl CustomBackward<f64> for Doubler {
        fn backward(&self, _: &[&Tensor<f64>], _: &Tensor<f64>, g: &[f64]) -> Vec<Option<Vec<f64>>> {
            vec![Some(g.iter().map(|x| 2.0 * x).collect())]
        }
    }
    let tape = Tape::new();
    let x = tape.param(t(&[2], &[1.0, 1.0]));
    let y = tape.custom(&[x], Tensor::scalar(0.0), Box::new(Doubler)).unwrap();
    let _ = y;
    let s = tape.custom(&[x], Tensor::vector(vec![0.0, 0.0]), Box::new(Doubler)).unwrap().sum();
    tape.backward(s).unwrap();
    assert_eq!(x.grad().unwrap().data(), &[2.0, 2.0]);
}

#[test]
fn random_primitive_inputs_stay_finite() {
    let mut rng = stream(5, "finite");
    let tape = Tape::new();
    let x = tape.constant(uniform_tensor::<f64>(&mut rng, &[2, 3], -50.0, 50.0));
    assert!(x.softmax().value().is_finite());
    assert!(x.log_softmax().value().is_finite());
    assert!(x.sigmoid().value().is_finite());
    let _: f64 = rng.random();
}
