use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::{Error, Result};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn assert_passes(name: &str, report: GradCheckReport) {
    assert!(
        report.passed(),
        "{name}: max rel error {:.3e} ({:?})",
        report.max_rel_error(),
        report.inputs
    );
}

#[test]
#[allow(clippy::approx_constant)]
fn softplus_at_zero() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::scalar(0.0));
    let y = tape.softplus(x).unwrap();
    assert!((tape.value(y).item() - std::f64::consts::LN_2).abs() < 1e-15);
    assert!((softplus(0.0) - 0.693147).abs() < 1e-6);
    assert!(softplus(800.0).is_finite() && softplus(-800.0) >= 0.0);
}

#[test]
fn layer_norm_of_unit_pair() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 2], vec![1.0, -1.0]).unwrap());
    let g = tape.constant(Tensor::full(&[2], 1.0));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b).unwrap();
    let expect = 1.0 / (1.0 + LN_EPS).sqrt();
    let v = tape.value(y);
    assert!((v.data()[0] - expect).abs() < 1e-12);
    assert!((v.data()[1] + expect).abs() < 1e-12);
    assert!((v.data()[0] - 0.99999).abs() < 1e-5);
}

#[test]
fn delta_kernel_is_identity() {
    let mut r = rng(1);
    let x = Tensor::randn(&[9, 4], 1.0, &mut r);
    let mut k = Tensor::zeros(&[4, 3]);
    for c in 0..4 {
        k.data_mut()[c * 3 + 1] = 1.0;
    }
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let kv = tape.constant(k);
    let y = tape.depthwise_conv1d(xv, kv).unwrap();
    assert_eq!(*tape.value(y), x);
}

#[test]
fn even_kernels_and_bad_shapes_are_rejected() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[5, 2]));
    let k = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(tape.depthwise_conv1d(x, k).is_err());
    let w = tape.constant(Tensor::zeros(&[3, 2]));
    match tape.matmul(x, w) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![5, 2]);
            assert_eq!(rhs, vec![3, 2]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
    assert!(matches!(tape.mean_pool(x, 2), Err(Error::Axis { axis: 2, .. })));
    assert!(matches!(tape.concat(&[x, x], 3), Err(Error::Axis { .. })));
}

#[test]
fn square_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![3.0]));
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.grad(loss, &[x]).unwrap();
    assert_eq!(g[0].data(), &[6.0]);
}

#[test]
fn cross_entropy_symmetric_logits() {
    let tape = Tape::new();
    let z = tape.leaf(Tensor::vector(vec![0.0, 0.0]));
    let loss = tape.cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-15);
    let g = tape.grad(loss, &[z]).unwrap();
    assert_eq!(g[0].data(), &[-0.5, 0.5]);
}

#[test]
fn non_scalar_loss_is_rejected_and_unreachable_is_zero() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
    let lonely = tape.leaf(Tensor::vector(vec![5.0; 3]));
    let y = tape.exp(x).unwrap();
    assert!(matches!(tape.grad(y, &[x]), Err(Error::Contract(_))));
    let s = tape.sum(y).unwrap();
    let g = tape.grad(s, &[lonely]).unwrap();
    assert_eq!(g[0], Tensor::zeros(&[3]));
}

#[test]
fn fan_out_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![2.0]));
    let a = tape.scale(x, 3.0).unwrap();
    let b = tape.exp(x).unwrap();
    let c = tape.add(a, b).unwrap();
    let s = tape.sum(c).unwrap();
    let g = tape.grad(s, &[x]).unwrap();
    assert!((g[0].item() - (3.0 + 2f64.exp())).abs() < 1e-12);
}

#[test]
fn finite_checks_name_the_op() {
    let tape = Tape::new().with_finite_checks(true);
    let x = tape.constant(Tensor::vector(vec![1000.0]));
    match tape.exp(x) {
        Err(Error::NonFinite { op }) => assert_eq!(op, "exp"),
        other => panic!("expected non-finite error, got {other:?}"),
    }
}

// One finite-difference check per primitive on seeded random inputs.

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

#[test]
fn fd_matmul_and_linear() {
    assert_passes(
        "matmul",
        check_gradients(|t, v| t.matmul(v[0], v[1]), &[randn(&[3, 4], 1), randn(&[4, 5], 2)]).unwrap(),
    );
    assert_passes(
        "linear",
        check_gradients(
            |t, v| t.linear(v[0], v[1], Some(v[2])),
            &[randn(&[6, 4], 3), randn(&[4, 3], 4), randn(&[3], 5)],
        )
        .unwrap(),
    );
    assert_passes(
        "linear_vec",
        check_gradients(|t, v| t.linear(v[0], v[1], None), &[randn(&[4], 6), randn(&[4, 2], 7)]).unwrap(),
    );
    assert_passes(
        "pointwise_conv1d",
        check_gradients(
            |t, v| t.pointwise_conv1d(v[0], v[1], Some(v[2])),
            &[randn(&[7, 3], 8), randn(&[3, 5], 9), randn(&[5], 10)],
        )
        .unwrap(),
    );
}

#[test]
fn fd_elementwise() {
    let a = randn(&[4, 3], 11);
    let b = randn(&[4, 3], 12);
    assert_passes(
        "add",
        check_gradients(|t, v| t.add(v[0], v[1]), &[a.clone(), b.clone()]).unwrap(),
    );
    assert_passes(
        "sub",
        check_gradients(|t, v| t.sub(v[0], v[1]), &[a.clone(), b.clone()]).unwrap(),
    );
    assert_passes(
        "mul",
        check_gradients(|t, v| t.mul(v[0], v[1]), &[a.clone(), b.clone()]).unwrap(),
    );
    assert_passes(
        "scale",
        check_gradients(|t, v| t.scale(v[0], -1.7), std::slice::from_ref(&a)).unwrap(),
    );
    assert_passes(
        "exp",
        check_gradients(|t, v| t.exp(v[0]), std::slice::from_ref(&a)).unwrap(),
    );
    assert_passes(
        "softplus",
        check_gradients(|t, v| t.softplus(v[0]), std::slice::from_ref(&a)).unwrap(),
    );
    assert_passes(
        "silu",
        check_gradients(|t, v| t.silu(v[0]), std::slice::from_ref(&a)).unwrap(),
    );
    assert_passes(
        "sum",
        check_gradients(|t, v| t.sum(v[0]), std::slice::from_ref(&a)).unwrap(),
    );
    assert_passes("mean", check_gradients(|t, v| t.mean(v[0]), &[a]).unwrap());
}

#[test]
fn fd_layer_norm() {
    let gamma = Tensor::randn(&[5], 0.5, &mut rng(14)).map(|v| v + 1.0);
    assert_passes(
        "layer_norm",
        check_gradients(
            |t, v| t.layer_norm(v[0], v[1], v[2]),
            &[randn(&[6, 5], 13), gamma, randn(&[5], 15)],
        )
        .unwrap(),
    );
}

#[test]
fn fd_convolutions() {
    assert_passes(
        "depthwise_conv1d",
        check_gradients(
            |t, v| t.depthwise_conv1d(v[0], v[1]),
            &[randn(&[10, 3], 16), randn(&[3, 5], 17)],
        )
        .unwrap(),
    );
    assert_passes(
        "conv1d",
        check_gradients(
            |t, v| t.conv1d(v[0], v[1]),
            &[randn(&[9, 3], 18), randn(&[4, 3, 3], 19)],
        )
        .unwrap(),
    );
}

#[test]
fn fd_shape_ops() {
    let x = randn(&[4, 6], 20);
    assert_passes(
        "reshape",
        check_gradients(|t, v| t.reshape(v[0], &[2, 12]), std::slice::from_ref(&x)).unwrap(),
    );
    assert_passes(
        "transpose",
        check_gradients(|t, v| t.transpose(v[0]), std::slice::from_ref(&x)).unwrap(),
    );
    assert_passes(
        "concat0",
        check_gradients(|t, v| t.concat(&[v[0], v[1]], 0), &[x.clone(), randn(&[2, 6], 21)]).unwrap(),
    );
    assert_passes(
        "concat1",
        check_gradients(|t, v| t.concat(&[v[0], v[1]], 1), &[x.clone(), randn(&[4, 2], 22)]).unwrap(),
    );
    assert_passes(
        "split",
        check_gradients(
            |t, v| {
                let parts = t.split(v[0], 1, &[1, 2, 3])?;
                let a = t.exp(parts[1])?;
                let b = t.scale(parts[2], 2.0)?;
                t.concat(&[parts[0], a, b], 1)
            },
            std::slice::from_ref(&x),
        )
        .unwrap(),
    );
    assert_passes(
        "gather_rows",
        check_gradients(|t, v| t.gather_rows(v[0], &[3, 0, 0, 2]), std::slice::from_ref(&x)).unwrap(),
    );
    assert_passes(
        "reverse_rows",
        check_gradients(|t, v| t.reverse_rows(v[0]), std::slice::from_ref(&x)).unwrap(),
    );
    assert_passes(
        "mean_pool0",
        check_gradients(|t, v| t.mean_pool(v[0], 0), std::slice::from_ref(&x)).unwrap(),
    );
    assert_passes(
        "mean_pool1",
        check_gradients(|t, v| t.mean_pool(v[0], 1), std::slice::from_ref(&x)).unwrap(),
    );
    assert_passes(
        "weighted_gather",
        check_gradients(
            |t, v| t.weighted_gather(v[0], &[0, 1, 3, 2, 2, 1], &[0.2, 0.8, 0.5, 0.5, 1.0, 0.0], 2),
            std::slice::from_ref(&x),
        )
        .unwrap(),
    );
    assert_passes(
        "segment_mean",
        check_gradients(|t, v| t.segment_mean(v[0], &[1, 0, 1, 1], 2), &[x]).unwrap(),
    );
}

#[test]
fn fd_softmax_and_cross_entropy() {
    assert_passes(
        "softmax",
        check_gradients(|t, v| t.softmax(v[0]), &[randn(&[3, 4], 23)]).unwrap(),
    );
    assert_passes(
        "cross_entropy",
        check_gradients(|t, v| t.cross_entropy(v[0], &[2, 0, 3]), &[randn(&[3, 4], 24)]).unwrap(),
    );
    assert_passes(
        "cross_entropy_vec",
        check_gradients(|t, v| t.cross_entropy(v[0], &[1]), &[randn(&[5], 25)]).unwrap(),
    );
}

#[test]
fn fd_composition() {
    // A small MLP with a residual and a norm, end to end.
    let inputs = [
        randn(&[5, 4], 30),
        Tensor::randn(&[4, 6], 0.5, &mut rng(31)),
        randn(&[6], 32),
        Tensor::randn(&[6, 4], 0.5, &mut rng(33)),
        Tensor::full(&[4], 1.0),
        Tensor::zeros(&[4]),
    ];
    assert_passes(
        "composition",
        check_gradients(
            |t, v| {
                let h = t.linear(v[0], v[1], Some(v[2]))?;
                let h = t.silu(h)?;
                let h = t.linear(h, v[3], None)?;
                let r = t.add(v[0], h)?;
                let n = t.layer_norm(r, v[4], v[5])?;
                let p = t.mean_pool(n, 0)?;
                t.cross_entropy(p, &[1])
            },
            &inputs,
        )
        .unwrap(),
    );
}

struct BrokenExp;

impl CustomOp for BrokenExp {
    fn name(&self) -> &'static str {
        "broken_exp"
    }
    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Option<Tensor>> {
        let data = grad.data().iter().zip(output.data()).map(|(g, y)| -g * y).collect();
        vec![Some(Tensor::new(grad.shape(), data).unwrap())]
    }
}

fn broken_exp(t: &Tape, x: Var) -> Result<Var> {
    let y = t.value(x).map(f64::exp);
    t.custom(&[x], y, Box::new(BrokenExp))
}

#[test]
fn checker_catches_sign_flip() {
    let report = check_gradients(|t, v| broken_exp(t, v[0]), &[randn(&[3, 3], 40)]).unwrap();
    assert!(!report.passed());
    assert!(
        (report.max_rel_error() - 2.0).abs() < 1e-6,
        "{}",
        report.max_rel_error()
    );
}

#[test]
fn checker_reports_nonfinite_op() {
    let err = check_gradients(|t, v| t.exp(v[0]), &[Tensor::vector(vec![1e4])]).unwrap_err();
    assert!(matches!(err, Error::NonFinite { op: "exp" }));
}

#[test]
fn gradient_is_linear_in_the_loss() {
    let mut r = rng(50);
    let x = Tensor::randn(&[4, 3], 1.0, &mut r);
    let (a, b): (f64, f64) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));

    let grad_of = |which: u8| {
        let t = Tape::new();
        let v = t.leaf(x.clone());
        let f = t.exp(v).unwrap();
        let f = t.sum(f).unwrap();
        let g = t.silu(v).unwrap();
        let g = t.mean(g).unwrap();
        let loss = match which {
            0 => f,
            1 => g,
            _ => {
                let fa = t.scale(f, a).unwrap();
                let gb = t.scale(g, b).unwrap();
                t.add(fa, gb).unwrap()
            }
        };
        t.grad(loss, &[v]).unwrap().remove(0)
    };
    let (gf, gg, gc) = (grad_of(0), grad_of(1), grad_of(2));
    for i in 0..gc.len() {
        let expect = a * gf.data()[i] + b * gg.data()[i];
        assert!((gc.data()[i] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
    }
}

#[test]
fn gather_backward_scatters_through_inverse_permutation() {
    use rand::seq::SliceRandom;
    let mut r = rng(60);
    let n = 17;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    let x = Tensor::randn(&[n, 3], 1.0, &mut r);
    let cot = Tensor::randn(&[n, 3], 1.0, &mut r);

    let t = Tape::new();
    let v = t.leaf(x);
    let y = t.gather_rows(v, &perm).unwrap();
    let c = t.constant(cot.clone());
    let p = t.mul(y, c).unwrap();
    let loss = t.sum(p).unwrap();
    let gx = t.grad(loss, &[v]).unwrap().remove(0);

    // Gathering the pulled-back cotangent with the same permutation restores it.
    let t2 = Tape::new();
    let gv = t2.constant(gx);
    let back = t2.gather_rows(gv, &perm).unwrap();
    assert_eq!(*t2.value(back), cot);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let t = Tape::new();
        let x = t.leaf(randn(&[8, 5], 70));
        let w = t.leaf(randn(&[5, 5], 71));
        let h = t.linear(x, w, None).unwrap();
        let h = t.softplus(h).unwrap();
        let loss = t.mean(h).unwrap();
        let v = t.value(loss).item();
        let g = t.grad(loss, &[x, w]).unwrap();
        (v.to_bits(), g)
    };
    assert_eq!(run(), run());
}
