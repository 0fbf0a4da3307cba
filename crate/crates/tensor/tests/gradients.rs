//! Central-difference checks for every differentiable op.

use tecswin_tensor::gradcheck::{check_gradients, GradCheckOptions};
use tecswin_tensor::{Result, Rng, Tensor};

const TOL: f64 = 1e-2;

fn weights(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

/// Projects an op output onto fixed random weights so every output
/// coordinate contributes to the scalar.
fn project(y: &Tensor, seed: u64) -> Result<Tensor> {
    Ok(y.mul(&weights(y.shape(), seed))?.sum_all())
}

fn assert_grad<F>(name: &str, f: F, inputs: &[Tensor])
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let report = check_gradients(f, inputs, &GradCheckOptions::default()).unwrap();
    let err = report.max_rel_error();
    assert!(err < TOL, "{name}: max relative error {err:e} ({report:?})");
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut Rng::new(seed))
}

#[test]
fn trivial_backward_cases() {
    let x = randn(&[5], 1).requires_grad_leaf();
    let g = x.sum_all().backward().unwrap();
    assert_eq!(g.get(&x).unwrap(), &[1.0; 5]);

    let x = randn(&[5], 2).requires_grad_leaf();
    let g = x.square().sum_all().mul_scalar(0.5).backward().unwrap();
    for (a, b) in g.get(&x).unwrap().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-6);
    }
    assert!(x.grad().is_some());
}

#[test]
fn non_scalar_loss_rejected() {
    let x = randn(&[3], 1).requires_grad_leaf();
    assert!(x.backward().is_err());
}

#[test]
fn grad_elementwise_broadcast() {
    assert_grad("add", |t| project(&t[0].add(&t[1])?, 9), &[randn(&[2, 3, 4], 1), randn(&[4], 2)]);
    assert_grad("sub", |t| project(&t[0].sub(&t[1])?, 9), &[randn(&[2, 3, 4], 1), randn(&[3, 1], 2)]);
    assert_grad("mul", |t| project(&t[0].mul(&t[1])?, 9), &[randn(&[2, 1, 4], 3), randn(&[3, 4], 4)]);
    assert_grad(
        "div",
        |t| project(&t[0].div(&t[1])?, 9),
        &[randn(&[2, 3], 5), randn(&[3], 6).mul_scalar(0.1).add_scalar(2.0)],
    );
    assert_grad("mul_self", |t| project(&t[0].mul(&t[0])?, 9), &[randn(&[6], 7)]);
    assert_grad("scalar", |t| project(&t[0].mul_scalar(3.0).add_scalar(1.0), 9), &[randn(&[6], 8)]);
}

#[test]
fn grad_activations() {
    assert_grad("gelu", |t| project(&t[0].gelu(), 3), &[randn(&[4, 5], 1)]);
    assert_grad("silu", |t| project(&t[0].silu(), 3), &[randn(&[4, 5], 2)]);
    assert_grad("square", |t| project(&t[0].square(), 3), &[randn(&[4, 5], 3)]);
}

#[test]
fn grad_matmul_and_linear() {
    assert_grad("matmul", |t| project(&t[0].matmul(&t[1])?, 4), &[randn(&[3, 4], 1), randn(&[4, 2], 2)]);
    assert_grad(
        "matmul_batched_broadcast",
        |t| project(&t[0].matmul(&t[1])?, 4),
        &[randn(&[2, 3, 2, 4], 3), randn(&[3, 4, 5], 4)],
    );
    assert_grad(
        "matmul_shared_rhs",
        |t| project(&t[0].matmul(&t[1])?, 4),
        &[randn(&[2, 3, 4], 5), randn(&[4, 2], 6)],
    );
    assert_grad(
        "linear",
        |t| project(&t[0].linear(&t[1], Some(&t[2]))?, 4),
        &[randn(&[2, 3, 4], 7), randn(&[4, 5], 8), randn(&[5], 9)],
    );
}

#[test]
fn grad_norm_softmax_reduce() {
    assert_grad(
        "layer_norm",
        |t| project(&t[0].layer_norm(&t[1], &t[2], 1e-5)?, 5),
        &[randn(&[3, 6], 1), randn(&[6], 2), randn(&[6], 3)],
    );
    assert_grad("softmax", |t| project(&t[0].softmax_last()?, 5), &[randn(&[3, 6], 4)]);
    assert_grad("softmax_axis0", |t| project(&t[0].softmax(0)?, 5), &[randn(&[3, 6], 5)]);
    assert_grad("sum_axis", |t| project(&t[0].sum_axis(1, false)?, 5), &[randn(&[2, 3, 4], 6)]);
    assert_grad("mean_axis", |t| project(&t[0].mean_axis(0, true)?, 5), &[randn(&[2, 3, 4], 7)]);
    assert_grad("mean_all", |t| Ok(t[0].square().mean_all()), &[randn(&[2, 3], 8)]);
}

#[test]
fn grad_layout_ops() {
    let x = || randn(&[2, 4, 4, 8], 1);
    assert_grad("reshape", |t| project(&t[0].reshape(&[8, 32])?, 6), &[x()]);
    assert_grad("permute", |t| project(&t[0].permute(&[3, 1, 0, 2])?, 6), &[x()]);
    assert_grad("narrow", |t| project(&t[0].narrow(3, 2, 5)?, 6), &[x()]);
    assert_grad(
        "concat",
        |t| project(&Tensor::concat(&[&t[0], &t[1]], 2)?, 6),
        &[randn(&[2, 3, 2], 2), randn(&[2, 3, 5], 3)],
    );
    assert_grad("pixel_shuffle", |t| project(&t[0].pixel_shuffle()?, 6), &[x()]);
    assert_grad("pixel_unshuffle", |t| project(&t[0].pixel_unshuffle()?, 6), &[x()]);
    assert_grad("window_partition", |t| project(&t[0].window_partition(2)?, 6), &[x()]);
    assert_grad(
        "window_reverse",
        |t| project(&t[0].window_reverse(2, 4, 4)?, 6),
        &[randn(&[8, 4, 8], 4)],
    );
    assert_grad("cyclic_shift", |t| project(&t[0].cyclic_shift(-1, 2)?, 6), &[x()]);
    let idx = std::sync::Arc::new(vec![0u32, 3, 3, 1, 0]);
    assert_grad(
        "gather_repeat",
        move |t| project(&t[0].gather_flat(idx.clone(), &[5])?, 6),
        &[randn(&[4], 5)],
    );
}
