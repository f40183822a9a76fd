mod common;

use common::{elbo_case, op_case, OP_NAMES};
use sparsebayes::tensor::{Tape, Tensor};

#[test]
fn every_op_matches_finite_differences() {
    for case in 0..(2 * OP_NAMES.len() as u64) {
        let c = op_case(case);
        assert!(c.ok(), "{} case {case}: relative error {:e}", c.name, c.max_rel);
    }
}

#[test]
fn objective_matches_finite_differences() {
    for case in 0..6 {
        let c = elbo_case(case);
        assert!(c.ok(), "{} case {case}: relative error {:e} over {}", c.name, c.max_rel, c.checked);
    }
}

#[test]
fn matmul_backward_by_hand() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let b = t.leaf(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
    let c = t.matmul(a, b).unwrap();
    assert_eq!(t.value(c).data(), &[11.0]);
    let s = t.sum(c);
    t.backward(s).unwrap();
    assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
    assert_eq!(t.grad(b).unwrap(), &[1.0, 2.0]);
}

#[test]
fn conv_kernel_gradient_by_hand() {
    let mut t = Tape::new();
    let x = t.constant(Tensor::full(&[1, 3, 3], 1.0));
    let k = t.leaf(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = t.conv2d(x, k, 1, 0).unwrap();
    assert_eq!(t.value(y).shape(), &[1, 2, 2]);
    assert!(t.value(y).data().iter().all(|&v| v == 4.0));
    let s = t.sum(y);
    t.backward(s).unwrap();
    assert!(t.grad(k).unwrap().iter().all(|&g| g == 4.0));
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::scalar(3.0));
    let sq = t.mul(w, w).unwrap();
    t.backward(sq).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[6.0]);
    t.backward(sq).unwrap();
    assert_eq!(t.grad(w).unwrap(), &[12.0]);
    t.zero_grad();
    assert!(t.grad(w).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut t = Tape::new();
    let w = t.leaf(Tensor::zeros(&[2]));
    assert!(matches!(t.backward(w), Err(sparsebayes::Error::Contract(_))));
}
