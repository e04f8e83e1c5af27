mod common;

use common::{gradient_case, GRAD_KINDS};

fn assert_kind(kind: usize, repeats: usize) {
    for r in 0..repeats {
        let (name, report) = gradient_case(kind + r * GRAD_KINDS);
        assert!(report.ok(), "{name}: {:#?}", report.failures);
    }
}

#[test]
fn conv1d_gradients() {
    assert_kind(0, 4);
    assert_kind(1, 4);
}

#[test]
fn batch_norm_gradients() {
    assert_kind(2, 4);
    assert_kind(3, 4);
}

#[test]
fn relu_and_pool_gradients() {
    assert_kind(4, 4);
    assert_kind(5, 6);
    assert_kind(6, 3);
}

#[test]
fn linear_gradients() {
    assert_kind(7, 4);
}

#[test]
fn residual_block_gradients() {
    assert_kind(8, 4);
}

#[test]
fn full_network_gradients() {
    assert_kind(9, 1);
}
