//! Finite-difference checks of every differentiable op.

mod common;

use common::fd::{case, max_rel_error, CASES, SEEDS, TOL};

fn check(name: &str) {
    let c = case(name);
    for seed in SEEDS {
        let err = max_rel_error(c, seed);
        assert!(err < TOL, "{name} seed {seed}: relative error {err:e}");
    }
}

#[test]
fn matmul() {
    check("matmul");
    check("matmul_nt");
}

#[test]
fn elementwise() {
    check("add");
    check("mul");
    check("add_row");
    check("sum");
    check("gelu");
}

#[test]
fn softmax_both_axes() {
    check("softmax axis 1");
    check("softmax axis 0");
}

#[test]
fn layer_norm() {
    check("layer_norm");
}

#[test]
fn gather_select_mean() {
    check("gather");
    check("select_row");
    check("mean_rows");
}

#[test]
fn attention() {
    check("attention");
    check("attention 1 head");
}

#[test]
fn dora_effective_weight() {
    check("row_rescale");
    check("dora");
}

#[test]
fn losses() {
    check("cross_entropy");
    check("bce");
}

#[test]
fn encoder_block_composite() {
    check("encoder block");
}

#[test]
fn every_case_is_covered() {
    assert_eq!(CASES.len(), 20);
}
