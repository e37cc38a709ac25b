//! Randomised invariants of the numerical building blocks, on seeds distinct
//! from the acceptance run.

mod common;

use common::*;

fn ok(check: Check) {
    if let Err(e) = check {
        panic!("{e}");
    }
}

#[test]
fn gradients_match_finite_differences() {
    ok(check_gradients(50, 99));
}

#[test]
fn hada_partitions_are_valid_and_replayable() {
    ok(check_packing_hand_cases());
    ok(check_packing_property(1000, 17));
}

#[test]
fn allocator_matches_enumeration() {
    ok(check_allocator(1000, 23));
}

#[test]
fn quantizer_properties() {
    ok(check_quantizer(2000, 31));
}

#[test]
fn estimator_on_quadratics() {
    ok(check_estimator_quadratics(&[3, 5, 7, 12, 20], 20_000));
}
