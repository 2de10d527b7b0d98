//! Loss functions against flat-loop reimplementations on random inputs.

mod common;

use common::{adversary_trials, laftr_trials, mmd_trials, query_alignment_trials};

const TRIALS: u64 = 100;
const TOL: f64 = 1e-10;

#[test]
fn query_alignment_matches_oracle() {
    let e = query_alignment_trials(TRIALS);
    assert!(e < TOL, "max abs err {e}");
}

#[test]
fn mmd_matches_oracle() {
    let e = mmd_trials(TRIALS);
    assert!(e < TOL, "max abs err {e}");
}

#[test]
fn laftr_cell_objective_matches_oracle() {
    let e = laftr_trials(TRIALS);
    assert!(e < TOL, "max abs err {e}");
}

#[test]
fn class_specific_adversary_matches_oracle() {
    let e = adversary_trials(TRIALS);
    assert!(e < TOL, "max abs err {e}");
}
