//! Full tiny-ViT debiasing objective against central finite differences.

mod common;

use common::{full_model_check, gradcheck_variants};

const SEEDS: u64 = 50;
const TOL: f64 = 1e-3;

#[test]
fn full_objective_matches_finite_differences() {
    for (name, d, act) in gradcheck_variants() {
        let mut worst = (0.0, String::new(), 0);
        for seed in 0..SEEDS {
            let (e, at) = full_model_check(seed, &d, act);
            if e > worst.0 {
                worst = (e, at, seed);
            }
        }
        println!(
            "{name}: max rel err {:.2e} ({} seed {})",
            worst.0, worst.1, worst.2
        );
        assert!(worst.0 < TOL, "{name}: {worst:?}");
    }
}
