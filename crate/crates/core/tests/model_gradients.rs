//! Finite-difference check of the whole joint loss on a small 2-way 1-shot
//! episode, through backbone, predictor, both attention maps and the
//! prototype classifier.

mod common;

use asl::model::{Ablation, ModelParams};
use common::grad::{config, episode, joint_loss_worst, worst_error, TOL};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn joint_loss_matches_finite_differences() {
    let (err, at) = joint_loss_worst();
    assert!(err < TOL, "relative error {err:e} at {at}");
}

#[test]
fn ablated_losses_match_finite_differences() {
    for (i, list) in ["no_vap", "no_cam", "no_psam", "no_attributes"].into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + i as u64);
        let params = ModelParams::init(config(Ablation::parse(list).unwrap()), i as u64).unwrap();
        let batch = episode(&mut rng);
        let (err, at) = worst_error(&params, &batch, 4, &mut rng);
        assert!(err < TOL, "{list}: relative error {err:e} at {at}");
    }
}
