//! Single-process training sanity on the synthetic regression task.

use bks_autograd::{backward, mse_loss, Model};
use bks_modelzoo::{build_mlp, GateRule, MlpSpec, Sgd, SgdConfig, SyntheticRegression};

#[test]
fn loss_decreases_over_two_hundred_iterations() {
    // Full-batch descent on one fixed batch: the trajectory is deterministic,
    // so "decreases" is a real claim rather than a fight with batch noise.
    let task = SyntheticRegression::new(4, 1, 21);
    let (x, y) = task.full_batch(0, 8);
    let mut model = build_mlp(&MlpSpec::new(vec![4, 8, 1]), 21);
    let mut opt = Sgd::new(model.parameters(), SgdConfig::new(0.01));
    let mut losses = Vec::new();
    for _ in 0..200 {
        let out = model.forward(&x).unwrap();
        let loss = mse_loss(&out, &y).unwrap();
        losses.push(loss.item().unwrap());
        backward(&loss).unwrap();
        opt.step();
    }
    assert!(
        losses[199] < losses[0] * 0.9,
        "loss did not decrease: {} -> {}",
        losses[0],
        losses[199]
    );
    assert!(
        losses.windows(2).filter(|w| w[1] > w[0]).count() < 10,
        "descent on a fixed batch should be near-monotone"
    );
}

#[test]
fn reachable_set_alternates_with_the_gate() {
    let spec = MlpSpec::new(vec![6, 8, 3]).with_gated_branch(4, GateRule::OddIterations);
    let mut model = build_mlp(&spec, 13);
    let branch = model.branch_param_indices();
    let task = SyntheticRegression::new(6, 3, 13);
    for iter in 0..6u64 {
        let (x, _) = task.full_batch(iter, 4);
        let expect_branch = model.branch_active_next();
        assert_eq!(expect_branch, iter % 2 == 1);
        let out = model.forward(&x).unwrap();
        let reached = bks_autograd::traverse_reachable_params(&[out]);
        for idx in &branch {
            assert_eq!(reached.contains(idx), expect_branch, "iteration {iter}");
        }
    }
}
