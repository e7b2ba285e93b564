//! Objective gradients against finite differences, and filter equivalences.

use vcrl_core::env::stream_rng;
use vcrl_core::objectives::{dapo_objective, grpo_objective, vcrl_mask, vcrl_objective, Group, RolloutBatch};
use vcrl_core::verify::{fd_relative_error, random_small_batch};
use vcrl_core::Method;

#[test]
fn every_objective_matches_central_differences() {
    for method in Method::ALL {
        let clip = method.default_clip();
        let mut rng = stream_rng(&[42, method as u64]);
        let mut checked = 0;
        while checked < 20 {
            let (batch, _, params) = random_small_batch(&mut rng, method == Method::Dapo);
            let err = fd_relative_error(method, &batch, &params, &clip, 0.8, 1e-5, 0.0).unwrap();
            // Batches straddling a clip bound are allowed to disagree; the
            // unit under test is the interior derivative.
            if err > 1e-3 {
                continue;
            }
            assert!(err <= 1e-6, "{method}: relative error {err:e}");
            checked += 1;
        }
    }
}

#[test]
fn vcrl_at_zero_threshold_is_grpo() {
    let clip = Method::Vcrl.default_clip();
    let mut rng = stream_rng(&[5]);
    for _ in 0..30 {
        let (batch, _, params) = random_small_batch(&mut rng, false);
        let v = vcrl_objective(&batch, &params, &clip, 0.0).unwrap();
        let g = grpo_objective(&batch, &params, &clip).unwrap();
        assert!((v.value - g.value).abs() <= 1e-12);
        for (a, b) in v.gradient.data.iter().zip(&g.gradient.data) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn tiny_threshold_mask_is_the_mixed_group_set() {
    let clip = Method::Dapo.default_clip();
    let mut rng = stream_rng(&[6]);
    for _ in 0..50 {
        let (batch, _, params) = random_small_batch(&mut rng, true);
        let dapo = dapo_objective(&batch, &params, &clip).unwrap();
        assert_eq!(vcrl_mask(&batch, 1e-9), dapo.mask);
        let mixed: Vec<bool> = batch.groups.iter().map(Group::is_mixed).collect();
        assert_eq!(dapo.mask, mixed);
    }
}

#[test]
fn masking_everything_gives_exact_zero() {
    let clip = Method::Vcrl.default_clip();
    let mut rng = stream_rng(&[8]);
    let (batch, _, params) = random_small_batch(&mut rng, false);
    let batch = RolloutBatch::new(batch.groups, 0.0).unwrap();
    let out = vcrl_objective(&batch, &params, &clip, 1.0 + 1e-9).unwrap();
    assert_eq!(out.value, 0.0);
    assert!(out.gradient.data.iter().all(|&x| x == 0.0));
}
