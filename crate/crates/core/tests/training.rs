mod common;

use common::*;
use milodo::neuro::{encode_checkpoint, AdamState};
use milodo::seeds::derive_seed;
use milodo::training::*;
use milodo::Optimizee64;

fn fixture_set(count: u64) -> Vec<Optimizee64> {
    (0..count).map(|k| lasso(4, 10, 5, 0.1, derive_seed(3, &[k]))).collect()
}

fn special(t: &milodo::graph::Topology) -> milodo::Params64 {
    initial_params(t, &InitMode::Special { gossip: ring_w(t), gamma: 0.05 }, 3).unwrap()
}

#[test]
fn schedule_matches_the_five_stage_curriculum() {
    let s = default_schedule();
    let rows: Vec<_> = s.iter().map(|c| (c.k_t, c.k, c.lr, c.epochs, c.batch_size)).collect();
    assert_eq!(
        rows,
        vec![
            (5, 10, 5e-4, 20, 32),
            (10, 20, 1e-4, 10, 32),
            (20, 40, 5e-5, 10, 32),
            (40, 80, 1e-5, 10, 32),
            (20, 100, 1e-5, 5, 32),
        ]
    );
    let adam = AdamState::new(&special(&ring(4)), 1e-3);
    assert_eq!((adam.beta1, adam.beta2, adam.eps), (0.9, 0.999, 1e-8));
}

#[test]
fn invalid_stages_rejected() {
    for (k_t, k, batch_size) in [(0, 10, 32), (3, 10, 32), (5, 10, 0)] {
        let stage = StageConfig { k_t, k, lr: 1e-3, epochs: 1, batch_size };
        assert!(stage.validate().is_err(), "{k_t} {k} {batch_size}");
    }
}

#[test]
fn zero_epochs_and_zero_lr_leave_params_unchanged() {
    let t = ring(4);
    let train = fixture_set(8);
    for (lr, epochs) in [(5e-4, 0), (0.0, 3)] {
        let mut p = special(&t);
        let before = p.clone();
        let stage = StageConfig { k_t: 5, k: 10, lr, epochs, batch_size: 4 };
        let mut adam = AdamState::new(&p, lr);
        let report = train_stage(&train, &t, &mut p, &stage, 0, &mut adam, 1, &TrainOptions::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(report.epoch_losses.len(), epochs);
        assert!(report.aborted.is_none());
    }
}

#[test]
fn first_stage_fixture_loss_decreases() {
    let t = ring(4);
    let train = fixture_set(32);
    let mut p = special(&t);
    let stage = StageConfig { k_t: 5, k: 10, lr: 5e-4, epochs: 20, batch_size: 32 };
    let mut adam = AdamState::new(&p, stage.lr);
    let report = train_stage(&train, &t, &mut p, &stage, 0, &mut adam, 3, &TrainOptions::default()).unwrap();
    let losses = &report.epoch_losses;
    assert_eq!(losses.len(), 20);
    assert_eq!(report.nan_segments, 0);
    assert!(losses[19] < losses[0]);
    for (got, want) in [(losses[0], 2.3585887735833553), (losses[19], 1.670214791749632)] {
        assert!((got - want).abs() < 1e-9 * want, "{got} vs pinned {want}");
    }
}

#[test]
fn multi_stage_run_is_reproducible_and_checkpoints_each_stage() {
    let t = ring(4);
    let train = fixture_set(8);
    let stages = [
        StageConfig { k_t: 2, k: 4, lr: 5e-4, epochs: 2, batch_size: 4 },
        StageConfig { k_t: 3, k: 6, lr: 1e-4, epochs: 2, batch_size: 4 },
    ];
    let run = |seed| {
        let mut blobs = Vec::new();
        let out = multi_stage_train(&train, &t, special(&t), &stages, seed, &TrainOptions::default(), |i, p, a, r| {
            assert_eq!(r.epoch_losses.len(), stages[i].epochs);
            assert_eq!(a.t as usize, stages[i].epochs * 2 * 2);
            blobs.push(encode_checkpoint(p, Some(a)));
            Ok(())
        })
        .unwrap();
        (out, blobs)
    };
    let (a, blobs_a) = run(5);
    let (b, blobs_b) = run(5);
    assert!(a.aborted.is_none());
    assert_eq!(a.stage_params.len(), 2);
    assert_eq!(blobs_a, blobs_b);
    assert_eq!(a.reports.iter().map(|r| r.epoch_losses.clone()).collect::<Vec<_>>(),
        b.reports.iter().map(|r| r.epoch_losses.clone()).collect::<Vec<_>>());
    let (c, _) = run(6);
    assert_ne!(c.params, a.params);
}

#[test]
fn exploding_stage_aborts_and_keeps_prior_params() {
    let t = ring(4);
    let train = fixture_set(8);
    let stages = [
        StageConfig { k_t: 20, k: 40, lr: 1e-4, epochs: 1, batch_size: 4 },
        StageConfig { k_t: 5, k: 10, lr: 1e-4, epochs: 1, batch_size: 4 },
    ];
    // a huge step from special init overflows every rollout
    let wild = initial_params(&t, &InitMode::Special { gossip: ring_w(&t), gamma: 1e10 }, 3).unwrap();
    let out = multi_stage_train(&train, &t, wild.clone(), &stages, 1, &TrainOptions::default(), |_, _, _, _| Ok(())).unwrap();
    assert!(out.aborted.is_some());
    assert!(out.stage_params.is_empty());
    assert_eq!(out.params, wild);
    assert!(out.reports[0].nan_segments * 2 > out.reports[0].segments);
}
