use proptest::prelude::*;

use super::*;
use crate::dataset::{generate, DatasetSpec, SaliencySample};
use crate::model::{ModelConfig, ParamGroup, SaliencyModel};
use crate::tensor::Tensor;

fn tiny_data(per_category: usize, seed: u64) -> Vec<SaliencySample> {
    generate(&DatasetSpec {
        samples_per_category: per_category,
        seed,
        ..DatasetSpec::default()
    })
    .unwrap()
}

fn quick_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: epochs,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn early_stopping_counts_non_improving_epochs() {
    let mut s = EarlyStopping::new(2);
    let seq = [3.0, 2.0, 2.0, 1.5, 1.6, 1.5];
    let stops: Vec<bool> = seq.iter().map(|&l| s.observe(l).stop).collect();
    assert_eq!(stops, [false, false, false, false, false, true]);
    assert_eq!(s.best(), 1.5);
}

#[test]
fn zero_patience_stops_at_first_plateau() {
    let mut s = EarlyStopping::new(0);
    assert!(!s.observe(1.0).stop);
    assert!(s.observe(1.0).stop);
}

proptest! {
    #[test]
    fn strictly_decreasing_losses_never_stop(start in 1.0f64..100.0, steps in 1usize..50, patience in 0usize..5) {
        let mut s = EarlyStopping::new(patience);
        for i in 0..steps {
            let d = s.observe(start - i as f64 * 0.01);
            prop_assert!(d.improved && !d.stop);
        }
    }

    #[test]
    fn stop_fires_exactly_after_patience_plateau(patience in 1usize..8) {
        let mut s = EarlyStopping::new(patience);
        s.observe(1.0);
        for i in 1..patience {
            prop_assert!(!s.observe(1.0).stop, "stopped early at plateau step {}", i);
        }
        prop_assert!(s.observe(1.0).stop);
    }
}

#[test]
fn loss_target_block_averages_and_renormalizes() {
    let d = Tensor::new(&[1, 2, 4], vec![0.0, 0.2, 0.4, 0.4, 0.0, 0.2, 0.8, 0.8]).unwrap();
    let t = loss_target(&d, (1, 2)).unwrap();
    assert_eq!(t.shape(), &[1, 1, 2]);
    let (a, b) = (0.1, 0.6);
    assert!((t.data()[0] - a / b).abs() < 1e-12);
    assert!((t.data()[1] - 1.0).abs() < 1e-12);
    assert!(loss_target(&d, (1, 3)).is_err());
    let z = loss_target(&Tensor::zeros(&[1, 2, 2]), (1, 1)).unwrap();
    assert_eq!(z.data(), &[0.0]);
}

#[test]
fn batch_maps_categories_to_gate_classes() {
    let data = tiny_data(1, 0);
    let m = SaliencyModel::build(&ModelConfig::compact(), 0).unwrap();
    let b = Batch::assemble(&data, &m).unwrap();
    assert_eq!(b.classes, vec![0, 1, 2, 3]);
    assert_eq!(b.images.shape(), &[4, 1, 32, 32]);
    assert_eq!(b.targets.shape(), &[4, 1, 8, 8]);

    let single = SaliencyModel::build(&ModelConfig::compact().single_expert(), 0).unwrap();
    assert_eq!(Batch::assemble(&data, &single).unwrap().classes, vec![0; 4]);

    let two = SaliencyModel::build(
        &ModelConfig {
            num_experts: 2,
            ..ModelConfig::compact()
        },
        0,
    )
    .unwrap();
    assert!(Batch::assemble(&data, &two).is_err());
}

#[test]
fn training_is_deterministic_and_restores_best_epoch() {
    let data = tiny_data(4, 1);
    let (tr, va) = data.split_at(12);
    let run = || {
        let mut m = SaliencyModel::build(&ModelConfig::compact(), 3).unwrap();
        let o = train(&mut m, tr, va, &quick_cfg(3)).unwrap();
        (m, o)
    };
    let (mut m1, o1) = run();
    let (m2, o2) = run();
    assert_eq!(o1.log, o2.log);
    assert_eq!(m1.snapshot(), m2.snapshot());
    assert_eq!(log_csv(&o1.log), log_csv(&o2.log));

    assert!(o1.log.len() <= 3 && !o1.log.is_empty());
    assert!(o1.best_epoch >= 1);
    let best = o1.log[o1.best_epoch - 1].val_loss;
    assert_eq!(best, o1.best_val_loss);
    assert!(o1.log.iter().all(|e| e.val_loss >= best));
    let again = evaluate_model(&mut m1, va, 8).unwrap();
    assert!((again.loss - best).abs() < 1e-9);
}

#[test]
fn training_reduces_loss() {
    let data = tiny_data(6, 2);
    let (tr, va) = data.split_at(16);
    let mut m = SaliencyModel::build(&ModelConfig::compact(), 0).unwrap();
    let before = evaluate_model(&mut m, va, 8).unwrap().loss;
    let o = train(&mut m, tr, va, &quick_cfg(6)).unwrap();
    assert!(o.best_val_loss < before, "{} !< {before}", o.best_val_loss);
}

#[test]
fn frozen_gating_parameters_do_not_move() {
    let data = tiny_data(2, 0);
    let (tr, va) = data.split_at(6);
    let mut m = SaliencyModel::build(&ModelConfig::compact(), 0).unwrap();
    let gating = m.params_in_group(ParamGroup::Gating);
    let trunk = m.params_in_group(ParamGroup::Trunk);
    let before: Vec<Vec<f64>> = gating.iter().map(|&id| m.graph().param_value(id).data().to_vec()).collect();
    let trunk_before = m.graph().param_value(trunk[0]).data().to_vec();
    let cfg = TrainConfig {
        freeze_gating: true,
        ..quick_cfg(1)
    };
    train(&mut m, tr, va, &cfg).unwrap();
    for (id, b) in gating.iter().zip(&before) {
        assert_eq!(m.graph().param_value(*id).data(), &b[..]);
    }
    assert_ne!(m.graph().param_value(trunk[0]).data(), &trunk_before[..]);
}

#[test]
fn invalid_train_configs_are_rejected() {
    let data = tiny_data(1, 0);
    let mut m = SaliencyModel::build(&ModelConfig::compact(), 0).unwrap();
    for cfg in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { flip_prob: 1.5, ..TrainConfig::default() },
        TrainConfig { max_epochs: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(&mut m, &data, &data, &cfg), Err(crate::Error::Config(_))));
    }
    assert!(train(&mut m, &[], &data, &TrainConfig::default()).is_err());
}

#[test]
fn member_subsets_are_sorted_sized_and_seeded() {
    let a = member_subset(216, 0.8, 7, 1).unwrap();
    assert_eq!(a.len(), 172);
    assert!(a.windows(2).all(|w| w[0] < w[1]));
    assert!(*a.last().unwrap() < 216);
    assert_eq!(a, member_subset(216, 0.8, 7, 1).unwrap());
    assert_ne!(a, member_subset(216, 0.8, 7, 2).unwrap());
    assert_eq!(member_subset(10, 1.0, 0, 0).unwrap(), (0..10).collect::<Vec<_>>());
    assert!(matches!(member_subset(1, 0.5, 0, 0), Err(crate::Error::Config(_))));
    assert!(member_subset(10, 0.0, 0, 0).is_err());
    assert_eq!(member_seed(42, 0), 42);
    assert_ne!(member_seed(42, 1), member_seed(42, 2));
}

#[test]
fn ensemble_is_independent_of_thread_count() {
    let data = tiny_data(2, 3);
    let (tr, va) = data.split_at(6);
    let cfg = ModelConfig::compact().single_expert();
    let run = |threads| {
        let ens = EnsembleConfig {
            members: 2,
            subsample: 0.8,
            threads,
        };
        train_ensemble(&cfg, tr, va, &quick_cfg(1), &ens).unwrap()
    };
    let (a, b) = (run(1), run(2));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.model.snapshot(), y.model.snapshot());
        assert_eq!(x.subset, y.subset);
        assert_eq!(x.outcome.log, y.outcome.log);
    }
    assert_eq!(a[0].seed, 5);
    assert_eq!(a[0].subset.len(), 4);
}

#[test]
fn ensemble_prediction_is_the_member_mean() {
    let a = Tensor::new(&[1, 1, 1, 2], vec![1.0, 4.0]).unwrap();
    let b = Tensor::new(&[1, 1, 1, 2], vec![3.0, 0.0]).unwrap();
    assert_eq!(average_maps(&[a.clone(), b]).unwrap().data(), &[2.0, 2.0]);
    assert!(average_maps(&[]).is_err());
    assert!(average_maps(&[a, Tensor::zeros(&[1, 1, 2, 1])]).is_err());

    let cfg = ModelConfig::compact().single_expert();
    let mut members = vec![SaliencyModel::build(&cfg, 1).unwrap(), SaliencyModel::build(&cfg, 2).unwrap()];
    let images = Tensor::stack(&tiny_data(1, 0).iter().map(|s| s.image.clone()).collect::<Vec<_>>()).unwrap();
    let mean = ensemble_predict(&mut members, &images).unwrap();
    let p0 = members[0].predict(&images).unwrap().saliency;
    let p1 = members[1].predict(&images).unwrap().saliency;
    for i in 0..mean.numel() {
        assert!((mean.data()[i] - 0.5 * (p0.data()[i] + p1.data()[i])).abs() < 1e-15);
    }
}

#[test]
fn constant_loss_stops_after_patience_plus_one_evaluations() {
    let mut s = EarlyStopping::new(10);
    let evaluations = (1..=100).find(|_| s.observe(0.5).stop).unwrap();
    assert_eq!(evaluations, 11);
}

#[test]
fn decreasing_loss_runs_to_max_epochs() {
    let mut s = EarlyStopping::new(10);
    assert!((0..5).all(|i| !s.observe(5.0 - i as f64).stop));
}

#[test]
fn five_members_get_distinct_subsets() {
    let subsets: Vec<Vec<usize>> = (0..5).map(|m| member_subset(216, 0.8, 0, m).unwrap()).collect();
    for i in 0..5 {
        assert_eq!(subsets[i].len(), 172);
        for j in i + 1..5 {
            assert_ne!(subsets[i], subsets[j]);
        }
    }
}

#[test]
fn one_full_member_equals_plain_training() {
    let data = tiny_data(2, 4);
    let (tr, va) = data.split_at(6);
    let cfg = ModelConfig::compact();
    let ens = EnsembleConfig {
        members: 1,
        subsample: 1.0,
        threads: 1,
    };
    let members = train_ensemble(&cfg, tr, va, &quick_cfg(2), &ens).unwrap();
    let mut plain = SaliencyModel::build(&cfg, quick_cfg(2).seed).unwrap();
    let outcome = train(&mut plain, tr, va, &quick_cfg(2)).unwrap();
    assert_eq!(members[0].model.snapshot(), plain.snapshot());
    assert_eq!(members[0].outcome.log, outcome.log);
}
