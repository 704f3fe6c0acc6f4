use std::sync::Arc;

use proptest::prelude::*;
use rtlab_core::data::{synth_glyphs, Dataset, GlyphParams};
use rtlab_core::nn::{Layout, ProjectorSpec, SegmentTag};
use rtlab_core::optim::MultiStep;
use rtlab_core::supervised::{
    calibrated_error, global_magnitude_prune, imp_run, lmc_experiment, pruning_rate, random_classifier, supervised_train,
    Augmentation, PruneMask, SupervisedConfig,
};
use rtlab_core::{ModelSpec, ModelState, ParamVector};

fn layered(weights: Vec<f64>, biases: usize) -> ParamVector {
    let n = weights.len();
    let mut l = Layout::new();
    l.push("a.w", vec![n / 2], SegmentTag::Weight);
    l.push("a.b", vec![biases], SegmentTag::Bias);
    l.push("b.w", vec![n - n / 2], SegmentTag::Weight);
    let mut v = weights[..n / 2].to_vec();
    v.extend(std::iter::repeat_n(1e-9, biases));
    v.extend(&weights[n / 2..]);
    ParamVector::new(Arc::new(l), v).unwrap()
}

proptest! {
    #[test]
    fn masks_are_monotone_and_sparsity_is_exact(
        w in prop::collection::vec(-1.0f64..1.0, 20..400),
        k in prop::sample::select(vec![0.1, 0.2, 0.3, 0.5]),
        rounds in 1usize..6,
    ) {
        let theta = layered(w, 3);
        let mut mask = PruneMask::new(&theta);
        let p = mask.prunable_count();
        prop_assert_eq!(p, theta.len() - 3);
        let mut alive = p;
        for r in 1..=rounds {
            let next = global_magnitude_prune(&theta, &mask, k).unwrap();
            for i in 0..theta.len() {
                prop_assert!(mask.keep[i] || !next.keep[i], "entry {} revived", i);
                prop_assert!(next.prunable[i] || next.keep[i], "non-prunable entry {} pruned", i);
            }
            alive -= (k * alive as f64 + 1e-9).floor() as usize;
            prop_assert_eq!(next.pruned_count(), p - alive);
            prop_assert!((next.sparsity() - pruning_rate(k, r as u32)).abs() <= r as f64 / p as f64);
            mask = next;
        }
    }

    #[test]
    fn pruning_rate_is_a_geometric_sum(k in 0.01f64..0.99, r in 0u32..12) {
        let sum: f64 = (0..r).map(|i| (1.0 - k).powi(i as i32) * k).sum();
        prop_assert!((pruning_rate(k, r) - sum).abs() < 1e-10);
    }

    #[test]
    fn rewinding_restores_unmasked_coordinates(w in prop::collection::vec(-1.0f64..1.0, 10..100), k in 0.1f64..0.9) {
        let theta = layered(w.clone(), 2);
        let trained = layered(w.iter().map(|v| v * 0.5 + 0.1).collect(), 2);
        let mask = global_magnitude_prune(&trained, &PruneMask::new(&trained), k).unwrap();
        let mut rewound = theta.clone();
        mask.apply(&mut rewound).unwrap();
        for i in 0..theta.len() {
            if mask.keep[i] {
                prop_assert_eq!(rewound.values()[i].to_bits(), theta.values()[i].to_bits());
            } else {
                prop_assert_eq!(rewound.values()[i], 0.0);
            }
        }
    }
}

fn tiny() -> (ModelState, Dataset, Dataset) {
    let spec = ModelSpec {
        encoder_widths: vec![4, 8],
        embed_dim: 8,
        projector: ProjectorSpec::default(),
        ..ModelSpec::small_cnn([1, 8, 8])
    };
    let ds = synth_glyphs(160, &GlyphParams::default(), 2).unwrap();
    let (mut train, mut test) = ds.split_at(100).unwrap();
    rtlab_core::data::standardize_pair(&mut train, &mut test).unwrap();
    (random_classifier(&spec, 10, 1).unwrap(), train, test)
}

fn short(epochs: usize) -> SupervisedConfig {
    SupervisedConfig {
        epochs,
        batch_size: 20,
        schedule: MultiStep {
            base: 0.05,
            milestones: vec![],
            factor: 10.0,
        },
        rewind_epochs: vec![0, 1],
        ..SupervisedConfig::default()
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let (init, train, _) = tiny();
    let cfg = SupervisedConfig {
        schedule: MultiStep {
            base: 0.0,
            milestones: vec![],
            factor: 10.0,
        },
        ..short(2)
    };
    let out = supervised_train(&init, &cfg, &train, None).unwrap();
    assert_eq!(out.state.params(), init.params());
}

#[test]
fn training_is_deterministic_and_improves() {
    let (init, train, _) = tiny();
    let cfg = SupervisedConfig {
        track_train_accuracy: true,
        augmentation: Augmentation::FlipPadcrop4,
        ..short(4)
    };
    let a = supervised_train(&init, &cfg, &train, None).unwrap();
    let b = supervised_train(&init, &cfg, &train, None).unwrap();
    assert_eq!(a.state.params(), b.state.params());
    assert_eq!(a.checkpoints.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(a.checkpoints[0].1.params(), init.params());
    let acc = &a.train_accuracy;
    assert!(acc.last().unwrap().1 > acc[0].1, "{acc:?}");
}

#[test]
fn masked_weights_stay_zero() {
    let (init, train, test) = tiny();
    let mask = global_magnitude_prune(init.params(), &PruneMask::new(init.params()), 0.5).unwrap();
    let out = supervised_train(&init, &short(2), &train, Some(&mask)).unwrap();
    for (v, keep) in out.state.params().values().iter().zip(&mask.keep) {
        if !keep {
            assert_eq!(*v, 0.0);
        }
    }
    let res = imp_run(&init, 2, 0.2, &short(1), &train, &test).unwrap();
    assert_eq!(res.points.len(), 3);
    assert_eq!(res.points[0].sparsity, 0.0);
    for w in res.masks.windows(2) {
        assert!(w[0].keep.iter().zip(&w[1].keep).all(|(a, b)| *a || !*b));
    }
    let dense = imp_run(&init, 0, 0.2, &short(1), &train, &test).unwrap();
    assert_eq!(dense.points.len(), 1);
}

#[test]
fn lmc_identical_orderings_have_zero_barrier() {
    let (init, train, test) = tiny();
    let res = lmc_experiment(&init, &[5, 5], 5, &short(1), &train, &test).unwrap();
    assert_eq!(res.pairs.len(), 1);
    assert_eq!(res.pairs[0].curve.barrier, 0.0);
    assert_eq!(res.endpoint_errors[0], res.endpoint_errors[1]);
    let res = lmc_experiment(&init, &[1, 2, 3], 5, &short(1), &train, &test).unwrap();
    assert_eq!(res.pairs.len(), 3);
    for p in &res.pairs {
        assert!((p.curve.values[0] - res.endpoint_errors[p.j]).abs() < 1e-12);
        assert!((p.curve.values[4] - res.endpoint_errors[p.i]).abs() < 1e-12);
    }
    assert!(calibrated_error(&init, init.params(), &train, &test).unwrap() <= 1.0);
}
