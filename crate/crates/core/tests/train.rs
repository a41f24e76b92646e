//! End-to-end behaviour of the toy detection trainer: memorization,
//! random-baseline sanity, finiteness, loss descent, and rerun determinism.

use crackle::losses::{LossConfig, LossKind};
use crackle::rng::seeded;
use crackle::synth::{generate, GenConfig};
use crackle::train::{
    ablation_run, box_regression_race, ema_series, eval_detector, robustness_run, train_toy,
    DetectorConfig, RaceConfig, RobustKind, SgdConfig, TinyDetector, ToyConfig,
};

fn dataset(count: usize, seed0: u64) -> Vec<crackle::synth::CrackSample> {
    let cfg = GenConfig::default();
    (0..count)
        .map(|i| generate(seed0 + i as u64, &cfg).unwrap())
        .collect()
}

#[test]
fn one_sample_memorization_reaches_perfect_map() {
    let data = dataset(1, 7);
    assert!(data[0].has_crack(), "sample must contain a crack");
    let cfg = ToyConfig {
        sgd: SgdConfig {
            epochs: 250,
            ..SgdConfig::default()
        },
        ..ToyConfig::default()
    };
    let run = train_toy(&data, &data, &cfg).unwrap();
    let last = run.last();
    assert!(
        last.map50 >= 0.999,
        "memorizing one sample should yield training mAP50 = 1.0, got {}",
        last.map50
    );
}

#[test]
fn untrained_detector_scores_at_chance_level() {
    let test = dataset(200, 40_000);
    let cfg = ToyConfig::default();
    let mut rng = seeded(99);
    let det = TinyDetector::init(cfg.detector.clone(), &mut rng).unwrap();
    let report = eval_detector(&det, &test, &cfg, 0).unwrap();
    assert!(
        report.map50 <= 0.05,
        "untrained mAP50 should be near zero, got {}",
        report.map50
    );
}

#[test]
fn training_is_finite_and_loss_descends_across_seeds() {
    let eval = dataset(8, 50_000);
    for seed in [1u64, 2, 3] {
        let train = dataset(32, 60_000 + seed * 1000);
        let cfg = ToyConfig {
            sgd: SgdConfig {
                epochs: 5,
                seed,
                ..SgdConfig::default()
            },
            ..ToyConfig::default()
        };
        let run = train_toy(&train, &eval, &cfg).unwrap();
        assert!(run.trace.loss.iter().all(|l| l.is_finite()));
        assert!(run.trace.mean_iou.iter().all(|v| v.is_finite()));

        // Window-20 EMA of the per-step loss: the end of training must sit
        // below the end of the first epoch.
        let steps_per_epoch = run.trace.loss.len() / cfg.sgd.epochs;
        let ema = ema_series(&run.trace.loss, 20);
        assert!(
            ema[ema.len() - 1] < ema[steps_per_epoch - 1],
            "seed {seed}: EMA did not descend ({} -> {})",
            ema[steps_per_epoch - 1],
            ema[ema.len() - 1]
        );
    }
}

#[test]
fn toy_training_rerun_is_bit_identical() {
    let train = dataset(12, 70_000);
    let eval = dataset(4, 71_000);
    let cfg = ToyConfig {
        sgd: SgdConfig {
            epochs: 2,
            ..SgdConfig::default()
        },
        ..ToyConfig::default()
    };
    let a = train_toy(&train, &eval, &cfg).unwrap();
    let b = train_toy(&train, &eval, &cfg).unwrap();
    assert_eq!(a.trace.loss, b.trace.loss);
    assert_eq!(a.last().map50.to_bits(), b.last().map50.to_bits());
}

#[test]
fn race_reruns_share_traces_and_orderings() {
    let cfg = RaceConfig {
        n_pairs: 8,
        max_steps: 500,
        ..RaceConfig::default()
    };
    let kinds = [
        LossConfig {
            kind: LossKind::FpIou,
            ..LossConfig::default()
        },
        LossConfig {
            kind: LossKind::Ciou,
            ..LossConfig::default()
        },
    ];
    let a = box_regression_race(&kinds, &cfg).unwrap();
    let b = box_regression_race(&kinds, &cfg).unwrap();
    assert_eq!(a.len(), 2);
    for (la, lb) in a.iter().zip(&b) {
        assert_eq!(la.per_pair_steps, lb.per_pair_steps);
        assert_eq!(la.trace.loss, lb.trace.loss);
    }
}

#[test]
fn ablation_emits_eight_rows_in_flag_order() {
    let train = dataset(6, 80_000);
    let eval = dataset(3, 81_000);
    let cfg = ToyConfig {
        sgd: SgdConfig {
            epochs: 1,
            ..SgdConfig::default()
        },
        ..ToyConfig::default()
    };
    let rows = ablation_run(&train, &eval, &cfg).unwrap();
    assert_eq!(rows.len(), 8);
    assert!(!rows[0].kwconv && !rows[0].ta && !rows[0].fpiou);
    assert!(rows[7].kwconv && rows[7].ta && rows[7].fpiou);
    for (i, row) in rows.iter().enumerate() {
        assert_eq!(row.kwconv, i & 0b100 != 0);
        assert_eq!(row.ta, i & 0b010 != 0);
        assert_eq!(row.fpiou, i & 0b001 != 0);
        assert!(row.report.map50.is_finite());
    }
}

#[test]
fn robustness_runs_label_their_rows() {
    let train = dataset(8, 82_000);
    let eval = dataset(3, 83_000);
    let cfg = ToyConfig {
        sgd: SgdConfig {
            epochs: 1,
            ..SgdConfig::default()
        },
        ..ToyConfig::default()
    };
    let sub = robustness_run(RobustKind::Subsample, &train, &eval, &cfg).unwrap();
    assert_eq!(
        sub.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
        ["30%", "50%", "70%", "90%", "100%"]
    );
    let aug = robustness_run(RobustKind::Augment, &train, &eval, &cfg).unwrap();
    assert_eq!(
        aug.iter().map(|r| r.label.as_str()).collect::<Vec<_>>(),
        ["no", "yes"]
    );

    let detcfg = DetectorConfig::default();
    assert_eq!(detcfg.grid(), 16);
}

#[test]
fn param_names_label_every_parameter_uniquely() {
    for (kwconv, ta) in [(false, false), (true, true)] {
        let cfg = DetectorConfig {
            kwconv,
            ta,
            ..DetectorConfig::default()
        };
        let det = TinyDetector::init(cfg, &mut seeded(5)).unwrap();
        let names = det.param_names();
        assert_eq!(names.len(), det.params().len());
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len(), "names must be unique");
    }
}
