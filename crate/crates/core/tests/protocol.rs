//! End-to-end properties of the incremental protocol on small synthetic
//! streams.

use std::collections::BTreeMap;

use ndarray::{Array3, Axis};

use tcd_core::evaluation::evaluate_cnn;
use tcd_core::memory::eval_view;
use tcd_core::rng::rng_for;
use tcd_core::task_data::{ClassId, VideoSample};
use tcd_core::trainer::{
    finetune_classifier, fit, new_class_head_init, prepare_data, run_incremental_step, run_initial_stage, task_stream,
    ExperimentConfig, Method, Objective,
};
use tcd_core::model::TemporalModel;

fn small(method: Method) -> ExperimentConfig {
    ExperimentConfig {
        method,
        n_classes: 6,
        initial_classes: 4,
        group_size: 2,
        shared_prefix_pairs: vec![(0, 1), (2, 3)],
        ..ExperimentConfig::load(&std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synth.json"))
            .unwrap()
    }
}

/// Mean over time of the clip's frames.
fn time_average(s: &VideoSample) -> Array3<f64> {
    s.frames.mean_axis(Axis(0)).unwrap()
}

fn nearest_mean_accuracy(train: &[VideoSample], test: &[VideoSample]) -> f64 {
    let mut sums: BTreeMap<ClassId, (Array3<f64>, usize)> = BTreeMap::new();
    for s in train {
        let a = time_average(s);
        let e = sums.entry(s.label).or_insert_with(|| (Array3::zeros(a.raw_dim()), 0));
        e.0 += &a;
        e.1 += 1;
    }
    let means: Vec<(ClassId, Array3<f64>)> = sums.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let correct = test
        .iter()
        .filter(|s| {
            let a = time_average(s);
            let best = means
                .iter()
                .map(|(c, m)| (*c, (&a - m).mapv(|v| v * v).sum()))
                .min_by(|x, y| x.1.total_cmp(&y.1))
                .unwrap();
            best.0 == s.label
        })
        .count();
    100.0 * correct as f64 / test.len() as f64
}

#[test]
fn shared_prefix_pair_needs_temporal_order() {
    let config = small(Method::Finetune);
    let data = prepare_data(&config).unwrap();
    let pair = [0, 1];
    let train = data.train_for(&pair);
    let test = data.test_for(&pair);

    let static_acc = nearest_mean_accuracy(&train, &test);
    assert!(static_acc <= 60.0, "time-averaged classifier reached {static_acc}");

    let mut model = TemporalModel::new(config.backbone(), &config.head(), &mut rng_for(3, &[0])).unwrap();
    new_class_head_init(&mut model.head, &pair, 3, 0).unwrap();
    let refs: Vec<&VideoSample> = train.iter().collect();
    let objective = Objective::for_stage(Method::Finetune, config.weights(), 0, 2, 2, None).unwrap();
    fit(&mut model, None, &refs, &pair, &objective, config.epochs_initial, &config, &mut rng_for(3, &[1])).unwrap();
    let temporal = evaluate_cnn(&model, &test, &pair).unwrap().overall;
    assert!(temporal > 60.0, "temporal model reached only {temporal}");
    assert!(temporal > static_acc);
}

#[test]
fn finetune_forgets_relative_to_joint_training() {
    let seed = 1000;
    let config = small(Method::Finetune);
    let data = prepare_data(&config).unwrap();
    let stream = task_stream(&config, &data.classes, seed).unwrap();
    let s0 = run_initial_stage(&config, &data, &stream, seed).unwrap();
    let s1 = run_incremental_step(&s0, &config, &data, &stream, seed).unwrap();

    let joint_config = ExperimentConfig {
        initial_classes: config.n_classes,
        ..config.clone()
    };
    let joint_stream = task_stream(&joint_config, &data.classes, seed).unwrap();
    let joint = run_initial_stage(&joint_config, &data, &joint_stream, seed).unwrap();

    let old = &stream.groups[0];
    let mean_on_old = |per_class: &BTreeMap<ClassId, f64>| old.iter().map(|c| per_class[c]).sum::<f64>() / old.len() as f64;
    let incremental = mean_on_old(&s1.metrics.per_class);
    let oracle = mean_on_old(&joint.metrics.per_class);
    assert!(
        incremental < oracle,
        "old-class accuracy after one step {incremental} vs joint training {oracle}"
    );
}

#[test]
fn classifier_finetune_reduces_new_class_bias() {
    let seed = 1993;
    let config = ExperimentConfig {
        finetune_epochs: 0,
        ..small(Method::Finetune)
    };
    let data = prepare_data(&config).unwrap();
    let stream = task_stream(&config, &data.classes, seed).unwrap();
    let s0 = run_initial_stage(&config, &data, &stream, seed).unwrap();
    let s1 = run_incremental_step(&s0, &config, &data, &stream, seed).unwrap();

    let seen = stream.seen_classes(1);
    let new = &stream.groups[1];
    let probe: Vec<VideoSample> = data
        .test_for(&seen)
        .iter()
        .map(|s| eval_view(s, config.t).unwrap())
        .collect();
    let share = new.len() as f64 / seen.len() as f64;
    let bias = |model: &TemporalModel| {
        let acc = evaluate_cnn(model, &probe, &seen).unwrap();
        let rate = acc.predictions.iter().filter(|p| new.contains(p)).count() as f64 / probe.len() as f64;
        (rate - share).abs()
    };

    let before = bias(&s1.model);
    let mut tuned = s1.model.clone();
    // the fine-tune rate is the final decayed one, so the default ten epochs
    // move the head by less than one probe prediction
    let with_epochs = ExperimentConfig {
        finetune_epochs: 1000,
        ..config.clone()
    };
    finetune_classifier(&mut tuned, &s1.memory, &with_epochs, seed, 1).unwrap();
    let after = bias(&tuned);
    assert!(after < before, "new-class bias {before} before and {after} after fine-tuning");
    assert_eq!(tuned.backbone_checksum(), s1.model.backbone_checksum());
}
