use ndarray::{arr1, Array2, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::memory::SamplingStrategy;
use crate::model::tests::toy_model;
use crate::task_data::SampleOrigin;

fn random_clip(rng: &mut ChaCha8Rng, label: ClassId, i: usize) -> VideoSample {
    VideoSample {
        id: format!("t{i}"),
        frames: Array4::from_shape_simple_fn((4, 1, 4, 4), || rng.random_range(-1.0..1.0)),
        label,
        origin: SampleOrigin::Synthetic { seed: 0, class: label, index: i },
    }
}

#[test]
fn cnn_accuracy_on_self_labeled_set_is_perfect() {
    let model = toy_model(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut test: Vec<VideoSample> = (0..12).map(|i| random_clip(&mut rng, 10, i)).collect();
    let seen = [10, 11, 12];
    let preds = evaluate_cnn(&model, &test, &seen).unwrap().predictions;
    for (s, p) in test.iter_mut().zip(preds) {
        s.label = p;
    }
    let acc = evaluate_cnn(&model, &test, &seen).unwrap();
    assert_eq!(acc.overall, 100.0);
    assert!(acc.per_class.values().all(|&v| v == 100.0));

    let single = evaluate_cnn(&model, &test[..1], &seen).unwrap().overall;
    assert_eq!(single, 100.0);
    let mut wrong = test[0].clone();
    wrong.label = if test[0].label == 10 { 11 } else { 10 };
    assert_eq!(evaluate_cnn(&model, &[wrong], &seen).unwrap().overall, 0.0);
    assert!(matches!(evaluate_cnn(&model, &[], &seen), Err(Error::Empty(_))));
}

#[test]
fn random_head_is_near_chance() {
    let n = 3;
    let per = 100;
    let p = 1.0 / n as f64;
    let sigma = 100.0 * (p * (1.0 - p) / (n * per) as f64).sqrt();
    for seed in 0..3 {
        let model = toy_model(10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let test: Vec<VideoSample> = (0..n * per).map(|i| random_clip(&mut rng, 10 + i % n, i)).collect();
        let acc = evaluate_cnn(&model, &test, &[10, 11, 12]).unwrap().overall;
        assert!((acc - 100.0 * p).abs() <= 3.0 * sigma, "accuracy {acc}");
    }
}

#[test]
fn restricted_argmax_only_predicts_seen_classes() {
    let model = toy_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let test: Vec<VideoSample> = (0..30).map(|i| random_clip(&mut rng, 11, i)).collect();
    let acc = evaluate_cnn(&model, &test, &[11, 12]).unwrap();
    assert!(acc.predictions.iter().all(|p| *p == 11 || *p == 12));
    assert!(matches!(evaluate_cnn(&model, &test, &[99]), Err(Error::UnknownClass(99))));
}

fn means(vs: &[(ClassId, Vec<f64>)]) -> BTreeMap<ClassId, Array1<f64>> {
    vs.iter().map(|(c, v)| (*c, Array1::from(v.clone()))).collect()
}

#[test]
fn nme_examples() {
    let one = means(&[(3, vec![0.0, 1.0])]);
    let acc = nme_accuracy_from_embeddings(&[arr1(&[5.0, -1.0]), arr1(&[1.0, 1.0])], &[3, 3], &one).unwrap();
    assert_eq!(acc.overall, 100.0);

    let two = means(&[(0, vec![1.0, 0.0]), (1, vec![0.0, 1.0])]);
    let acc = nme_accuracy_from_embeddings(&[arr1(&[1.0, 0.0]), arr1(&[0.0, 1.0])], &[0, 1], &two).unwrap();
    assert_eq!(acc.overall, 100.0);

    let tie = means(&[(7, vec![1.0, 0.0]), (4, vec![0.0, 1.0])]);
    assert_eq!(nme_predict(&arr1(&[1.0, 1.0]), &tie), Some(4));

    assert!(matches!(
        nme_accuracy_from_embeddings(&[arr1(&[1.0, 0.0])], &[5], &two),
        Err(Error::Empty(m)) if m.contains('5')
    ));
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    for i in 0..dim {
        let mut v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
        for j in 0..i {
            let r = q.row(j).to_owned();
            let proj = r.dot(&v);
            v.scaled_add(-proj, &r);
        }
        let n = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / n));
    }
    q
}

#[test]
fn nme_is_rotation_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..50 {
        let dim = rng.random_range(2..7);
        let n_classes = rng.random_range(2..6);
        let class_means: BTreeMap<ClassId, Array1<f64>> = (0..n_classes)
            .map(|c| {
                let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal));
                (c, unit_vector(v.view()))
            })
            .collect();
        let embeddings: Vec<Array1<f64>> = (0..40)
            .map(|_| Array1::from_shape_simple_fn(dim, || rng.sample(StandardNormal)))
            .collect();
        let labels: Vec<ClassId> = (0..40).map(|i| i % n_classes).collect();
        let q = random_rotation(dim, &mut rng);
        let rotated_means = class_means.iter().map(|(&c, m)| (c, q.dot(m))).collect();
        let rotated: Vec<Array1<f64>> = embeddings.iter().map(|e| q.dot(e)).collect();
        let a = nme_accuracy_from_embeddings(&embeddings, &labels, &class_means).unwrap();
        let b = nme_accuracy_from_embeddings(&rotated, &labels, &rotated_means).unwrap();
        assert_eq!(a.predictions, b.predictions);
    }
}

#[test]
fn evaluate_nme_end_to_end() {
    let model = toy_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let train: Vec<VideoSample> = (0..6).map(|i| random_clip(&mut rng, 10, i)).collect();
    let mut memory = ExemplarMemory::new(3, SamplingStrategy::Uniform).unwrap();
    memory.update_memory(&train, &model, 0).unwrap();
    let test: Vec<VideoSample> = (0..5).map(|i| random_clip(&mut rng, 10, 100 + i)).collect();
    assert_eq!(evaluate_nme(&model, &memory, &test).unwrap().overall, 100.0);
    let stray = vec![random_clip(&mut rng, 11, 0)];
    assert!(evaluate_nme(&model, &memory, &stray).is_err());
}

fn record(step: usize, cnn: f64, nme: f64) -> MetricsRecord {
    MetricsRecord {
        step,
        seen_class_count: 2 + 2 * step,
        seen_classes: (0..2 + 2 * step).collect(),
        acc_cnn: cnn,
        acc_nme: nme,
        per_class: BTreeMap::new(),
        per_class_nme: BTreeMap::new(),
        losses: LossComponents::default(),
    }
}

#[test]
fn average_incremental_accuracy_examples() {
    assert_eq!(average_incremental_accuracy(&[record(0, 80.0, 0.0)], Protocol::Cnn, true).unwrap(), 80.0);
    let rs = [record(0, 80.0, 1.0), record(1, 70.0, 2.0), record(2, 60.0, 3.0)];
    assert_eq!(average_incremental_accuracy(&rs, Protocol::Cnn, true).unwrap(), 70.0);
    assert_eq!(average_incremental_accuracy(&rs, Protocol::Cnn, false).unwrap(), 65.0);
    assert_eq!(average_incremental_accuracy(&rs, Protocol::Nme, true).unwrap(), 2.0);
    assert!(average_incremental_accuracy(&[], Protocol::Cnn, true).is_err());
    assert!(average_incremental_accuracy(&rs[..1], Protocol::Cnn, false).is_err());
}

proptest! {
    #[test]
    fn constant_sequence_average(v in 0.0f64..100.0, n in 1usize..10) {
        let rs: Vec<MetricsRecord> = (0..n).map(|k| record(k, v, v)).collect();
        let avg = average_incremental_accuracy(&rs, Protocol::Cnn, true).unwrap();
        prop_assert!((avg - v).abs() < 1e-12);
    }
}

#[test]
fn metrics_json_schema() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.json");
    let mut r = record(1, 55.5, 60.25);
    r.per_class.insert(3, 50.0);
    r.save(&path).unwrap();
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    for key in ["step", "seen_class_count", "acc_cnn", "acc_nme", "per_class", "losses"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    for key in ["cls", "dist_feat", "dist_embed", "ortho"] {
        assert!(v["losses"].get(key).is_some(), "{key}");
    }
    assert_eq!(v["per_class"]["3"], 50.0);
    assert_eq!(MetricsRecord::load(&path).unwrap(), r);
}

fn fake_run(root: &Path, label: &str, seed: u64, accs: &[(f64, f64)], n_stages: usize) -> PathBuf {
    let dir = root.join(format!("{label}-{seed}"));
    fs::create_dir_all(&dir).unwrap();
    RunInfo {
        label: label.into(),
        method: label.into(),
        seed,
        n_stages,
        include_initial_stage: true,
    }
    .save(&dir)
    .unwrap();
    for (k, &(c, n)) in accs.iter().enumerate() {
        let sd = stage_dir(&dir, k);
        fs::create_dir_all(&sd).unwrap();
        record(k, c, n).save(&sd.join("metrics.json")).unwrap();
    }
    dir
}

#[test]
fn report_aggregates_seeds() {
    let root = tempfile::tempdir().unwrap();
    let runs = vec![
        fake_run(root.path(), "tcd", 1, &[(90.0, 80.0), (70.0, 60.0)], 2),
        fake_run(root.path(), "tcd", 2, &[(80.0, 80.0), (50.0, 40.0)], 2),
        fake_run(root.path(), "tcd", 3, &[(70.0, 80.0), (60.0, 50.0)], 2),
        fake_run(root.path(), "finetune", 1, &[(90.0, 90.0), (10.0, 20.0)], 2),
    ];
    let out = root.path().join("report");
    let report = emit_report(&runs, &out).unwrap();
    let mean = report.mean("tcd", Protocol::Cnn).unwrap();
    let seeds: Vec<f64> = report
        .rows
        .iter()
        .filter(|r| r.label == "tcd" && r.protocol == Protocol::Cnn && r.seed.is_some())
        .map(|r| r.avg_inc_acc)
        .collect();
    assert_eq!(seeds, vec![80.0, 65.0, 65.0]);
    assert!((mean.avg_inc_acc - 70.0).abs() < 1e-12);
    assert!((mean.final_step_acc - 60.0).abs() < 1e-12);

    let csv = fs::read_to_string(&report.csv).unwrap();
    assert_eq!(csv.lines().next().unwrap(), SUMMARY_HEADER);
    assert!(csv.contains("tcd,cnn,mean,70.0000,60.0000"));
    assert!(csv.contains("finetune,nme,1,55.0000,20.0000"));
    assert_eq!(report.plots.len(), 2);
    assert!(fs::read_to_string(&report.plots[0]).unwrap().starts_with("<svg"));

    let again = emit_report(&runs, &out).unwrap();
    assert_eq!(fs::read(&again.csv).unwrap(), csv.as_bytes());
}

#[test]
fn report_single_stage_and_missing_stage() {
    let root = tempfile::tempdir().unwrap();
    let one = fake_run(root.path(), "solo", 5, &[(42.0, 41.0)], 1);
    let report = emit_report(&[one], &root.path().join("r1")).unwrap();
    assert_eq!(report.rows.len(), 4);
    assert_eq!(report.mean("solo", Protocol::Cnn).unwrap().avg_inc_acc, 42.0);

    let gap = fake_run(root.path(), "gappy", 1, &[(50.0, 50.0)], 3);
    match emit_report(&[gap], &root.path().join("r2")) {
        Err(Error::Empty(m)) => assert!(m.contains("[1, 2]"), "{m}"),
        other => panic!("{other:?}"),
    }
}
