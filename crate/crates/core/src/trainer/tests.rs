use super::*;

pub(crate) fn tiny_config() -> ExperimentConfig {
    ExperimentConfig {
        name: "tiny".into(),
        seeds: vec![1],
        n_classes: 4,
        initial_classes: 2,
        group_size: 1,
        motifs_per_class: 2,
        shared_prefix_pairs: vec![(0, 1)],
        frames_per_video: 8,
        height: 5,
        width: 5,
        train_per_class: 6,
        test_per_class: 3,
        t: 4,
        stem_channels: 4,
        layer_channels: vec![4, 6],
        layer_strides: vec![1, 2],
        shift_fraction: 0.25,
        embedding_dim: 6,
        budget_per_class: 2,
        epochs_initial: 2,
        epochs_incremental: 2,
        batch_size: 4,
        finetune_epochs: 2,
        ..ExperimentConfig::default()
    }
}

#[test]
fn config_round_trip_and_key_errors() {
    let c = ExperimentConfig::default();
    c.validate().unwrap();
    assert_eq!(ExperimentConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    match ExperimentConfig::from_json(r#"{"learning_rate": 0.1}"#) {
        Err(Error::Config(m)) => assert!(m.contains("learning_rate") && m.contains("lr"), "{m}"),
        other => panic!("{other:?}"),
    }
    match ExperimentConfig::from_json(r#"{"method": "ewc"}"#) {
        Err(Error::Config(m)) => assert!(m.contains("ewc"), "{m}"),
        other => panic!("{other:?}"),
    }
    assert!(ExperimentConfig::from_json(r#"{"group_size": 3}"#).is_err());
    let partial = ExperimentConfig::from_json(r#"{"budget_per_class": 2}"#).unwrap();
    assert_eq!(partial.budget_per_class, 2);
    assert_eq!(partial.lr, c.lr);
}

#[test]
fn method_names_and_selectors() {
    for m in Method::ALL {
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    match "icarl".parse::<Method>() {
        Err(Error::Config(msg)) => assert!(msg.contains("tcd_no_mask")),
        other => panic!("{other:?}"),
    }
    let mask = ImportanceMask::uniform(&[(2, 2)], 1, vec!["a".into()]).unwrap();
    let w = LossWeights::default();
    let f = Objective::for_stage(Method::Finetune, w, 1, 6, 2, Some(&mask)).unwrap();
    assert_eq!(f.distillation, Distillation::None);
    assert_eq!(f.weights.beta, 0.0);
    let t = Objective::for_stage(Method::Tcd, w, 1, 6, 2, Some(&mask)).unwrap();
    assert!(matches!(t.distillation, Distillation::Weighted(_)));
    assert!((t.weights.lambda_scale - 3f64.sqrt()).abs() < 1e-15);
    let nm = Objective::for_stage(Method::TcdNoMask, w, 1, 6, 2, Some(&mask)).unwrap();
    assert_eq!(nm.distillation, Distillation::Unweighted);
    assert_eq!(nm.weights.beta, 0.1);
    let no = Objective::for_stage(Method::TcdNoOrtho, w, 1, 6, 2, Some(&mask)).unwrap();
    assert_eq!(no.weights.beta, 0.0);
    let init = Objective::for_stage(Method::Tcd, w, 0, 4, 4, None).unwrap();
    assert_eq!(init.distillation, Distillation::None);
    assert_eq!(init.weights.beta, 0.1);
    assert!(Objective::for_stage(Method::Tcd, w, 1, 6, 2, None).is_err());
}

#[test]
fn training_view_picks_one_frame_per_bin() {
    let frames = Array4::from_shape_fn((8, 1, 1, 1), |(t, _, _, _)| t as f64);
    let mut rng = rng_for(3, &[0]);
    for _ in 0..20 {
        let v = training_view(frames.view(), 4, &mut rng).unwrap();
        for i in 0..4 {
            let f = v[[i, 0, 0, 0]] as usize;
            assert!(f / 2 == i);
        }
    }
    assert_eq!(training_view(frames.view(), 8, &mut rng).unwrap(), frames);
    assert!(training_view(frames.view(), 9, &mut rng).is_err());
}

fn metrics_bytes(dir: &Path, stages: usize) -> Vec<Vec<u8>> {
    (0..stages)
        .map(|k| fs::read(stage_dir(dir, k).join("metrics.json")).unwrap())
        .collect()
}

#[test]
fn runs_are_deterministic_and_resumable() {
    let c = tiny_config();
    let root = tempfile::tempdir().unwrap();
    let a = run_experiment(&c, 5, &root.path().join("a"), &RunOptions::default()).unwrap();
    assert_eq!(a.records.len(), 3);
    for (k, r) in a.records.iter().enumerate() {
        assert_eq!(r.step, k);
        assert_eq!(r.seen_class_count, 2 + k);
        assert!((0.0..=100.0).contains(&r.acc_cnn) && (0.0..=100.0).contains(&r.acc_nme));
    }
    let b = run_experiment(&c, 5, &root.path().join("b"), &RunOptions::default()).unwrap();
    assert_eq!(metrics_bytes(&a.dir, 3), metrics_bytes(&b.dir, 3));

    assert!(matches!(
        run_experiment(&c, 5, &a.dir, &RunOptions::default()),
        Err(Error::Config(_))
    ));

    fs::remove_dir_all(stage_dir(&b.dir, 2)).unwrap();
    fs::remove_file(stage_dir(&b.dir, 1).join("metrics.json")).unwrap();
    let resumed = run_experiment(&c, 5, &b.dir, &RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(resumed.resumed_after, Some(0));
    assert_eq!(resumed.records, a.records);
    assert_eq!(metrics_bytes(&a.dir, 3), metrics_bytes(&b.dir, 3));

    let noop = run_experiment(&c, 5, &b.dir, &RunOptions { resume: true, ..Default::default() }).unwrap();
    assert_eq!(noop.resumed_after, Some(2));
    assert_eq!(noop.records, a.records);

    let mut other = c.clone();
    other.lr *= 2.0;
    assert!(run_experiment(&other, 5, &b.dir, &RunOptions { resume: true, ..Default::default() }).is_err());

    let echoed = ExperimentConfig::load(&a.dir.join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed, c);
    let log = fs::read_to_string(a.dir.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().filter(|l| l.starts_with("stage ")).count(), 3);
}

#[test]
fn single_stage_stream() {
    let mut c = tiny_config();
    c.initial_classes = 4;
    let root = tempfile::tempdir().unwrap();
    let out = run_experiment(&c, 2, root.path(), &RunOptions::default()).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.records[0].seen_class_count, 4);
}

#[test]
fn zero_weights_reproduce_finetune() {
    let mut tcd = tiny_config();
    tcd.alpha_feat = 0.0;
    tcd.alpha_embed = 0.0;
    tcd.beta = 0.0;
    let mut ft = tcd.clone();
    ft.method = Method::Finetune;
    let root = tempfile::tempdir().unwrap();
    let a = run_experiment(&tcd, 9, &root.path().join("a"), &RunOptions::default()).unwrap();
    let b = run_experiment(&ft, 9, &root.path().join("b"), &RunOptions::default()).unwrap();
    assert_eq!(a.records, b.records);
}

#[test]
fn stage_pipeline_contracts() {
    let c = tiny_config();
    let data = prepare_data(&c).unwrap();
    let stream = task_stream(&c, &data.classes, 4).unwrap();
    let s0 = run_initial_stage(&c, &data, &stream, 4).unwrap();
    assert_eq!(s0.mask.step, 1);
    assert_eq!(s0.memory.len(), 2 * 2);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mask.json");
    s0.mask.save(&path).unwrap();
    let reloaded = StepState {
        mask: ImportanceMask::load(&path).unwrap(),
        ..s0.clone()
    };
    let before = s0.model.clone();
    let s1 = run_incremental_step(&reloaded, &c, &data, &stream, 4).unwrap();
    assert_eq!(s1.consumed_mask, Some(s0.mask.checksum()));
    assert_eq!(reloaded.model, before);
    assert_eq!(s1.memory.len(), 3 * 2);
    for class in s0.memory.classes() {
        assert_eq!(s1.memory.per_class[&class], s0.memory.per_class[&class]);
    }
    let direct = run_incremental_step(&s0, &c, &data, &stream, 4).unwrap();
    assert_eq!(direct.metrics, s1.metrics);

    let mut starved = data.clone();
    starved.train.retain(|s| s.label != stream.groups[1][0]);
    assert!(matches!(
        run_incremental_step(&s0, &c, &starved, &stream, 4),
        Err(Error::Empty(_))
    ));
}

#[test]
fn classifier_finetune_freezes_backbone() {
    let mut c = tiny_config();
    let data = prepare_data(&c).unwrap();
    let stream = task_stream(&c, &data.classes, 6).unwrap();
    let s0 = run_initial_stage(&c, &data, &stream, 6).unwrap();
    let probe = eval_view(&data.test[0], c.t).unwrap();

    c.finetune_epochs = 0;
    let mut m = s0.model.clone();
    finetune_classifier(&mut m, &s0.memory, &c, 6, 3).unwrap();
    assert_eq!(m, s0.model);

    c.finetune_epochs = 5;
    let mut m = s0.model.clone();
    finetune_classifier(&mut m, &s0.memory, &c, 6, 3).unwrap();
    assert_eq!(m.backbone_checksum(), s0.model.backbone_checksum());
    assert_eq!(m.embed(probe.frames.view()).unwrap(), s0.model.embed(probe.frames.view()).unwrap());
    assert_ne!(m.head, s0.model.head);

    let empty = ExemplarMemory::new(1, SamplingStrategy::Uniform).unwrap();
    let mut m2 = s0.model.clone();
    finetune_classifier(&mut m2, &empty, &c, 6, 3).unwrap();
    assert_eq!(m2, s0.model);
}

#[test]
#[should_panic(expected = "leaked")]
fn future_classes_never_enter_a_batch() {
    let c = tiny_config();
    let data = prepare_data(&c).unwrap();
    let mut model = TemporalModel::new(c.backbone(), &c.head(), &mut rng_for(1, &[0])).unwrap();
    new_class_head_init(&mut model.head, &data.classes, 1, 0).unwrap();
    let refs: Vec<&VideoSample> = data.train.iter().collect();
    let objective = Objective::for_stage(Method::Finetune, c.weights(), 0, 2, 2, None).unwrap();
    let _ = fit(&mut model, None, &refs, &[0, 1], &objective, 1, &c, &mut rng_for(1, &[1]));
}

#[test]
fn head_init_scoping() {
    let c = tiny_config();
    let mut a = LscHead::new(6, &c.head()).unwrap();
    new_class_head_init(&mut a, &[0, 1], 1, 0).unwrap();
    let old = a.proxies.clone();
    let mut b = a.clone();
    new_class_head_init(&mut a, &[], 1, 1).unwrap();
    assert_eq!(a.proxies, old);
    new_class_head_init(&mut a, &[2], 1, 1).unwrap();
    new_class_head_init(&mut b, &[2], 2, 1).unwrap();
    assert_eq!(&a.proxies[..2], &old[..]);
    assert_eq!(&b.proxies[..2], &old[..]);
    assert_ne!(a.proxies[2], b.proxies[2]);
    assert!(matches!(new_class_head_init(&mut a, &[1], 1, 2), Err(Error::DuplicateClass(1))));
}

fn batch_total(model: &TemporalModel, previous: &TemporalModel, batch: &[(Array4<f64>, ClassId)], objective: &Objective<'_>) -> f64 {
    let (c, _) = batch_gradient(model, Some(previous), batch, objective).unwrap();
    total_loss(c.cls, c.dist_feat, c.dist_embed, c.ortho, &objective.weights).unwrap()
}

#[test]
fn batch_gradient_matches_finite_differences() {
    use rand::Rng;
    let c = tiny_config();
    let data = prepare_data(&c).unwrap();
    let mut model = TemporalModel::new(c.backbone(), &c.head(), &mut rng_for(3, &[0])).unwrap();
    new_class_head_init(&mut model.head, &data.classes, 3, 0).unwrap();
    model.backbone.fit_pool_norm(data.train.iter().map(|s| s.frames.slice(ndarray::s![..4, .., .., ..]))).unwrap();
    let mut previous = model.clone();
    let mut rng = rng_for(3, &[1]);
    previous.backbone.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x += rng.random_range(-0.05..0.05)));
    let shapes: Vec<(usize, usize)> = model.backbone.config.layer_shapes().iter().map(|&(ch, _, _)| (c.t, ch)).collect();
    let raw = shapes
        .iter()
        .map(|&(t, ch)| ndarray::Array2::from_shape_fn((t, ch), |_| rng.random_range(0.1..2.0)))
        .collect();
    let mask = ImportanceMask::from_raw(raw, 1, 4, model.backbone.config.layer_names()).unwrap();
    let objective = Objective::for_stage(Method::Tcd, c.weights(), 1, 3, 1, Some(&mask)).unwrap();

    for size in [3, 1] {
        let batch: Vec<(Array4<f64>, ClassId)> = data.train[..size * 5]
            .iter()
            .step_by(5)
            .map(|s| (eval_view(s, c.t).unwrap().frames, s.label))
            .collect();
        let (_, grads) = batch_gradient(&model, Some(&previous), &batch, &objective).unwrap();
        let mut analytic = Vec::new();
        grads.backbone.visit(&mut |name, _, v| analytic.push((name.to_string(), v.to_vec())));
        let eps = 1e-6;
        for (name, idx) in [("stem.weight", 4), ("block1.conv.weight", 7), ("block2.proj.bias", 1), ("fc.weight", 5), ("fc.bias", 2)] {
            let perturbed = |delta: f64| {
                let mut m = model.clone();
                m.backbone.visit_mut(&mut |n, v| {
                    if n == name {
                        v[idx] += delta;
                    }
                });
                batch_total(&m, &previous, &batch, &objective)
            };
            let fd = (perturbed(eps) - perturbed(-eps)) / (2.0 * eps);
            let an = analytic.iter().find(|(n, _)| n == name).unwrap().1[idx];
            assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{name}[{idx}] batch {size}: fd {fd} analytic {an}");
        }
        let mut p = model.clone();
        p.head.eta += eps;
        let mut m = model.clone();
        m.head.eta -= eps;
        let fd = (batch_total(&p, &previous, &batch, &objective) - batch_total(&m, &previous, &batch, &objective)) / (2.0 * eps);
        assert!((fd - grads.head.eta).abs() <= 1e-5 * (1.0 + fd.abs()), "eta: fd {fd} analytic {}", grads.head.eta);
    }
}

#[test]
fn fitted_pool_statistics_standardize_training_features() {
    let c = tiny_config();
    let data = prepare_data(&c).unwrap();
    let mut model = TemporalModel::new(c.backbone(), &c.head(), &mut rng_for(4, &[0])).unwrap();
    let views: Vec<_> = data.train.iter().map(|s| eval_view(s, c.t).unwrap().frames).collect();
    model.backbone.fit_pool_norm(views.iter().map(|v| v.view())).unwrap();
    let pooled: Vec<Array1<f64>> = views
        .iter()
        .map(|v| {
            let (_, cache) = model.backbone.forward(v.view()).unwrap();
            cache.pooled().clone()
        })
        .collect();
    let n = pooled.len() as f64;
    for ch in 0..pooled[0].len() {
        let mean = pooled.iter().map(|p| p[ch]).sum::<f64>() / n;
        let var = pooled.iter().map(|p| (p[ch] - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9, "channel {ch} mean {mean}");
        assert!(var < 1.0 + 1e-9 && (var > 0.9 || var == 0.0), "channel {ch} var {var}");
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    model.save(&path).unwrap();
    assert_eq!(TemporalModel::load(&path).unwrap().backbone.pool_norm, model.backbone.pool_norm);
}

#[test]
fn unchanged_model_has_zero_distillation() {
    let c = tiny_config();
    let data = prepare_data(&c).unwrap();
    let mut model = TemporalModel::new(c.backbone(), &c.head(), &mut rng_for(1, &[2])).unwrap();
    model.head.register_classes(&data.classes, &mut rng_for(1, &[3])).unwrap();
    let shapes: Vec<(usize, usize)> = c.backbone().layer_shapes().iter().map(|&(ch, _, _)| (c.t, ch)).collect();
    let mask = ImportanceMask::uniform(&shapes, 1, c.backbone().layer_names()).unwrap();
    let objective = Objective::for_stage(Method::Tcd, c.weights(), 1, 4, 2, Some(&mask)).unwrap();
    for size in [1, 3] {
        let batch: Vec<_> = data.train[..size]
            .iter()
            .map(|s| (eval_view(s, c.t).unwrap().frames, s.label))
            .collect();
        let (comp, _) = batch_gradient(&model, Some(&model), &batch, &objective).unwrap();
        assert_eq!(comp.dist_feat, 0.0);
        assert_eq!(comp.dist_embed, 0.0);
    }
}
