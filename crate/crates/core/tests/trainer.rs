use cnnav::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use cnnav::model::combine_predictions;
use cnnav::trainer::{
    evaluate, metrics_csv, run_ablation, sgd_step, train, train_from, MetricsRow, Schedule, TrainConfig, Velocity,
    METRICS_HEADER, REFERENCE_ACCURACY,
};
use cnnav::{Error, Forward, Model, ModelConfig, ParamGroup, ParamKind, ParamStore, Tape, Tensor, Variant};
use indexmap::IndexMap;

fn one_param(value: f32) -> ParamStore<f32> {
    let mut store = ParamStore::new();
    store.insert("w", Tensor::new(vec![1], vec![value]).unwrap(), ParamKind::Trainable);
    store
}

fn grad(value: f32) -> IndexMap<String, Tensor<f32>> {
    IndexMap::from([("w".to_string(), Tensor::new(vec![1], vec![value]).unwrap())])
}

fn w(store: &ParamStore<f32>) -> f32 {
    store.get("w").unwrap().data()[0]
}

#[test]
fn sgd_single_and_double_step_by_hand() {
    let mut p = one_param(1.0);
    let mut v = Velocity::default();
    sgd_step(&mut p, &grad(0.1), &mut v, |_| 0.1, 0.9, 0.0).unwrap();
    assert!((w(&p) - 0.99).abs() < 1e-7);
    sgd_step(&mut p, &grad(0.1), &mut v, |_| 0.1, 0.9, 0.0).unwrap();
    // v = 0.9 * 0.1 + 0.1 = 0.19
    assert!((w(&p) - (0.99 - 0.019)).abs() < 1e-7);
    assert!((v.get("w").unwrap().data()[0] - 0.19).abs() < 1e-7);
}

#[test]
fn velocity_decays_without_gradient() {
    let mut p = one_param(1.0);
    let mut v = Velocity::default();
    sgd_step(&mut p, &grad(0.1), &mut v, |_| 0.1, 0.9, 0.0).unwrap();
    sgd_step(&mut p, &IndexMap::new(), &mut v, |_| 0.1, 0.9, 0.0).unwrap();
    assert!((v.get("w").unwrap().data()[0] - 0.09).abs() < 1e-7);
    assert!((w(&p) - (0.99 - 0.009)).abs() < 1e-7);
}

#[test]
fn weight_decay_alone_shrinks_geometrically() {
    let mut p = one_param(2.0);
    let mut v = Velocity::default();
    for step in 1..=10 {
        sgd_step(&mut p, &grad(0.0), &mut v, |_| 1.0, 0.0, 0.1).unwrap();
        let expect = 2.0 * 0.9f64.powi(step);
        assert!((w(&p) as f64 - expect).abs() < 1e-6, "step {step}");
    }
}

#[test]
fn sgd_skips_buffers_and_rejects_bad_gradients() {
    let mut p = one_param(1.0);
    p.insert("stat", Tensor::new(vec![1], vec![5.0]).unwrap(), ParamKind::Buffer);
    let mut v = Velocity::default();
    let mut g = grad(1.0);
    g.insert("stat".into(), Tensor::new(vec![1], vec![1.0]).unwrap());
    sgd_step(&mut p, &g, &mut v, |_| 1.0, 0.0, 0.0).unwrap();
    assert_eq!(p.get("stat").unwrap().data(), &[5.0]);
    let bad = IndexMap::from([("w".to_string(), Tensor::zeros(vec![2]))]);
    assert!(matches!(sgd_step(&mut p, &bad, &mut v, |_| 1.0, 0.0, 0.0), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn learning_rates_route_by_group_and_schedule() {
    let cfg = TrainConfig { lr_backbone: 0.01, lr_other: 0.5, epochs: 10, ..TrainConfig::default() };
    assert_eq!(cfg.learning_rate(ParamGroup::Backbone, 3), 0.01);
    assert_eq!(cfg.learning_rate(ParamGroup::Other, 3), 0.5);
    let baseline = TrainConfig { variant: Variant::Baseline, ..cfg.clone() };
    assert_eq!(baseline.learning_rate(ParamGroup::Other, 3), 0.01);
    assert_eq!(ParamGroup::of("backbone.stage2.down.weight"), ParamGroup::Backbone);
    assert_eq!(ParamGroup::of("nav.ca3.fc1.bias"), ParamGroup::Other);
    assert_eq!(ParamGroup::of("head.fc.weight"), ParamGroup::Other);

    let cosine = TrainConfig { schedule: Schedule::Cosine, ..cfg };
    assert_eq!(cosine.learning_rate(ParamGroup::Other, 1), 0.5);
    assert!((cosine.learning_rate(ParamGroup::Other, 6) - 0.25).abs() < 1e-12);
    assert!(cosine.learning_rate(ParamGroup::Other, 10) > 0.0);
    assert_eq!("cosine".parse::<Schedule>().unwrap(), Schedule::Cosine);
    assert!("linear".parse::<Schedule>().is_err());
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..ok.clone() },
        TrainConfig { batch_size: 0, ..ok.clone() },
        TrainConfig { lr_other: -1.0, ..ok.clone() },
        TrainConfig { momentum: f64::NAN, ..ok.clone() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

fn micro_data(classes: usize, per: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticSpec::new(classes, per, 32, seed)).unwrap()
}

fn quick(variant: Variant, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr_backbone: 0.01,
        lr_other: 0.01,
        variant,
        record_time: false,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let model = Model::new(ModelConfig::micro(Variant::Full)).unwrap();
    let ds = micro_data(3, 4, 1);
    let init = model.init_params(3);
    let cfg = TrainConfig { lr_backbone: 0.0, lr_other: 0.0, ..quick(Variant::Full, 2) };
    let out = train_from(&model, &ds, &cfg, init.clone()).unwrap();
    for (name, t) in init.trainable() {
        assert_eq!(out.params.get(name).unwrap(), t, "{name}");
    }
}

#[test]
fn micro_task_is_memorized() {
    let model = Model::new(ModelConfig::new(Variant::Full, 64, 2)).unwrap();
    let ds = generate_synthetic(&SyntheticSpec::new(2, 8, 64, 7)).unwrap();
    let cfg = TrainConfig { batch_size: 4, schedule: Schedule::Cosine, ..quick(Variant::Full, 20) };
    let out = train(&model, &ds, &cfg).unwrap();
    let last = out.history.iter().rev().find(|r| r.split == Split::Train).unwrap();
    assert_eq!(last.accuracy, 1.0, "{:?}", last);
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let model = Model::new(ModelConfig::micro(Variant::HlLhSum)).unwrap();
    let ds = micro_data(3, 5, 4);
    let cfg = quick(Variant::HlLhSum, 3);
    let a = train(&model, &ds, &cfg).unwrap();
    let b = train(&model, &ds, &cfg).unwrap();
    assert_eq!(metrics_csv(&a.history), metrics_csv(&b.history));
    assert_eq!(a.params, b.params);
    let c = train(&model, &ds, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.params, c.params);
}

#[test]
fn history_has_train_and_test_rows() {
    let model = Model::new(ModelConfig::micro(Variant::Baseline)).unwrap();
    let ds = micro_data(3, 5, 4);
    let out = train(&model, &ds, &quick(Variant::Baseline, 3)).unwrap();
    let splits: Vec<_> = out.history.iter().map(|r| (r.epoch, r.split)).collect();
    assert_eq!(splits.len(), 6);
    assert_eq!(splits[0], (1, Split::Train));
    assert_eq!(splits[5], (3, Split::Test));
    let best = out.history.iter().filter(|r| r.split == Split::Test).map(|r| r.accuracy).fold(0.0, f64::max);
    assert_eq!(out.best_accuracy, best);

    let quiet = train(&model, &ds, &TrainConfig { eval_train: false, ..quick(Variant::Baseline, 2) }).unwrap();
    assert!(quiet.history.iter().all(|r| r.split == Split::Test));
}

#[test]
fn training_rejects_mismatches() {
    let model = Model::new(ModelConfig::micro(Variant::Full)).unwrap();
    let ds = micro_data(2, 4, 0);
    assert!(matches!(train(&model, &ds, &quick(Variant::HlSum, 1)), Err(Error::Config(_))));
    let big = generate_synthetic(&SyntheticSpec::new(2, 4, 64, 0)).unwrap();
    assert!(matches!(train(&model, &big, &quick(Variant::Full, 1)), Err(Error::Config(_))));
}

#[test]
fn divergence_aborts_with_a_name() {
    let model = Model::new(ModelConfig::micro(Variant::HlSum)).unwrap();
    let ds = micro_data(2, 8, 0);
    let cfg = TrainConfig { lr_backbone: 1e30, lr_other: 1e30, ..quick(Variant::HlSum, 3) };
    match train(&model, &ds, &cfg) {
        Err(Error::NonFinite(what)) => assert!(!what.is_empty()),
        other => panic!("expected a non-finite abort, got {:?}", other.map(|o| o.best_accuracy)),
    }
}

#[test]
fn metrics_rows_format() {
    let row = MetricsRow {
        epoch: 2,
        split: Split::Test,
        variant: Variant::Baseline,
        seed: 7,
        loss: 0.5,
        accuracy: 0.25,
        head_accuracy: vec![0.25],
        wall_ms: 0,
    };
    assert_eq!(row.csv_line(), "2,test,baseline,7,0.500000,0.250000,0.250000,,,0");
    assert_eq!(metrics_csv(&[row]).lines().next().unwrap(), METRICS_HEADER);
}

#[test]
fn zero_heads_predict_the_first_class() {
    let model = Model::new(ModelConfig::micro(Variant::Full)).unwrap();
    let mut params = model.init_params(0);
    for (name, p) in params.iter_mut() {
        if name.starts_with("nav.cls") {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let ds = micro_data(3, 10, 5);
    let e = evaluate(&model, &params, &ds, Split::Test, 4).unwrap();
    assert!(e.predictions.iter().all(|&p| p == 0));
    assert!((e.accuracy - 1.0 / 3.0).abs() < 1e-12);
    assert!((e.loss - 3.0 * 3f64.ln()).abs() < 1e-5);
}

#[test]
fn evaluation_is_batch_size_invariant_and_matches_per_image_oracle() {
    let model = Model::new(ModelConfig::micro(Variant::Full)).unwrap();
    let ds = micro_data(3, 10, 6);
    let trained = train(&model, &ds, &quick(Variant::Full, 2)).unwrap().params;
    let reference = evaluate(&model, &trained, &ds, Split::Train, 1).unwrap();
    for bs in [2, 5, 7, 100] {
        let e = evaluate(&model, &trained, &ds, Split::Train, bs).unwrap();
        assert_eq!(e.predictions, reference.predictions, "batch {bs}");
        assert_eq!(e.accuracy, reference.accuracy);
        assert!((e.loss - reference.loss).abs() < 1e-5);
    }
    for (k, &i) in ds.indices(Split::Train).iter().enumerate() {
        let (image, _) = ds.gather(&[i]);
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, &trained);
        let out = model.forward(&ctx, ctx.constant(image)).unwrap();
        let logits: Vec<_> = out.logits.iter().map(|l| (*l.value()).clone()).collect();
        assert_eq!(combine_predictions(&logits).unwrap()[0], reference.predictions[k]);
    }
}

#[test]
fn ablation_table_shape() {
    let ds = micro_data(3, 5, 8);
    let base = TrainConfig { eval_train: false, ..quick(Variant::Full, 1) };
    let done = std::sync::Mutex::new(0);
    let report = run_ablation(&ds, &base, &[1, 2, 3], 2, ModelConfig::micro, |_| *done.lock().unwrap() += 1).unwrap();
    assert_eq!(*done.lock().unwrap(), 12);
    assert_eq!(report.runs.len(), 12);
    let tsv = report.tsv();
    assert_eq!(tsv.lines().count(), 1 + 12 + 4);
    assert_eq!(tsv.lines().filter(|l| l.contains("\tmedian\t")).count(), 4);
    for v in Variant::ALL {
        assert!(report.median_of(v).is_some());
    }
    let (_, line) = report.ordering();
    assert!(line.contains("baseline") && line.contains("full"));
    assert!(run_ablation(&ds, &base, &[1, 2], 1, ModelConfig::micro, |_| ()).is_err());
}

#[test]
fn ablation_is_independent_of_thread_count() {
    let ds = micro_data(3, 4, 9);
    let base = TrainConfig { eval_train: false, ..quick(Variant::Full, 1) };
    let a = run_ablation(&ds, &base, &[4, 5, 6], 1, ModelConfig::micro, |_| ()).unwrap();
    let b = run_ablation(&ds, &base, &[4, 5, 6], 3, ModelConfig::micro, |_| ()).unwrap();
    assert_eq!(a, b);
}

fn table_value(doc: &str, row: &str) -> f64 {
    let line = doc
        .lines()
        .find(|l| l.trim_start_matches(['\t', ' ', '\\']).starts_with(&format!("{row} &")))
        .unwrap_or_else(|| panic!("no row {row:?}"));
    let cell = line.split('&').nth(2).expect("accuracy column");
    cell.trim().trim_end_matches("\\\\").trim().trim_matches('$').parse().expect("number")
}

#[test]
fn reference_accuracies_match_source_document() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../paper.md");
    let doc = std::fs::read_to_string(path).unwrap();
    let rows = [
        (Variant::Baseline, "Baseline"),
        (Variant::HlSum, "HL"),
        (Variant::HlLhSum, "HL+LH"),
        (Variant::Full, "w/ ConvLSTM"),
    ];
    for ((v, acc), (want, row)) in REFERENCE_ACCURACY.iter().zip(rows) {
        assert_eq!(*v, want);
        assert_eq!(*acc, table_value(&doc, row), "{row}");
    }
}
