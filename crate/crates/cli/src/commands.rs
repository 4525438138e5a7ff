use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use cnnav::checkpoint;
use cnnav::data::{generate_synthetic, load_ppm, save_pgm, Dataset, Split, SyntheticSpec, INDEX_FILE};
use cnnav::gradcheck::{micro_model_check, module_group, GradSample};
use cnnav::trainer::{self, MetricsRow, TrainConfig, METRICS_HEADER};
use cnnav::{Model, ModelConfig, Tensor, Variant};
use serde_json::{json, Value};

use crate::manifest::RunManifest;
use crate::maps::{level_maps, min_max_normalize, upsample_nearest};
use crate::{
    io_failure, threads_from_env, AblateArgs, EvalArgs, Failure, GenArgs, GradcheckArgs, HyperArgs, TrainArgs,
    VisualizeArgs, EXIT_CHECKPOINT, EXIT_GRADCHECK, EXIT_USAGE,
};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_FILE: &str = "ablation.tsv";
pub const GRADCHECK_FILE: &str = "gradcheck.tsv";

fn create_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| io_failure(path, e))
}

fn train_config(h: &HyperArgs, variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: h.epochs,
        batch_size: h.batch,
        lr_backbone: h.lr_backbone,
        lr_other: h.lr_other,
        momentum: h.momentum,
        weight_decay: h.wd,
        schedule: h.schedule,
        seed,
        variant,
        eval_train: true,
        record_time: !h.no_timing,
    }
}

fn hyper_json(h: &HyperArgs) -> Value {
    json!({
        "epochs": h.epochs,
        "batch": h.batch,
        "lr_backbone": h.lr_backbone,
        "lr_other": h.lr_other,
        "momentum": h.momentum,
        "wd": h.wd,
        "schedule": format!("{:?}", h.schedule).to_lowercase(),
        "no_timing": h.no_timing,
    })
}

fn load_model(records: Vec<(String, Tensor<f32>)>, input_size: usize) -> Result<(Model, cnnav::ParamStore<f32>), Failure> {
    let cfg = ModelConfig::infer(&records, input_size)?;
    let model = Model::new(cfg).map_err(|e| Failure::new(EXIT_CHECKPOINT, e.to_string()))?;
    let mut params = model.init_params(0);
    params.load_records(records)?;
    Ok((model, params))
}

pub fn gen(a: GenArgs) -> Result<(), Failure> {
    let mut spec = SyntheticSpec::new(a.classes, a.per_class, a.size, a.seed);
    if let Some(m) = a.motif {
        spec.motif_size = m;
    }
    spec.noise_std = a.noise;
    spec.validate()?;
    let mut manifest = RunManifest::start(
        "gen",
        json!({
            "classes": spec.num_classes,
            "per_class": spec.samples_per_class,
            "size": spec.image_size,
            "motif": spec.motif_size,
            "noise": spec.noise_std,
        }),
        Some(a.seed),
    );
    let ds = generate_synthetic(&spec)?;
    ds.write_dir(&a.out)?;
    manifest.artifact(INDEX_FILE);
    for (path, _) in cnnav::data::read_index(&a.out)? {
        manifest.artifact(path.display().to_string());
    }
    manifest.finish(&a.out)?;
    println!("wrote {} images of {} classes to {}", ds.len(), ds.num_classes(), a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = train_config(&a.hyper, a.variant, a.seed);
    cfg.validate()?;
    let ds = Dataset::load_dir(&a.data)?;
    let model = Model::new(ModelConfig::new(a.variant, ds.image_size(), ds.num_classes()))?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::start(
        "train",
        json!({
            "variant": a.variant.name(),
            "hyper": hyper_json(&a.hyper),
            "data": a.data.display().to_string(),
        }),
        Some(a.seed),
    );
    let outcome = trainer::train(&model, &ds, &cfg)?;
    checkpoint::save(a.out.join(FINAL_CHECKPOINT), &outcome.params)?;
    checkpoint::save(a.out.join(BEST_CHECKPOINT), &outcome.best)?;
    trainer::write_metrics_csv(&a.out.join(METRICS_FILE), &outcome.history)?;
    for name in [FINAL_CHECKPOINT, BEST_CHECKPOINT, METRICS_FILE] {
        manifest.artifact(name);
    }
    manifest.finish(&a.out)?;
    println!(
        "{}: final test accuracy {:.6}, best {:.6} at epoch {}",
        a.variant,
        outcome.final_test_accuracy().unwrap_or(f64::NAN),
        outcome.best_accuracy,
        outcome.best_epoch
    );
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    if a.batch < 1 {
        return Err(Failure::new(EXIT_USAGE, "--batch must be >= 1"));
    }
    let split = if a.split == "train" { Split::Train } else { Split::Test };
    let records = checkpoint::load(&a.checkpoint)?;
    let ds = Dataset::load_dir(&a.data)?;
    let (model, params) = load_model(records, ds.image_size())?;
    if let Some(v) = a.variant {
        if v != model.variant() {
            return Err(Failure::new(
                EXIT_CHECKPOINT,
                format!("checkpoint holds variant {}, expected {v}", model.variant()),
            ));
        }
    }
    if ds.num_classes() > model.config().backbone.num_classes {
        return Err(Failure::new(
            EXIT_CHECKPOINT,
            format!(
                "dataset has {} classes, checkpoint predicts {}",
                ds.num_classes(),
                model.config().backbone.num_classes
            ),
        ));
    }
    create_out(&a.out)?;
    let mut manifest = RunManifest::start(
        "eval",
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "variant": model.variant().name(),
            "batch": a.batch,
            "split": a.split,
            "data": a.data.display().to_string(),
        }),
        None,
    );
    let e = trainer::evaluate(&model, &params, &ds, split, a.batch)?;
    let row = MetricsRow {
        epoch: 0,
        split,
        variant: model.variant(),
        seed: 0,
        loss: e.loss,
        accuracy: e.accuracy,
        head_accuracy: e.head_accuracy,
        wall_ms: 0,
    };
    write_text(&a.out.join(EVAL_FILE), &format!("{METRICS_HEADER}\n{}\n", row.csv_line()))?;
    manifest.artifact(EVAL_FILE);
    manifest.finish(&a.out)?;
    println!("{} {} accuracy {:.6} loss {:.6}", model.variant(), split.name(), e.accuracy, e.loss);
    Ok(())
}

pub fn ablate(a: AblateArgs) -> Result<(), Failure> {
    let base = train_config(&a.hyper, Variant::Full, 0);
    base.validate()?;
    if a.seeds.len() < 3 {
        return Err(Failure::new(EXIT_USAGE, format!("--seeds needs at least 3 values, got {}", a.seeds.len())));
    }
    let threads = threads_from_env()?;
    let ds = Dataset::load_dir(&a.data)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::start(
        "ablate",
        json!({
            "hyper": hyper_json(&a.hyper),
            "seeds": a.seeds,
            "threads": threads,
            "data": a.data.display().to_string(),
        }),
        None,
    );
    let (size, classes) = (ds.image_size(), ds.num_classes());
    let report = trainer::run_ablation(
        &ds,
        &base,
        &a.seeds,
        threads,
        |v| ModelConfig::new(v, size, classes),
        |r| eprintln!("{} seed {}: test accuracy {:.6}", r.variant, r.seed, r.final_accuracy),
    )?;
    let tsv = report.tsv();
    write_text(&a.out.join(ABLATION_FILE), &tsv)?;
    manifest.artifact(ABLATION_FILE);
    manifest.finish(&a.out)?;
    print!("{tsv}");
    let (ordered, line) = report.ordering();
    println!("ordering {}: {line}", if ordered { "reproduced" } else { "not reproduced" });
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    if a.samples < 1 {
        return Err(Failure::new(EXIT_USAGE, "--samples must be >= 1"));
    }
    if !(a.threshold >= 0.0) || !(a.step > 0.0 && a.step.is_finite()) {
        return Err(Failure::new(EXIT_USAGE, "--threshold must be >= 0 and --step > 0"));
    }
    let variants = a.variant.map_or_else(|| Variant::ALL.to_vec(), |v| vec![v]);
    create_out(&a.out)?;
    let mut manifest = RunManifest::start(
        "gradcheck",
        json!({
            "variants": variants.iter().map(|v| v.name()).collect::<Vec<_>>(),
            "samples": a.samples,
            "threshold": a.threshold,
            "step": a.step,
        }),
        Some(a.seed),
    );
    let mut tsv = String::from("variant\tparameter\tindex\tanalytic\tnumeric\trel_error\n");
    let mut worst: Option<(Variant, GradSample)> = None;
    for &v in &variants {
        let report = micro_model_check(v, a.samples, a.seed, a.step)?;
        println!(
            "{v}: {} coordinates, max rel error {:.3e}, mean {:.3e}",
            report.samples.len(),
            report.max_rel_error(),
            report.mean_rel_error()
        );
        for g in report.by_group(module_group) {
            println!(
                "  {:<18} {:>4} coords  max {:.3e}  mean {:.3e}",
                g.group, g.count, g.max_rel_error, g.mean_rel_error
            );
        }
        for s in &report.samples {
            let _ = writeln!(
                tsv,
                "{v}\t{}\t{}\t{:e}\t{:e}\t{:e}",
                s.name, s.index, s.analytic, s.numeric, s.rel_error
            );
        }
        if let Some(w) = report.worst() {
            if worst.as_ref().map_or(true, |(_, b)| w.rel_error > b.rel_error) {
                worst = Some((v, w.clone()));
            }
        }
    }
    write_text(&a.out.join(GRADCHECK_FILE), &tsv)?;
    manifest.artifact(GRADCHECK_FILE);
    manifest.finish(&a.out)?;
    let Some((v, w)) = worst else {
        return Err(Failure::new(EXIT_GRADCHECK, "no coordinates were checked"));
    };
    println!(
        "worst: {}[{}] ({v}) analytic {:.6e} numeric {:.6e} rel error {:.3e}",
        w.name, w.index, w.analytic, w.numeric, w.rel_error
    );
    if w.rel_error < a.threshold {
        println!("PASS: max rel error {:.3e} < {:e}", w.rel_error, a.threshold);
        Ok(())
    } else {
        Err(Failure::new(
            EXIT_GRADCHECK,
            format!(
                "max rel error {:.3e} >= threshold {:e} at {}[{}]",
                w.rel_error, a.threshold, w.name, w.index
            ),
        ))
    }
}

/// File names written by `visualize` for an image stem.
pub fn map_names(stem: &str) -> Vec<String> {
    cnnav::navigation::LEVELS
        .iter()
        .flat_map(|l| [format!("{stem}.s{l}.mask.pgm"), format!("{stem}.s{l}.energy.pgm")])
        .collect()
}

pub fn visualize(a: VisualizeArgs) -> Result<(), Failure> {
    let mut images: Vec<(String, Tensor<f32>)> = Vec::with_capacity(a.images.len());
    let mut stems = HashSet::new();
    for path in &a.images {
        let stem = stem_of(path)?;
        if !stems.insert(stem.clone()) {
            return Err(Failure::new(EXIT_USAGE, format!("two inputs share the file stem {stem:?}")));
        }
        images.push((stem, load_ppm(path)?));
    }
    let shape = images[0].1.shape().to_vec();
    if shape[1] != shape[2] || images.iter().any(|(_, t)| t.shape() != shape.as_slice()) {
        return Err(Failure::new(EXIT_USAGE, "input images must be square and share one size"));
    }
    let side = shape[1];
    let (model, params) = load_model(checkpoint::load(&a.checkpoint)?, side)?;
    if !model.variant().has_attention() {
        return Err(Failure::new(
            EXIT_CHECKPOINT,
            format!("variant {} has no attention maps to visualize", model.variant()),
        ));
    }
    create_out(&a.out)?;
    let mut manifest = RunManifest::start(
        "visualize",
        json!({
            "checkpoint": a.checkpoint.display().to_string(),
            "variant": model.variant().name(),
            "images": a.images.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
        }),
        None,
    );
    for (stem, image) in &images {
        let maps = level_maps(&model, &params, image)?
            .ok_or_else(|| Failure::new(EXIT_CHECKPOINT, "model produced no attention masks"))?;
        for m in maps {
            let mask = upsample_nearest(&m.mask, m.side, side);
            let energy = upsample_nearest(&min_max_normalize(&m.energy), m.side, side);
            for (kind, values) in [("mask", mask), ("energy", energy)] {
                let name = format!("{stem}.s{}.{kind}.pgm", m.level);
                save_pgm(&Tensor::new(vec![side, side], values)?, a.out.join(&name))?;
                manifest.artifact(name);
            }
        }
    }
    manifest.finish(&a.out)?;
    println!("wrote {} maps to {}", 6 * images.len(), a.out.display());
    Ok(())
}

fn stem_of(path: &Path) -> Result<String, Failure> {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .ok_or_else(|| Failure::new(EXIT_USAGE, format!("{} has no file name", path.display())))
}
