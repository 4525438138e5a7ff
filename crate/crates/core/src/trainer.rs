//! SGD training, evaluation, metrics and the four-variant ablation.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use indexmap::IndexMap;

use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{combine_predictions, compute_loss, Model, ModelConfig, Variant};
use crate::params::{Forward, Mode, ParamGroup, ParamStore};
use crate::rng;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            _ => Err(Error::Config(format!("unknown schedule {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_backbone: f64,
    pub lr_other: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub variant: Variant,
    /// Also evaluate the training split after every epoch.
    pub eval_train: bool,
    /// Record wall-clock time; when off `wall_ms` is 0 and metrics are
    /// reproducible byte for byte.
    pub record_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 16,
            lr_backbone: 0.001,
            lr_other: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            schedule: Schedule::Constant,
            seed: 0,
            variant: Variant::Full,
            eval_train: true,
            record_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("lr_backbone", self.lr_backbone),
            ("lr_other", self.lr_other),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in rates {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate of `group` during `epoch` (1-based). The baseline uses
    /// the backbone rate for every parameter.
    pub fn learning_rate(&self, group: ParamGroup, epoch: usize) -> f64 {
        let base = match (self.variant, group) {
            (Variant::Baseline, _) | (_, ParamGroup::Backbone) => self.lr_backbone,
            (_, ParamGroup::Other) => self.lr_other,
        };
        match self.schedule {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = (epoch - 1) as f64 / self.epochs as f64;
                base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Momentum buffers, one per trainable parameter.
#[derive(Clone, Debug, Default)]
pub struct Velocity(IndexMap<String, Tensor<f32>>);

impl Velocity {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.0.get(name)
    }
}

/// One SGD step: `v = momentum*v + g + wd*p; p -= lr*v`. Parameters without
/// a gradient are treated as having a zero gradient.
pub fn sgd_step(
    params: &mut ParamStore<f32>,
    grads: &IndexMap<String, Tensor<f32>>,
    velocity: &mut Velocity,
    lr: impl Fn(&str) -> f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (m, wd) = (momentum as f32, weight_decay as f32);
    for (name, p) in params.iter_mut() {
        if p.kind != crate::params::ParamKind::Trainable {
            continue;
        }
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.value.shape() {
                return Err(Error::shape(
                    "sgd_step",
                    format!("{name}: gradient {:?} vs parameter {:?}", g.shape(), p.value.shape()),
                ));
            }
        }
        let v = velocity
            .0
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(p.value.shape().to_vec()));
        if v.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", format!("{name}: velocity shape differs")));
        }
        let rate = lr(name) as f32;
        let pd = p.value.data_mut();
        let vd = v.data_mut();
        for i in 0..pd.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            vd[i] = m * vd[i] + gi + wd * pd[i];
            pd[i] -= rate * vd[i];
        }
    }
    Ok(())
}

/// One line of the metrics CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub variant: Variant,
    pub seed: u64,
    pub loss: f64,
    pub accuracy: f64,
    /// Accuracy of each classifier head, lowest level first.
    pub head_accuracy: Vec<f64>,
    pub wall_ms: u64,
}

pub const METRICS_HEADER: &str = "epoch,split,variant,seed,loss,accuracy,acc_head1,acc_head2,acc_head3,wall_ms";

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let head = |i: usize| self.head_accuracy.get(i).map_or(String::new(), |a| format!("{a:.6}"));
        format!(
            "{},{},{},{},{:.6},{:.6},{},{},{},{}",
            self.epoch,
            self.split.name(),
            self.variant,
            self.seed,
            self.loss,
            self.accuracy,
            head(0),
            head(1),
            head(2),
            self.wall_ms
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        out.push_str(&r.csv_line());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// Mean per-image loss (sum over heads).
    pub loss: f64,
    pub accuracy: f64,
    pub head_accuracy: Vec<f64>,
    pub predictions: Vec<usize>,
}

/// Eval-mode metrics of `params` on one split.
pub fn evaluate(
    model: &Model,
    params: &ParamStore<f32>,
    ds: &Dataset,
    split: Split,
    batch_size: usize,
) -> Result<Evaluation> {
    evaluate_indices(model, params, ds, ds.indices(split), batch_size)
}

pub fn evaluate_indices(
    model: &Model,
    params: &ParamStore<f32>,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<Evaluation> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let heads = model.num_heads();
    let mut loss = 0.0f64;
    let mut correct = 0usize;
    let mut head_correct = vec![0usize; heads];
    let mut predictions = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size) {
        let (images, labels) = ds.gather(chunk);
        let tape = Tape::new();
        let ctx = Forward::inference(&tape, params);
        let out = model.forward(&ctx, ctx.constant(images))?;
        let batch_loss = compute_loss(&out.logits, &labels)?.value().data()[0];
        loss += batch_loss as f64 * chunk.len() as f64;
        let values: Vec<Tensor<f32>> = out.logits.iter().map(|l| (*l.value()).clone()).collect();
        let combined = combine_predictions(&values)?;
        for (p, l) in combined.iter().zip(&labels) {
            correct += usize::from(p == l);
        }
        for (h, v) in values.iter().enumerate() {
            let single = combine_predictions(std::slice::from_ref(v))?;
            head_correct[h] += single.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        predictions.extend(combined);
    }
    let n = indices.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: correct as f64 / n,
        head_accuracy: head_correct.iter().map(|&c| c as f64 / n).collect(),
        predictions,
    })
}

pub struct TrainOutcome {
    /// Parameters after the last epoch.
    pub params: ParamStore<f32>,
    /// Parameters at the epoch with the highest test accuracy (earliest on ties).
    pub best: ParamStore<f32>,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub history: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn final_test_accuracy(&self) -> Option<f64> {
        self.history.iter().rev().find(|r| r.split == Split::Test).map(|r| r.accuracy)
    }
}

/// First non-finite tensor among `named`, by name.
fn first_non_finite<'a>(named: impl IntoIterator<Item = (String, &'a Tensor<f32>)>) -> Option<String> {
    named.into_iter().find(|(_, t)| !t.is_finite()).map(|(n, _)| n)
}

/// Train from a fresh initialisation seeded by `cfg.seed`.
pub fn train(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(model, ds, cfg, model.init_params(cfg.seed))
}

/// Train starting from `params`.
pub fn train_from(model: &Model, ds: &Dataset, cfg: &TrainConfig, mut params: ParamStore<f32>) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.variant != model.variant() {
        return Err(Error::Config(format!(
            "config variant {} differs from model variant {}",
            cfg.variant,
            model.variant()
        )));
    }
    if ds.image_size() != model.config().backbone.input_size || ds.num_classes() > model.config().backbone.num_classes {
        return Err(Error::Config("dataset does not match the model's input size or class count".into()));
    }
    let mut velocity = Velocity::default();
    let mut history = Vec::new();
    let mut best = (params.clone(), 0usize, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let shuffle = rng::mix(cfg.seed, epoch as u64);
        let mut batches = ds.batches(Split::Train, cfg.batch_size, Some(shuffle))?;
        // a lone trailing image would give batchnorm a single value per channel
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().expect("checked non-empty");
            batches.last_mut().expect("checked len > 1").extend(last);
        }
        for batch in batches {
            let (images, labels) = ds.gather(&batch);
            let tape = Tape::new();
            let ctx = Forward::new(&tape, &params, Mode::Train);
            let out = model.forward(&ctx, ctx.constant(images))?;
            let loss = compute_loss(&out.logits, &labels)?;
            if !loss.value().is_finite() {
                let logits: Vec<_> = out.logits.iter().map(|l| l.value()).collect();
                let name = first_non_finite(
                    logits.iter().enumerate().map(|(h, t)| (format!("logits of head {}", h + 1), &**t)),
                )
                .unwrap_or_else(|| "loss".into());
                return Err(Error::NonFinite(format!("{name} (epoch {epoch})")));
            }
            let grads = ctx.param_grads(&tape.backward(loss)?);
            if let Some(name) = first_non_finite(grads.iter().map(|(n, g)| (format!("gradient of {n}"), g))) {
                return Err(Error::NonFinite(format!("{name} (epoch {epoch})")));
            }
            let observed = ctx.take_observed();
            drop(ctx);
            params.apply_running_stats(&observed)?;
            sgd_step(
                &mut params,
                &grads,
                &mut velocity,
                |n| cfg.learning_rate(ParamGroup::of(n), epoch),
                cfg.momentum,
                cfg.weight_decay,
            )?;
            if let Some(name) = first_non_finite(params.iter().map(|(n, p)| (n.to_string(), &p.value))) {
                return Err(Error::NonFinite(format!("{name} (epoch {epoch})")));
            }
        }
        let mut splits = vec![Split::Test];
        if cfg.eval_train {
            splits.insert(0, Split::Train);
        }
        for split in splits {
            let e = evaluate(model, &params, ds, split, cfg.batch_size)?;
            if split == Split::Test && e.accuracy > best.2 {
                best = (params.clone(), epoch, e.accuracy);
            }
            history.push(MetricsRow {
                epoch,
                split,
                variant: cfg.variant,
                seed: cfg.seed,
                loss: e.loss,
                accuracy: e.accuracy,
                head_accuracy: e.head_accuracy,
                wall_ms: if cfg.record_time { start.elapsed().as_millis() as u64 } else { 0 },
            });
        }
    }
    Ok(TrainOutcome {
        params,
        best: best.0,
        best_epoch: best.1,
        best_accuracy: best.2,
        history,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    /// One run per (variant, seed), variants in canonical order.
    pub runs: Vec<AblationRun>,
    /// Median final test accuracy per variant.
    pub medians: Vec<(Variant, f64)>,
}

/// Reference accuracies (%) of the four variants on a real benchmark, used
/// only to report whether the ordering is reproduced.
pub const REFERENCE_ACCURACY: [(Variant, f64); 4] = [
    (Variant::Baseline, 84.1),
    (Variant::HlSum, 86.6),
    (Variant::HlLhSum, 87.2),
    (Variant::Full, 88.9),
];

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

impl AblationReport {
    pub fn median_of(&self, v: Variant) -> Option<f64> {
        self.medians.iter().find(|(x, _)| *x == v).map(|&(_, m)| m)
    }

    pub fn tsv(&self) -> String {
        let mut out = String::from("variant\tseed\ttest_accuracy\tbest_test_accuracy\n");
        for r in &self.runs {
            let _ = writeln!(out, "{}\t{}\t{:.6}\t{:.6}", r.variant, r.seed, r.final_accuracy, r.best_accuracy);
        }
        for &(v, m) in &self.medians {
            let mut best: Vec<f64> = self.runs.iter().filter(|r| r.variant == v).map(|r| r.best_accuracy).collect();
            let _ = writeln!(out, "{v}\tmedian\t{m:.6}\t{:.6}", median(&mut best));
        }
        out
    }

    /// Whether the medians follow the reference order baseline < hl_sum <
    /// hl_lh_sum < full, with a one-line description.
    pub fn ordering(&self) -> (bool, String) {
        let mut line = String::new();
        let mut strictly = true;
        let mut prev: Option<f64> = None;
        for (i, (v, reference)) in REFERENCE_ACCURACY.iter().enumerate() {
            let m = self.median_of(*v).unwrap_or(f64::NAN);
            if i > 0 {
                line.push_str(" < ");
            }
            let _ = write!(line, "{v} {:.1} (ref {reference})", 100.0 * m);
            if prev.is_some_and(|p| !(p < m)) {
                strictly = false;
            }
            prev = Some(m);
        }
        (strictly, line)
    }
}

/// Train all four variants for every seed, running up to `threads` runs at
/// once. `model_config` builds the architecture for a variant.
pub fn run_ablation(
    ds: &Dataset,
    base: &TrainConfig,
    seeds: &[u64],
    threads: usize,
    model_config: impl Fn(Variant) -> ModelConfig + Sync,
    on_done: impl Fn(&AblationRun) + Sync,
) -> Result<AblationReport> {
    if seeds.len() < 3 {
        return Err(Error::Config(format!("ablation needs at least 3 seeds, got {}", seeds.len())));
    }
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<AblationRun>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(&(variant, seed)) = jobs.get(i) else { break };
        let run = (|| {
            let model = Model::new(model_config(variant))?;
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            let out = train(&model, ds, &cfg)?;
            Ok(AblationRun {
                variant,
                seed,
                final_accuracy: out.final_test_accuracy().unwrap_or(0.0),
                best_accuracy: out.best_accuracy,
            })
        })();
        if let Ok(r) = &run {
            on_done(r);
        }
        results.lock().expect("no worker panicked")[i] = Some(run);
    };
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len()) {
            s.spawn(worker);
        }
    });
    let runs: Vec<AblationRun> = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<_>>()?;
    let medians = Variant::ALL
        .iter()
        .map(|&v| {
            let mut acc: Vec<f64> = runs.iter().filter(|r| r.variant == v).map(|r| r.final_accuracy).collect();
            (v, median(&mut acc))
        })
        .collect();
    Ok(AblationReport { runs, medians })
}
