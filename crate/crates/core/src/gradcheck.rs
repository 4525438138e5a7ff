//! Central finite-difference gradient checking in 64-bit precision.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{compute_loss, Model, ModelConfig, Variant};
use crate::params::{Forward, Mode, ParamKind, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Default central-difference step. Larger steps cross ReLU kinks too often
/// on the micro model.
pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor of [`relative_error`]; below this magnitude the error is
/// effectively absolute.
pub const REL_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Reporting group of a parameter: `backbone.stage{i}`, `head`, or the
/// navigation module with its level number dropped, e.g. `nav.sa`.
pub fn module_group(name: &str) -> String {
    let mut parts = name.split('.');
    match (parts.next(), parts.next()) {
        (Some("nav"), Some(module)) => format!("nav.{}", module.trim_end_matches(|c: char| c.is_ascii_digit())),
        (Some("backbone"), Some(stage)) => format!("backbone.{stage}"),
        (Some(first), _) => first.to_string(),
        (None, _) => String::new(),
    }
}

/// One scalar coordinate of a named parameter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coord {
    pub name: String,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub samples: Vec<GradSample>,
}

/// Error statistics of one parameter group.
#[derive(Clone, Debug)]
pub struct GroupSummary {
    pub group: String,
    pub count: usize,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.samples.iter().map(|s| s.rel_error).fold(0.0, f64::max)
    }

    pub fn mean_rel_error(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|s| s.rel_error).sum::<f64>() / self.samples.len() as f64
    }

    pub fn worst(&self) -> Option<&GradSample> {
        self.samples
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Per-group statistics, groups in first-seen order.
    pub fn by_group(&self, group_of: impl Fn(&str) -> String) -> Vec<GroupSummary> {
        let mut out: Vec<GroupSummary> = Vec::new();
        for s in &self.samples {
            let g = group_of(&s.name);
            let idx = match out.iter().position(|x| x.group == g) {
                Some(i) => i,
                None => {
                    out.push(GroupSummary {
                        group: g,
                        count: 0,
                        max_rel_error: 0.0,
                        mean_rel_error: 0.0,
                    });
                    out.len() - 1
                }
            };
            let e = &mut out[idx];
            e.count += 1;
            e.max_rel_error = e.max_rel_error.max(s.rel_error);
            e.mean_rel_error += s.rel_error;
        }
        for e in &mut out {
            e.mean_rel_error /= e.count as f64;
        }
        out
    }
}

/// Draw `n` coordinates, cycling through the groups named by `group_of` so
/// every group is covered; within a group the coordinate is uniform over all
/// of its trainable scalars.
pub fn sample_coords(
    store: &ParamStore<f64>,
    n: usize,
    seed: u64,
    group_of: impl Fn(&str) -> String,
) -> Vec<Coord> {
    let mut groups: Vec<(String, Vec<(&str, usize)>)> = Vec::new();
    for (name, t) in store.trainable() {
        let g = group_of(name);
        match groups.iter_mut().find(|(k, _)| *k == g) {
            Some((_, members)) => members.push((name, t.numel())),
            None => groups.push((g, vec![(name, t.numel())])),
        }
    }
    if groups.is_empty() {
        return Vec::new();
    }
    let mut rng = rng::stream(seed, Stream::Sampling);
    (0..n)
        .map(|i| {
            let members = &groups[i % groups.len()].1;
            let total: usize = members.iter().map(|m| m.1).sum();
            let mut k = rng.random_range(0..total);
            for &(name, numel) in members {
                if k < numel {
                    return Coord {
                        name: name.to_string(),
                        index: k,
                    };
                }
                k -= numel;
            }
            unreachable!("index within group total")
        })
        .collect()
}

fn eval_loss<F>(store: &ParamStore<f64>, mode: Mode, loss_fn: &F) -> Result<f64>
where
    F: for<'t> Fn(&Forward<'t, f64>) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let ctx = Forward::new(&tape, store, mode);
    let loss = loss_fn(&ctx)?;
    Ok(loss.value().data()[0])
}

/// Compare analytic gradients of `loss_fn` with central differences of step
/// `h` at each coordinate. The store is restored before returning.
pub fn gradcheck<F>(
    store: &mut ParamStore<f64>,
    coords: &[Coord],
    h: f64,
    mode: Mode,
    loss_fn: F,
) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&Forward<'t, f64>) -> Result<Var<'t, f64>>,
{
    let analytic = {
        let tape = Tape::new();
        let ctx = Forward::new(&tape, store, mode);
        let loss = loss_fn(&ctx)?;
        let grads = tape.backward(loss)?;
        ctx.param_grads(&grads)
    };
    let mut samples = Vec::with_capacity(coords.len());
    for c in coords {
        let numel = store
            .get(&c.name)
            .ok_or_else(|| Error::MissingParameter(c.name.clone()))?
            .numel();
        if c.index >= numel {
            return Err(Error::Config(format!("{}[{}] out of range", c.name, c.index)));
        }
        let a = analytic.get(&c.name).map_or(0.0, |g| g.data()[c.index]);
        let original = store.get(&c.name).expect("checked").data()[c.index];
        let mut at = |v: f64| -> Result<f64> {
            store.get_mut(&c.name).expect("checked").data_mut()[c.index] = v;
            eval_loss(store, mode, &loss_fn)
        };
        let plus = at(original + h);
        let minus = at(original - h);
        store.get_mut(&c.name).expect("checked").data_mut()[c.index] = original;
        let numeric = (plus? - minus?) / (2.0 * h);
        samples.push(GradSample {
            name: c.name.clone(),
            index: c.index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    Ok(GradcheckReport { samples })
}

/// Batch used by [`micro_model_check`]: four random images in [0, 1) and
/// labels `0, 1, 2, 0`.
pub fn micro_batch(seed: u64) -> (Tensor<f64>, Vec<usize>) {
    let mut r = rng::substream(seed, Stream::Sampling, 1);
    let images = Tensor::from_fn(vec![4, 3, 32, 32], |_| r.random_range(0.0..1.0));
    (images, vec![0, 1, 2, 0])
}

/// Fresh parameters with biases jittered in [-0.1, 0.1), so that no unit
/// starts exactly on a ReLU kink.
pub fn micro_params<T: Element>(model: &Model, seed: u64) -> ParamStore<T> {
    let mut store: ParamStore<T> = model.init_params(seed);
    let mut r = rng::substream(seed, Stream::Sampling, 2);
    for (name, p) in store.iter_mut() {
        if p.kind == ParamKind::Trainable && (name.ends_with(".bias") || name.ends_with(".beta")) {
            p.value.data_mut().iter_mut().for_each(|v| *v += T::of(r.random_range(-0.1..0.1)));
        }
    }
    store
}

/// Train-mode gradcheck of the summed head loss of the micro model of
/// `variant`, over `samples` coordinates spread across all parameter groups.
pub fn micro_model_check(variant: Variant, samples: usize, seed: u64, h: f64) -> Result<GradcheckReport> {
    let model = Model::new(ModelConfig::micro(variant))?;
    let mut store: ParamStore<f64> = micro_params(&model, seed);
    let (images, labels) = micro_batch(seed);
    let coords = sample_coords(&store, samples, seed, module_group);
    gradcheck(&mut store, &coords, h, Mode::Train, |ctx| {
        let out = model.forward(ctx, ctx.constant(images.clone()))?;
        compute_loss(&out.logits, &labels)
    })
}
