//! Full classifier: backbone plus either the baseline head or navigation.

use std::fmt;
use std::str::FromStr;

use crate::backbone::{Backbone, BackboneConfig, BaselineHead};
use crate::error::{Error, Result};
use crate::navigation::{HighToLow, NavConfig, NavOutputs, Navigation};
use crate::params::{Forward, ParamStore};
use crate::rng::{self, Stream};
use crate::tensor::{kernels, Element, Tensor, Var};

/// Ablation variants.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Backbone, GAP on S5, one FC.
    Baseline,
    /// High-to-low fusion by summation, no attention.
    HlSum,
    /// High-to-low fusion by summation plus low-to-high attention.
    HlLhSum,
    /// ConvLSTM high-to-low plus low-to-high attention.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::HlSum, Variant::HlLhSum, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::HlSum => "hl_sum",
            Variant::HlLhSum => "hl_lh_sum",
            Variant::Full => "full",
        }
    }

    pub fn has_navigation(self) -> bool {
        self != Variant::Baseline
    }

    pub fn has_attention(self) -> bool {
        matches!(self, Variant::HlLhSum | Variant::Full)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub nav: NavConfig,
    pub variant: Variant,
}

impl ModelConfig {
    /// Default architecture for square images of side `input_size`.
    pub fn new(variant: Variant, input_size: usize, num_classes: usize) -> Self {
        let backbone = BackboneConfig {
            input_size,
            num_classes,
            ..BackboneConfig::default()
        };
        let nav = NavConfig::for_backbone(&backbone);
        ModelConfig { backbone, nav, variant }
    }

    /// Tiny architecture used for gradient checking: 32x32 input, four
    /// navigation channels, three classes.
    pub fn micro(variant: Variant) -> Self {
        let backbone = BackboneConfig {
            input_size: 32,
            stage_channels: [4, 4, 6, 6, 8],
            blocks_per_stage: 1,
            num_classes: 3,
        };
        let mut nav = NavConfig::with_channels(&backbone, 4);
        nav.cls_hidden = 6;
        ModelConfig { backbone, nav, variant }
    }

    /// Recover the architecture from checkpoint records. The input size is
    /// not stored and must be supplied.
    pub fn infer(records: &[(String, Tensor<f32>)], input_size: usize) -> Result<Self> {
        let shape = |name: &str| -> Result<&[usize]> {
            records
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.shape())
                .ok_or_else(|| Error::CheckpointMismatch(format!("missing {name}")))
        };
        let has = |prefix: &str| records.iter().any(|(n, _)| n.starts_with(prefix));
        let variant = match (has("nav."), has("nav.convlstm."), has("nav.sa")) {
            (false, _, _) => Variant::Baseline,
            (true, true, true) => Variant::Full,
            (true, false, true) => Variant::HlLhSum,
            (true, false, false) => Variant::HlSum,
            (true, true, false) => {
                return Err(Error::CheckpointMismatch("ConvLSTM without attention is not a known variant".into()))
            }
        };
        let mut stage_channels = [0; 5];
        for (i, c) in stage_channels.iter_mut().enumerate() {
            *c = shape(&format!("backbone.stage{}.down.weight", i + 1))?[0];
        }
        let blocks_per_stage = (1..)
            .take_while(|j| has(&format!("backbone.stage1.block{j}.")))
            .count();
        let num_classes = if variant == Variant::Baseline {
            shape("head.fc.weight")?[0]
        } else {
            shape("nav.cls3.fc2.weight")?[0]
        };
        let backbone = BackboneConfig {
            input_size,
            stage_channels,
            blocks_per_stage,
            num_classes,
        };
        let mut nav = NavConfig::for_backbone(&backbone);
        if variant.has_navigation() {
            nav.nav_channels = shape("nav.align3.weight")?[0];
            nav.cls_hidden = shape("nav.cls3.fc1.weight")?[0];
        }
        if variant.has_attention() {
            nav.ca_hidden = shape("nav.ca3.fc1.weight")?[0];
        } else {
            nav.ca_hidden = (nav.nav_channels / 4).max(1);
        }
        if variant == Variant::Full {
            nav.convlstm_kernel = shape("nav.convlstm.xi.weight")?[2];
        }
        Ok(ModelConfig { backbone, nav, variant })
    }
}

pub struct ModelOutputs<'t, T: Element> {
    /// One logits tensor per classifier head.
    pub logits: Vec<Var<'t, T>>,
    pub nav: Option<NavOutputs<'t, T>>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    backbone: Backbone,
    head: Option<BaselineHead>,
    nav: Option<Navigation>,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(cfg.backbone.clone())?;
        if cfg.nav.num_classes != cfg.backbone.num_classes {
            return Err(Error::Config("backbone and navigation disagree on class count".into()));
        }
        let (head, nav) = match cfg.variant {
            Variant::Baseline => (Some(BaselineHead::new(&cfg.backbone)), None),
            Variant::HlSum => (None, Some(Navigation::new(cfg.nav.clone(), &cfg.backbone, HighToLow::Sum, false)?)),
            Variant::HlLhSum => (None, Some(Navigation::new(cfg.nav.clone(), &cfg.backbone, HighToLow::Sum, true)?)),
            Variant::Full => (
                None,
                Some(Navigation::new(cfg.nav.clone(), &cfg.backbone, HighToLow::ConvLstm, true)?),
            ),
        };
        Ok(Model {
            cfg,
            backbone,
            head,
            nav,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.cfg.variant
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn navigation(&self) -> Option<&Navigation> {
        self.nav.as_ref()
    }

    pub fn num_heads(&self) -> usize {
        if self.nav.is_some() {
            3
        } else {
            1
        }
    }

    /// Fresh parameters: Kaiming-uniform weights, zero biases, identity batchnorm.
    pub fn init_params<T: Element>(&self, seed: u64) -> ParamStore<T> {
        let mut rng = rng::stream(seed, Stream::Init);
        let mut store = ParamStore::new();
        self.backbone.register(&mut store, &mut rng);
        if let Some(h) = &self.head {
            h.register(&mut store, &mut rng);
        }
        if let Some(n) = &self.nav {
            n.register(&mut store, &mut rng);
        }
        store
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, images: Var<'t, T>) -> Result<ModelOutputs<'t, T>> {
        let feats = self.backbone.forward(ctx, images)?;
        match (&self.head, &self.nav) {
            (Some(head), _) => Ok(ModelOutputs {
                logits: vec![head.forward(ctx, &feats)?],
                nav: None,
            }),
            (None, Some(nav)) => {
                let out = nav.forward(ctx, &feats)?;
                Ok(ModelOutputs {
                    logits: out.logits.to_vec(),
                    nav: Some(out),
                })
            }
            (None, None) => unreachable!("model has a head or navigation"),
        }
    }
}

/// Unweighted sum of the per-head cross-entropies.
pub fn compute_loss<'t, T: Element>(logits: &[Var<'t, T>], labels: &[usize]) -> Result<Var<'t, T>> {
    let mut total: Option<Var<'t, T>> = None;
    for l in logits {
        let ce = l.cross_entropy(labels)?;
        total = Some(match total {
            Some(t) => t.add(ce)?,
            None => ce,
        });
    }
    total.ok_or_else(|| Error::Config("no classifier heads".into()))
}

/// Argmax of the mean softmax over heads; ties go to the lowest class index.
pub fn combine_predictions<T: Element>(logits: &[Tensor<T>]) -> Result<Vec<usize>> {
    let first = logits.first().ok_or_else(|| Error::Config("no classifier heads".into()))?;
    let [n, k] = first.dims2("combine_predictions")?;
    let mut mean = vec![0.0f64; n * k];
    for l in logits {
        if l.shape() != first.shape() {
            return Err(Error::shape("combine_predictions", "heads disagree in shape"));
        }
        for (m, p) in mean.iter_mut().zip(kernels::softmax_rows(l.data(), n, k)) {
            *m += p.as_f64();
        }
    }
    let heads = logits.len() as f64;
    for m in &mut mean {
        *m /= heads;
    }
    Ok(mean
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}
