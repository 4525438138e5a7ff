//! Two-pathway cross-layer navigation.
//!
//! High to low: the three stage maps are resized to one shared grid and
//! channel count, then fed through a ConvLSTM in the order S5, S4, S3. The
//! hidden map after each step is that level's fused map; it is resized back to
//! the level's own grid and mapped back to its channel count.
//!
//! Low to high: each level gets a spatial mask and a channel mask. The channel
//! branch hands its bottleneck embedding to the next-higher level. The product
//! of both masks scales the high-to-low map, and one classifier per level reads
//! the result.

mod attention;
mod convlstm;

use rand::Rng;

use crate::backbone::{BackboneConfig, StageFeatures};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear};
use crate::params::{Forward, ParamStore};
use crate::tensor::{Element, Var};

pub use attention::{fuse_masks, ChannelAttention, SpatialAttention};
pub use convlstm::{ConvLstmCell, ConvLstmState, GATES};

/// Level tags, low to high.
pub const LEVELS: [usize; 3] = [3, 4, 5];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NavConfig {
    pub nav_channels: usize,
    pub nav_height: usize,
    pub nav_width: usize,
    pub convlstm_kernel: usize,
    /// Bottleneck width of the channel-attention FC pair.
    pub ca_hidden: usize,
    /// Hidden width of each classifier.
    pub cls_hidden: usize,
    pub num_classes: usize,
}

impl NavConfig {
    /// Defaults for a backbone: 32 shared channels on the S3 grid.
    pub fn for_backbone(bb: &BackboneConfig) -> Self {
        Self::with_channels(bb, 32)
    }

    pub fn with_channels(bb: &BackboneConfig, nav_channels: usize) -> Self {
        let side = bb.input_size / 8;
        NavConfig {
            nav_channels,
            nav_height: side,
            nav_width: side,
            convlstm_kernel: 3,
            ca_hidden: (nav_channels / 4).max(1),
            cls_hidden: 64,
            num_classes: bb.num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nav_channels < 1 || self.ca_hidden < 1 || self.cls_hidden < 1 {
            return Err(Error::Config("navigation widths must be >= 1".into()));
        }
        if self.convlstm_kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "ConvLSTM kernel must be odd, got {}",
                self.convlstm_kernel
            )));
        }
        if self.nav_height < 1 || self.nav_width < 1 || self.num_classes < 1 {
            return Err(Error::Config("navigation grid and class count must be >= 1".into()));
        }
        Ok(())
    }
}

/// How the high-to-low pathway fuses levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HighToLow {
    /// ConvLSTM sweep from S5 to S3.
    ConvLstm,
    /// Top-down running sum of the aligned maps, as in a feature pyramid.
    Sum,
}

/// Per-level masks, low to high.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMasks<'t, T: Element> {
    pub spatial: [Var<'t, T>; 3],
    pub channel: [Var<'t, T>; 3],
    pub ca_carry: [Var<'t, T>; 3],
}

#[derive(Clone, Copy, Debug)]
pub struct NavOutputs<'t, T: Element> {
    /// High-to-low features at each level's native shape.
    pub hl_features: [Var<'t, T>; 3],
    /// `hl_features` scaled by the fused masks; equal to `hl_features` when
    /// the low-to-high pathway is disabled.
    pub attended: [Var<'t, T>; 3],
    pub masks: Option<AttentionMasks<'t, T>>,
    /// Classifier outputs for S3, S4, S5.
    pub logits: [Var<'t, T>; 3],
}

/// GAP, FC, ReLU, FC.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    fc1: Linear,
    fc2: Linear,
}

impl ClassifierHead {
    pub fn new(name: &str, channels: usize, hidden: usize, classes: usize) -> Self {
        ClassifierHead {
            fc1: Linear::new(format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, classes),
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.fc1.register(store, rng);
        self.fc2.register(store, rng);
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let hidden = self.fc1.forward(ctx, x.gap()?)?.relu();
        self.fc2.forward(ctx, hidden)
    }
}

#[derive(Clone, Debug)]
pub struct Navigation {
    cfg: NavConfig,
    level_channels: [usize; 3],
    level_sizes: [usize; 3],
    high_to_low: HighToLow,
    align: [Conv2d; 3],
    restore: [Conv2d; 3],
    cell: Option<ConvLstmCell>,
    attention: Option<[(SpatialAttention, ChannelAttention); 3]>,
    heads: [ClassifierHead; 3],
}

impl Navigation {
    pub fn new(cfg: NavConfig, backbone: &BackboneConfig, high_to_low: HighToLow, low_to_high: bool) -> Result<Self> {
        cfg.validate()?;
        let level_channels = backbone.level_channels();
        let c_nav = cfg.nav_channels;
        let align = std::array::from_fn(|i| Conv2d::new(format!("nav.align{}", LEVELS[i]), level_channels[i], c_nav, 1));
        let restore =
            std::array::from_fn(|i| Conv2d::new(format!("nav.restore{}", LEVELS[i]), c_nav, level_channels[i], 1));
        let cell = (high_to_low == HighToLow::ConvLstm)
            .then(|| ConvLstmCell::new("nav.convlstm", c_nav, cfg.convlstm_kernel));
        let attention = low_to_high.then(|| {
            std::array::from_fn(|i| {
                let l = LEVELS[i];
                (
                    SpatialAttention::new(format!("nav.sa{l}"), level_channels[i]),
                    ChannelAttention::new(&format!("nav.ca{l}"), level_channels[i], cfg.ca_hidden),
                )
            })
        });
        let heads = std::array::from_fn(|i| {
            ClassifierHead::new(
                &format!("nav.cls{}", LEVELS[i]),
                level_channels[i],
                cfg.cls_hidden,
                cfg.num_classes,
            )
        });
        Ok(Navigation {
            cfg,
            level_channels,
            level_sizes: backbone.level_sizes(),
            high_to_low,
            align,
            restore,
            cell,
            attention,
            heads,
        })
    }

    pub fn config(&self) -> &NavConfig {
        &self.cfg
    }

    pub fn high_to_low(&self) -> HighToLow {
        self.high_to_low
    }

    pub fn has_attention(&self) -> bool {
        self.attention.is_some()
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for conv in &self.align {
            conv.register(store, rng);
        }
        if let Some(cell) = &self.cell {
            cell.register(store, rng);
        }
        for conv in &self.restore {
            conv.register(store, rng);
        }
        if let Some(att) = &self.attention {
            for (sa, ca) in att {
                sa.register(store, rng);
                ca.register(store, rng);
            }
        }
        for head in &self.heads {
            head.register(store, rng);
        }
    }

    /// Nearest-resize each stage map to the shared grid, then 1x1 conv + ReLU
    /// to the shared channel count. Output ordered S3, S4, S5.
    pub fn align_features<'t, T: Element>(
        &self,
        ctx: &Forward<'t, T>,
        feats: &StageFeatures<'t, T>,
    ) -> Result<[Var<'t, T>; 3]> {
        let levels = feats.levels();
        let mut out = Vec::with_capacity(3);
        for (conv, x) in self.align.iter().zip(levels) {
            let up = x.upsample_nearest(self.cfg.nav_height, self.cfg.nav_width)?;
            out.push(conv.forward(ctx, up)?.relu());
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Fused maps on the shared grid, ordered S3, S4, S5. The sweep itself
    /// visits S5 first.
    pub fn fuse_high_to_low<'t, T: Element>(&self, ctx: &Forward<'t, T>, aligned: &[Var<'t, T>; 3]) -> Result<[Var<'t, T>; 3]> {
        let mut fused: [Option<Var<'t, T>>; 3] = [None; 3];
        match (&self.cell, self.high_to_low) {
            (Some(cell), HighToLow::ConvLstm) => {
                let mut state: Option<ConvLstmState<'t, T>> = None;
                for level in (0..3).rev() {
                    let next = cell.step(ctx, aligned[level], state.as_ref())?;
                    fused[level] = Some(next.h);
                    state = Some(next);
                }
            }
            _ => {
                let mut acc: Option<Var<'t, T>> = None;
                for level in (0..3).rev() {
                    let next = match acc {
                        Some(a) => aligned[level].add(a)?,
                        None => aligned[level],
                    };
                    fused[level] = Some(next);
                    acc = Some(next);
                }
            }
        }
        Ok(fused.map(|v| v.expect("every level fused")))
    }

    /// High-to-low pathway, returning maps with each stage's own shape.
    pub fn hl_pathway_forward<'t, T: Element>(
        &self,
        ctx: &Forward<'t, T>,
        aligned: &[Var<'t, T>; 3],
    ) -> Result<[Var<'t, T>; 3]> {
        let fused = self.fuse_high_to_low(ctx, aligned)?;
        let mut out = Vec::with_capacity(3);
        for ((conv, f), &side) in self.restore.iter().zip(fused).zip(&self.level_sizes) {
            let resized = f.upsample_nearest(side, side)?;
            out.push(conv.forward(ctx, resized)?.relu());
        }
        Ok([out[0], out[1], out[2]])
    }

    /// Low-to-high pathway. Visits S3, S4, S5, threading the channel
    /// embedding upward.
    pub fn lh_pathway_forward<'t, T: Element>(
        &self,
        ctx: &Forward<'t, T>,
        hl_features: &[Var<'t, T>; 3],
    ) -> Result<([Var<'t, T>; 3], AttentionMasks<'t, T>)> {
        let att = self
            .attention
            .as_ref()
            .ok_or_else(|| Error::Config("low-to-high pathway disabled for this variant".into()))?;
        let mut attended = Vec::with_capacity(3);
        let (mut spatial, mut channel, mut carries) = (Vec::new(), Vec::new(), Vec::new());
        let mut carry = None;
        for ((sa, ca), &x) in att.iter().zip(hl_features) {
            let s = sa.forward(ctx, x)?;
            let (c, e) = ca.forward(ctx, x, carry)?;
            let mask = fuse_masks(s, c)?;
            attended.push(x.mul(mask)?);
            spatial.push(s);
            channel.push(c);
            carries.push(e);
            carry = Some(e);
        }
        let arr = |v: Vec<Var<'t, T>>| [v[0], v[1], v[2]];
        Ok((
            arr(attended),
            AttentionMasks {
                spatial: arr(spatial),
                channel: arr(channel),
                ca_carry: arr(carries),
            },
        ))
    }

    pub fn classifier_head_forward<'t, T: Element>(
        &self,
        ctx: &Forward<'t, T>,
        level: usize,
        attended: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        self.heads[level].forward(ctx, attended)
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, feats: &StageFeatures<'t, T>) -> Result<NavOutputs<'t, T>> {
        for (x, (&c, &side)) in feats.levels().iter().zip(self.level_channels.iter().zip(&self.level_sizes)) {
            let s = x.shape();
            if s.len() != 4 || s[1] != c || s[2] != side || s[3] != side {
                return Err(Error::shape("navigation", format!("stage map {s:?}, expected C={c}, side {side}")));
            }
        }
        let aligned = self.align_features(ctx, feats)?;
        let hl_features = self.hl_pathway_forward(ctx, &aligned)?;
        let (attended, masks) = if self.attention.is_some() {
            let (a, m) = self.lh_pathway_forward(ctx, &hl_features)?;
            (a, Some(m))
        } else {
            (hl_features, None)
        };
        let mut logits = Vec::with_capacity(3);
        for (level, &x) in attended.iter().enumerate() {
            logits.push(self.classifier_head_forward(ctx, level, x)?);
        }
        Ok(NavOutputs {
            hl_features,
            attended,
            masks,
            logits: [logits[0], logits[1], logits[2]],
        })
    }
}
