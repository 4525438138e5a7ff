//! Five-stage residual feature extractor.
//!
//! Each stage halves the resolution with a stride-2 3x3 conv, then applies
//! `blocks_per_stage` basic residual blocks. Stages 3 to 5 feed the navigation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm2d, Conv2d, Linear};
use crate::params::{Forward, ParamStore};
use crate::tensor::{Element, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    /// Side of the square input image.
    pub input_size: usize,
    pub stage_channels: [usize; 5],
    pub blocks_per_stage: usize,
    pub num_classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            input_size: 64,
            stage_channels: [8, 16, 32, 64, 128],
            blocks_per_stage: 1,
            num_classes: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channels must be >= 1".into()));
        }
        if self.num_classes < 1 {
            return Err(Error::Config("need at least one class".into()));
        }
        Ok(())
    }

    /// Channels of S3, S4, S5.
    pub fn level_channels(&self) -> [usize; 3] {
        [self.stage_channels[2], self.stage_channels[3], self.stage_channels[4]]
    }

    /// Spatial side of S3, S4, S5.
    pub fn level_sizes(&self) -> [usize; 3] {
        [self.input_size / 8, self.input_size / 16, self.input_size / 32]
    }
}

/// Backbone stages 3, 4 and 5.
#[derive(Clone, Copy, Debug)]
pub struct StageFeatures<'t, T: Element> {
    pub s3: Var<'t, T>,
    pub s4: Var<'t, T>,
    pub s5: Var<'t, T>,
}

impl<'t, T: Element> StageFeatures<'t, T> {
    /// Levels ordered low to high.
    pub fn levels(&self) -> [Var<'t, T>; 3] {
        [self.s3, self.s4, self.s5]
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
}

#[derive(Clone, Debug)]
struct Stage {
    down: Conv2d,
    bn: BatchNorm2d,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(5);
        let mut cin = 3;
        for (i, &c) in cfg.stage_channels.iter().enumerate() {
            let p = format!("backbone.stage{}", i + 1);
            let blocks = (0..cfg.blocks_per_stage)
                .map(|j| ResBlock {
                    conv1: Conv2d::new(format!("{p}.block{}.conv1", j + 1), c, c, 3).no_bias(),
                    bn1: BatchNorm2d::new(format!("{p}.block{}.bn1", j + 1), c),
                    conv2: Conv2d::new(format!("{p}.block{}.conv2", j + 1), c, c, 3).no_bias(),
                    bn2: BatchNorm2d::new(format!("{p}.block{}.bn2", j + 1), c),
                })
                .collect();
            stages.push(Stage {
                down: Conv2d::new(format!("{p}.down"), cin, c, 3).stride(2).no_bias(),
                bn: BatchNorm2d::new(format!("{p}.bn"), c),
                blocks,
            });
            cin = c;
        }
        Ok(Backbone { cfg, stages })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for s in &self.stages {
            s.down.register(store, rng);
            s.bn.register(store);
            for b in &s.blocks {
                b.conv1.register(store, rng);
                b.bn1.register(store);
                b.conv2.register(store, rng);
                b.bn2.register(store);
            }
        }
    }

    /// Trainable scalar count, computed from layer shapes.
    pub fn num_params(&self) -> usize {
        self.stages
            .iter()
            .map(|s| {
                s.down.num_params()
                    + s.bn.num_params()
                    + s.blocks
                        .iter()
                        .map(|b| b.conv1.num_params() + b.bn1.num_params() + b.conv2.num_params() + b.bn2.num_params())
                        .sum::<usize>()
            })
            .sum()
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, images: Var<'t, T>) -> Result<StageFeatures<'t, T>> {
        let shape = images.shape();
        let n = self.cfg.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != n || shape[3] != n {
            return Err(Error::shape(
                "backbone_forward",
                format!("expected [N, 3, {n}, {n}], got {shape:?}"),
            ));
        }
        let mut x = images;
        let mut outs = Vec::with_capacity(5);
        for s in &self.stages {
            x = s.bn.forward(ctx, s.down.forward(ctx, x)?)?.relu();
            for b in &s.blocks {
                let y = b.bn1.forward(ctx, b.conv1.forward(ctx, x)?)?.relu();
                let y = b.bn2.forward(ctx, b.conv2.forward(ctx, y)?)?;
                x = y.add(x)?.relu();
            }
            outs.push(x);
        }
        Ok(StageFeatures {
            s3: outs[2],
            s4: outs[3],
            s5: outs[4],
        })
    }
}

/// No-navigation control: GAP over S5 and one fully connected layer.
#[derive(Clone, Debug)]
pub struct BaselineHead {
    fc: Linear,
}

impl BaselineHead {
    pub fn new(cfg: &BackboneConfig) -> Self {
        BaselineHead {
            fc: Linear::new("head.fc", cfg.stage_channels[4], cfg.num_classes),
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.fc.register(store, rng);
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, feats: &StageFeatures<'t, T>) -> Result<Var<'t, T>> {
        self.fc.forward(ctx, feats.s5.gap()?)
    }
}
