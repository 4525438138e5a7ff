use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{ConvTranspose2d, Linear};
use crate::params::{Forward, ParamStore};
use crate::tensor::{Element, Var};

/// 3x3 size-preserving deconvolution to one channel, then sigmoid.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    deconv: ConvTranspose2d,
}

impl SpatialAttention {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        SpatialAttention {
            deconv: ConvTranspose2d::new(name, channels, 1, 3),
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.deconv.register(store, rng);
    }

    /// `[N, C, H, W] -> [N, 1, H, W]` mask in (0, 1).
    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.deconv.forward(ctx, x)?.sigmoid())
    }
}

/// GAP, a bottleneck FC whose pre-activation also receives the embedding
/// carried up from the level below, and an expanding FC with sigmoid.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    fc1: Linear,
    fc2: Linear,
}

impl ChannelAttention {
    pub fn new(name: &str, channels: usize, hidden: usize) -> Self {
        ChannelAttention {
            fc1: Linear::new(format!("{name}.fc1"), channels, hidden),
            fc2: Linear::new(format!("{name}.fc2"), hidden, channels),
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        self.fc1.register(store, rng);
        self.fc2.register(store, rng);
    }

    /// Returns the `[N, C, 1, 1]` mask and the `[N, hidden]` embedding to hand
    /// to the next-higher level. `carry = None` is the zero vector.
    pub fn forward<'t, T: Element>(
        &self,
        ctx: &Forward<'t, T>,
        x: Var<'t, T>,
        carry: Option<Var<'t, T>>,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let shape = x.shape();
        let mut pre = self.fc1.forward(ctx, x.gap()?)?;
        if let Some(c) = carry {
            pre = pre.add(c)?;
        }
        let embedding = pre.relu();
        let mask = self
            .fc2
            .forward(ctx, embedding)?
            .sigmoid()
            .reshape(vec![shape[0], shape[1], 1, 1])?;
        Ok((mask, embedding))
    }
}

/// Pixel-wise mask `spatial[n,0,h,w] * channel[n,c,0,0]`.
pub fn fuse_masks<'t, T: Element>(spatial: Var<'t, T>, channel: Var<'t, T>) -> Result<Var<'t, T>> {
    let (s, c) = (spatial.shape(), channel.shape());
    if s.len() != 4 || c.len() != 4 || s[0] != c[0] || s[1] != 1 || c[2] != 1 || c[3] != 1 {
        return Err(Error::shape("fuse_masks", format!("spatial {s:?}, channel {c:?}")));
    }
    spatial.broadcast_mul(channel)
}
