//! Parameterised layers, described by name prefix and shape.
//!
//! A layer owns no tensors: `register` creates its entries in a
//! [`ParamStore`], `forward` reads them back through a [`Forward`] context.

use rand::Rng;

use crate::error::Result;
use crate::params::{Forward, ParamKind, ParamStore};
use crate::tensor::{Element, Tensor, Var};

/// Kaiming-uniform draw: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Element>(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Conv2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: (kernel - 1) / 2,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let k = self.kernel;
        store.insert(
            format!("{}.weight", self.name),
            kaiming_uniform(vec![self.out_channels, self.in_channels, k, k], self.in_channels * k * k, rng),
            ParamKind::Trainable,
        );
        if self.bias {
            store.insert(
                format!("{}.bias", self.name),
                Tensor::zeros(vec![self.out_channels]),
                ParamKind::Trainable,
            );
        }
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = if self.bias {
            Some(ctx.param(&format!("{}.bias", self.name))?)
        } else {
            None
        };
        x.conv2d(w, b, self.stride, self.padding)
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + if self.bias { self.out_channels } else { 0 }
    }
}

/// Size-preserving transposed convolution (stride 1, padding `(k-1)/2`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvTranspose2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvTranspose2d {
    pub fn new(name: impl Into<String>, in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvTranspose2d {
            name: name.into(),
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        let k = self.kernel;
        store.insert(
            format!("{}.weight", self.name),
            kaiming_uniform(vec![self.in_channels, self.out_channels, k, k], self.in_channels * k * k, rng),
            ParamKind::Trainable,
        );
        store.insert(
            format!("{}.bias", self.name),
            Tensor::zeros(vec![self.out_channels]),
            ParamKind::Trainable,
        );
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        x.conv_transpose2d(w, Some(b), 1, (self.kernel - 1) / 2)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_features: usize, out_features: usize) -> Self {
        Linear {
            name: name.into(),
            in_features,
            out_features,
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        store.insert(
            format!("{}.weight", self.name),
            kaiming_uniform(vec![self.out_features, self.in_features], self.in_features, rng),
            ParamKind::Trainable,
        );
        store.insert(
            format!("{}.bias", self.name),
            Tensor::zeros(vec![self.out_features]),
            ParamKind::Trainable,
        );
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let w = ctx.param(&format!("{}.weight", self.name))?;
        let b = ctx.param(&format!("{}.bias", self.name))?;
        x.linear(w, Some(b))
    }

    pub fn num_params(&self) -> usize {
        self.out_features * (self.in_features + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchNorm2d {
    pub name: String,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        BatchNorm2d {
            name: name.into(),
            channels,
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::full(vec![c], T::one()), ParamKind::Trainable);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(vec![c]), ParamKind::Trainable);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(vec![c]), ParamKind::Buffer);
        store.insert(format!("{}.running_var", self.name), Tensor::full(vec![c], T::one()), ParamKind::Buffer);
    }

    pub fn forward<'t, T: Element>(&self, ctx: &Forward<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        ctx.batchnorm(&self.name, x)
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}
