use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels::{self, BatchNormSaved, ConvGeom};
use super::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Sigmoid,
    Tanh,
    Relu,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
    },
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        dims: [usize; 3],
    },
    Gap {
        input: usize,
    },
    Upsample {
        input: usize,
    },
    Unary {
        input: usize,
        kind: Unary,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    BroadcastMul {
        a: usize,
        b: usize,
    },
    BatchNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        saved: BatchNormSaved<T>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Reshape {
        input: usize,
    },
    Sum {
        input: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Normalization statistics source for [`Tape::batchnorm2d`].
pub enum BatchNormStats<'a, T> {
    /// Normalize by the batch's own mean and biased variance.
    Batch,
    /// Normalize by externally supplied running statistics.
    Running { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics observed in train mode: per-channel mean and unbiased variance.
#[derive(Clone, Debug)]
pub struct ObservedStats<T> {
    pub mean: Vec<T>,
    pub unbiased_var: Vec<T>,
}

/// Records operations in execution order; [`Tape::backward`] replays them in reverse.
///
/// A tape serves exactly one backward pass. Build a fresh tape (or call
/// [`Tape::reset`]) for the next forward pass.
pub struct Tape<T: Element = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
pub struct Var<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<T: Element> Copy for Var<'_, T> {}

impl<T: Element> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Leaf gradients produced by one backward pass.
pub struct Gradients<T> {
    leaves: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of `var`, when it is a leaf that requires grad and was reached.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.leaves.get(var.id).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drop all recorded nodes so the tape can serve another pass.
    pub fn reset(&mut self) {
        self.nodes.get_mut().clear();
        self.consumed.set(false);
    }

    /// Record a leaf tensor.
    pub fn var(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.var(value, false)
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn check(&self, vars: &[Var<'_, T>]) -> Result<()> {
        if vars.iter().all(|v| std::ptr::eq(v.tape, self)) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    /// Batch normalization over `[N, C, H, W]` with per-channel affine `gamma`, `beta`.
    ///
    /// In batch mode the observed statistics are returned so the caller can
    /// update its running averages.
    pub fn batchnorm2d<'t>(
        &'t self,
        input: Var<'t, T>,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        stats: BatchNormStats<'_, T>,
        eps: f64,
    ) -> Result<(Var<'t, T>, Option<ObservedStats<T>>)> {
        self.check(&[input, gamma, beta])?;
        let x = self.value(input.id);
        let [n, c, h, w] = x.dims4("batchnorm2d")?;
        let (g, b) = (self.value(gamma.id), self.value(beta.id));
        if g.numel() != c || b.numel() != c {
            return Err(Error::shape(
                "batchnorm2d",
                format!("{c} channels but gamma/beta hold {}/{}", g.numel(), b.numel()),
            ));
        }
        let plane = h * w;
        let (out, saved, observed) = match stats {
            BatchNormStats::Batch => {
                let count = n * plane;
                if count < 2 {
                    return Err(Error::DegenerateBatch { count });
                }
                let (mean, var) = kernels::channel_moments(x.data(), n, c, plane);
                let (out, saved) = kernels::batchnorm_forward(
                    x.data(),
                    g.data(),
                    b.data(),
                    &mean,
                    &var,
                    T::of(eps),
                    n,
                    c,
                    plane,
                    true,
                );
                let correction = T::of(count as f64 / (count - 1) as f64);
                let unbiased_var = var.iter().map(|&v| v * correction).collect();
                (out, saved, Some(ObservedStats { mean, unbiased_var }))
            }
            BatchNormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm2d", "running statistics length"));
                }
                let (out, saved) = kernels::batchnorm_forward(
                    x.data(),
                    g.data(),
                    b.data(),
                    mean,
                    var,
                    T::of(eps),
                    n,
                    c,
                    plane,
                    false,
                );
                (out, saved, None)
            }
        };
        let rg = self.requires(input.id) || self.requires(gamma.id) || self.requires(beta.id);
        let var = self.push(
            Tensor::new(x.shape().to_vec(), out)?,
            Op::BatchNorm {
                input: input.id,
                gamma: gamma.id,
                beta: beta.id,
                saved,
            },
            rg,
        );
        Ok((var, observed))
    }

    /// Reverse-mode pass from a scalar `root`; returns gradients of all leaves
    /// that require grad.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        self.check(&[root])?;
        if self.consumed.get() {
            return Err(Error::StaleTape);
        }
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.numel() != 1 {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        self.consumed.set(true);

        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.id + 1, || None);
        let mut leaves: Vec<Option<Tensor<T>>> = Vec::new();
        leaves.resize_with(nodes.len(), || None);
        if !nodes[root.id].requires_grad {
            return Ok(Gradients { leaves });
        }
        grads[root.id] = Some(vec![T::one()]);

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let mut acc = |target: usize, f: &mut dyn FnMut(&mut [T])| {
                if !nodes[target].requires_grad {
                    return;
                }
                let slot = grads[target].get_or_insert_with(|| vec![T::zero(); nodes[target].value.numel()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (x, w) = (&nodes[*input].value, &nodes[*weight].value);
                    acc(*input, &mut |gx| kernels::conv2d_backward_input(geom, &g, w.data(), gx));
                    acc(*weight, &mut |gw| kernels::conv2d_backward_weight(geom, &g, x.data(), gw));
                    if let Some(b) = bias {
                        acc(*b, &mut |gb| {
                            kernels::channel_sum(&g, geom.batch, geom.out_channels, geom.out_h * geom.out_w, gb)
                        });
                    }
                }
                Op::ConvTranspose2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (x, w) = (&nodes[*input].value, &nodes[*weight].value);
                    acc(*input, &mut |gx| {
                        kernels::conv_transpose2d_backward_input(geom, &g, w.data(), gx)
                    });
                    acc(*weight, &mut |gw| {
                        kernels::conv_transpose2d_backward_weight(geom, &g, x.data(), gw)
                    });
                    if let Some(b) = bias {
                        acc(*b, &mut |gb| {
                            kernels::channel_sum(&g, geom.batch, geom.out_channels, geom.out_h * geom.out_w, gb)
                        });
                    }
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                    dims: [n, f, k],
                } => {
                    let (x, w) = (&nodes[*input].value, &nodes[*weight].value);
                    acc(*input, &mut |gx| kernels::linear_backward_input(&g, w.data(), *n, *f, *k, gx));
                    acc(*weight, &mut |gw| kernels::linear_backward_weight(&g, x.data(), *n, *f, *k, gw));
                    if let Some(b) = bias {
                        acc(*b, &mut |gb| kernels::channel_sum(&g, *n, *k, 1, gb));
                    }
                }
                Op::Gap { input } => {
                    let shape = nodes[*input].value.shape();
                    let plane = shape[2] * shape[3];
                    let scale = T::one() / T::of(plane as f64);
                    acc(*input, &mut |gx| {
                        for (chunk, &gv) in gx.chunks_mut(plane).zip(&g) {
                            for v in chunk {
                                *v += gv * scale;
                            }
                        }
                    });
                }
                Op::Upsample { input } => {
                    let src = nodes[*input].value.shape();
                    let dst = node.value.shape();
                    let (ih, iw, oh, ow) = (src[2], src[3], dst[2], dst[3]);
                    acc(*input, &mut |gx| {
                        for (plane_idx, gplane) in g.chunks(oh * ow).enumerate() {
                            let base = plane_idx * ih * iw;
                            for y in 0..oh {
                                let sy = y * ih / oh;
                                for x in 0..ow {
                                    gx[base + sy * iw + x * iw / ow] += gplane[y * ow + x];
                                }
                            }
                        }
                    });
                }
                Op::Unary { input, kind } => {
                    let y = node.value.data();
                    let kind = *kind;
                    acc(*input, &mut |gx| {
                        for ((gxv, &gv), &yv) in gx.iter_mut().zip(&g).zip(y) {
                            *gxv += match kind {
                                Unary::Sigmoid => gv * yv * (T::one() - yv),
                                Unary::Tanh => gv * (T::one() - yv * yv),
                                Unary::Relu => {
                                    if yv > T::zero() {
                                        gv
                                    } else {
                                        T::zero()
                                    }
                                }
                            };
                        }
                    });
                }
                Op::Add { a, b } => {
                    for t in [*a, *b] {
                        acc(t, &mut |gt| {
                            for (d, &s) in gt.iter_mut().zip(&g) {
                                *d += s;
                            }
                        });
                    }
                }
                Op::Mul { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    acc(*a, &mut |ga| {
                        for ((d, &s), &o) in ga.iter_mut().zip(&g).zip(bv.data()) {
                            *d += s * o;
                        }
                    });
                    acc(*b, &mut |gb| {
                        for ((d, &s), &o) in gb.iter_mut().zip(&g).zip(av.data()) {
                            *d += s * o;
                        }
                    });
                }
                Op::BroadcastMul { a, b } => {
                    let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                    let out_shape = node.value.shape();
                    acc(*a, &mut |ga| {
                        broadcast_for_each(out_shape, av.shape(), bv.shape(), |o, ia, ib| {
                            ga[ia] += g[o] * bv.data()[ib];
                        })
                    });
                    acc(*b, &mut |gb| {
                        broadcast_for_each(out_shape, av.shape(), bv.shape(), |o, ia, ib| {
                            gb[ib] += g[o] * av.data()[ia];
                        })
                    });
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let shape = node.value.shape();
                    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
                    let gamma_v = &nodes[*gamma].value;
                    let (gx, ggamma, gbeta) = kernels::batchnorm_backward(&g, gamma_v.data(), saved, n, c, plane);
                    for (t, src) in [(*input, &gx), (*gamma, &ggamma), (*beta, &gbeta)] {
                        acc(t, &mut |gt| {
                            for (d, &s) in gt.iter_mut().zip(src) {
                                *d += s;
                            }
                        });
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let n = labels.len();
                    let k = probs.len() / n;
                    let scale = g[0] / T::of(n as f64);
                    acc(*logits, &mut |gl| {
                        for (r, &label) in labels.iter().enumerate() {
                            for c in 0..k {
                                let onehot = if c == label { T::one() } else { T::zero() };
                                gl[r * k + c] += scale * (probs[r * k + c] - onehot);
                            }
                        }
                    });
                }
                Op::Reshape { input } => {
                    acc(*input, &mut |gx| {
                        for (d, &s) in gx.iter_mut().zip(&g) {
                            *d += s;
                        }
                    });
                }
                Op::Sum { input } => {
                    acc(*input, &mut |gx| {
                        for d in gx.iter_mut() {
                            *d += g[0];
                        }
                    });
                }
                Op::Scale { input, factor } => {
                    acc(*input, &mut |gx| {
                        for (d, &s) in gx.iter_mut().zip(&g) {
                            *d += s * *factor;
                        }
                    });
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Output shape of broadcasting two rank-4 shapes, where each axis is equal or 1.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != 4 || b.len() != 4 {
        return Err(Error::shape("broadcast_mul", format!("{a:?} x {b:?}: rank 4 required")));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape("broadcast_mul", format!("{a:?} x {b:?}"))),
        })
        .collect()
}

fn broadcast_for_each(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let strides = |s: &[usize]| {
        let mut st = [0usize; 4];
        let mut acc = 1;
        for d in (0..4).rev() {
            st[d] = if s[d] == 1 { 0 } else { acc };
            acc *= s[d];
        }
        st
    };
    let (sa, sb) = (strides(a), strides(b));
    let mut o = 0;
    for i0 in 0..out[0] {
        for i1 in 0..out[1] {
            for i2 in 0..out[2] {
                for i3 in 0..out[3] {
                    let ia = i0 * sa[0] + i1 * sa[1] + i2 * sa[2] + i3 * sa[3];
                    let ib = i0 * sb[0] + i1 * sb[1] + i2 * sb[2] + i3 * sb[3];
                    f(o, ia, ib);
                    o += 1;
                }
            }
        }
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Current value (shared, cheap to clone).
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(self.id)
    }

    fn same_tape(&self, others: &[Var<'t, T>]) -> Result<()> {
        self.tape.check(others)
    }

    fn unary(self, kind: Unary) -> Var<'t, T> {
        let x = self.value();
        let data = x
            .data()
            .iter()
            .map(|&v| match kind {
                Unary::Sigmoid => kernels::sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Relu => v.max(T::zero()),
            })
            .collect();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data,
        };
        self.tape.push(out, Op::Unary { input: self.id, kind }, self.requires_grad())
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(Unary::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(Unary::Tanh)
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(Unary::Relu)
    }

    /// 2-D convolution; `weight` is `[Cout, Cin, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, stride: usize, padding: usize) -> Result<Var<'t, T>> {
        self.same_tape(&[weight])?;
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::conv2d(x.dims4("conv2d")?, w.dims4("conv2d")?, stride, padding)?;
        let b = bias_values(self.tape, bias, geom.out_channels, "conv2d")?;
        let out = kernels::conv2d_forward(&geom, x.data(), w.data(), b.as_deref().map(|t| t.data()));
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::new(geom.out_shape().to_vec(), out)?,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// 2-D transposed convolution; `weight` is `[Cin, Cout, kh, kw]`.
    pub fn conv_transpose2d(
        self,
        weight: Var<'t, T>,
        bias: Option<Var<'t, T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t, T>> {
        self.same_tape(&[weight])?;
        let (x, w) = (self.value(), weight.value());
        let geom = ConvGeom::conv_transpose2d(
            x.dims4("conv_transpose2d")?,
            w.dims4("conv_transpose2d")?,
            stride,
            padding,
        )?;
        let b = bias_values(self.tape, bias, geom.out_channels, "conv_transpose2d")?;
        let out = kernels::conv_transpose2d_forward(&geom, x.data(), w.data(), b.as_deref().map(|t| t.data()));
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::new(geom.out_shape().to_vec(), out)?,
            Op::ConvTranspose2d {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                geom,
            },
            rg,
        ))
    }

    /// Fully connected layer; `weight` is `[G, F]`, input `[N, F]`.
    pub fn linear(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        self.same_tape(&[weight])?;
        let (x, w) = (self.value(), weight.value());
        let [n, f] = x.dims2("linear")?;
        let [g, wf] = w.dims2("linear")?;
        if f != wf {
            return Err(Error::shape("linear", format!("input has {f} features, weight expects {wf}")));
        }
        let b = bias_values(self.tape, bias, g, "linear")?;
        let out = kernels::linear_forward(x.data(), w.data(), b.as_deref().map(|t| t.data()), n, f, g);
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        Ok(self.tape.push(
            Tensor::new(vec![n, g], out)?,
            Op::Linear {
                input: self.id,
                weight: weight.id,
                bias: bias.map(|b| b.id),
                dims: [n, f, g],
            },
            rg,
        ))
    }

    /// Global average pooling `[N, C, H, W] -> [N, C]`.
    pub fn gap(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, c, h, w] = x.dims4("gap")?;
        let scale = T::one() / T::of((h * w) as f64);
        let data = x
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        Ok(self.tape.push(Tensor::new(vec![n, c], data)?, Op::Gap { input: self.id }, self.requires_grad()))
    }

    /// Nearest-neighbour resize; source index is `floor(dst * in / out)`.
    pub fn upsample_nearest(self, out_h: usize, out_w: usize) -> Result<Var<'t, T>> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::InvalidHyperparameter {
                op: "upsample_nearest",
                detail: format!("target size {out_h}x{out_w}"),
            });
        }
        let x = self.value();
        let [n, c, h, w] = x.dims4("upsample_nearest")?;
        if (h, w) == (out_h, out_w) {
            return self.reshape(vec![n, c, h, w]);
        }
        let mut data = Vec::with_capacity(n * c * out_h * out_w);
        for plane in x.data().chunks(h * w) {
            for y in 0..out_h {
                let row = &plane[(y * h / out_h) * w..][..w];
                data.extend((0..out_w).map(|xo| row[xo * w / out_w]));
            }
        }
        Ok(self.tape.push(
            Tensor::new(vec![n, c, out_h, out_w], data)?,
            Op::Upsample { input: self.id },
            self.requires_grad(),
        ))
    }

    fn zip_same(self, other: Var<'t, T>, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_tape(&[other])?;
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_same(other, "add", |x, y| x + y)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Add { a: self.id, b: other.id }, rg))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let out = self.zip_same(other, "mul", |x, y| x * y)?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(out, Op::Mul { a: self.id, b: other.id }, rg))
    }

    /// Elementwise product of rank-4 tensors whose axes are equal or 1.
    pub fn broadcast_mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&[other])?;
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())?;
        let mut data = vec![T::zero(); shape.iter().product()];
        broadcast_for_each(&shape, a.shape(), b.shape(), |o, ia, ib| {
            data[o] = a.data()[ia] * b.data()[ib];
        });
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(shape, data)?, Op::BroadcastMul { a: self.id, b: other.id }, rg))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t, T>> {
        let out = (*self.value()).clone().reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape { input: self.id }, self.requires_grad()))
    }

    pub fn sum(self) -> Var<'t, T> {
        let total = self.value().sum();
        self.tape.push(Tensor::scalar(total), Op::Sum { input: self.id }, self.requires_grad())
    }

    pub fn scale(self, factor: f64) -> Var<'t, T> {
        let factor = T::of(factor);
        let x = self.value();
        let out = Tensor {
            shape: x.shape().to_vec(),
            data: x.data().iter().map(|&v| v * factor).collect(),
        };
        self.tape.push(out, Op::Scale { input: self.id, factor }, self.requires_grad())
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against `labels`.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let [n, k] = x.dims2("cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{n} rows but {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let loss = kernels::cross_entropy(x.data(), labels, k);
        let probs = kernels::softmax_rows(x.data(), n, k);
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            self.requires_grad(),
        ))
    }
}

fn bias_values<T: Element>(
    tape: &Tape<T>,
    bias: Option<Var<'_, T>>,
    expected: usize,
    op: &'static str,
) -> Result<Option<Rc<Tensor<T>>>> {
    let Some(b) = bias else { return Ok(None) };
    tape.check(&[b])?;
    let value = b.value();
    if value.numel() != expected {
        return Err(Error::shape(op, format!("bias has {} values, expected {expected}", value.numel())));
    }
    Ok(Some(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_gradient_is_one() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.mul(x).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_twice_is_stale() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let y = x.sum();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::StaleTape)));
    }

    #[test]
    fn reset_allows_reuse() {
        let mut tape = Tape::<f64>::new();
        {
            let x = tape.leaf(t(&[1], &[1.0]));
            tape.backward(x).unwrap();
        }
        tape.reset();
        let x = tape.leaf(t(&[1], &[1.0]));
        assert!(tape.backward(x).is_ok());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn vars_from_other_tapes_rejected() {
        let a = Tape::<f64>::new();
        let b = Tape::<f64>::new();
        let x = a.leaf(t(&[1], &[1.0]));
        let y = b.leaf(t(&[1], &[1.0]));
        assert!(matches!(x.add(y), Err(Error::ForeignVar)));
    }

    #[test]
    fn shared_leaf_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = x.add(x).unwrap().add(x).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let c = tape.constant(t(&[1], &[2.0]));
        let y = x.mul(c).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![1, 2, 3, 3]));
        let b = tape.leaf(Tensor::zeros(vec![1, 3, 1, 1]));
        assert!(a.broadcast_mul(b).is_err());
    }

    #[test]
    fn batchnorm_degenerate_batch() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 1, 1]));
        let g = tape.leaf(Tensor::full(vec![2], 1.0));
        let b = tape.leaf(Tensor::zeros(vec![2]));
        let err = tape.batchnorm2d(x, g, b, BatchNormStats::Batch, 1e-5).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch { count: 1 }));
    }
}
