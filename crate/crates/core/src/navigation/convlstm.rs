use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::Conv2d;
use crate::params::{Forward, ParamStore};
use crate::tensor::{Element, Tensor, Var};

/// Hidden and cell maps carried between ConvLSTM steps.
#[derive(Clone, Copy, Debug)]
pub struct ConvLstmState<'t, T: Element> {
    pub h: Var<'t, T>,
    pub c: Var<'t, T>,
}

impl<'t, T: Element> ConvLstmState<'t, T> {
    pub fn zeros(ctx: &Forward<'t, T>, shape: [usize; 4]) -> Self {
        ConvLstmState {
            h: ctx.constant(Tensor::zeros(shape.to_vec())),
            c: ctx.constant(Tensor::zeros(shape.to_vec())),
        }
    }
}

pub const GATES: [&str; 4] = ["i", "f", "g", "o"];

/// Four-gate ConvLSTM without peepholes. Gate `k` computes
/// `Wx_k * x + Wh_k * h + b_k` with same-padded convolutions.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    pub name: String,
    pub channels: usize,
    pub kernel: usize,
    input_convs: Vec<Conv2d>,
    hidden_convs: Vec<Conv2d>,
}

impl ConvLstmCell {
    pub fn new(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        let name = name.into();
        let input_convs = GATES
            .iter()
            .map(|g| Conv2d::new(format!("{name}.x{g}"), channels, channels, kernel))
            .collect();
        let hidden_convs = GATES
            .iter()
            .map(|g| Conv2d::new(format!("{name}.h{g}"), channels, channels, kernel).no_bias())
            .collect();
        ConvLstmCell {
            name,
            channels,
            kernel,
            input_convs,
            hidden_convs,
        }
    }

    pub fn register<T: Element>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (x, h) in self.input_convs.iter().zip(&self.hidden_convs) {
            x.register(store, rng);
            h.register(store, rng);
        }
    }

    /// One step. `None` stands for the all-zero initial state, whose
    /// hidden-to-hidden terms vanish and are skipped.
    pub fn step<'t, T: Element>(
        &self,
        ctx: &Forward<'t, T>,
        x: Var<'t, T>,
        state: Option<&ConvLstmState<'t, T>>,
    ) -> Result<ConvLstmState<'t, T>> {
        if let Some(s) = state {
            let (xs, hs, cs) = (x.shape(), s.h.shape(), s.c.shape());
            if xs != hs || hs != cs {
                return Err(Error::shape(
                    "convlstm_cell_forward",
                    format!("x {xs:?}, h {hs:?}, c {cs:?}"),
                ));
            }
        }
        let mut pre = Vec::with_capacity(4);
        for (xc, hc) in self.input_convs.iter().zip(&self.hidden_convs) {
            let mut a = xc.forward(ctx, x)?;
            if let Some(s) = state {
                a = a.add(hc.forward(ctx, s.h)?)?;
            }
            pre.push(a);
        }
        let i = pre[0].sigmoid();
        let f = pre[1].sigmoid();
        let g = pre[2].tanh();
        let o = pre[3].sigmoid();
        let c = match state {
            Some(s) => f.mul(s.c)?.add(i.mul(g)?)?,
            None => i.mul(g)?,
        };
        let h = o.mul(c.tanh())?;
        Ok(ConvLstmState { h, c })
    }
}
