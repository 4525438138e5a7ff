//! Named parameter storage and the per-pass forward context.

use std::cell::RefCell;
use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Element, Gradients, ObservedStats, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// Non-trainable state, such as batchnorm running statistics.
    Buffer,
}

/// Optimizer group; each group has its own learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Other,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        if name.starts_with("backbone.") {
            ParamGroup::Backbone
        } else {
            ParamGroup::Other
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Insertion-ordered map of named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    /// Insert a new entry. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), Param { value, kind });
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(k, p)| (k, &p.value))
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.trainable().map(|(_, t)| t.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            kind: p.kind,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Overwrite every entry from `(name, tensor)` records; names and shapes
    /// must match this store exactly.
    pub fn load_records(&mut self, records: Vec<(String, Tensor<f32>)>) -> Result<()> {
        if records.len() != self.entries.len() {
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} tensors, model has {}",
                records.len(),
                self.entries.len()
            )));
        }
        let mut seen = HashMap::new();
        for (name, tensor) in records {
            let Some(slot) = self.entries.get(&name) else {
                return Err(Error::CheckpointMismatch(format!("unexpected tensor {name}")));
            };
            if slot.value.shape() != tensor.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    tensor.shape(),
                    slot.value.shape()
                )));
            }
            seen.insert(name, tensor);
        }
        for (name, param) in self.entries.iter_mut() {
            let t = seen
                .remove(name)
                .ok_or_else(|| Error::CheckpointMismatch(format!("duplicate or missing {name}")))?;
            param.value = t.cast();
        }
        Ok(())
    }

    /// `(name, tensor)` records in insertion order, as 32-bit values.
    pub fn to_records(&self) -> Vec<(String, Tensor<f32>)> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.value.cast()))
            .collect()
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn apply_running_stats(&mut self, observed: &[(String, ObservedStats<T>)]) -> Result<()> {
        let m = T::of(BN_MOMENTUM);
        for (prefix, stats) in observed {
            for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.unbiased_var)] {
                let name = format!("{prefix}.{suffix}");
                let target = self
                    .get_mut(&name)
                    .ok_or_else(|| Error::MissingParameter(name.clone()))?;
                for (r, &v) in target.data_mut().iter_mut().zip(values) {
                    *r = (T::one() - m) * *r + m * v;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// State of one forward pass: the tape, the parameters it reads, and the
/// batchnorm statistics it observed.
///
/// Each parameter enters the tape once, on first use, so a weight shared by
/// several steps (the ConvLSTM cell) accumulates a single gradient.
pub struct Forward<'t, T: Element = f32> {
    tape: &'t Tape<T>,
    params: &'t ParamStore<T>,
    mode: Mode,
    track_grads: bool,
    leaves: RefCell<IndexMap<String, Var<'t, T>>>,
    observed: RefCell<Vec<(String, ObservedStats<T>)>>,
}

impl<'t, T: Element> Forward<'t, T> {
    pub fn new(tape: &'t Tape<T>, params: &'t ParamStore<T>, mode: Mode) -> Self {
        Forward {
            tape,
            params,
            mode,
            track_grads: true,
            leaves: RefCell::new(IndexMap::new()),
            observed: RefCell::new(Vec::new()),
        }
    }

    /// Eval-mode pass that records no gradients.
    pub fn inference(tape: &'t Tape<T>, params: &'t ParamStore<T>) -> Self {
        Forward {
            track_grads: false,
            ..Self::new(tape, params, Mode::Eval)
        }
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'t ParamStore<T> {
        self.params
    }

    pub fn param(&self, name: &str) -> Result<Var<'t, T>> {
        if let Some(&v) = self.leaves.borrow().get(name) {
            return Ok(v);
        }
        let p = self
            .params
            .param(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        let v = self
            .tape
            .var(p.value.clone(), self.track_grads && p.kind == ParamKind::Trainable);
        self.leaves.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'t Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<'t, T> {
        self.tape.constant(value)
    }

    /// Batchnorm with parameters under `prefix`; batch statistics in train
    /// mode, running statistics in eval mode.
    pub fn batchnorm(&self, prefix: &str, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, observed) = self
                    .tape
                    .batchnorm2d(x, gamma, beta, BatchNormStats::Batch, BN_EPS)?;
                if let Some(stats) = observed {
                    self.observed.borrow_mut().push((prefix.to_string(), stats));
                }
                Ok(y)
            }
            Mode::Eval => {
                let mean = self.buffer(&format!("{prefix}.running_mean"))?;
                let var = self.buffer(&format!("{prefix}.running_var"))?;
                let stats = BatchNormStats::Running {
                    mean: mean.data(),
                    var: var.data(),
                };
                Ok(self.tape.batchnorm2d(x, gamma, beta, stats, BN_EPS)?.0)
            }
        }
    }

    /// Gradients of every trainable parameter this pass touched.
    pub fn param_grads(&self, grads: &Gradients<T>) -> IndexMap<String, Tensor<T>> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn take_observed(&self) -> Vec<(String, ObservedStats<T>)> {
        std::mem::take(&mut self.observed.borrow_mut())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_partition_by_prefix() {
        assert_eq!(ParamGroup::of("backbone.stage1.down.weight"), ParamGroup::Backbone);
        assert_eq!(ParamGroup::of("nav.align3.weight"), ParamGroup::Other);
        assert_eq!(ParamGroup::of("head.fc.weight"), ParamGroup::Other);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::zeros(vec![2]), ParamKind::Trainable);
        let err = store
            .load_records(vec![("a".into(), Tensor::zeros(vec![3]))])
            .unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
        let err = store
            .load_records(vec![("b".into(), Tensor::zeros(vec![2]))])
            .unwrap_err();
        assert!(matches!(err, Error::CheckpointMismatch(_)));
    }

    #[test]
    fn shared_parameter_enters_tape_once() {
        let mut store = ParamStore::<f64>::new();
        store.insert("w", Tensor::full(vec![1], 2.0), ParamKind::Trainable);
        let tape = Tape::new();
        let ctx = Forward::new(&tape, &store, Mode::Train);
        let w1 = ctx.param("w").unwrap();
        let w2 = ctx.param("w").unwrap();
        assert_eq!(w1.id(), w2.id());
        let y = w1.mul(w2).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(ctx.param_grads(&grads)["w"].data(), &[4.0]);
    }

    #[test]
    fn running_stats_use_momentum() {
        let mut store = ParamStore::<f64>::new();
        store.insert("bn.running_mean", Tensor::zeros(vec![1]), ParamKind::Buffer);
        store.insert("bn.running_var", Tensor::full(vec![1], 1.0), ParamKind::Buffer);
        let obs = ObservedStats {
            mean: vec![2.0],
            unbiased_var: vec![3.0],
        };
        store.apply_running_stats(&[("bn".into(), obs)]).unwrap();
        assert!((store.get("bn.running_mean").unwrap().data()[0] - 0.2).abs() < 1e-12);
        assert!((store.get("bn.running_var").unwrap().data()[0] - 1.2).abs() < 1e-12);
    }
}
