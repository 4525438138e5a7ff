//! Cross-layer navigation CNN for fine-grained visual classification.
//!
//! A small residual backbone emits three stage feature maps. The high-to-low
//! pathway aligns them and sweeps a ConvLSTM from the coarsest to the finest
//! level; the low-to-high pathway derives spatial and channel attention masks
//! whose channel embedding is carried upward level by level. Three classifier
//! heads read the attended maps.

pub mod backbone;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod navigation;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use params::{Forward, Mode, ParamGroup, ParamKind, ParamStore};
pub use model::{Model, ModelConfig, Variant};
pub use tensor::{Element, Tape, Tensor, Var};
