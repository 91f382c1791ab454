//! Core library of the SAPM image codec: tensors, autodiff, the
//! shift/adder operator set, entropy models, range coding, the codec
//! pipeline, training, and the energy accounting tools.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod energy;
pub mod entropy;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod ppm;
pub mod rangecoder;
pub mod stats;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use error::{Result, SapmError};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
