//! The encoder-decoder model: tensors, configuration, parameters,
//! layer kernels, and the forward/reverse passes.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod model;
pub mod params;
pub mod tensor;

pub use config::{HeadKind, MegaBlock, ModelConfig, SeContext};
pub use model::{apply_bn_updates, backward, forward, infer_probs, Activations, BackSignal, Batch, ForwardOut, Mode};
pub use params::init_params;
pub use tensor::{Mat, ParameterSet, Scalar, Tensor};
