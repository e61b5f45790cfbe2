//! Minimal differentiable compute engine and the segmentation network
//! definitions (DenseUnet / PlainUnet) with forward and reverse-mode
//! gradient evaluation.

pub mod checkpoint;
pub mod net;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use checkpoint::{Checkpoint, RecData, Record};
pub use net::{
    count_params, Arch, BnInferenceMode, ModelConfig, Network, NormMode, NormStates, Phase,
    Running, SlabOut,
};
pub use tape::{backward, Grads, Node, ParamId, Pass, ValId};
pub use tensor::{sc, Scalar, Tensor};
