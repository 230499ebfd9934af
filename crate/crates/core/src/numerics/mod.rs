//! Dense tensors, a recording tape for reverse-mode gradients, transformer
//! building blocks, and Adam over named parameter groups.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use kernels::Real;
pub use layers::{attention_layer, conv1d_downsample, BlockParams, BlockVars, ConvParams, ConvVars};
pub use params::{Binding, Group, Param, ParamId, ParamStore};
pub use tape::{conv_out_len, Gradients, Tape, Var};
pub use tensor::{Tensor, ToBits};
