//! Small neural-network toolkit over candle tensors: seeded parameters
//! with freezing, linear/norm/attention blocks, 3D convolution, AdamW.

pub mod attention;
pub mod conv;
pub mod layers;
pub mod optim;
pub mod params;
pub mod rng;

pub use attention::{mask_from_fn, modulate, Attention, TransformerBlock};
pub use conv::Conv3d;
pub use layers::{gelu, layer_norm, sigmoid, silu, softmax_last, softplus, LayerNorm, Linear, Mlp};
pub use optim::{LrSchedule, Trainer};
pub use params::{Init, Param, ParamBuilder, ParamStore};
