//! Encoder / decoder network, its parameters and checkpoints.

mod arch;
mod checkpoint;
mod config;
mod model;
mod params;
mod video;

pub use arch::{count_flops, count_params, Architecture, ConvKind, ConvSpec, Init, Layer, ParamSpec, CODEBOOK_PARAM};
pub use checkpoint::Checkpoint;
pub(crate) use checkpoint::Reader;
pub use config::{ModelConfig, TokenizerConfig, Variant};
pub use model::{alpha, alpha_blend, Encoded, Forward, Tokenizer};
pub use params::{Bound, ParamStore};
pub use video::{causal_pad, causal_trim, from_batch, to_batch, LatentTensor, VideoTensor};
