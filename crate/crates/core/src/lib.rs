//! Causal video tokenizer: a spatio-temporal autoencoder with KL, VQ, LFQ or
//! FSQ latents, trained on CPU with a small reverse-mode autodiff engine.
//!
//! ```no_run
//! use vtok::net::{ModelConfig, Tokenizer, TokenizerConfig};
//! use vtok::quantize::RegularizerConfig;
//! use vtok::train::{synth_batch, SynthConfig};
//!
//! let cfg = TokenizerConfig::new(
//!     ModelConfig { latent_channels: 3, ..ModelConfig::default() },
//!     RegularizerConfig::fsq(&[5, 5, 5]),
//! );
//! let tok = Tokenizer::<f32>::new(cfg, 0)?;
//! let clip = &synth_batch(&SynthConfig::default())?[0];
//! let tokens = tok.tokenize(clip)?.tokens.unwrap();
//! assert_eq!(tokens.dims(), [5, 8, 8]);
//! # Ok::<(), vtok::Error>(())
//! ```

pub mod codec;
pub mod config;
pub mod error;
pub mod metrics;
pub mod net;
pub mod quantize;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
