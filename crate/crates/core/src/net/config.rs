use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantize::RegularizerConfig;

/// Architecture variant. `DecoupledBlend` is the default; the other three
/// exist for cost and quality comparisons.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Spatial and temporal sampling fused into strided 3D convolutions.
    Fully3D,
    /// 2D spatial sampling, parameter-free temporal pooling / repetition.
    DecoupledNoBlend,
    /// Every 3D convolution replaced by a per-frame 2D convolution.
    Fully2D,
    /// 2D spatial sampling, AlphaBlender temporal sampling.
    DecoupledBlend,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Fully3D,
        Variant::DecoupledNoBlend,
        Variant::Fully2D,
        Variant::DecoupledBlend,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::Fully3D => "fully-3d",
            Variant::DecoupledNoBlend => "decoupled-no-blend",
            Variant::Fully2D => "fully-2d",
            Variant::DecoupledBlend => "decoupled-blend",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub causal: bool,
    /// Temporal compression ratio `r_t`.
    pub temporal_ratio: usize,
    /// Spatial compression ratio `r_s`.
    pub spatial_ratio: usize,
    pub latent_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_stage: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    /// CPU-sized configuration: 32 base channels, multipliers `[1, 2, 2]`,
    /// one block per stage, 4 latent channels, causal `4×8×8` compression.
    fn default() -> Self {
        Self {
            causal: true,
            temporal_ratio: 4,
            spatial_ratio: 8,
            latent_channels: 4,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_stage: 1,
            variant: Variant::DecoupledBlend,
        }
    }
}

const RATIOS: [usize; 5] = [1, 2, 4, 8, 16];

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_t", self.temporal_ratio), ("r_s", self.spatial_ratio)] {
            if !RATIOS.contains(&r) {
                return Err(Error::Config(format!("{name}={r} must be one of {RATIOS:?}")));
            }
        }
        if self.latent_channels == 0 || self.base_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel multipliers must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn spatial_stages(&self) -> usize {
        self.spatial_ratio.trailing_zeros() as usize
    }

    pub fn temporal_stages(&self) -> usize {
        self.temporal_ratio.trailing_zeros() as usize
    }

    pub fn stages(&self) -> usize {
        self.spatial_stages().max(self.temporal_stages())
    }

    /// Channel width entering each stage, plus the bottleneck width last.
    /// Width only changes across spatial downsampling.
    pub fn channel_schedule(&self) -> Vec<usize> {
        let mult = |k: usize| self.channel_multipliers[k.min(self.channel_multipliers.len() - 1)];
        let mut ch = vec![self.base_channels * mult(0)];
        for k in 0..self.stages() {
            let next = if k < self.spatial_stages() {
                self.base_channels * mult(k + 1)
            } else {
                ch[k]
            };
            ch.push(next);
        }
        ch
    }

    /// Latent grid `(frames, h, w)` for a video of `frames × H × W`.
    ///
    /// Causal: `N + 1` frames give `n + 1` latent frames with `N = n·r_t`.
    /// Non-causal: `N` frames give `N / r_t`.
    pub fn latent_dims(&self, frames: usize, height: usize, width: usize) -> Result<[usize; 3]> {
        let rt = self.temporal_ratio;
        let rs = self.spatial_ratio;
        let t = if self.causal {
            if frames == 0 || (frames - 1) % rt != 0 {
                return Err(Error::FrameCount {
                    frames,
                    rt,
                    mode: "causal needs frames ≡ 1 mod r_t",
                });
            }
            (frames - 1) / rt + 1
        } else {
            if frames == 0 || frames % rt != 0 {
                return Err(Error::FrameCount {
                    frames,
                    rt,
                    mode: "non-causal needs frames ≡ 0 mod r_t",
                });
            }
            frames / rt
        };
        if height == 0 || width == 0 || height % rs != 0 || width % rs != 0 {
            return Err(Error::shape(
                "latent_dims",
                format!("{height}×{width} is not divisible by r_s={rs}"),
            ));
        }
        Ok([t, height / rs, width / rs])
    }

    /// Inverse of [`latent_dims`](Self::latent_dims).
    pub fn video_dims(&self, latent_frames: usize, h: usize, w: usize) -> Result<[usize; 3]> {
        if latent_frames == 0 || h == 0 || w == 0 {
            return Err(Error::Empty("video_dims"));
        }
        let rt = self.temporal_ratio;
        let frames = if self.causal {
            (latent_frames - 1) * rt + 1
        } else {
            latent_frames * rt
        };
        Ok([frames, h * self.spatial_ratio, w * self.spatial_ratio])
    }
}

/// Everything needed to rebuild a tokenizer: architecture plus regularizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    pub model: ModelConfig,
    pub regularizer: RegularizerConfig,
}

impl TokenizerConfig {
    pub fn new(model: ModelConfig, regularizer: RegularizerConfig) -> Self {
        Self { model, regularizer }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.regularizer.validate()?;
        let c = self.regularizer.latent_channels();
        if c != self.model.latent_channels {
            return Err(Error::Config(format!(
                "regularizer works on {c} channels but the model has {}",
                self.model.latent_channels
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_shape_examples() {
        let causal = ModelConfig::default();
        assert_eq!(causal.latent_dims(17, 256, 256).unwrap(), [5, 32, 32]);
        assert_eq!(causal.video_dims(5, 32, 32).unwrap(), [17, 256, 256]);
        let nc = ModelConfig {
            causal: false,
            ..ModelConfig::default()
        };
        assert_eq!(nc.latent_dims(16, 256, 256).unwrap(), [4, 32, 32]);
        assert_eq!(nc.video_dims(4, 32, 32).unwrap(), [16, 256, 256]);
        assert_eq!(causal.latent_dims(17, 32, 32).unwrap(), [5, 4, 4]);
    }

    #[test]
    fn bad_frame_counts() {
        let causal = ModelConfig::default();
        assert!(matches!(causal.latent_dims(16, 64, 64), Err(Error::FrameCount { .. })));
        assert!(causal.latent_dims(17, 60, 64).is_err());
        let nc = ModelConfig {
            causal: false,
            ..ModelConfig::default()
        };
        assert!(nc.latent_dims(17, 64, 64).is_err());
    }

    #[test]
    fn ratios_validated() {
        let mut c = ModelConfig::default();
        c.temporal_ratio = 3;
        assert!(c.validate().is_err());
        c.temporal_ratio = 16;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn schedule_extends_last_multiplier() {
        let c = ModelConfig::default();
        // r_s=8: three spatial stages
        assert_eq!(c.channel_schedule(), vec![32, 64, 64, 64]);
        let c = ModelConfig {
            temporal_ratio: 16,
            spatial_ratio: 2,
            ..ModelConfig::default()
        };
        assert_eq!(c.channel_schedule(), vec![32, 64, 64, 64, 64]);
    }
}
