//! Layer plan shared by parameter allocation, the forward pass and the
//! parameter / FLOP counters.

use super::config::{TokenizerConfig, Variant};
use crate::error::Result;
use crate::quantize::RegularizerKind;
use crate::tensor::{ConvGeometry, TemporalPadding};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// `k×k×k` spatio-temporal.
    Full3d,
    /// `1×k×k`, applied to every frame independently.
    Spatial2d,
    /// `k×1×1`, applied to every pixel independently.
    Temporal1d,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub name: String,
    pub kind: ConvKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    /// `(time, height, width)` strides.
    pub stride: [usize; 3],
}

impl ConvSpec {
    fn new(name: impl Into<String>, kind: ConvKind, c_in: usize, c_out: usize, stride: [usize; 3]) -> Self {
        Self {
            name: name.into(),
            kind,
            c_in,
            c_out,
            kernel: 3,
            stride,
        }
    }

    pub fn kernel_extent(&self) -> [usize; 3] {
        let k = self.kernel;
        match self.kind {
            ConvKind::Full3d => [k, k, k],
            ConvKind::Spatial2d => [1, k, k],
            ConvKind::Temporal1d => [k, 1, 1],
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let k = self.kernel;
        match self.kind {
            ConvKind::Full3d => vec![self.c_out, self.c_in, k, k, k],
            ConvKind::Spatial2d => vec![self.c_out, self.c_in, k, k],
            ConvKind::Temporal1d => vec![self.c_out, self.c_in, k],
        }
    }

    pub fn geometry(&self, temporal: TemporalPadding) -> ConvGeometry {
        ConvGeometry::new(self.kernel_extent(), self.stride, temporal)
    }

    pub fn fan_in(&self) -> usize {
        self.c_in * self.kernel_extent().iter().product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv(ConvSpec),
    /// Layer norm over the channel axis.
    Norm { name: String, channels: usize },
    Silu,
    /// `norm → SiLU → conv → norm → SiLU → conv`, plus identity skip.
    ResBlock { name: String, channels: usize, kind: ConvKind },
    /// Nearest-neighbour repetition in time and/or space, then `conv`.
    Upsample { time: bool, space: bool, conv: ConvSpec },
    /// Halves the frame count. With `blend`, mixes a strided temporal conv
    /// with average pooling through the AlphaBlender.
    TemporalDown { name: String, channels: usize, blend: bool },
    /// Doubles the frame count by repetition. With `blend`, mixes a temporal
    /// conv of the repeated frames with the repeated frames themselves.
    TemporalUp { name: String, channels: usize, blend: bool },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)`.
    Conv { fan_in: usize },
    Zeros,
    Ones,
    /// Uniform in `[-1, 1]`.
    Unit,
    /// Temporal conv that copies its newest input frame.
    Identity,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub encoder: Vec<Layer>,
    pub decoder: Vec<Layer>,
    /// `[K, c]` codebook for VQ.
    pub codebook: Option<[usize; 2]>,
}

pub const CODEBOOK_PARAM: &str = "quantizer.codebook";

impl Architecture {
    pub fn new(cfg: &TokenizerConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let main = if m.variant == Variant::Fully2D {
            ConvKind::Spatial2d
        } else {
            ConvKind::Full3d
        };
        let ch = m.channel_schedule();
        let stages = m.stages();
        let (ss, ts) = (m.spatial_stages(), m.temporal_stages());
        let blend = m.variant != Variant::DecoupledNoBlend;
        let resblocks = |prefix: &str, channels: usize, out: &mut Vec<Layer>| {
            for j in 0..m.blocks_per_stage {
                out.push(Layer::ResBlock {
                    name: format!("{prefix}.block{j}"),
                    channels,
                    kind: main,
                });
            }
        };

        let mut enc = vec![Layer::Conv(ConvSpec::new("encoder.conv_in", main, 3, ch[0], [1, 1, 1]))];
        for k in 0..stages {
            let prefix = format!("encoder.stage{k}");
            resblocks(&prefix, ch[k], &mut enc);
            let (sd, td) = (k < ss, k < ts);
            if m.variant == Variant::Fully3D {
                if sd || td {
                    let s = if sd { 2 } else { 1 };
                    let t = if td { 2 } else { 1 };
                    enc.push(Layer::Conv(ConvSpec::new(
                        format!("{prefix}.down"),
                        ConvKind::Full3d,
                        ch[k],
                        ch[k + 1],
                        [t, s, s],
                    )));
                }
            } else {
                if sd {
                    enc.push(Layer::Conv(ConvSpec::new(
                        format!("{prefix}.down_spatial"),
                        ConvKind::Spatial2d,
                        ch[k],
                        ch[k + 1],
                        [1, 2, 2],
                    )));
                }
                if td {
                    enc.push(Layer::TemporalDown {
                        name: format!("{prefix}.down_temporal"),
                        channels: ch[k + 1],
                        blend,
                    });
                }
            }
        }
        let bottleneck = ch[stages];
        resblocks("encoder.mid", bottleneck, &mut enc);
        enc.push(Layer::Norm {
            name: "encoder.norm_out".into(),
            channels: bottleneck,
        });
        enc.push(Layer::Silu);
        enc.push(Layer::Conv(ConvSpec::new(
            "encoder.conv_out",
            main,
            bottleneck,
            cfg.regularizer.encoder_channels(),
            [1, 1, 1],
        )));

        let mut dec = vec![Layer::Conv(ConvSpec::new(
            "decoder.conv_in",
            main,
            m.latent_channels,
            bottleneck,
            [1, 1, 1],
        ))];
        resblocks("decoder.mid", bottleneck, &mut dec);
        for k in (0..stages).rev() {
            let prefix = format!("decoder.stage{k}");
            let (sd, td) = (k < ss, k < ts);
            if m.variant == Variant::Fully3D {
                if sd || td {
                    dec.push(Layer::Upsample {
                        time: td,
                        space: sd,
                        conv: ConvSpec::new(format!("{prefix}.up"), ConvKind::Full3d, ch[k + 1], ch[k], [1, 1, 1]),
                    });
                }
            } else {
                if td {
                    dec.push(Layer::TemporalUp {
                        name: format!("{prefix}.up_temporal"),
                        channels: ch[k + 1],
                        blend,
                    });
                }
                if sd {
                    dec.push(Layer::Upsample {
                        time: false,
                        space: true,
                        conv: ConvSpec::new(
                            format!("{prefix}.up_spatial"),
                            ConvKind::Spatial2d,
                            ch[k + 1],
                            ch[k],
                            [1, 1, 1],
                        ),
                    });
                }
            }
            resblocks(&prefix, ch[k], &mut dec);
        }
        dec.push(Layer::Norm {
            name: "decoder.norm_out".into(),
            channels: ch[0],
        });
        dec.push(Layer::Silu);
        dec.push(Layer::Conv(ConvSpec::new("decoder.conv_out", main, ch[0], 3, [1, 1, 1])));

        let codebook = match &cfg.regularizer.kind {
            RegularizerKind::Vq {
                codebook_size, dim, ..
            } => Some([*codebook_size, *dim]),
            _ => None,
        };
        Ok(Self {
            encoder: enc,
            decoder: dec,
            codebook,
        })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for layer in self.encoder.iter().chain(&self.decoder) {
            layer_params(layer, &mut out);
        }
        if let Some(shape) = self.codebook {
            out.push(ParamSpec {
                name: CODEBOOK_PARAM.into(),
                shape: shape.to_vec(),
                init: Init::Unit,
            });
        }
        out
    }

    /// Multiply-accumulates of one forward pass over a single clip of
    /// `frames × H × W` (encoder plus decoder, convolutions only).
    pub fn forward_macs(&self, causal: bool, rt: usize, video: [usize; 3]) -> Result<u64> {
        let temporal = if causal {
            TemporalPadding::Causal
        } else {
            TemporalPadding::Symmetric
        };
        let frames = if causal { video[0] + rt - 1 } else { video[0] };
        let mut shape = [frames, video[1], video[2]];
        let mut macs = layers_macs(&self.encoder, temporal, &mut shape)?;
        macs += layers_macs(&self.decoder, temporal, &mut shape)?;
        Ok(macs)
    }
}

fn conv_params(spec: &ConvSpec, out: &mut Vec<ParamSpec>) {
    let init = if spec.kind == ConvKind::Temporal1d && spec.c_in == spec.c_out {
        Init::Identity
    } else {
        Init::Conv { fan_in: spec.fan_in() }
    };
    out.push(ParamSpec {
        name: format!("{}.weight", spec.name),
        shape: spec.weight_shape(),
        init,
    });
    out.push(ParamSpec {
        name: format!("{}.bias", spec.name),
        shape: vec![spec.c_out],
        init: Init::Zeros,
    });
}

fn norm_params(name: &str, channels: usize, out: &mut Vec<ParamSpec>) {
    out.push(ParamSpec {
        name: format!("{name}.scale"),
        shape: vec![channels],
        init: Init::Ones,
    });
    out.push(ParamSpec {
        name: format!("{name}.shift"),
        shape: vec![channels],
        init: Init::Zeros,
    });
}

pub(crate) fn resblock_convs(name: &str, channels: usize, kind: ConvKind) -> [ConvSpec; 2] {
    [
        ConvSpec::new(format!("{name}.conv1"), kind, channels, channels, [1, 1, 1]),
        ConvSpec::new(format!("{name}.conv2"), kind, channels, channels, [1, 1, 1]),
    ]
}

pub(crate) fn temporal_conv(name: &str, channels: usize, stride: usize) -> ConvSpec {
    ConvSpec::new(format!("{name}.conv"), ConvKind::Temporal1d, channels, channels, [stride, 1, 1])
}

fn layer_params(layer: &Layer, out: &mut Vec<ParamSpec>) {
    match layer {
        Layer::Conv(spec) | Layer::Upsample { conv: spec, .. } => conv_params(spec, out),
        Layer::Norm { name, channels } => norm_params(name, *channels, out),
        Layer::Silu => {}
        Layer::ResBlock { name, channels, kind } => {
            let [c1, c2] = resblock_convs(name, *channels, *kind);
            norm_params(&format!("{name}.norm1"), *channels, out);
            conv_params(&c1, out);
            norm_params(&format!("{name}.norm2"), *channels, out);
            conv_params(&c2, out);
        }
        Layer::TemporalDown { name, channels, blend } => {
            if *blend {
                conv_params(&temporal_conv(name, *channels, 2), out);
            }
        }
        Layer::TemporalUp { name, channels, blend } => {
            if *blend {
                conv_params(&temporal_conv(name, *channels, 1), out);
            }
        }
    }
}

fn conv_macs(spec: &ConvSpec, temporal: TemporalPadding, shape: &mut [usize; 3]) -> Result<u64> {
    let g = spec.geometry(temporal);
    let out = g.output_extent(*shape)?;
    *shape = out;
    Ok((spec.c_out * spec.c_in * g.kernel_volume() * out.iter().product::<usize>()) as u64)
}

fn layers_macs(layers: &[Layer], temporal: TemporalPadding, shape: &mut [usize; 3]) -> Result<u64> {
    let mut macs = 0;
    for layer in layers {
        macs += match layer {
            Layer::Conv(spec) => conv_macs(spec, temporal, shape)?,
            Layer::Norm { .. } | Layer::Silu => 0,
            Layer::ResBlock { name, channels, kind } => {
                let [c1, c2] = resblock_convs(name, *channels, *kind);
                conv_macs(&c1, temporal, shape)? + conv_macs(&c2, temporal, shape)?
            }
            Layer::Upsample { time, space, conv } => {
                if *time {
                    shape[0] *= 2;
                }
                if *space {
                    shape[1] *= 2;
                    shape[2] *= 2;
                }
                conv_macs(conv, temporal, shape)?
            }
            Layer::TemporalDown { name, channels, blend } => {
                let m = if *blend {
                    let mut s = *shape;
                    conv_macs(&temporal_conv(name, *channels, 2), temporal, &mut s)?
                } else {
                    0
                };
                shape[0] /= 2;
                m
            }
            Layer::TemporalUp { name, channels, blend } => {
                shape[0] *= 2;
                if *blend {
                    conv_macs(&temporal_conv(name, *channels, 1), temporal, shape)?
                } else {
                    0
                }
            }
        };
    }
    Ok(macs)
}

/// Total number of scalar parameters, including biases, norm affines and
/// any VQ codebook.
pub fn count_params(cfg: &TokenizerConfig) -> Result<u64> {
    let arch = Architecture::new(cfg)?;
    Ok(arch
        .param_specs()
        .iter()
        .map(|p| p.shape.iter().product::<usize>() as u64)
        .sum())
}

/// FLOPs (`2 ×` multiply-accumulates of every convolution) of one
/// encode + decode pass over a clip of `frames × H × W`.
pub fn count_flops(cfg: &TokenizerConfig, video: [usize; 3]) -> Result<u64> {
    cfg.model.latent_dims(video[0], video[1], video[2])?;
    let arch = Architecture::new(cfg)?;
    Ok(2 * arch.forward_macs(cfg.model.causal, cfg.model.temporal_ratio, video)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::config::ModelConfig;
    use crate::quantize::RegularizerConfig;

    fn cfg(variant: Variant) -> TokenizerConfig {
        TokenizerConfig::new(
            ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            RegularizerConfig::kl(4),
        )
    }

    #[test]
    fn single_conv_parameter_count() {
        let spec = ConvSpec::new("c", ConvKind::Full3d, 1, 1, [1, 1, 1]);
        assert_eq!(spec.weight_shape().iter().product::<usize>(), 27);
    }

    #[test]
    fn variant_orderings_at_desk_config() {
        let video = [17, 64, 64];
        let f = |v| count_flops(&cfg(v), video).unwrap();
        let p = |v| count_params(&cfg(v)).unwrap();
        assert!(f(Variant::Fully3D) > f(Variant::DecoupledBlend));
        assert!(f(Variant::DecoupledBlend) > f(Variant::DecoupledNoBlend));
        assert!(p(Variant::DecoupledNoBlend) < p(Variant::DecoupledBlend));
        assert!(p(Variant::Fully3D) > p(Variant::DecoupledBlend));
    }

    #[test]
    fn vq_adds_codebook() {
        let mut c = cfg(Variant::DecoupledBlend);
        c.regularizer = RegularizerConfig::vq(16, 4);
        let arch = Architecture::new(&c).unwrap();
        let cb = arch.param_specs().into_iter().find(|p| p.name == CODEBOOK_PARAM).unwrap();
        assert_eq!(cb.shape, vec![16, 4]);
        assert_eq!(cb.init, Init::Unit);
    }

    #[test]
    fn kl_doubles_encoder_output() {
        let arch = Architecture::new(&cfg(Variant::DecoupledBlend)).unwrap();
        let Some(Layer::Conv(spec)) = arch.encoder.last() else {
            panic!("encoder must end in a conv")
        };
        assert_eq!(spec.c_out, 8);
    }
}
