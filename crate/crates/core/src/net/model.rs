use super::arch::{resblock_convs, temporal_conv, Architecture, ConvKind, ConvSpec, Layer, CODEBOOK_PARAM};
use super::config::TokenizerConfig;
use super::params::{Bound, ParamStore};
use super::video::{from_batch, to_batch, LatentTensor, VideoTensor};
use crate::error::{Error, Result};
use crate::quantize::{
    regularize, FsqLevels, Mode, QuantizeResult, RegularizerKind, TokenGrid,
};
use crate::tensor::{sigmoid, Real, Tape, TemporalPadding, Tensor, Var};

/// The fixed AlphaBlender weight, `sigmoid(0.2)`.
pub fn alpha() -> f64 {
    sigmoid(0.2)
}

/// `α·x1 + (1 - α)·x2`.
pub fn alpha_blend<T: Real>(tape: &mut Tape<T>, x1: Var, x2: Var, alpha: f64) -> Result<Var> {
    if tape.shape(x1) != tape.shape(x2) {
        return Err(Error::shape(
            "alpha_blend",
            format!("{:?} vs {:?}", tape.shape(x1), tape.shape(x2)),
        ));
    }
    let a = tape.scale(x1, T::of(alpha))?;
    let b = tape.scale(x2, T::of(1.0 - alpha))?;
    tape.add(a, b)
}

/// Graph nodes produced by one training forward pass.
#[derive(Debug)]
pub struct Forward {
    /// Encoder output before regularization, `[B, encoder_channels, n, h, w]`.
    pub latent: Var,
    pub quant: QuantizeResult,
    /// Unclamped reconstruction, `[B, 3, F, H, W]`.
    pub reconstruction: Var,
}

/// Regularized latent of a single clip plus its tokens, if discrete.
#[derive(Clone, Debug)]
pub struct Encoded<T> {
    pub latent: LatentTensor<T>,
    pub tokens: Option<TokenGrid>,
}

/// Encoder, regularizer and decoder with their parameters.
#[derive(Clone, Debug)]
pub struct Tokenizer<T> {
    config: TokenizerConfig,
    arch: Architecture,
    params: ParamStore<T>,
}

impl<T: Real> Tokenizer<T> {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let params = ParamStore::init(&arch.param_specs(), seed);
        Ok(Self { config, arch, params })
    }

    pub fn from_params(config: TokenizerConfig, params: ParamStore<T>) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        params.check(&arch.param_specs())?;
        Ok(Self { config, arch, params })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    fn temporal(&self) -> TemporalPadding {
        if self.config.model.causal {
            TemporalPadding::Causal
        } else {
            TemporalPadding::Symmetric
        }
    }

    /// `[B, 3, F, H, W]` video to the pre-regularization latent.
    pub fn encode_graph(&self, tape: &mut Tape<T>, p: &Bound, video: Var) -> Result<Var> {
        let s = tape.shape(video).to_vec();
        if s.len() != 5 || s[1] != 3 {
            return Err(Error::shape("encode", format!("expected [B, 3, F, H, W], got {s:?}")));
        }
        let m = &self.config.model;
        m.latent_dims(s[2], s[3], s[4])?;
        let x = if m.causal {
            tape.pad_first_frame(video, m.temporal_ratio - 1)?
        } else {
            video
        };
        self.run(tape, p, &self.arch.encoder, x)
    }

    /// `[B, c, n, h, w]` latent to the unclamped reconstruction.
    pub fn decode_graph(&self, tape: &mut Tape<T>, p: &Bound, latent: Var) -> Result<Var> {
        let s = tape.shape(latent).to_vec();
        let m = &self.config.model;
        if s.len() != 5 || s[1] != m.latent_channels {
            return Err(Error::shape(
                "decode",
                format!("expected [B, {}, n, h, w], got {s:?}", m.latent_channels),
            ));
        }
        m.video_dims(s[2], s[3], s[4])?;
        let y = self.run(tape, p, &self.arch.decoder, latent)?;
        if m.causal && m.temporal_ratio > 1 {
            let t = tape.shape(y)[2];
            let drop = m.temporal_ratio - 1;
            tape.slice_axis(y, 2, drop, t - drop)
        } else {
            Ok(y)
        }
    }

    /// Encode, regularize, decode.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, video: Var, mode: Mode) -> Result<Forward> {
        let latent = self.encode_graph(tape, p, video)?;
        let codebook = match self.arch.codebook {
            Some(_) => Some(p.get(CODEBOOK_PARAM)?),
            None => None,
        };
        let quant = regularize(tape, latent, &self.config.regularizer, codebook, mode)?;
        let reconstruction = self.decode_graph(tape, p, quant.quantized)?;
        Ok(Forward {
            latent,
            quant,
            reconstruction,
        })
    }

    fn frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.params.bind(tape, |_| false)
    }

    /// Pre-regularization latent of one clip (`2c` channels for KL).
    pub fn encode(&self, video: &VideoTensor<T>) -> Result<LatentTensor<T>> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let x = tape.constant(to_batch(&[video.tensor()])?);
        let z = self.encode_graph(&mut tape, &p, x)?;
        single(tape.value(z)).and_then(LatentTensor::new)
    }

    /// Encodes and regularizes one clip in evaluation mode.
    pub fn tokenize(&self, video: &VideoTensor<T>) -> Result<Encoded<T>> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let x = tape.constant(to_batch(&[video.tensor()])?);
        let z = self.encode_graph(&mut tape, &p, x)?;
        let codebook = self.arch.codebook.map(|_| p.get(CODEBOOK_PARAM)).transpose()?;
        let q = regularize(&mut tape, z, &self.config.regularizer, codebook, Mode::Eval)?;
        Ok(Encoded {
            latent: LatentTensor::new(single(tape.value(q.quantized))?)?,
            tokens: q.indices.into_iter().next(),
        })
    }

    /// Decodes one latent clip, clamping to `[-1, 1]`.
    pub fn decode(&self, latent: &LatentTensor<T>) -> Result<VideoTensor<T>> {
        let mut tape = Tape::new();
        let p = self.frozen(&mut tape);
        let z = tape.constant(to_batch(&[latent.tensor()])?);
        let y = self.decode_graph(&mut tape, &p, z)?;
        Ok(VideoTensor::new(single(tape.value(y))?)?.clamp_unit())
    }

    /// Evaluation-mode round trip of one clip.
    pub fn reconstruct(&self, video: &VideoTensor<T>) -> Result<VideoTensor<T>> {
        self.decode(&self.tokenize(video)?.latent)
    }

    /// Rebuilds the quantized latent from token indices.
    pub fn latent_from_tokens(&self, grid: &TokenGrid) -> Result<LatentTensor<T>> {
        let cfg = &self.config.regularizer;
        let c = cfg.latent_channels();
        let expected = cfg
            .codebook_size()
            .ok_or_else(|| Error::Regularizer("continuous latents have no tokens".into()))?;
        if grid.codebook_size() != expected {
            return Err(Error::Regularizer(format!(
                "token grid for a {}-entry codebook, model has {expected}",
                grid.codebook_size()
            )));
        }
        let [n, h, w] = grid.dims();
        let plane = h * w;
        let mut data = vec![T::zero(); n * c * plane];
        let codebook = match &cfg.kind {
            RegularizerKind::Vq { .. } => Some(self.params.get(CODEBOOK_PARAM)?.data()),
            _ => None,
        };
        let fsq = match &cfg.kind {
            RegularizerKind::Fsq { levels } => Some(FsqLevels::new(levels.clone())?),
            _ => None,
        };
        for (pos, &index) in grid.indices().iter().enumerate() {
            let (t, s) = (pos / plane, pos % plane);
            let vector: Vec<T> = match (&cfg.kind, &fsq, codebook) {
                (RegularizerKind::Fsq { .. }, Some(f), _) => f.values_of(index)?.into_iter().map(T::of).collect(),
                (RegularizerKind::Lfq { bits }, _, _) => (0..*bits)
                    .map(|i| if index >> i & 1 == 1 { T::one() } else { -T::one() })
                    .collect(),
                (RegularizerKind::Vq { .. }, _, Some(cb)) => {
                    let k = index as usize;
                    cb[k * c..(k + 1) * c].to_vec()
                }
                _ => unreachable!("continuous configs rejected above"),
            };
            for (ch, v) in vector.into_iter().enumerate() {
                data[(t * c + ch) * plane + s] = v;
            }
        }
        LatentTensor::new(Tensor::new(vec![n, c, h, w], data)?)
    }
}

fn single<T: Real>(batch: &Tensor<T>) -> Result<Tensor<T>> {
    from_batch(batch)?
        .into_iter()
        .next()
        .ok_or(Error::Empty("batch"))
}

impl<T: Real> Tokenizer<T> {
    fn conv(&self, tape: &mut Tape<T>, p: &Bound, spec: &ConvSpec, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.weight", spec.name))?;
        let b = Some(p.get(&format!("{}.bias", spec.name))?);
        let [st, sh, sw] = spec.stride;
        match spec.kind {
            ConvKind::Full3d => tape.conv3d(x, w, b, spec.stride, self.temporal()),
            ConvKind::Spatial2d => tape.conv2d(x, w, b, [sh, sw]),
            ConvKind::Temporal1d => tape.conv1d_temporal(x, w, b, st, self.temporal()),
        }
    }

    fn norm(&self, tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let scale = p.get(&format!("{name}.scale"))?;
        let shift = p.get(&format!("{name}.shift"))?;
        tape.layer_norm(x, scale, shift, &[1])
    }

    fn run(&self, tape: &mut Tape<T>, p: &Bound, layers: &[Layer], mut x: Var) -> Result<Var> {
        let causal = self.config.model.causal;
        for layer in layers {
            x = match layer {
                Layer::Conv(spec) => self.conv(tape, p, spec, x)?,
                Layer::Norm { name, .. } => self.norm(tape, p, name, x)?,
                Layer::Silu => tape.silu(x)?,
                Layer::ResBlock { name, channels, kind } => {
                    let [c1, c2] = resblock_convs(name, *channels, *kind);
                    let h = self.norm(tape, p, &format!("{name}.norm1"), x)?;
                    let h = tape.silu(h)?;
                    let h = self.conv(tape, p, &c1, h)?;
                    let h = self.norm(tape, p, &format!("{name}.norm2"), h)?;
                    let h = tape.silu(h)?;
                    let h = self.conv(tape, p, &c2, h)?;
                    tape.add(x, h)?
                }
                Layer::Upsample { time, space, conv } => {
                    let mut h = x;
                    if *time {
                        h = tape.repeat_time(h, 2)?;
                    }
                    if *space {
                        h = tape.repeat_space(h, 2)?;
                    }
                    self.conv(tape, p, conv, h)?
                }
                Layer::TemporalDown { name, channels, blend } => {
                    let pooled = tape.avg_pool_time(x, 2, 2, causal)?;
                    if *blend {
                        let c = self.conv(tape, p, &temporal_conv(name, *channels, 2), x)?;
                        alpha_blend(tape, c, pooled, alpha())?
                    } else {
                        pooled
                    }
                }
                Layer::TemporalUp { name, channels, blend } => {
                    let rep = tape.repeat_time(x, 2)?;
                    if *blend {
                        let c = self.conv(tape, p, &temporal_conv(name, *channels, 1), rep)?;
                        alpha_blend(tape, c, rep, alpha())?
                    } else {
                        rep
                    }
                }
            };
        }
        Ok(x)
    }
}
