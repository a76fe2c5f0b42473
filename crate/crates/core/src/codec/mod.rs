//! File formats: token streams, raw 8-bit video and continuous latents.

mod tokens;

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::{Checkpoint, LatentTensor, ModelConfig, Reader, Tokenizer, VideoTensor};
use crate::tensor::{Real, Tensor};

pub use tokens::{bit_width, pack_tokens, unpack_tokens, TokenHeader};

const RAW_MAGIC: &[u8; 4] = b"RVID";
const LATENT_MAGIC: &[u8; 4] = b"VLAT";
const VERSION: u16 = 1;

/// 8-bit planar video: frame-major, then channel, then row.
///
/// ```text
/// "RVID" | version u16 | frames u32 | height u32 | width u32 | channels u8 | bit depth u8 | samples
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub samples: Vec<u8>,
}

impl RawVideo {
    /// `byte = round(255·(v + 1)/2)` after clamping to `[-1, 1]`.
    pub fn from_video<T: Real>(v: &VideoTensor<T>) -> Self {
        let [frames, channels, height, width] = v.shape();
        let samples = v
            .tensor()
            .data()
            .iter()
            .map(|x| ((x.f64().clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect();
        Self {
            frames,
            height,
            width,
            channels,
            samples,
        }
    }

    /// `v = 2·byte/255 - 1`.
    pub fn to_video<T: Real>(&self) -> Result<VideoTensor<T>> {
        let data = self.samples.iter().map(|&b| T::of(2.0 * b as f64 / 255.0 - 1.0)).collect();
        VideoTensor::new(Tensor::new(
            vec![self.frames, self.channels, self.height, self.width],
            data,
        )?)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + self.samples.len());
        out.extend_from_slice(RAW_MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        for d in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&[self.channels as u8, 8]);
        out.extend_from_slice(&self.samples);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != RAW_MAGIC {
            return Err(Error::Format("not a raw video (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported raw video version {version}")));
        }
        let frames = r.u32()? as usize;
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let channels = r.take(1)?[0] as usize;
        let depth = r.take(1)?[0];
        if depth != 8 {
            return Err(Error::Format(format!("bit depth {depth}, only 8 is supported")));
        }
        let n = frames * channels * height * width;
        let samples = r.take(n)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            frames,
            height,
            width,
            channels,
            samples,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Continuous latent container.
///
/// ```text
/// "VLAT" | version u16 | causal u8 | r_t u8 | r_s u8 | n u32 | c u32 | h u32 | w u32 | f32 data
/// ```
pub fn latent_to_bytes<T: Real>(z: &LatentTensor<T>, model: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LATENT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[model.causal as u8, model.temporal_ratio as u8, model.spatial_ratio as u8]);
    for d in z.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in z.tensor().data() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

/// Returns the latent and its `(causal, r_t, r_s)` tag.
pub fn latent_from_bytes<T: Real>(bytes: &[u8]) -> Result<(LatentTensor<T>, (bool, usize, usize))> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != LATENT_MAGIC {
        return Err(Error::Format("not a latent container (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported latent version {version}")));
    }
    let f = r.take(3)?;
    let tag = (f[0] == 1, f[1] as usize, f[2] as usize);
    let shape = (0..4).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let data = r
        .take(n * 4)?
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((LatentTensor::new(Tensor::new(shape, data)?)?, tag))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputKind {
    /// Token stream; fails for continuous checkpoints.
    Tokens,
    /// Latent container.
    Latent,
    /// Tokens when the regularizer is discrete, a latent otherwise.
    Auto,
}

/// What [`encode_file`] wrote.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoded {
    Tokens(TokenHeader),
    Latent([usize; 4]),
}

fn header_for(model: &ModelConfig, levels: Vec<u32>, dims: [usize; 3]) -> TokenHeader {
    TokenHeader {
        levels,
        dims,
        causal: model.causal,
        rt: model.temporal_ratio as u8,
        rs: model.spatial_ratio as u8,
    }
}

/// Encodes one clip to a token stream or latent container, in memory.
pub fn encode_bytes(video: &RawVideo, ckpt: &Checkpoint, kind: OutputKind) -> Result<(Vec<u8>, Encoded)> {
    let cfg = &ckpt.config;
    let discrete = cfg.regularizer.is_discrete();
    if kind == OutputKind::Tokens && !discrete {
        return Err(Error::Regularizer(
            "checkpoint has a continuous regularizer; token output needs FSQ, LFQ or VQ".into(),
        ));
    }
    let tok: Tokenizer<f32> = ckpt.clone().into_tokenizer()?;
    let v = video.to_video()?;
    let enc = tok.tokenize(&v)?;
    if discrete && kind != OutputKind::Latent {
        let grid = enc.tokens.ok_or_else(|| Error::Regularizer("no tokens produced".into()))?;
        let levels = cfg.regularizer.token_levels().expect("discrete regularizer");
        let header = header_for(&cfg.model, levels, grid.dims());
        Ok((pack_tokens(&grid, &header)?, Encoded::Tokens(header)))
    } else {
        let shape = enc.latent.shape();
        Ok((latent_to_bytes(&enc.latent, &cfg.model), Encoded::Latent(shape)))
    }
}

/// Decodes a token stream or latent container to a raw video, in memory.
pub fn decode_bytes(bytes: &[u8], ckpt: &Checkpoint) -> Result<RawVideo> {
    let cfg = &ckpt.config;
    let m = &cfg.model;
    let tok: Tokenizer<f32> = ckpt.clone().into_tokenizer()?;
    let latent = match bytes.get(..4) {
        Some(b) if b == b"VTOK" => {
            let (header, grid) = unpack_tokens(bytes)?;
            let expected = header_for(m, cfg.regularizer.token_levels().unwrap_or_default(), header.dims);
            if header != expected {
                return Err(Error::Regularizer(format!(
                    "stream was written for levels {:?} (causal={}, r_t={}, r_s={}); checkpoint expects {:?} (causal={}, r_t={}, r_s={})",
                    header.levels, header.causal, header.rt, header.rs,
                    expected.levels, expected.causal, expected.rt, expected.rs
                )));
            }
            tok.latent_from_tokens(&grid)?
        }
        Some(b) if b == LATENT_MAGIC => {
            let (z, tag) = latent_from_bytes(bytes)?;
            if tag != (m.causal, m.temporal_ratio, m.spatial_ratio) {
                return Err(Error::Regularizer(format!("latent tagged {tag:?} does not match checkpoint")));
            }
            z
        }
        _ => return Err(Error::Format("unrecognised input (expected VTOK or VLAT)".into())),
    };
    Ok(RawVideo::from_video(&tok.decode(&latent)?))
}

pub fn encode_file(
    video: impl AsRef<Path>,
    checkpoint: impl AsRef<Path>,
    out: impl AsRef<Path>,
    kind: OutputKind,
) -> Result<Encoded> {
    let raw = RawVideo::load(video)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (bytes, info) = encode_bytes(&raw, &ckpt, kind)?;
    std::fs::write(out, bytes)?;
    Ok(info)
}

pub fn decode_file(input: impl AsRef<Path>, checkpoint: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<RawVideo> {
    let bytes = std::fs::read(input)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let raw = decode_bytes(&bytes, &ckpt)?;
    raw.save(out)?;
    Ok(raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::TokenizerConfig;
    use crate::quantize::RegularizerConfig;

    fn ckpt(reg: RegularizerConfig, causal: bool) -> Checkpoint {
        let cfg = TokenizerConfig::new(
            ModelConfig {
                causal,
                temporal_ratio: 2,
                spatial_ratio: 2,
                latent_channels: reg.latent_channels(),
                base_channels: 4,
                channel_multipliers: vec![1],
                ..ModelConfig::default()
            },
            reg,
        );
        Checkpoint::from_tokenizer(&Tokenizer::<f32>::new(cfg, 0).unwrap())
    }

    fn raw(frames: usize) -> RawVideo {
        RawVideo {
            frames,
            height: 4,
            width: 4,
            channels: 3,
            samples: (0..frames * 48).map(|i| (i * 7 % 256) as u8).collect(),
        }
    }

    #[test]
    fn raw_byte_mapping() {
        let r = raw(2);
        let v: VideoTensor<f64> = r.to_video().unwrap();
        assert_eq!(v.tensor().data()[0], -1.0);
        assert_eq!(RawVideo::from_video(&v), r);
        assert_eq!(RawVideo::from_bytes(&r.to_bytes()).unwrap(), r);
        assert!(RawVideo::from_bytes(&r.to_bytes()[..30]).is_err());
    }

    #[test]
    fn token_and_latent_paths() {
        let c = ckpt(RegularizerConfig::fsq(&[8, 8, 8, 8]), true);
        let (bytes, info) = encode_bytes(&raw(5), &c, OutputKind::Auto).unwrap();
        let Encoded::Tokens(h) = info else { panic!() };
        assert_eq!(h.dims, [3, 2, 2]);
        assert_eq!(bytes.len(), 4 + 2 + 1 + 16 + 12 + 3 + 3 * 2 * 2 * 12 / 8);
        assert_eq!(decode_bytes(&bytes, &c).unwrap().frames, 5);

        let (bytes, info) = encode_bytes(&raw(5), &c, OutputKind::Latent).unwrap();
        assert_eq!(info, Encoded::Latent([3, 4, 2, 2]));
        assert_eq!(decode_bytes(&bytes, &c).unwrap().frames, 5);
    }

    #[test]
    fn continuous_checkpoint_rejects_tokens() {
        let c = ckpt(RegularizerConfig::kl(4), false);
        assert!(matches!(
            encode_bytes(&raw(4), &c, OutputKind::Tokens),
            Err(Error::Regularizer(_))
        ));
        let (_, info) = encode_bytes(&raw(4), &c, OutputKind::Auto).unwrap();
        assert_eq!(info, Encoded::Latent([2, 4, 2, 2]));
    }

    #[test]
    fn mismatched_stream_rejected() {
        let a = ckpt(RegularizerConfig::fsq(&[8, 8, 8, 8]), true);
        let b = ckpt(RegularizerConfig::fsq(&[5, 5, 5, 5]), true);
        let (bytes, _) = encode_bytes(&raw(5), &a, OutputKind::Tokens).unwrap();
        assert!(decode_bytes(&bytes, &b).is_err());
        assert!(encode_bytes(&raw(4), &a, OutputKind::Tokens).is_err());
    }
}
