//! Latent regularizers: KL (continuous), VQ, LFQ and FSQ.
//!
//! Discrete schemes return integer token indices plus a quantized latent
//! whose gradient flows straight through to the encoder output.

mod fsq;
mod kl;
mod lfq;
mod vq;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Var};

pub use fsq::{fsq_quantize, FsqLevels};
pub use kl::kl_regularize;
pub use lfq::{lfq_index, lfq_quantize, lfq_values};
pub use vq::{nearest_code, vq_quantize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegularizerKind {
    Kl { channels: usize },
    Vq { codebook_size: usize, dim: usize, beta: f64 },
    Lfq { bits: usize },
    Fsq { levels: Vec<u32> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    #[serde(default = "defaults::entropy_weight")]
    pub entropy_weight: f64,
    #[serde(default = "defaults::commitment_weight")]
    pub commitment_weight: f64,
    #[serde(default = "defaults::kl_weight")]
    pub kl_weight: f64,
    #[serde(default = "defaults::entropy_temperature")]
    pub entropy_temperature: f64,
}

mod defaults {
    pub fn entropy_weight() -> f64 {
        0.1
    }
    pub fn commitment_weight() -> f64 {
        0.25
    }
    pub fn kl_weight() -> f64 {
        1e-6
    }
    pub fn entropy_temperature() -> f64 {
        0.1
    }
}

/// Default commitment weight of the VQ codebook loss.
pub const DEFAULT_VQ_BETA: f64 = 0.25;

impl RegularizerConfig {
    pub fn new(kind: RegularizerKind) -> Self {
        Self {
            kind,
            entropy_weight: defaults::entropy_weight(),
            commitment_weight: defaults::commitment_weight(),
            kl_weight: defaults::kl_weight(),
            entropy_temperature: defaults::entropy_temperature(),
        }
    }

    pub fn kl(channels: usize) -> Self {
        Self::new(RegularizerKind::Kl { channels })
    }

    pub fn fsq(levels: &[u32]) -> Self {
        Self::new(RegularizerKind::Fsq {
            levels: levels.to_vec(),
        })
    }

    pub fn lfq(bits: usize) -> Self {
        Self::new(RegularizerKind::Lfq { bits })
    }

    pub fn vq(codebook_size: usize, dim: usize) -> Self {
        Self::new(RegularizerKind::Vq {
            codebook_size,
            dim,
            beta: DEFAULT_VQ_BETA,
        })
    }

    /// Named presets: `fsq-125`, `fsq-4096`, `fsq-32768`, `fsq-262144`,
    /// `lfq-262144`, `kl-4`, `kl-8`, `kl-16`.
    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "fsq-125" => Self::fsq(&[5, 5, 5]),
            "fsq-4096" => Self::fsq(&[8, 8, 8, 8]),
            "fsq-32768" => Self::fsq(&[8; 5]),
            "fsq-262144" => Self::fsq(&[8; 6]),
            "lfq-262144" => Self::lfq(18),
            "kl-4" => Self::kl(4),
            "kl-8" => Self::kl(8),
            "kl-16" => Self::kl(16),
            other => return Err(Error::Config(format!("unknown regularizer preset {other:?}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            RegularizerKind::Kl { channels } if *channels == 0 => {
                return Err(Error::Config("KL needs at least one channel".into()))
            }
            RegularizerKind::Vq {
                codebook_size, dim, ..
            } if *codebook_size == 0 || *dim == 0 => {
                return Err(Error::Config("VQ needs a non-empty codebook".into()))
            }
            RegularizerKind::Lfq { bits } if *bits == 0 || *bits > 63 => {
                return Err(Error::Config(format!("LFQ bits must be in 1..=63, got {bits}")))
            }
            RegularizerKind::Fsq { levels } => {
                FsqLevels::new(levels.clone())?;
            }
            _ => {}
        }
        if self.entropy_temperature <= 0.0 {
            return Err(Error::Config("entropy temperature must be positive".into()));
        }
        Ok(())
    }

    /// Latent channel count `c` after regularization.
    pub fn latent_channels(&self) -> usize {
        match &self.kind {
            RegularizerKind::Kl { channels } => *channels,
            RegularizerKind::Vq { dim, .. } => *dim,
            RegularizerKind::Lfq { bits } => *bits,
            RegularizerKind::Fsq { levels } => levels.len(),
        }
    }

    /// Channels the encoder must emit: mean and log-variance for KL.
    pub fn encoder_channels(&self) -> usize {
        match &self.kind {
            RegularizerKind::Kl { channels } => 2 * channels,
            _ => self.latent_channels(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        !matches!(self.kind, RegularizerKind::Kl { .. })
    }

    pub fn codebook_size(&self) -> Option<u64> {
        match &self.kind {
            RegularizerKind::Kl { .. } => None,
            RegularizerKind::Vq { codebook_size, .. } => Some(*codebook_size as u64),
            RegularizerKind::Lfq { bits } => Some(1u64 << bits),
            RegularizerKind::Fsq { levels } => Some(levels.iter().map(|&l| l as u64).product()),
        }
    }

    /// Per-channel digit radices used to serialize tokens: FSQ levels, all
    /// 2s for LFQ, a single radix `K` for VQ.
    pub fn token_levels(&self) -> Option<Vec<u32>> {
        match &self.kind {
            RegularizerKind::Kl { .. } => None,
            RegularizerKind::Vq { codebook_size, .. } => Some(vec![*codebook_size as u32]),
            RegularizerKind::Lfq { bits } => Some(vec![2; *bits]),
            RegularizerKind::Fsq { levels } => Some(levels.clone()),
        }
    }
}

/// Integer code index per latent position of one clip.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    frames: usize,
    height: usize,
    width: usize,
    codebook_size: u64,
    indices: Vec<u64>,
}

impl TokenGrid {
    pub fn new(dims: [usize; 3], codebook_size: u64, indices: Vec<u64>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if indices.len() != n {
            return Err(Error::shape(
                "TokenGrid",
                format!("{} indices for grid {dims:?}", indices.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: codebook_size,
            });
        }
        Ok(Self {
            frames: dims[0],
            height: dims[1],
            width: dims[2],
            codebook_size,
            indices,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.frames, self.height, self.width]
    }

    pub fn codebook_size(&self) -> u64 {
        self.codebook_size
    }

    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-code assignment counts accumulated over an evaluation pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CodeUsage {
    counts: Vec<u64>,
}

impl CodeUsage {
    pub fn new(codebook_size: usize) -> Self {
        Self {
            counts: vec![0; codebook_size],
        }
    }

    pub fn record(&mut self, index: u64) {
        self.counts[index as usize] += 1;
    }

    pub fn record_grid(&mut self, grid: &TokenGrid) {
        for &i in grid.indices() {
            self.record(i);
        }
    }

    pub fn merge(&mut self, other: &CodeUsage) {
        if self.counts.len() < other.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, &b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn codebook_size(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Fraction of codebook entries assigned at least once.
pub fn utilization_rate(usage: &CodeUsage) -> f64 {
    if usage.counts.is_empty() {
        return 0.0;
    }
    let used = usage.counts.iter().filter(|&&c| c > 0).count();
    used as f64 / usage.counts.len() as f64
}

/// Unweighted regularization terms, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegTerms {
    pub kl: f64,
    pub commitment: f64,
    pub entropy: f64,
    pub codebook: f64,
}

/// Output of the latent regularizer.
#[derive(Debug)]
pub struct QuantizeResult {
    /// Regularized latent `[B, c, n, h, w]` on the tape.
    pub quantized: Var,
    /// One token grid per batch element; empty for KL.
    pub indices: Vec<TokenGrid>,
    /// Weighted regularization loss (scalar on the tape).
    pub reg_loss: Var,
    pub terms: RegTerms,
    pub usage: CodeUsage,
}

/// Whether the regularizer samples (training) or acts deterministically.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train { noise_seed: u64 },
    Eval,
}

/// Applies the configured regularizer to an encoder output `z` of shape
/// `[B, encoder_channels, n, h, w]`. `codebook` must be bound for VQ.
pub fn regularize<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    cfg: &RegularizerConfig,
    codebook: Option<Var>,
    mode: Mode,
) -> Result<QuantizeResult> {
    match &cfg.kind {
        RegularizerKind::Kl { .. } => kl_regularize(tape, z, cfg, mode),
        RegularizerKind::Fsq { levels } => {
            let levels = FsqLevels::new(levels.clone())?;
            fsq_quantize(tape, z, &levels, cfg)
        }
        RegularizerKind::Lfq { .. } => lfq_quantize(tape, z, cfg),
        RegularizerKind::Vq { beta, .. } => {
            let codebook = codebook.ok_or_else(|| Error::Regularizer("VQ codebook not bound".into()))?;
            vq_quantize(tape, z, codebook, *beta)
        }
    }
}

/// Splits a flat `[B, c, n, h, w]` buffer into per-position channel vectors,
/// calling `f(batch, position, vector)`.
pub(crate) fn for_each_vector<T: Real>(
    shape: &[usize],
    data: &[T],
    mut f: impl FnMut(usize, usize, &[T]),
) {
    let (b, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let mut buf = vec![T::zero(); c];
    for bi in 0..b {
        for p in 0..plane {
            for (ch, v) in buf.iter_mut().enumerate() {
                *v = data[(bi * c + ch) * plane + p];
            }
            f(bi, p, &buf);
        }
    }
}

pub(crate) fn check_channels(op: &'static str, shape: &[usize], expected: usize) -> Result<()> {
    if shape.len() != 5 {
        return Err(Error::shape(op, format!("expected [B,C,T,H,W], got {shape:?}")));
    }
    if shape[1] != expected {
        return Err(Error::shape(
            op,
            format!("latent has {} channels, regularizer expects {expected}", shape[1]),
        ));
    }
    Ok(())
}

pub(crate) fn grids_from(shape: &[usize], codebook_size: u64, flat: Vec<u64>) -> Result<Vec<TokenGrid>> {
    let dims = [shape[2], shape[3], shape[4]];
    let plane: usize = dims.iter().product();
    flat.chunks(plane.max(1))
        .take(shape[0])
        .map(|c| TokenGrid::new(dims, codebook_size, c.to_vec()))
        .collect()
}

/// `mean((a - b)²)` on the tape.
pub(crate) fn mean_sq<T: Real>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_codebook_sizes() {
        assert_eq!(RegularizerConfig::preset("fsq-125").unwrap().codebook_size(), Some(125));
        assert_eq!(RegularizerConfig::preset("fsq-32768").unwrap().codebook_size(), Some(32_768));
        assert_eq!(RegularizerConfig::preset("fsq-262144").unwrap().codebook_size(), Some(262_144));
        assert_eq!(RegularizerConfig::preset("lfq-262144").unwrap().codebook_size(), Some(262_144));
        assert_eq!(RegularizerConfig::preset("kl-4").unwrap().codebook_size(), None);
        assert!(RegularizerConfig::preset("nope").is_err());
    }

    #[test]
    fn encoder_channels_double_for_kl() {
        assert_eq!(RegularizerConfig::kl(4).encoder_channels(), 8);
        assert_eq!(RegularizerConfig::fsq(&[8; 4]).encoder_channels(), 4);
    }

    #[test]
    fn utilization_edge_cases() {
        let mut u = CodeUsage::new(4);
        assert_eq!(utilization_rate(&u), 0.0);
        for i in 0..4 {
            u.record(i);
        }
        assert_eq!(utilization_rate(&u), 1.0);
        let mut half = CodeUsage::new(4);
        half.record(1);
        half.record(1);
        half.record(3);
        assert_eq!(utilization_rate(&half), 0.5);
        assert_eq!(utilization_rate(&CodeUsage::default()), 0.0);
    }

    #[test]
    fn token_grid_rejects_out_of_range() {
        assert!(TokenGrid::new([1, 1, 2], 4, vec![0, 4]).is_err());
        assert!(TokenGrid::new([1, 1, 2], 4, vec![0]).is_err());
        assert!(TokenGrid::new([1, 1, 2], 4, vec![3, 0]).is_ok());
    }

    #[test]
    fn config_round_trips_through_json() {
        let cfg = RegularizerConfig::vq(16, 3);
        let s = serde_json::to_string(&cfg).unwrap();
        let back: RegularizerConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(cfg, back);
    }
}
