//! Lookup-free quantization: each channel becomes one bit.
//!
//! `sign(0)` is taken as `-1`, matching the tie-break of FSQ with two levels,
//! so LFQ and `FSQ(2, 2, ..., 2)` produce identical indices.

use super::{check_channels, grids_from, mean_sq, CodeUsage, QuantizeResult, RegTerms, RegularizerConfig, RegularizerKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// `+1` for positive inputs, `-1` otherwise.
pub fn lfq_values(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { 1.0 } else { -1.0 }).collect()
}

/// `Σ bit_i 2^i` with `bit_i = (value_i + 1) / 2`.
pub fn lfq_index(z: &[f64]) -> u64 {
    z.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| 1u64 << i)
        .sum()
}

/// LFQ on the tape. Gradient is the identity into `z`; `reg_loss` is
/// `entropy_weight * entropy_penalty(z, {-1, 1}) + commitment_weight * mean((z - sg(q))²)`.
pub fn lfq_quantize<T: Real>(tape: &mut Tape<T>, z: Var, cfg: &RegularizerConfig) -> Result<QuantizeResult> {
    let RegularizerKind::Lfq { bits } = cfg.kind else {
        return Err(Error::Regularizer("lfq_quantize needs an LFQ config".into()));
    };
    let shape = tape.shape(z).to_vec();
    check_channels("lfq_quantize", &shape, bits)?;
    let plane: usize = shape[2..].iter().product();
    let zs = tape.value(z).data();
    let values: Vec<T> = zs
        .iter()
        .map(|&v| if v > T::zero() { T::one() } else { -T::one() })
        .collect();
    let mut flat = vec![0u64; shape[0] * plane];
    for bi in 0..shape[0] {
        for ch in 0..bits {
            for p in 0..plane {
                if zs[(bi * bits + ch) * plane + p] > T::zero() {
                    flat[bi * plane + p] |= 1u64 << ch;
                }
            }
        }
    }
    let quantized = tape.straight_through(z, Tensor::new(shape.clone(), values)?)?;
    let size = 1u64 << bits;
    let mut usage = CodeUsage::new(size as usize);
    flat.iter().for_each(|&i| usage.record(i));
    let indices = grids_from(&shape, size, flat)?;

    let mut terms = RegTerms::default();
    let mut reg = tape.constant(Tensor::scalar(T::zero()));
    if cfg.commitment_weight != 0.0 {
        let target = tape.detach(quantized);
        let commit = mean_sq(tape, z, target)?;
        terms.commitment = tape.value(commit).item().f64();
        let w = tape.scale(commit, T::of(cfg.commitment_weight))?;
        reg = tape.add(reg, w)?;
    }
    if cfg.entropy_weight != 0.0 {
        let levels = vec![vec![-1.0, 1.0]; bits];
        let ent = tape.entropy_penalty(z, &levels, cfg.entropy_temperature)?;
        terms.entropy = tape.value(ent).item().f64();
        let w = tape.scale(ent, T::of(cfg.entropy_weight))?;
        reg = tape.add(reg, w)?;
    }
    Ok(QuantizeResult {
        quantized,
        indices,
        reg_loss: reg,
        terms,
        usage,
    })
}
