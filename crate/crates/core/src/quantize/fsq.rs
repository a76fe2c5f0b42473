//! Finite scalar quantization with an implicit codebook.
//!
//! Channel `i` with `L_i` levels is bounded to `half_i * tanh(z)` where
//! `half_i = (L_i - 1) / 2`, then rounded onto the lattice
//! `{-half_i, -half_i + 1, ..., half_i}` (half-integers for even `L_i`).
//! Quantized values are `q / half_i ∈ [-1, 1]` and the digit is `q + half_i`.
//! The combined index is mixed-radix with channel 0 least significant.

use super::{check_channels, grids_from, mean_sq, CodeUsage, QuantizeResult, RegTerms, RegularizerConfig};
use crate::error::{Error, Result};
use crate::tensor::{round_half_away, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FsqLevels(Vec<u32>);

impl FsqLevels {
    pub fn new(levels: Vec<u32>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Config("FSQ needs at least one channel".into()));
        }
        if let Some(&l) = levels.iter().find(|&&l| l < 2) {
            return Err(Error::Config(format!("FSQ levels must be >= 2, got {l}")));
        }
        let size = levels
            .iter()
            .try_fold(1u64, |acc, &l| acc.checked_mul(l as u64))
            .ok_or_else(|| Error::Config("FSQ codebook size overflows u64".into()))?;
        if size > 1 << 40 {
            return Err(Error::Config(format!("FSQ codebook of {size} entries is too large")));
        }
        Ok(Self(levels))
    }

    pub fn levels(&self) -> &[u32] {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.len()
    }

    /// Implicit codebook size `Π L_i`.
    pub fn codebook_size(&self) -> u64 {
        self.0.iter().map(|&l| l as u64).product()
    }

    pub fn half(&self, channel: usize) -> f64 {
        (self.0[channel] as f64 - 1.0) / 2.0
    }

    /// Rounds a bounded value `b ∈ (-half, half)` onto the lattice, returning
    /// `(q, digit)` with `q` in level units.
    pub fn round_bounded<T: Real>(&self, channel: usize, b: T) -> (T, u32) {
        let l = self.0[channel];
        let half = T::of(self.half(channel));
        let q = if l % 2 == 1 {
            round_half_away(b)
        } else {
            let h = T::of(0.5);
            round_half_away(b - h) + h
        };
        let q = q.max(-half).min(half);
        let digit = (q + half).round().to_u32().expect("digit is a small non-negative integer");
        (q, digit)
    }

    /// Quantizes one unbounded channel value: `(value in [-1,1], digit)`.
    pub fn quantize_scalar<T: Real>(&self, channel: usize, z: T) -> (T, u32) {
        let half = T::of(self.half(channel));
        let (q, digit) = self.round_bounded(channel, half * z.tanh());
        (q / half, digit)
    }

    /// Snaps an already-bounded normalized value `v ∈ [-1, 1]` onto the
    /// lattice. This is the rounding stage alone and is idempotent.
    pub fn snap<T: Real>(&self, channel: usize, v: T) -> (T, u32) {
        let half = T::of(self.half(channel));
        let (q, digit) = self.round_bounded(channel, v * half);
        (q / half, digit)
    }

    /// Quantizes a full channel vector.
    pub fn quantize_vector(&self, z: &[f64]) -> (Vec<f64>, u64) {
        let mut values = Vec::with_capacity(z.len());
        let mut digits = Vec::with_capacity(z.len());
        for (ch, &v) in z.iter().enumerate() {
            let (q, d) = self.quantize_scalar(ch, v);
            values.push(q);
            digits.push(d);
        }
        (values, self.index_of_digits(&digits))
    }

    pub fn index_of_digits(&self, digits: &[u32]) -> u64 {
        let mut index = 0u64;
        let mut radix = 1u64;
        for (&d, &l) in digits.iter().zip(&self.0) {
            index += d as u64 * radix;
            radix *= l as u64;
        }
        index
    }

    pub fn digits_of(&self, mut index: u64) -> Vec<u32> {
        self.0
            .iter()
            .map(|&l| {
                let d = (index % l as u64) as u32;
                index /= l as u64;
                d
            })
            .collect()
    }

    /// Index of a lattice vector given in normalized `[-1, 1]` units.
    pub fn index_of_values(&self, values: &[f64]) -> Result<u64> {
        if values.len() != self.0.len() {
            return Err(Error::shape("fsq index", "channel count mismatch"));
        }
        let digits: Vec<u32> = values
            .iter()
            .enumerate()
            .map(|(ch, &v)| {
                let half = self.half(ch);
                (v * half + half).round() as u32
            })
            .collect();
        Ok(self.index_of_digits(&digits))
    }

    /// Lattice vector (normalized units) for a combined index.
    pub fn values_of(&self, index: u64) -> Result<Vec<f64>> {
        if index >= self.codebook_size() {
            return Err(Error::IndexOutOfRange {
                index,
                size: self.codebook_size(),
            });
        }
        Ok(self
            .digits_of(index)
            .iter()
            .enumerate()
            .map(|(ch, &d)| {
                let half = self.half(ch);
                (d as f64 - half) / half
            })
            .collect())
    }

    /// Lattice positions `q` (level units) of every channel, for the
    /// entropy penalty's soft assignment.
    pub fn lattice(&self) -> Vec<Vec<f64>> {
        (0..self.channels())
            .map(|ch| {
                let half = self.half(ch);
                (0..self.0[ch]).map(|k| k as f64 - half).collect()
            })
            .collect()
    }
}

/// FSQ on the tape: `z` is `[B, d, n, h, w]` with `d = |levels|`.
///
/// The rounding has an identity gradient, so the gradient of the quantized
/// output equals the gradient of `tanh(z)`. `reg_loss` is
/// `entropy_weight * entropy_penalty + commitment_weight * commitment`, where
/// commitment is `mean((tanh(z) - sg(quantized))²)` and the entropy penalty
/// acts on the bounded values in level units.
pub fn fsq_quantize<T: Real>(
    tape: &mut Tape<T>,
    z: Var,
    levels: &FsqLevels,
    cfg: &RegularizerConfig,
) -> Result<QuantizeResult> {
    let shape = tape.shape(z).to_vec();
    check_channels("fsq_quantize", &shape, levels.channels())?;
    let halves: Vec<T> = (0..levels.channels()).map(|c| T::of(levels.half(c))).collect();

    let unit = tape.tanh(z)?;
    let plane: usize = shape[2..].iter().product();
    let c = shape[1];
    let uvals = tape.value(unit).data();
    let mut values = vec![T::zero(); uvals.len()];
    let mut flat = vec![0u64; shape[0] * plane];
    let mut digits = vec![0u32; c];
    for bi in 0..shape[0] {
        for p in 0..plane {
            for (ch, d) in digits.iter_mut().enumerate() {
                let k = (bi * c + ch) * plane + p;
                let (q, dig) = levels.round_bounded(ch, halves[ch] * uvals[k]);
                values[k] = q / halves[ch];
                *d = dig;
            }
            flat[bi * plane + p] = levels.index_of_digits(&digits);
        }
    }
    let quantized = tape.straight_through(unit, Tensor::new(shape.clone(), values)?)?;

    let mut usage = CodeUsage::new(levels.codebook_size() as usize);
    flat.iter().for_each(|&i| usage.record(i));
    let indices = grids_from(&shape, levels.codebook_size(), flat)?;

    let mut terms = RegTerms::default();
    let mut reg = tape.constant(Tensor::scalar(T::zero()));
    if cfg.commitment_weight != 0.0 {
        let target = tape.detach(quantized);
        let commit = mean_sq(tape, unit, target)?;
        terms.commitment = tape.value(commit).item().f64();
        let w = tape.scale(commit, T::of(cfg.commitment_weight))?;
        reg = tape.add(reg, w)?;
    }
    if cfg.entropy_weight != 0.0 {
        let bounded = tape.scale_channels(unit, &halves)?;
        let ent = tape.entropy_penalty(bounded, &levels.lattice(), cfg.entropy_temperature)?;
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
