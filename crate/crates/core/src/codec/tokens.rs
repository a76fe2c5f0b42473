//! Token bitstream.
//!
//! ```text
//! "VTOK" | version u16 | d u8 | d × level u32 | n u32 | h u32 | w u32
//! | causal u8 | r_t u8 | r_s u8 | payload
//! ```
//!
//! Each token is split into its per-channel digits (channel 0 least
//! significant); digit `i` takes `ceil(log2 L_i)` bits. Bits are written
//! LSB-first into consecutive bytes and the last byte is zero-padded.

use crate::error::{Error, Result};
use crate::net::Reader;
use crate::quantize::TokenGrid;

const MAGIC: &[u8; 4] = b"VTOK";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenHeader {
    /// Mixed-radix digits per token; `[K]` for a plain codebook.
    pub levels: Vec<u32>,
    pub dims: [usize; 3],
    pub causal: bool,
    pub rt: u8,
    pub rs: u8,
}

impl TokenHeader {
    pub fn codebook_size(&self) -> u64 {
        self.levels.iter().map(|&l| l as u64).product()
    }

    /// Bits per token, `Σ ceil(log2 L_i)`.
    pub fn bits_per_token(&self) -> usize {
        self.levels.iter().map(|&l| bit_width(l)).sum()
    }

    pub fn payload_len(&self) -> usize {
        let tokens: usize = self.dims.iter().product();
        (tokens * self.bits_per_token()).div_ceil(8)
    }
}

/// `ceil(log2 l)`.
pub fn bit_width(l: u32) -> usize {
    if l <= 1 {
        0
    } else {
        (32 - (l - 1).leading_zeros()) as usize
    }
}

#[derive(Default)]
struct BitWriter {
    bytes: Vec<u8>,
    bit: usize,
}

impl BitWriter {
    fn push(&mut self, value: u64, width: usize) {
        for i in 0..width {
            if self.bit % 8 == 0 {
                self.bytes.push(0);
            }
            if value >> i & 1 == 1 {
                *self.bytes.last_mut().expect("pushed above") |= 1 << (self.bit % 8);
            }
            self.bit += 1;
        }
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    bit: usize,
}

impl BitReader<'_> {
    fn read(&mut self, width: usize) -> u64 {
        let mut v = 0;
        for i in 0..width {
            let b = self.bytes[self.bit / 8] >> (self.bit % 8) & 1;
            v |= (b as u64) << i;
            self.bit += 1;
        }
        v
    }
}

/// Serializes `grid` under `header` (whose dims must match the grid).
pub fn pack_tokens(grid: &TokenGrid, header: &TokenHeader) -> Result<Vec<u8>> {
    if header.levels.is_empty() || header.levels.iter().any(|&l| l < 2) {
        return Err(Error::Format(format!("invalid levels {:?}", header.levels)));
    }
    if grid.dims() != header.dims {
        return Err(Error::shape("pack_tokens", format!("grid {:?} vs header {:?}", grid.dims(), header.dims)));
    }
    let size = header.codebook_size();
    let mut out = Vec::with_capacity(32 + header.payload_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(header.levels.len() as u8);
    for &l in &header.levels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    for d in header.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&[header.causal as u8, header.rt, header.rs]);
    let mut bits = BitWriter::default();
    for &index in grid.indices() {
        if index >= size {
            return Err(Error::IndexOutOfRange { index, size });
        }
        let mut rest = index;
        for &l in &header.levels {
            bits.push(rest % l as u64, bit_width(l));
            rest /= l as u64;
        }
    }
    out.extend_from_slice(&bits.bytes);
    Ok(out)
}

/// Parses a stream written by [`pack_tokens`]. Any mismatch in magic,
/// version, length or digit range is an error.
pub fn unpack_tokens(bytes: &[u8]) -> Result<(TokenHeader, TokenGrid)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a token stream (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported token stream version {version}")));
    }
    let d = r.take(1)?[0] as usize;
    let levels = (0..d).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    if levels.is_empty() || levels.iter().any(|&l| l < 2) {
        return Err(Error::Format(format!("invalid levels {levels:?}")));
    }
    let mut dims = [0; 3];
    for x in &mut dims {
        *x = r.u32()? as usize;
    }
    let flags = r.take(3)?;
    if flags[0] > 1 {
        return Err(Error::Format(format!("causal flag {}", flags[0])));
    }
    let header = TokenHeader {
        levels,
        dims,
        causal: flags[0] == 1,
        rt: flags[1],
        rs: flags[2],
    };
    let payload = &bytes[r.pos..];
    let tokens = dims
        .iter()
        .try_fold(1usize, |a, &b| a.checked_mul(b))
        .ok_or_else(|| Error::Format("grid too large".into()))?;
    let expected = tokens
        .checked_mul(header.bits_per_token())
        .map(|b| b.div_ceil(8))
        .ok_or_else(|| Error::Format("grid too large".into()))?;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    let mut bits = BitReader { bytes: payload, bit: 0 };
    let mut indices = Vec::with_capacity(tokens);
    for _ in 0..tokens {
        let mut index = 0u64;
        let mut radix = 1u64;
        for &l in &header.levels {
            let digit = bits.read(bit_width(l));
            if digit >= l as u64 {
                return Err(Error::Format(format!("digit {digit} exceeds level {l}")));
            }
            index += digit * radix;
            radix *= l as u64;
        }
        indices.push(index);
    }
    let total = header.bits_per_token() * tokens;
    if total % 8 != 0 && payload[payload.len() - 1] >> (total % 8) != 0 {
        return Err(Error::Format("non-zero padding bits".into()));
    }
    let grid = TokenGrid::new(dims, header.codebook_size(), indices)?;
    Ok((header, grid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(levels: Vec<u32>, dims: [usize; 3]) -> TokenHeader {
        TokenHeader {
            levels,
            dims,
            causal: true,
            rt: 4,
            rs: 8,
        }
    }

    #[test]
    fn bit_widths() {
        assert_eq!(bit_width(2), 1);
        assert_eq!(bit_width(3), 2);
        assert_eq!(bit_width(5), 3);
        assert_eq!(bit_width(8), 3);
        assert_eq!(bit_width(9), 4);
    }

    #[test]
    fn payload_of_8_to_the_4() {
        let h = header(vec![8; 4], [5, 4, 4]);
        assert_eq!(h.bits_per_token(), 12);
        assert_eq!(h.payload_len(), 120);
        let grid = TokenGrid::new([5, 4, 4], 4096, (0..80).map(|i| i * 51 % 4096).collect()).unwrap();
        let bytes = pack_tokens(&grid, &h).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 16 + 12 + 3 + 120);
        let (h2, g2) = unpack_tokens(&bytes).unwrap();
        assert_eq!((h2, g2), (h, grid));
    }

    #[test]
    fn empty_grid_is_header_only() {
        let h = header(vec![5, 5, 5], [0, 4, 4]);
        let grid = TokenGrid::new([0, 4, 4], 125, vec![]).unwrap();
        let bytes = pack_tokens(&grid, &h).unwrap();
        assert_eq!(bytes.len(), 4 + 2 + 1 + 12 + 12 + 3);
        assert_eq!(unpack_tokens(&bytes).unwrap().1, grid);
    }

    #[test]
    fn corruption_detected() {
        let h = header(vec![5, 3], [1, 1, 3]);
        let grid = TokenGrid::new([1, 1, 3], 15, vec![14, 0, 7]).unwrap();
        let bytes = pack_tokens(&grid, &h).unwrap();
        assert!(unpack_tokens(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(unpack_tokens(&extra).is_err());
        let mut magic = bytes.clone();
        magic[1] ^= 1;
        assert!(unpack_tokens(&magic).is_err());
        // first digit (3 bits) set to 7, beyond level 5
        let mut digit = bytes.clone();
        let start = bytes.len() - h.payload_len();
        digit[start] |= 0b111;
        assert!(unpack_tokens(&digit).is_err());
        let bad = TokenGrid::new([1, 1, 3], 16, vec![15, 0, 0]).unwrap();
        assert!(matches!(pack_tokens(&bad, &h), Err(Error::IndexOutOfRange { .. })));
    }
}
