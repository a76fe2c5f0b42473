//! Packs a token grid into a bitstream and reads it back.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtok::codec::{bit_width, pack_tokens, unpack_tokens, TokenHeader};
use vtok::quantize::TokenGrid;

fn main() -> vtok::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for levels in [vec![8u32; 4], vec![8, 5, 5, 5], vec![2; 18], vec![1000]] {
        let header = TokenHeader {
            levels: levels.clone(),
            dims: [5, 8, 8],
            causal: true,
            rt: 4,
            rs: 8,
        };
        let size = header.codebook_size();
        let grid = TokenGrid::new(header.dims, size, (0..320).map(|_| rng.random_range(0..size)).collect())?;
        let bytes = pack_tokens(&grid, &header)?;
        let (h, g) = unpack_tokens(&bytes)?;
        assert_eq!((h, g), (header.clone(), grid));
        let widths: Vec<usize> = levels.iter().map(|&l| bit_width(l)).collect();
        println!(
            "codebook {size:>7}: {} bits/token ({widths:?}), payload {} bytes, stream {} bytes",
            header.bits_per_token(),
            header.payload_len(),
            bytes.len()
        );
    }
    let mut bad = pack_tokens(&TokenGrid::new([1, 1, 1], 125, vec![7])?, &TokenHeader {
        levels: vec![5, 5, 5],
        dims: [1, 1, 1],
        causal: false,
        rt: 1,
        rs: 1,
    })?;
    bad.push(0);
    println!("stream with a trailing byte: {}", unpack_tokens(&bad).unwrap_err());
    Ok(())
}
