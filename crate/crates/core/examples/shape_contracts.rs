//! Latent grid sizes for every causal / ratio combination, then one real
//! encode / decode on a 17×64×64 clip.

use vtok::net::{ModelConfig, Tokenizer, TokenizerConfig, VideoTensor};
use vtok::quantize::RegularizerConfig;
use vtok::tensor::Tensor;

fn main() -> vtok::Result<()> {
    println!("{:<8} {:>3} {:>3}  {:>14}  {:>14}", "mode", "rt", "rs", "17x256x256", "16x64x64");
    for causal in [true, false] {
        for rt in [2, 4, 8] {
            for rs in [4, 8, 16] {
                let m = ModelConfig {
                    causal,
                    temporal_ratio: rt,
                    spatial_ratio: rs,
                    ..ModelConfig::default()
                };
                let show = |f, h, w| match m.latent_dims(f, h, w) {
                    Ok(d) => format!("{}x{}x{}", d[0], d[1], d[2]),
                    Err(_) => "-".into(),
                };
                println!(
                    "{:<8} {rt:>3} {rs:>3}  {:>14}  {:>14}",
                    if causal { "causal" } else { "full" },
                    show(17, 256, 256),
                    show(16, 64, 64)
                );
            }
        }
    }

    let model = ModelConfig {
        base_channels: 8,
        latent_channels: 3,
        ..ModelConfig::default()
    };
    let tok = Tokenizer::<f32>::new(TokenizerConfig::new(model, RegularizerConfig::fsq(&[5, 5, 5])), 0)?;
    let clip = VideoTensor::new(Tensor::from_fn(&[17, 3, 64, 64], |i| ((i % 97) as f32 / 48.0) - 1.0))?;
    let enc = tok.tokenize(&clip)?;
    let rec = tok.decode(&enc.latent)?;
    println!("video {:?} -> latent {:?} -> video {:?}", clip.shape(), enc.latent.shape(), rec.shape());
    if let Some(t) = enc.tokens {
        println!("{} tokens from a {}-entry codebook", t.len(), t.codebook_size());
    }
    Ok(())
}
