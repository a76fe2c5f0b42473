//! Stage 1 trains everything at 16×16; stage 2 fine-tunes only the decoder
//! at 32×32 and leaves the latent space untouched.
//!
//! `cargo run --release --example train_two_stage -- 200 50`

use vtok::net::{ModelConfig, Tokenizer, TokenizerConfig, Variant};
use vtok::quantize::RegularizerConfig;
use vtok::train::{run_stage, smooth, synth_batch, Stage, Start, SynthConfig, TrainConfig};

fn main() -> vtok::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (s1, s2) = (args.first().copied().unwrap_or(100), args.get(1).copied().unwrap_or(20));
    let cfg = TokenizerConfig::new(
        ModelConfig {
            temporal_ratio: 4,
            spatial_ratio: 4,
            latent_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            variant: Variant::DecoupledBlend,
            ..ModelConfig::default()
        },
        RegularizerConfig::fsq(&[5, 5, 5]),
    );
    let data = SynthConfig {
        height: 16,
        width: 16,
        clip_length: 5,
        seed: 1,
        ..SynthConfig::default()
    };

    let one = run_stage(Start::Fresh(cfg), &data, &TrainConfig {
        steps: s1,
        ..TrainConfig::default()
    })?;
    let l = smooth(&one.losses(), 20);
    println!("stage 1: {s1} steps, L1 {:.3} -> {:.3}", l[0], l[l.len() - 1]);

    let hi = SynthConfig {
        height: 32,
        width: 32,
        ..data
    };
    let two = run_stage(Start::Checkpoint(one.checkpoint.clone()), &hi, &TrainConfig {
        stage: Stage::Stage2DecoderOnly,
        steps: s2,
        ..TrainConfig::default()
    })?;
    let l = smooth(&two.losses(), 10);
    println!("stage 2: {s2} steps at 32x32, L1 {:.3} -> {:.3}", l[0], l[l.len() - 1]);

    for prefix in ["encoder.", "quantizer.", "decoder."] {
        let (a, b) = (one.checkpoint.params.fingerprint(prefix), two.checkpoint.params.fingerprint(prefix));
        println!("{prefix:<11} {}… {}", &b[..16], if a == b { "unchanged" } else { "updated" });
    }
    let clip = synth_batch(&SynthConfig { batch: 1, seed: 99, ..hi })?.remove(0);
    let (t1, t2): (Tokenizer<f32>, Tokenizer<f32>) = (one.checkpoint.into_tokenizer()?, two.checkpoint.into_tokenizer()?);
    println!("tokens identical across stages: {}", t1.tokenize(&clip)?.tokens == t2.tokenize(&clip)?.tokens);
    Ok(())
}
