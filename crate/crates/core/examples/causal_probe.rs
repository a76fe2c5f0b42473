//! Perturbs one input frame at a time and reports which latent and output
//! frames move, for a causal and a non-causal model.

use vtok::net::{ModelConfig, Tokenizer, TokenizerConfig, VideoTensor};
use vtok::quantize::RegularizerConfig;
use vtok::tensor::Tensor;

fn changed(a: &Tensor<f32>, b: &Tensor<f32>) -> String {
    let frames = a.shape()[0];
    let per = a.numel() / frames;
    (0..frames)
        .map(|f| if a.data()[f * per..(f + 1) * per] == b.data()[f * per..(f + 1) * per] { '.' } else { '#' })
        .collect()
}

fn main() -> vtok::Result<()> {
    for causal in [true, false] {
        let frames = if causal { 9 } else { 8 };
        let cfg = TokenizerConfig::new(
            ModelConfig {
                causal,
                temporal_ratio: 4,
                spatial_ratio: 4,
                latent_channels: 2,
                base_channels: 4,
                channel_multipliers: vec![1, 2],
                ..ModelConfig::default()
            },
            RegularizerConfig::kl(2),
        );
        let tok = Tokenizer::<f32>::new(cfg, 0)?;
        let base = Tensor::from_fn(&[frames, 3, 16, 16], |i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0);
        let z0 = tok.encode(&VideoTensor::new(base.clone())?)?;
        let y0 = tok.reconstruct(&VideoTensor::new(base.clone())?)?;
        println!("{} model, {frames} frames", if causal { "causal" } else { "non-causal" });
        println!("  input  latent  output");
        for t in 0..frames {
            let mut v = base.clone();
            let plane = 3 * 16 * 16;
            v.data_mut()[t * plane..(t + 1) * plane].iter_mut().for_each(|x| *x = -*x);
            let v = VideoTensor::new(v)?;
            let z = tok.encode(&v)?;
            let y = tok.reconstruct(&v)?;
            println!(
                "  {t:>5}  {:<6}  {}",
                changed(z0.tensor(), z.tensor()),
                changed(y0.tensor(), y.tensor())
            );
        }
    }
    Ok(())
}
