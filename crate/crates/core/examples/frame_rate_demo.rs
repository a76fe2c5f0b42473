//! Motion between sampled frames grows as the sample rate drops: the same
//! scenes at 24, 8 and 3 fps, and how a small tokenizer trained at 8 fps
//! reconstructs each.
//!
//! `cargo run --release --example frame_rate_demo -- 150`

use vtok::metrics::MetricReport;
use vtok::net::{ModelConfig, Tokenizer, TokenizerConfig, VideoTensor};
use vtok::quantize::RegularizerConfig;
use vtok::train::{run_stage, synth_batch, trajectories, Start, SynthConfig, TrainConfig};

fn frame_change(v: &VideoTensor<f32>) -> f64 {
    let mut total = 0.0;
    for t in 1..v.frames() {
        total += v.frame(t).iter().zip(v.frame(t - 1)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>()
            / v.frame(t).len() as f64;
    }
    total / (v.frames() - 1) as f64
}

fn main() -> vtok::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let base = SynthConfig {
        height: 16,
        width: 16,
        clip_length: 5,
        speed: (0.3, 0.6),
        seed: 1,
        ..SynthConfig::default()
    };
    let cfg = TokenizerConfig::new(
        ModelConfig {
            temporal_ratio: 4,
            spatial_ratio: 4,
            latent_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            ..ModelConfig::default()
        },
        RegularizerConfig::fsq(&[5, 5, 5]),
    );
    let trained = run_stage(Start::Fresh(cfg), &base, &TrainConfig {
        steps,
        ..TrainConfig::default()
    })?;
    let tok: Tokenizer<f32> = trained.checkpoint.into_tokenizer()?;

    println!("{:>4} {:>12} {:>12} {:>9} {:>7}", "fps", "px/frame", "mean |dX|", "PSNR", "SSIM");
    for fps in [24, 8, 3] {
        let data = SynthConfig {
            sample_fps: fps,
            batch: 16,
            seed: 500,
            ..base.clone()
        };
        let clips = synth_batch(&data)?;
        let paths = trajectories(&data)?;
        let mut step_len = Vec::new();
        for clip in &paths {
            for w in clip.windows(2) {
                for (a, b) in w[0].iter().zip(&w[1]) {
                    step_len.push(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                }
            }
        }
        let (mut psnr, mut ssim, mut change) = (0.0, 0.0, 0.0);
        for c in &clips {
            let r = MetricReport::evaluate(c, &tok.reconstruct(c)?)?;
            psnr += r.psnr;
            ssim += r.ssim;
            change += frame_change(c);
        }
        let n = clips.len() as f64;
        println!(
            "{fps:>4} {:>12.2} {:>12.4} {:>9.2} {:>7.4}",
            step_len.iter().sum::<f64>() / step_len.len() as f64,
            change / n,
            psnr / n,
            ssim / n
        );
    }
    Ok(())
}
