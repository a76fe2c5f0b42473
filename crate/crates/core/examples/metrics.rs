//! PSNR and SSIM under increasing noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vtok::metrics::{psnr, ssim, MetricReport};
use vtok::net::VideoTensor;
use vtok::tensor::Tensor;
use vtok::train::{synth_batch, SynthConfig};

fn main() -> vtok::Result<()> {
    let clip = synth_batch(&SynthConfig {
        batch: 1,
        clip_length: 1,
        ..SynthConfig::default()
    })?
    .remove(0);
    let frame: Vec<f64> = clip.frame(0).iter().map(|&v| (v as f64 + 1.0) / 2.0).collect();
    let a = Tensor::new(vec![3, 64, 64], frame)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    println!("{:>6} {:>9} {:>7}", "sigma", "PSNR", "SSIM");
    for sigma in [0.0, 0.01, 0.03, 0.1, 0.3] {
        let b = match Normal::new(0.0, sigma) {
            Ok(n) if sigma > 0.0 => {
                let noisy = a.data().iter().map(|&v| (v + n.sample(&mut rng)).clamp(0.0, 1.0)).collect();
                Tensor::new(vec![3, 64, 64], noisy)?
            }
            _ => a.clone(),
        };
        println!("{sigma:>6} {:>9.3} {:>7.4}", psnr(a.data(), b.data(), 1.0)?, ssim(&a, &b)?);
    }

    let shifted = VideoTensor::new(clip.tensor().map(|v| (v + 0.2).min(1.0)))?;
    print!("{}", MetricReport::evaluate(&clip, &shifted)?.to_table());
    Ok(())
}
