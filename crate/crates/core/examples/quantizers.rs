//! The four latent regularizers on the same encoder output.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use vtok::quantize::{regularize, utilization_rate, CodeUsage, FsqLevels, Mode, RegularizerConfig};
use vtok::tensor::{Tape, Tensor};

fn main() -> vtok::Result<()> {
    let l = FsqLevels::new(vec![8, 5, 5, 5])?;
    let z = [0.31, -1.7, 0.0, 4.0];
    let (v, i) = l.quantize_vector(&z);
    println!("FSQ{:?} {z:?} -> {v:?} (index {i} of {})", l.levels(), l.codebook_size());
    println!("index {i} decodes to {:?}", l.values_of(i)?);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 10_000;
    let data: Vec<f64> = (0..3 * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let latent = Tensor::new(vec![1, 3, 1, 1, n], data)?;

    let mut codebook_rng = ChaCha8Rng::seed_from_u64(4);
    let codebook = Tensor::from_fn(&[125, 3], |_| StandardNormal.sample(&mut codebook_rng));
    for (name, cfg) in [
        ("fsq 5,5,5", RegularizerConfig::fsq(&[5, 5, 5])),
        ("lfq 3 bits", RegularizerConfig::lfq(3)),
        ("vq 125x3", RegularizerConfig::vq(125, 3)),
    ] {
        let mut tape = Tape::<f64>::new();
        let z = tape.leaf(latent.clone());
        let cb = matches!(cfg.kind, vtok::quantize::RegularizerKind::Vq { .. }).then(|| tape.leaf(codebook.clone()));
        let q = regularize(&mut tape, z, &cfg, cb, Mode::Eval)?;
        let mut usage = CodeUsage::new(cfg.codebook_size().unwrap_or(0) as usize);
        for g in &q.indices {
            usage.record_grid(g);
        }
        println!(
            "{name:<11} utilization {:>6.1}%  regularizer loss {:.4}",
            100.0 * utilization_rate(&usage),
            tape.value(q.reg_loss).item()
        );
    }

    let mut tape = Tape::<f64>::new();
    let mut kl_rng = ChaCha8Rng::seed_from_u64(5);
    let pre = Tensor::from_fn(&[1, 8, 1, 2, 2], |_| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut kl_rng));
    let z = tape.leaf(pre);
    let q = regularize(&mut tape, z, &RegularizerConfig::kl(4), None, Mode::Train { noise_seed: 1 })?;
    println!("kl 4ch      sampled latent {:?}, kl {:.4}", tape.shape(q.quantized), q.terms.kl);
    Ok(())
}
