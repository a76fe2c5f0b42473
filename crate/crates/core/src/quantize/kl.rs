//! Diagonal-Gaussian (KL) regularization for continuous latents.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{CodeUsage, Mode, QuantizeResult, RegTerms, RegularizerConfig, RegularizerKind};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Splits `[B, 2c, ...]` into mean and log-variance halves.
///
/// Training samples `μ + exp(logvar / 2) · ε` with `ε ~ N(0, 1)` drawn from
/// `noise_seed`; evaluation returns `μ`. The KL divergence to the standard
/// normal, `0.5 · Σ(μ² + exp(logvar) - 1 - logvar)`, is summed per clip and
/// averaged over the batch; `reg_loss` is that times `kl_weight`.
pub fn kl_regularize<T: Real>(
    tape: &mut Tape<T>,
    pre_latent: Var,
    cfg: &RegularizerConfig,
    mode: Mode,
) -> Result<QuantizeResult> {
    let RegularizerKind::Kl { channels } = cfg.kind else {
        return Err(Error::Regularizer("kl_regularize needs a KL config".into()));
    };
    let shape = tape.shape(pre_latent).to_vec();
    if shape.len() != 5 {
        return Err(Error::shape("kl_regularize", format!("expected [B,C,T,H,W], got {shape:?}")));
    }
    if shape[1] % 2 != 0 {
        return Err(Error::shape("kl_regularize", format!("odd channel count {}", shape[1])));
    }
    if shape[1] != 2 * channels {
        return Err(Error::shape(
            "kl_regularize",
            format!("{} channels for a {channels}-channel KL latent", shape[1]),
        ));
    }
    let mean = tape.slice_axis(pre_latent, 1, 0, channels)?;
    let logvar = tape.slice_axis(pre_latent, 1, channels, channels)?;

    let quantized = match mode {
        Mode::Eval => mean,
        Mode::Train { noise_seed } => {
            let half = tape.scale(logvar, T::of(0.5))?;
            let std = tape.exp(half)?;
            let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
            let n = tape.value(mean).numel();
            let eps: Vec<T> = (0..n)
                .map(|_| T::of(StandardNormal.sample(&mut rng)))
                .collect();
            let eps = tape.constant(Tensor::new(tape.shape(mean).to_vec(), eps)?);
            let noise = tape.mul(std, eps)?;
            tape.add(mean, noise)?
        }
    };

    // 0.5 * (μ² + exp(logvar) - 1 - logvar)
    let m2 = tape.square(mean)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(m2, var)?;
    let b = tape.sub(a, logvar)?;
    let c = tape.add_scalar(b, -T::one())?;
    let total = tape.sum(c)?;
    let kl = tape.scale(total, T::of(0.5 / shape[0] as f64))?;
    let reg = tape.scale(kl, T::of(cfg.kl_weight))?;
    let terms = RegTerms {
        kl: tape.value(kl).item().f64(),
        ..RegTerms::default()
    };
    Ok(QuantizeResult {
        quantized,
        indices: Vec::new(),
        reg_loss: reg,
        terms,
        usage: CodeUsage::default(),
    })
}
