//! Shared fixtures and independent oracles for the integration tests and the
//! acceptance runner.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use vtok::net::{
    from_batch, to_batch, ModelConfig, ParamStore, Tokenizer, TokenizerConfig, Variant, VideoTensor,
};
use vtok::quantize::{kl_regularize, Mode, RegularizerConfig};
use vtok::tensor::{Tape, TemporalPadding, Tensor, Var};
use vtok::train::{total_loss, Distance, LossHooks, LossWeights, SynthConfig, TrainConfig};
use vtok::Result;

pub const FD_EPS: f64 = 1e-4;
/// The full model has enough curvature that the `O(ε²)` truncation error of
/// central differences at `1e-4` reaches `2e-3` on some weights.
pub const COMPOSITE_EPS: f64 = 1e-5;
/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| StandardNormal.sample(&mut r))
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// `Σ y ⊙ R` for a fixed random `R`, turning any output into a scalar with
/// a generic gradient.
pub fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = normal(tape.shape(y), seed);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

type Graph = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

pub struct GradCase {
    pub name: &'static str,
    pub input: Tensor<f64>,
    pub f: Graph,
}

fn case(name: &'static str, input: Tensor<f64>, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static) -> GradCase {
    GradCase {
        name,
        input,
        f: Box::new(f),
    }
}

fn scalar_of(f: &Graph, x: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = f(&mut tape, v)?;
    let s = project(&mut tape, y, 99)?;
    Ok(tape.value(s).item())
}

/// Max relative error between the tape gradient and central differences.
pub fn check_case(c: &GradCase) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(c.input.clone());
    let y = (c.f)(&mut tape, v)?;
    let s = project(&mut tape, y, 99)?;
    tape.backward(s)?;
    let analytic = tape.grad(v);
    let mut worst: f64 = 0.0;
    let mut x = c.input.clone();
    for i in 0..x.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + FD_EPS;
        let up = scalar_of(&c.f, &x)?;
        x.data_mut()[i] = orig - FD_EPS;
        let down = scalar_of(&c.f, &x)?;
        x.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_EPS);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn input(shape: &[usize], seed: u64) -> Tensor<f64> {
    uniform(shape, -2.0, 2.0, seed)
}

const X5: [usize; 5] = [2, 3, 4, 6, 6];

/// One case per differentiable operation, and per operand where an op has
/// several.
pub fn op_cases() -> Vec<GradCase> {
    let x = || input(&X5, 1);
    let other = input(&X5, 2);
    let w3 = input(&[4, 3, 3, 3, 3], 3);
    let w2 = input(&[4, 3, 3, 3], 4);
    let w1 = input(&[3, 3, 3], 5);
    let bias = input(&[4], 6);
    let ln_scale = input(&[3], 7);
    let ln_shift = input(&[3], 8);
    let mut cases = Vec::new();

    let o = other.clone();
    cases.push(case("add", x(), move |t, v| {
        let c = t.constant(o.clone());
        t.add(v, c)
    }));
    cases.push(case("add_self", x(), |t, v| t.add(v, v)));
    let o = other.clone();
    cases.push(case("sub", x(), move |t, v| {
        let c = t.constant(o.clone());
        t.sub(c, v)
    }));
    let o = other.clone();
    cases.push(case("mul", x(), move |t, v| {
        let c = t.constant(o.clone());
        t.mul(v, c)
    }));
    cases.push(case("mul_self", x(), |t, v| t.mul(v, v)));
    cases.push(case("scale", x(), |t, v| t.scale(v, -1.7)));
    cases.push(case("add_scalar", x(), |t, v| t.add_scalar(v, 0.3)));
    cases.push(case("silu", x(), |t, v| t.silu(v)));
    cases.push(case("tanh", x(), |t, v| t.tanh(v)));
    cases.push(case("exp", x(), |t, v| t.exp(v)));
    cases.push(case("square", x(), |t, v| t.square(v)));
    cases.push(case("abs", x(), |t, v| t.abs(v)));
    cases.push(case("sum", x(), |t, v| t.sum(v)));
    cases.push(case("mean", x(), |t, v| t.mean(v)));

    for (name, stride, pad) in [
        ("conv3d_causal", [1, 1, 1], TemporalPadding::Causal),
        ("conv3d_causal_stride2", [2, 2, 2], TemporalPadding::Causal),
        ("conv3d_symmetric", [1, 1, 1], TemporalPadding::Symmetric),
        ("conv3d_symmetric_stride2", [2, 2, 2], TemporalPadding::Symmetric),
    ] {
        let (w, b) = (w3.clone(), bias.clone());
        cases.push(case(name, x(), move |t, v| {
            let w = t.constant(w.clone());
            let b = t.constant(b.clone());
            t.conv3d(v, w, Some(b), stride, pad)
        }));
    }
    let xc = x();
    cases.push(case("conv3d_weight", w3.clone(), move |t, v| {
        let x = t.constant(xc.clone());
        t.conv3d(x, v, None, [2, 1, 1], TemporalPadding::Causal)
    }));
    let (xc, w) = (x(), w3.clone());
    cases.push(case("conv3d_bias", bias.clone(), move |t, v| {
        let x = t.constant(xc.clone());
        let w = t.constant(w.clone());
        t.conv3d(x, w, Some(v), [1, 1, 1], TemporalPadding::Causal)
    }));
    let w = w2.clone();
    cases.push(case("conv2d_stride2", x(), move |t, v| {
        let w = t.constant(w.clone());
        t.conv2d(v, w, None, [2, 2])
    }));
    let xc = x();
    cases.push(case("conv2d_weight", w2.clone(), move |t, v| {
        let x = t.constant(xc.clone());
        t.conv2d(x, v, None, [1, 1])
    }));
    for (name, stride, pad) in [
        ("conv1d_causal_stride2", 2, TemporalPadding::Causal),
        ("conv1d_symmetric", 1, TemporalPadding::Symmetric),
    ] {
        let w = w1.clone();
        cases.push(case(name, x(), move |t, v| {
            let w = t.constant(w.clone());
            t.conv1d_temporal(v, w, None, stride, pad)
        }));
    }
    let xc = x();
    cases.push(case("conv1d_weight", w1.clone(), move |t, v| {
        let x = t.constant(xc.clone());
        t.conv1d_temporal(x, v, None, 1, TemporalPadding::Causal)
    }));

    let (s, h) = (ln_scale.clone(), ln_shift.clone());
    cases.push(case("layer_norm", x(), move |t, v| {
        let s = t.constant(s.clone());
        let h = t.constant(h.clone());
        t.layer_norm(v, s, h, &[1])
    }));
    let (xc, h) = (x(), ln_shift.clone());
    cases.push(case("layer_norm_scale", ln_scale.clone(), move |t, v| {
        let x = t.constant(xc.clone());
        let h = t.constant(h.clone());
        t.layer_norm(x, v, h, &[1])
    }));
    let (xc, s) = (x(), ln_scale.clone());
    cases.push(case("layer_norm_shift", ln_shift.clone(), move |t, v| {
        let x = t.constant(xc.clone());
        let s = t.constant(s.clone());
        t.layer_norm(x, s, v, &[1])
    }));
    let s = input(&[4, 6, 6], 9);
    let h = input(&[4, 6, 6], 10);
    cases.push(case("layer_norm_multi_axis", x(), move |t, v| {
        let s = t.constant(s.clone());
        let h = t.constant(h.clone());
        t.layer_norm(v, s, h, &[2, 3, 4])
    }));

    cases.push(case("scale_channels", x(), |t, v| t.scale_channels(v, &[0.5, -2.0, 1.5])));
    cases.push(case("slice_axis_time", x(), |t, v| t.slice_axis(v, 2, 1, 2)));
    cases.push(case("slice_axis_channel", x(), |t, v| t.slice_axis(v, 1, 1, 2)));
    cases.push(case("pad_first_frame", x(), |t, v| t.pad_first_frame(v, 3)));
    cases.push(case("repeat_time", x(), |t, v| t.repeat_time(v, 2)));
    cases.push(case("repeat_space", x(), |t, v| t.repeat_space(v, 2)));
    cases.push(case("avg_pool_time_causal", x(), |t, v| t.avg_pool_time(v, 3, 2, true)));
    cases.push(case("avg_pool_time", x(), |t, v| t.avg_pool_time(v, 2, 2, false)));

    let mut r = rng(11);
    let indices: Vec<usize> = (0..2 * 4 * 6 * 6).map(|_| r.random_range(0..5)).collect();
    cases.push(case("gather_rows", input(&[5, 3], 12), move |t, v| {
        t.gather_rows(v, indices.clone(), [2, 3, 4, 6, 6])
    }));

    let lattice = vec![vec![-2.0, -1.0, 0.0, 1.0, 2.0], vec![-1.5, -0.5, 0.5, 1.5], vec![-1.0, 1.0]];
    cases.push(case("entropy_penalty", input(&X5, 13), move |t, v| {
        t.entropy_penalty(v, &lattice, 0.5)
    }));

    let o = other.clone();
    cases.push(case("alpha_blend", x(), move |t, v| {
        let c = t.constant(o.clone());
        vtok::net::alpha_blend(t, v, c, vtok::net::alpha())
    }));

    for (name, distance) in [("loss_l1", Distance::L1), ("loss_mse", Distance::Mse)] {
        let target = other.clone();
        cases.push(case(name, x(), move |t, v| {
            let target = t.constant(target.clone());
            let zero = t.constant(Tensor::scalar(0.0));
            let weights = LossWeights {
                distance,
                ..LossWeights::default()
            };
            Ok(total_loss(t, target, v, zero, &weights, &LossHooks::default())?.total)
        }));
    }

    let kl = RegularizerConfig::kl(2);
    cases.push(case("kl_train", input(&[2, 4, 2, 3, 3], 14), move |t, v| {
        let q = kl_regularize(t, v, &kl, Mode::Train { noise_seed: 5 })?;
        let k = t.scale(q.reg_loss, 10.0)?;
        let s = t.sum(q.quantized)?;
        t.add(k, s)
    }));
    cases
}

/// Tiny continuous model for the composite gradient check.
pub fn composite_config(variant: Variant) -> TokenizerConfig {
    TokenizerConfig::new(
        ModelConfig {
            causal: true,
            temporal_ratio: 2,
            spatial_ratio: 2,
            latent_channels: 2,
            base_channels: 4,
            channel_multipliers: vec![1],
            blocks_per_stage: 1,
            variant,
        },
        RegularizerConfig::kl(2),
    )
}

fn composite_loss(tok: &Tokenizer<f64>, x: &Tensor<f64>, target: &Tensor<f64>) -> Result<(Tape<f64>, Var, vtok::net::Bound)> {
    let mut tape = Tape::new();
    let p = tok.params().bind(&mut tape, |_| true);
    let xv = tape.constant(x.clone());
    let fwd = tok.forward(&mut tape, &p, xv, Mode::Train { noise_seed: 3 })?;
    let t = tape.constant(target.clone());
    let weights = LossWeights {
        distance: Distance::Mse,
        ..LossWeights::default()
    };
    let loss = total_loss(&mut tape, t, fwd.reconstruction, fwd.quant.reg_loss, &weights, &LossHooks::default())?.total;
    Ok((tape, loss, p))
}

/// Max relative error over every scalar of every parameter of the full
/// encoder, regularizer and decoder; returns `(error, scalars checked)`.
pub fn composite_check(variant: Variant) -> Result<(f64, usize)> {
    let cfg = composite_config(variant);
    let mut tok = Tokenizer::<f64>::new(cfg, 21)?;
    let x = uniform(&[1, 3, 3, 4, 4], -1.0, 1.0, 22);
    let target = uniform(&[1, 3, 3, 4, 4], -1.0, 1.0, 23);
    let (mut tape, loss, p) = composite_loss(&tok, &x, &target)?;
    tape.backward(loss)?;
    let grads: Vec<(String, Tensor<f64>)> = p.iter().map(|(n, v)| (n.to_string(), tape.grad(v))).collect();
    let eval = |tok: &Tokenizer<f64>| -> Result<f64> {
        let (tape, loss, _) = composite_loss(tok, &x, &target)?;
        Ok(tape.value(loss).item())
    };
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (name, g) in &grads {
        for i in 0..g.numel() {
            let orig = tok.params().get(name)?.data()[i];
            tok.params_mut().get_mut(name)?.data_mut()[i] = orig + COMPOSITE_EPS;
            let up = eval(&tok)?;
            tok.params_mut().get_mut(name)?.data_mut()[i] = orig - COMPOSITE_EPS;
            let down = eval(&tok)?;
            tok.params_mut().get_mut(name)?.data_mut()[i] = orig;
            worst = worst.max(rel_err(g.data()[i], (up - down) / (2.0 * COMPOSITE_EPS)));
            count += 1;
        }
    }
    Ok((worst, count))
}

/// Narrow model used wherever only shapes and dataflow matter.
pub fn narrow_model(causal: bool, rt: usize, rs: usize, variant: Variant, reg: RegularizerConfig) -> TokenizerConfig {
    TokenizerConfig::new(
        ModelConfig {
            causal,
            temporal_ratio: rt,
            spatial_ratio: rs,
            latent_channels: reg.latent_channels(),
            base_channels: 4,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            variant,
        },
        reg,
    )
}

/// Encodes and decodes a random `frames × 64 × 64` clip; returns the latent
/// and reconstruction shapes next to the ones the compression arithmetic
/// predicts, as `(got, expected)`.
pub fn shape_contract(causal: bool, rt: usize, rs: usize) -> Result<([[usize; 4]; 2], [[usize; 4]; 2])> {
    let cfg = narrow_model(causal, rt, rs, Variant::DecoupledBlend, RegularizerConfig::fsq(&[5, 5, 5]));
    let frames = if causal { 16 + 1 } else { 16 };
    let tok = Tokenizer::<f32>::new(cfg, 0)?;
    let video = VideoTensor::new(uniform(&[frames, 3, 64, 64], -1.0, 1.0, 31).cast())?;
    let enc = tok.tokenize(&video)?;
    let rec = tok.decode(&enc.latent)?;
    let n = if causal { 16 / rt + 1 } else { 16 / rt };
    let expected = [[n, 3, 64 / rs, 64 / rs], [frames, 3, 64, 64]];
    Ok(([enc.latent.shape(), rec.shape()], expected))
}

/// Perturbs one frame of a causal clip and returns the first encoder latent
/// frame and the first reconstructed frame that changed, if any.
pub struct CausalProbe {
    pub frame: usize,
    pub first_latent_change: Option<usize>,
    pub first_output_change: Option<usize>,
}

fn first_changed_frame(a: &Tensor<f32>, b: &Tensor<f32>) -> Option<usize> {
    let frames = a.shape()[0];
    let per = a.numel() / frames;
    (0..frames).find(|&f| a.data()[f * per..(f + 1) * per] != b.data()[f * per..(f + 1) * per])
}

pub fn causality_probes(variant: Variant, rt: usize, count: usize, seed: u64) -> Result<Vec<CausalProbe>> {
    let cfg = narrow_model(true, rt, 4, variant, RegularizerConfig::kl(2));
    let tok = Tokenizer::<f32>::new(cfg, 7)?;
    let frames = 4 * rt + 1;
    let base = uniform(&[frames, 3, 16, 16], -1.0, 1.0, seed).cast::<f32>();
    let run = |v: &Tensor<f32>| -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let p = tok.params().bind(&mut tape, |_| false);
        let x = tape.constant(to_batch(&[v])?);
        let z = tok.encode_graph(&mut tape, &p, x)?;
        let q = vtok::quantize::regularize(&mut tape, z, &tok.config().regularizer, None, Mode::Eval)?;
        let y = tok.decode_graph(&mut tape, &p, q.quantized)?;
        let z = from_batch(tape.value(z))?.remove(0);
        let y = from_batch(tape.value(y))?.remove(0);
        Ok((z, y))
    };
    let (z0, y0) = run(&base)?;
    let mut r = rng(seed ^ 0xC0FFEE);
    let plane = 3 * 16 * 16;
    (0..count)
        .map(|_| {
            let frame = r.random_range(0..frames);
            let mut v = base.clone();
            for k in 0..plane {
                if r.random_bool(0.5) {
                    v.data_mut()[frame * plane + k] += r.random_range(-0.5f32..0.5);
                }
            }
            let (z, y) = run(&v)?;
            Ok(CausalProbe {
                frame,
                first_latent_change: first_changed_frame(&z0, &z),
                first_output_change: first_changed_frame(&y0, &y),
            })
        })
        .collect()
}

/// Matched tiny FSQ / VQ smoke models: same encoder and decoder, a
/// 125-entry codebook over 3 latent channels.
pub fn smoke_model(reg: RegularizerConfig) -> TokenizerConfig {
    TokenizerConfig::new(
        ModelConfig {
            causal: true,
            temporal_ratio: 4,
            spatial_ratio: 4,
            latent_channels: 3,
            base_channels: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_stage: 1,
            variant: Variant::DecoupledBlend,
        },
        reg,
    )
}

pub fn smoke_data(seed: u64) -> SynthConfig {
    SynthConfig {
        height: 16,
        width: 16,
        clip_length: 5,
        seed,
        ..SynthConfig::default()
    }
}

pub fn smoke_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        seed: 1,
        ..TrainConfig::default()
    }
}

/// Held-out clips for utilization: a data seed never used in training.
pub fn held_out(count: usize) -> Result<Vec<VideoTensor<f32>>> {
    vtok::train::synth_batch(&SynthConfig {
        batch: count,
        ..smoke_data(0xE7A1)
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn params_equal(a: &ParamStore<f32>, b: &ParamStore<f32>, prefix: &str) -> bool {
    let pick = |s: &ParamStore<f32>| -> Vec<(String, Vec<u32>)> {
        s.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    pick(a) == pick(b)
}

/// Independent FSQ reference for one channel: `(normalized value, digit)`.
pub fn fsq_reference(levels: u32, z: f64) -> (f64, u32) {
    let half = (levels as f64 - 1.0) / 2.0;
    let b = half * z.tanh();
    // f64::round rounds half away from zero
    let q = if levels % 2 == 1 { b.round() } else { (b - 0.5).round() + 0.5 };
    let q = q.clamp(-half, half);
    (q / half, (q + half) as u32)
}

pub fn fsq_reference_index(levels: &[u32], z: &[f64]) -> u64 {
    let mut index = 0;
    for (&l, &v) in levels.iter().zip(z).rev() {
        index = index * l as u64 + fsq_reference(l, v).1 as u64;
    }
    index
}

/// Runs a quantizer on the tape over `vectors` (each of length `c`, laid
/// out as one batch of `1 × 1 × n` positions) and returns
/// `(quantized values per vector, indices)`.
pub fn quantize_on_tape(reg: &RegularizerConfig, vectors: &[Vec<f64>], codebook: Option<&Tensor<f64>>) -> Result<(Vec<Vec<f64>>, Vec<u64>)> {
    let c = reg.latent_channels();
    let n = vectors.len();
    let mut data = vec![0.0; c * n];
    for (p, v) in vectors.iter().enumerate() {
        for ch in 0..c {
            data[ch * n + p] = v[ch];
        }
    }
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::new(vec![1, c, 1, 1, n], data)?);
    let cb = codebook.map(|t| tape.leaf(t.clone()));
    let q = vtok::quantize::regularize(&mut tape, z, reg, cb, Mode::Eval)?;
    let out = tape.value(q.quantized).data();
    let values = (0..n).map(|p| (0..c).map(|ch| out[ch * n + p]).collect()).collect();
    Ok((values, q.indices[0].indices().to_vec()))
}

pub fn normal_vectors(count: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..count)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect()
}

/// Fraction of the 125 FSQ(5,5,5) codes hit by `count` standard-normal
/// latent vectors.
pub fn fsq_normal_utilization(count: usize, seed: u64) -> Result<f64> {
    let reg = RegularizerConfig::fsq(&[5, 5, 5]);
    let (_, idx) = quantize_on_tape(&reg, &normal_vectors(count, 3, seed), None)?;
    let mut usage = vtok::quantize::CodeUsage::new(125);
    idx.iter().for_each(|&i| usage.record(i));
    Ok(vtok::quantize::utilization_rate(&usage))
}

/// Vectors on which LFQ and FSQ(2, ..., 2) disagree in value or index.
pub fn lfq_fsq_mismatches(count: usize, bits: usize, seed: u64) -> Result<usize> {
    let mut vectors = normal_vectors(count, bits, seed);
    // exact zeros exercise the sign(0) tie-break
    for v in vectors.iter_mut().step_by(7) {
        v[0] = 0.0;
    }
    let (lv, li) = quantize_on_tape(&RegularizerConfig::lfq(bits), &vectors, None)?;
    let (fv, fi) = quantize_on_tape(&RegularizerConfig::fsq(&vec![2; bits]), &vectors, None)?;
    Ok((0..count).filter(|&p| lv[p] != fv[p] || li[p] != fi[p]).count())
}

/// `(identical PSNR, identical SSIM, PSNR at a 0.1 offset, SSIM at a 0.1
/// offset)` on a random `3 × 32 × 32` frame in `[0, 0.9]`.
pub fn metric_unit_cases() -> Result<[f64; 4]> {
    use vtok::metrics::{psnr, ssim};
    let a = uniform(&[3, 32, 32], 0.0, 0.9, 61);
    let b = a.map(|v| v + 0.1);
    Ok([
        psnr(a.data(), a.data(), 1.0)?,
        ssim(&a, &a)?,
        psnr(a.data(), b.data(), 1.0)?,
        ssim(&a, &b)?,
    ])
}

/// Smallest `b` with `2^b ≥ l`.
pub fn bits_for(l: u32) -> usize {
    let mut b = 0;
    while (1u64 << b) < l as u64 {
        b += 1;
    }
    b
}

/// Runs `vtok` with `args`, returning stdout or a description of the failure.
pub fn run_cli(args: &[&str]) -> std::result::Result<String, String> {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_vtok"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "vtok {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// synth → encode → decode → eval through the CLI against `checkpoint`.
/// Returns the eval table and the size of the token file.
pub fn cli_round_trip(checkpoint: &std::path::Path, dir: &std::path::Path, resolution: usize) -> std::result::Result<(String, u64), String> {
    let p = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let ck = checkpoint.to_string_lossy().into_owned();
    let res = resolution.to_string();
    run_cli(&["synth", "--output", &p("clip.rvid"), "--frames", "5", "--resolution", &res, "--seed", "3"])?;
    run_cli(&["encode", "--checkpoint", &ck, "--input", &p("clip.rvid"), "--output", &p("clip.vtok"), "--tokens"])?;
    run_cli(&["decode", "--checkpoint", &ck, "--input", &p("clip.vtok"), "--output", &p("rec.rvid")])?;
    let table = run_cli(&["eval", "--reference", &p("clip.rvid"), "--test", &p("rec.rvid")])?;
    let size = std::fs::metadata(dir.join("clip.vtok")).map_err(|e| e.to_string())?.len();
    Ok((table, size))
}

pub struct TwoStageReport {
    pub encoder_identical: bool,
    pub quantizer_identical: bool,
    pub encode_identical: bool,
    pub decoder_changed: bool,
    pub fingerprints: [String; 2],
}

/// Runs stage 2 from `stage1` at twice the data resolution and compares
/// the two models.
pub fn two_stage(stage1: &vtok::net::Checkpoint, data: &SynthConfig, steps: usize) -> Result<TwoStageReport> {
    use vtok::train::{run_stage, Stage, Start};
    let cfg = TrainConfig {
        stage: Stage::Stage2DecoderOnly,
        ..smoke_train(steps)
    };
    let hi = SynthConfig {
        height: 2 * data.height,
        width: 2 * data.width,
        ..data.clone()
    };
    let out = run_stage(Start::Checkpoint(stage1.clone()), &hi, &cfg)?;
    let (before, after) = (&stage1.params, &out.checkpoint.params);
    let probe = vtok::train::synth_batch(&SynthConfig { batch: 1, seed: 404, ..hi })?.remove(0);
    let t0: Tokenizer<f32> = stage1.clone().into_tokenizer()?;
    let t1: Tokenizer<f32> = out.checkpoint.clone().into_tokenizer()?;
    let (e0, e1) = (t0.tokenize(&probe)?, t1.tokenize(&probe)?);
    let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    Ok(TwoStageReport {
        encoder_identical: params_equal(before, after, "encoder."),
        quantizer_identical: params_equal(before, after, "quantizer."),
        encode_identical: bits(e0.latent.tensor()) == bits(e1.latent.tensor())
            && e0.tokens == e1.tokens
            && bits(t0.encode(&probe)?.tensor()) == bits(t1.encode(&probe)?.tensor()),
        decoder_changed: !params_equal(before, after, "decoder."),
        fingerprints: [before.fingerprint("encoder."), after.fingerprint("encoder.")],
    })
}
