//! Losses, Adam, the two training stages and synthetic training data.

mod adam;
mod synth;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{to_batch, Checkpoint, Tokenizer, TokenizerConfig, VideoTensor};
use crate::quantize::{utilization_rate, CodeUsage, Mode, RegTerms};
use crate::tensor::{Real, Tape, Tensor, Var};

pub use adam::AdamState;
pub use synth::{scenes, synth_batch, trajectories, Scene, SceneObject, Shape, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Every parameter trains.
    Stage1Full,
    /// Encoder and quantizer frozen; only the decoder trains.
    Stage2DecoderOnly,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    L1,
    Mse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub reconstruction: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub distance: Distance,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            reconstruction: 1.0,
            perceptual: 0.0,
            adversarial: 0.0,
            distance: Distance::L1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Extra parameter-name prefixes to freeze, on top of the stage's own.
    pub frozen: Vec<String>,
    pub log_every: usize,
    /// Generate batches on the training thread instead of a prefetch thread.
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Stage1Full,
            learning_rate: 1e-3,
            batch_size: 2,
            steps: 500,
            seed: 0,
            weights: LossWeights::default(),
            frozen: Vec::new(),
            log_every: 10,
            deterministic: true,
        }
    }
}

/// Parameter-name prefixes frozen in stage 2.
pub const STAGE2_FROZEN: [&str; 2] = ["encoder.", "quantizer."];

impl TrainConfig {
    pub fn is_frozen(&self, name: &str) -> bool {
        let stage = match self.stage {
            Stage::Stage1Full => &[][..],
            Stage::Stage2DecoderOnly => &STAGE2_FROZEN[..],
        };
        stage.iter().any(|p| name.starts_with(p)) || self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// A pluggable scalar loss on `(X, X̂)`.
pub trait AuxLoss<T: Real>: Send + Sync {
    fn loss(&self, tape: &mut Tape<T>, x: Var, xhat: Var) -> Result<Var>;
}

/// Stand-in for the perceptual and adversarial terms.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroLoss;

impl<T: Real> AuxLoss<T> for ZeroLoss {
    fn loss(&self, tape: &mut Tape<T>, _x: Var, _xhat: Var) -> Result<Var> {
        Ok(tape.constant(Tensor::scalar(T::zero())))
    }
}

pub struct LossHooks<T> {
    pub perceptual: Box<dyn AuxLoss<T>>,
    pub adversarial: Box<dyn AuxLoss<T>>,
}

impl<T: Real> Default for LossHooks<T> {
    fn default() -> Self {
        Self {
            perceptual: Box::new(ZeroLoss),
            adversarial: Box::new(ZeroLoss),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub reconstruction: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub regularization: f64,
}

/// `w_rec·d(X, X̂) + w_p·perceptual + w_a·adversarial + reg_loss`, where `d`
/// is the mean absolute or mean squared error.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    xhat: Var,
    reg_loss: Var,
    weights: &LossWeights,
    hooks: &LossHooks<T>,
) -> Result<LossParts> {
    if tape.shape(x) != tape.shape(xhat) {
        return Err(Error::shape(
            "total_loss",
            format!("{:?} vs {:?}", tape.shape(x), tape.shape(xhat)),
        ));
    }
    let diff = tape.sub(xhat, x)?;
    let d = match weights.distance {
        Distance::L1 => tape.abs(diff)?,
        Distance::Mse => tape.square(diff)?,
    };
    let rec = tape.mean(d)?;
    let perc = hooks.perceptual.loss(tape, x, xhat)?;
    let adv = hooks.adversarial.loss(tape, x, xhat)?;
    let mut total = tape.scale(rec, T::of(weights.reconstruction))?;
    for (term, w) in [(perc, weights.perceptual), (adv, weights.adversarial)] {
        let s = tape.scale(term, T::of(w))?;
        total = tape.add(total, s)?;
    }
    total = tape.add(total, reg_loss)?;
    let v = |tape: &Tape<T>, x: Var| tape.value(x).item().f64();
    Ok(LossParts {
        total,
        reconstruction: v(tape, rec),
        perceptual: v(tape, perc),
        adversarial: v(tape, adv),
        regularization: v(tape, reg_loss),
    })
}

/// One training-step record.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub total: f64,
    pub reconstruction: f64,
    pub regularization: f64,
    pub terms: RegTerms,
    /// Batch codebook utilization, for discrete regularizers.
    pub utilization: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str =
        "step,total,reconstruction,regularization,kl,commitment,entropy,codebook,utilization";

    pub fn to_csv(&self) -> String {
        let u = self.utilization.map(|u| u.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{u}",
            self.step,
            self.total,
            self.reconstruction,
            self.regularization,
            self.terms.kl,
            self.terms.commitment,
            self.terms.entropy,
            self.terms.codebook
        )
    }
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LogRow::CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_csv());
    }
    s
}

/// Where a stage starts from.
#[derive(Clone, Debug)]
pub enum Start {
    Fresh(TokenizerConfig),
    Checkpoint(Checkpoint),
}

#[derive(Clone, Debug)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    /// Every step's record.
    pub history: Vec<LogRow>,
    /// Every `log_every`-th record, plus the last.
    pub log: Vec<LogRow>,
}

impl StageOutput {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.reconstruction).collect()
    }
}

/// Seed of the data / noise for `step`.
fn step_seed(seed: u64, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (step as u64).wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9)
}

/// Owns a tokenizer and its optimizer state for one stage.
pub struct Trainer {
    tok: Tokenizer<f32>,
    adam: AdamState<f32>,
    cfg: TrainConfig,
    hooks: LossHooks<f32>,
    step: usize,
}

impl Trainer {
    pub fn new(start: Start, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let tok = match (start, cfg.stage) {
            (Start::Fresh(_), Stage::Stage2DecoderOnly) => return Err(Error::MissingCheckpoint),
            (Start::Fresh(c), Stage::Stage1Full) => Tokenizer::new(c, cfg.seed)?,
            (Start::Checkpoint(c), _) => c.into_tokenizer()?,
        };
        Ok(Self {
            tok,
            adam: AdamState::new(),
            cfg,
            hooks: LossHooks::default(),
            step: 0,
        })
    }

    pub fn with_hooks(mut self, hooks: LossHooks<f32>) -> Self {
        self.hooks = hooks;
        self
    }

    pub fn tokenizer(&self) -> &Tokenizer<f32> {
        &self.tok
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// One Adam step on `clips`.
    pub fn step(&mut self, clips: &[VideoTensor<f32>]) -> Result<LogRow> {
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let p = self.tok.params().bind(&mut tape, |n| !cfg.is_frozen(n));
        let tensors: Vec<&Tensor<f32>> = clips.iter().map(VideoTensor::tensor).collect();
        let x = tape.constant(to_batch(&tensors)?);
        let mode = Mode::Train {
            noise_seed: step_seed(cfg.seed, self.step),
        };
        let fwd = self.tok.forward(&mut tape, &p, x, mode)?;
        let parts = total_loss(&mut tape, x, fwd.reconstruction, fwd.quant.reg_loss, &cfg.weights, &self.hooks)?;
        let total = tape.value(parts.total).item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        tape.backward(parts.total)?;
        let grads: BTreeMap<String, Tensor<f32>> = p
            .iter()
            .filter(|(n, _)| !cfg.is_frozen(n))
            .map(|(n, v)| (n.to_string(), tape.grad(v)))
            .collect();
        self.adam
            .step(self.tok.params_mut(), &grads, cfg.learning_rate, |n| cfg.is_frozen(n))?;
        let discrete = self.tok.config().regularizer.is_discrete();
        let row = LogRow {
            step: self.step,
            total: total as f64,
            reconstruction: parts.reconstruction,
            regularization: parts.regularization,
            terms: fwd.quant.terms,
            utilization: discrete.then(|| utilization_rate(&fwd.quant.usage)),
        };
        self.step += 1;
        Ok(row)
    }

    /// Runs `cfg.steps` steps on batches drawn from `data`.
    pub fn run(mut self, data: &SynthConfig) -> Result<StageOutput> {
        let batch_size = self.cfg.batch_size;
        let batch_cfg = |step: usize| SynthConfig {
            batch: batch_size,
            seed: step_seed(data.seed, step),
            ..data.clone()
        };
        let steps = self.cfg.steps;
        let mut history = Vec::with_capacity(steps);
        if self.cfg.deterministic {
            for s in 0..steps {
                let clips = synth_batch(&batch_cfg(s))?;
                history.push(self.step(&clips)?);
            }
        } else {
            let cfgs: Vec<SynthConfig> = (0..steps).map(batch_cfg).collect();
            let (tx, rx) = mpsc::sync_channel(2);
            let producer = std::thread::spawn(move || {
                for c in cfgs {
                    if tx.send(synth_batch(&c)).is_err() {
                        break;
                    }
                }
            });
            for _ in 0..steps {
                let clips = rx.recv().map_err(|_| Error::Config("data generator stopped".into()))??;
                history.push(self.step(&clips)?);
            }
            drop(rx);
            producer.join().map_err(|_| Error::Config("data generator panicked".into()))?;
        }
        let every = self.cfg.log_every.max(1);
        let log = history
            .iter()
            .filter(|r| r.step % every == 0 || r.step + 1 == steps)
            .cloned()
            .collect();
        Ok(StageOutput {
            checkpoint: Checkpoint::from_tokenizer(&self.tok),
            history,
            log,
        })
    }
}

/// Trains one stage from `start` on synthetic clips.
///
/// Stage 2 must start from a checkpoint; its encoder and quantizer
/// parameters come out bit-identical.
pub fn run_stage(start: Start, data: &SynthConfig, cfg: &TrainConfig) -> Result<StageOutput> {
    Trainer::new(start, cfg.clone())?.run(data)
}

/// Codebook usage of `tok` over `clips`, in evaluation mode.
pub fn evaluate_usage<T: Real>(tok: &Tokenizer<T>, clips: &[VideoTensor<T>]) -> Result<CodeUsage> {
    let size = tok
        .config()
        .regularizer
        .codebook_size()
        .ok_or_else(|| Error::Regularizer("continuous latents have no codebook".into()))?;
    let mut usage = CodeUsage::new(size as usize);
    for c in clips {
        if let Some(grid) = tok.tokenize(c)?.tokens {
            usage.record_grid(&grid);
        }
    }
    Ok(usage)
}

/// Trailing moving average with window `w` (shorter at the start).
pub fn smooth(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::ModelConfig;
    use crate::quantize::RegularizerConfig;

    fn tiny() -> TokenizerConfig {
        TokenizerConfig::new(
            ModelConfig {
                temporal_ratio: 2,
                spatial_ratio: 2,
                latent_channels: 3,
                base_channels: 4,
                channel_multipliers: vec![1],
                ..ModelConfig::default()
            },
            RegularizerConfig::fsq(&[5, 5, 5]),
        )
    }

    fn data() -> SynthConfig {
        SynthConfig {
            height: 8,
            width: 8,
            clip_length: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn loss_unit_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1));
        let zero = tape.constant(Tensor::scalar(0.0));
        let hooks = LossHooks::default();
        let w = LossWeights::default();
        let same = total_loss(&mut tape, x, x, zero, &w, &hooks).unwrap().total;
        assert_eq!(tape.value(same).item(), 0.0);
        let shifted = tape.add_scalar(x, 1.0).unwrap();
        let l = total_loss(&mut tape, x, shifted, zero, &w, &hooks).unwrap();
        assert!((tape.value(l.total).item() - 1.0).abs() < 1e-12);
        let mse = LossWeights {
            distance: Distance::Mse,
            ..LossWeights::default()
        };
        let l = total_loss(&mut tape, x, shifted, zero, &mse, &hooks).unwrap();
        assert!((l.reconstruction - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stage2_needs_checkpoint() {
        let cfg = TrainConfig {
            stage: Stage::Stage2DecoderOnly,
            ..TrainConfig::default()
        };
        assert!(matches!(Trainer::new(Start::Fresh(tiny()), cfg), Err(Error::MissingCheckpoint)));
    }

    #[test]
    fn frozen_prefixes() {
        let mut cfg = TrainConfig {
            stage: Stage::Stage2DecoderOnly,
            ..TrainConfig::default()
        };
        assert!(cfg.is_frozen("encoder.conv_in.weight"));
        assert!(cfg.is_frozen("quantizer.codebook"));
        assert!(!cfg.is_frozen("decoder.conv_in.weight"));
        cfg.stage = Stage::Stage1Full;
        assert!(!cfg.is_frozen("encoder.conv_in.weight"));
        cfg.frozen.push("decoder.mid".into());
        assert!(cfg.is_frozen("decoder.mid.block0.conv1.bias"));
    }

    #[test]
    fn prefetch_matches_serial() {
        let base = TrainConfig {
            steps: 3,
            ..TrainConfig::default()
        };
        let a = run_stage(Start::Fresh(tiny()), &data(), &base).unwrap();
        let b = run_stage(
            Start::Fresh(tiny()),
            &data(),
            &TrainConfig {
                deterministic: false,
                ..base
            },
        )
        .unwrap();
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.checkpoint, b.checkpoint);
        assert!(log_csv(&a.log).starts_with(LogRow::CSV_HEADER));
        assert_eq!(a.log.len(), 1 + 1);
    }

    #[test]
    fn smoothing() {
        assert_eq!(smooth(&[1.0, 3.0, 5.0], 2), vec![1.0, 2.0, 4.0]);
    }
}
