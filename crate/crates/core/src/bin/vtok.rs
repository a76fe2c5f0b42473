use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use vtok::codec::{decode_file, encode_file, Encoded, OutputKind, RawVideo};
use vtok::config::RunConfig;
use vtok::metrics::MetricReport;
use vtok::net::{count_flops, count_params, Checkpoint, Tokenizer, TokenizerConfig, Variant};
use vtok::quantize::RegularizerConfig;
use vtok::train::{evaluate_usage, log_csv, run_stage, synth_batch, Stage, Start};
use vtok::{Error, Result};

#[derive(Parser)]
#[command(name = "vtok", version, about = "Causal video tokenizer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Overrides applied on top of the TOML config.
#[derive(Args, Clone, Debug, Default)]
struct ModelArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// FSQ levels, comma separated; also sets the latent channel count.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<u32>>,
    #[arg(long, overrides_with = "no_causal")]
    causal: bool,
    #[arg(long = "no-causal", overrides_with = "causal")]
    no_causal: bool,
    /// Temporal compression ratio.
    #[arg(long)]
    rt: Option<usize>,
    /// Spatial compression ratio.
    #[arg(long)]
    rs: Option<usize>,
}

impl ModelArgs {
    fn run_config(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(levels) = &self.levels {
            c.model.latent_channels = levels.len();
            c.regularizer = Some(RegularizerConfig::fsq(levels));
        }
        if self.causal {
            c.model.causal = true;
        }
        if self.no_causal {
            c.model.causal = false;
        }
        if let Some(rt) = self.rt {
            c.model.temporal_ratio = rt;
        }
        if let Some(rs) = self.rs {
            c.model.spatial_ratio = rs;
        }
        if let Some(seed) = self.seed {
            c.train.seed = seed;
            c.data.seed = seed;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage and write a checkpoint.
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// 1: full model; 2: decoder only (needs --checkpoint).
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Checkpoint to start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        /// Clip side length; stage 2 defaults to twice the configured one.
        #[arg(long)]
        resolution: Option<usize>,
        /// Serial data generation.
        #[arg(long)]
        deterministic: bool,
        /// Write the loss curve as CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Raw video to token stream (or latent container for continuous models).
    Encode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Write a continuous latent container even for discrete models.
        #[arg(long, conflicts_with = "tokens")]
        latent: bool,
        /// Fail unless tokens can be written.
        #[arg(long)]
        tokens: bool,
    },
    /// Token stream or latent container to raw video.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR / SSIM between two raw videos, or of a checkpoint round trip.
    Eval {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long, required_unless_present = "checkpoint")]
        test: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        csv: bool,
    },
    /// Parameter and FLOP counts of every architecture variant.
    Info {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 17)]
        frames: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
    },
    /// Render one synthetic clip.
    Synth {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        source_fps: Option<u32>,
        #[arg(long)]
        sample_fps: Option<u32>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            model,
            stage,
            checkpoint,
            out,
            steps,
            resolution,
            deterministic,
            log,
        } => {
            let mut rc = model.run_config()?;
            rc.train.stage = if stage == 2 {
                Stage::Stage2DecoderOnly
            } else {
                Stage::Stage1Full
            };
            if let Some(s) = steps {
                rc.train.steps = s;
            }
            rc.train.deterministic |= deterministic;
            match (resolution, stage) {
                (Some(r), _) => (rc.data.height, rc.data.width) = (r, r),
                (None, 2) => (rc.data.height, rc.data.width) = (rc.data.height * 2, rc.data.width * 2),
                _ => {}
            }
            let start = match checkpoint {
                Some(p) => Start::Checkpoint(Checkpoint::load(p)?),
                None => Start::Fresh(rc.tokenizer_config()?),
            };
            let outcome = run_stage(start, &rc.data, &rc.train)?;
            for row in &outcome.log {
                println!("{}", row.to_csv());
            }
            if let Some(p) = log {
                std::fs::write(p, log_csv(&outcome.history))?;
            }
            outcome.checkpoint.save(&out)?;
            println!("wrote {}", out.display());
        }
        Command::Encode {
            checkpoint,
            input,
            output,
            latent,
            tokens,
        } => {
            let kind = match (latent, tokens) {
                (true, _) => OutputKind::Latent,
                (_, true) => OutputKind::Tokens,
                _ => OutputKind::Auto,
            };
            match encode_file(&input, &checkpoint, &output, kind)? {
                Encoded::Tokens(h) => println!(
                    "tokens {}x{}x{}, {} bits/token, {} payload bytes",
                    h.dims[0],
                    h.dims[1],
                    h.dims[2],
                    h.bits_per_token(),
                    h.payload_len()
                ),
                Encoded::Latent(s) => println!("latent {}x{}x{}x{}", s[0], s[1], s[2], s[3]),
            }
        }
        Command::Decode {
            checkpoint,
            input,
            output,
        } => {
            let raw = decode_file(&input, &checkpoint, &output)?;
            println!("{} frames {}x{}", raw.frames, raw.height, raw.width);
        }
        Command::Eval {
            reference,
            test,
            checkpoint,
            csv,
        } => {
            let reference = RawVideo::load(&reference)?.to_video::<f32>()?;
            let mut report = match (test, &checkpoint) {
                (Some(t), _) => MetricReport::evaluate(&reference, &RawVideo::load(&t)?.to_video()?)?,
                (None, Some(c)) => {
                    let tok: Tokenizer<f32> = Checkpoint::load(c)?.into_tokenizer()?;
                    let rec = RawVideo::from_video(&tok.reconstruct(&reference)?).to_video()?;
                    let mut r = MetricReport::evaluate(&reference, &rec)?;
                    if tok.config().regularizer.is_discrete() {
                        let usage = evaluate_usage(&tok, std::slice::from_ref(&reference))?;
                        r.utilization = Some(vtok::quantize::utilization_rate(&usage));
                    }
                    r
                }
                (None, None) => return Err(Error::Config("eval needs --test or --checkpoint".into())),
            };
            if let Some(c) = checkpoint {
                report.config = Some(format!("round trip through {}", c.display()));
            }
            print!("{}", if csv { report.to_csv() } else { report.to_table() });
        }
        Command::Info {
            model,
            frames,
            height,
            width,
        } => {
            let rc = model.run_config()?;
            let base = rc.tokenizer_config()?;
            println!("{:<20} {:>12} {:>16}", "variant", "params", "FLOPs");
            for v in Variant::ALL {
                let mut cfg: TokenizerConfig = base.clone();
                cfg.model.variant = v;
                let p = count_params(&cfg)?;
                let f = count_flops(&cfg, [frames, height, width])?;
                println!("{:<20} {:>12} {:>16}", v.label(), p, f);
            }
        }
        Command::Synth {
            model,
            output,
            frames,
            resolution,
            source_fps,
            sample_fps,
        } => {
            let mut data = model.run_config()?.data;
            data.batch = 1;
            if let Some(f) = frames {
                data.clip_length = f;
            }
            if let Some(r) = resolution {
                (data.height, data.width) = (r, r);
            }
            if let Some(s) = source_fps {
                data.source_fps = s;
            }
            if let Some(s) = sample_fps {
                data.sample_fps = s;
            }
            let clip = synth_batch(&data)?.remove(0);
            RawVideo::from_video(&clip).save(&output)?;
            println!("wrote {} ({} frames)", output.display(), clip.frames());
        }
    }
    Ok(())
}
