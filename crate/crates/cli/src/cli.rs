//! `vflow` subcommands.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vflow_core::distill::DistillTrainer;
use vflow_core::latent::Example;
use vflow_core::rng;
use vflow_core::sampler;
use vflow_core::schedules::{self, ScheduleSpec};
use vflow_core::trb::Codec;

use crate::checkpoint::{Checkpoint, Metadata, Stage};
use crate::config::RunConfig;
use crate::formats;
use crate::pipeline::{self, Generator, MetricSink};

#[derive(Parser, Debug)]
#[command(name = "vflow", version, about = "Variable-length latent flow matching: train, distill, post-train, sample")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a procedural VFL1 dataset.
    GenData(GenData),
    /// Flow-matching pre-training from scratch.
    TrainFlow(TrainFlow),
    /// One-step distillation warmup from a flow checkpoint.
    Distill(Distill),
    /// Adversarial post-training of a distilled generator.
    PostTrain(PostTrain),
    /// Text-to-latent generation.
    Sample(Sample),
    /// Regenerate parts of a reference latent.
    Inpaint(Inpaint),
    /// Fréchet distance and alignment against held-out data.
    Eval(Eval),
    /// Inference schedule utilities.
    Schedule {
        #[command(subcommand)]
        action: ScheduleAction,
    },
    /// Waveform autoencoder.
    Codec {
        #[command(subcommand)]
        action: CodecAction,
    },
    /// Print a checkpoint's stage, configuration and size.
    Inspect { ckpt: PathBuf },
}

#[derive(Args, Debug)]
pub struct ConfigArg {
    /// TOML configuration; missing keys take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenData {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Record count (overrides `data.size`).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainFlow {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct Distill {
    #[arg(long)]
    pub teacher: PathBuf,
    /// Prompts and durations for teacher rollouts.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub refresh_every: Option<usize>,
    #[arg(long)]
    pub cfg: Option<f64>,
    #[arg(long)]
    pub solver_steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct PostTrain {
    /// Distilled generator.
    #[arg(long)]
    pub gen: PathBuf,
    /// Checkpoint whose model initializes the discriminator trunk.
    #[arg(long)]
    pub disc_init: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub steps: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accept a generator not tagged `distilled`.
    #[arg(long)]
    pub allow_any_stage: bool,
    #[arg(long, default_value_t = 50)]
    pub log_every: usize,
}

#[derive(Args, Debug)]
pub struct Sample {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Space- or comma-separated token ids.
    #[arg(long)]
    pub prompt: String,
    #[arg(long)]
    pub seconds: f64,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Inpaint {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference latent file.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// `keep:a-b,gen:c-d,...` in seconds, or `causal:<prefix-seconds>`.
    #[arg(long)]
    pub mask: String,
    /// Token ids; defaults to the reference's own prompt.
    #[arg(long)]
    pub prompt: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
pub enum SamplerKind {
    PingPong,
    Euler,
}

#[derive(Args, Debug)]
pub struct Eval {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset whose records are the held-out references.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    #[arg(long, value_enum, default_value_t = SamplerKind::PingPong)]
    pub sampler: SamplerKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum ScheduleAction {
    /// Print the (λ_i, t_i) table.
    Dump {
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long, default_value_t = -6.2, allow_hyphen_values = true)]
        lambda_min: f64,
        #[arg(long, default_value_t = 2.0, allow_hyphen_values = true)]
        lambda_max: f64,
    },
}

#[derive(Subcommand, Debug)]
pub enum CodecAction {
    /// Create a codec checkpoint, optionally training it on synthetic waveforms.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Raw interleaved float32 audio → latent file.
    Encode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Latent file → raw interleaved float32 audio.
    Decode {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Parses `args` (including the program name) and runs the command,
/// writing metric records to `out`.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    execute(cli.command, out)
}

pub fn parse_tokens(text: &str) -> Result<Vec<u32>> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<u32>().with_context(|| format!("bad token id `{s}`")))
        .collect()
}

fn check_tokens(tokens: &[u32], cfg: &RunConfig) -> Result<()> {
    ensure!(!tokens.is_empty(), "prompt is empty");
    ensure!(tokens.len() <= cfg.model.text_ctx_len, "prompt has {} tokens, context holds {}", tokens.len(), cfg.model.text_ctx_len);
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= cfg.model.vocab_size) {
        bail!("token {t} outside vocabulary of {}", cfg.model.vocab_size);
    }
    Ok(())
}

fn check_data(data: &[Example], cfg: &RunConfig) -> Result<()> {
    ensure!(!data.is_empty(), "dataset is empty");
    for (i, e) in data.iter().enumerate() {
        ensure!(e.latent.channels() == cfg.model.latent_channels, "record {i} has {} channels, model expects {}", e.latent.channels(), cfg.model.latent_channels);
        ensure!(e.latent.len() <= cfg.model.max_frames, "record {i} has {} frames, model maximum is {}", e.latent.len(), cfg.model.max_frames);
        check_tokens(&e.tokens, cfg).with_context(|| format!("record {i}"))?;
    }
    Ok(())
}

fn generator_ckpt(path: &Path) -> Result<(Checkpoint, vflow_core::dit::Dit<f32>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.model()?;
    Ok((ck, model))
}

fn save_with_snapshot(ck: &Checkpoint, out: &Path) -> Result<()> {
    ck.save(out)?;
    ck.meta.config.snapshot_next_to(out)?;
    Ok(())
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let mut sink = MetricSink::new(out);
    match cmd {
        Command::GenData(a) => {
            let mut cfg = a.config.load()?;
            if let Some(n) = a.n {
                cfg.data.size = n;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            cfg.validate()?;
            let data = vflow_core::eval::generate_dataset(&mut rng::seeded(cfg.seed), &cfg.data)?;
            formats::save_dataset(&a.out, &data)?;
            cfg.snapshot_next_to(&a.out)?;
            sink.record(&[("records", data.len().to_string()), ("out", a.out.display().to_string())])?;
        }
        Command::TrainFlow(a) => {
            let mut cfg = a.config.load()?;
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let data = formats::load_dataset(&a.data)?;
            check_data(&data, &cfg)?;
            let mut r = rng::seeded(cfg.seed);
            let silence = vec![0.0; cfg.model.latent_channels];
            let mut tr = pipeline::new_flow_trainer(&cfg, &mut r, silence.clone())?;
            pipeline::run_flow(&mut tr, &data, a.steps, &mut r, a.log_every, |m| sink.record(&pipeline::flow_fields(m)))?;
            let meta = Metadata { stage: Stage::Flow, ema: true, step: tr.opt.step, config: cfg };
            save_with_snapshot(&Checkpoint::from_model(meta, &tr.ema_model(), &silence), &a.out)?;
        }
        Command::Distill(a) => {
            let (ck, teacher) = generator_ckpt(&a.teacher)?;
            ensure!(ck.meta.stage == Stage::Flow, "teacher must be a flow checkpoint, got {}", ck.meta.stage);
            let mut cfg = ck.meta.config.clone();
            if let Some(v) = a.refresh_every {
                cfg.distill.refresh_every = v;
            }
            if let Some(v) = a.cfg {
                cfg.distill.cfg_scale = v;
            }
            if let Some(v) = a.solver_steps {
                cfg.distill.solver_steps = v;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let data = formats::load_dataset(&a.data)?;
            check_data(&data, &cfg)?;
            let mut tr = DistillTrainer::new(teacher, cfg.distill.clone())?;
            let mut r = rng::seeded(cfg.seed);
            pipeline::run_distill(&mut tr, &data, a.steps, &mut r, a.log_every, |m| sink.record(&pipeline::distill_fields(m)))?;
            let meta = Metadata { stage: Stage::Distilled, ema: true, step: tr.step, config: cfg };
            save_with_snapshot(&Checkpoint::from_model(meta, &tr.ema_student(), &ck.silence()?), &a.out)?;
        }
        Command::PostTrain(a) => {
            let (ck, gen) = generator_ckpt(&a.gen)?;
            if ck.meta.stage != Stage::Distilled && !a.allow_any_stage {
                bail!("post-training needs a distilled generator, {} is tagged {} (pass --allow-any-stage to override)", a.gen.display(), ck.meta.stage);
            }
            let (dk, backbone) = generator_ckpt(&a.disc_init)?;
            ensure!(dk.meta.config.model == ck.meta.config.model, "discriminator init and generator model configs differ");
            let mut cfg = ck.meta.config.clone();
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            let data = formats::load_dataset(&a.data)?;
            check_data(&data, &cfg)?;
            let mut r = rng::seeded(cfg.seed);
            let silence = ck.silence()?;
            let mut tr = pipeline::new_post_trainer(&cfg, gen, backbone, silence.clone(), &mut r)?;
            pipeline::run_post(&mut tr, &data, a.steps, &mut r, a.log_every, |m| sink.record(&pipeline::post_fields(m)))?;
            let meta = Metadata { stage: Stage::PostTrained, ema: true, step: tr.step, config: cfg };
            save_with_snapshot(&Checkpoint::from_model(meta, &tr.ema_generator(), &silence), &a.out)?;
        }
        Command::Sample(a) => {
            let (ck, model) = generator_ckpt(&a.ckpt)?;
            let cfg = &ck.meta.config;
            let tokens = parse_tokens(&a.prompt)?;
            check_tokens(&tokens, cfg)?;
            ensure!(a.steps > 0, "--steps must be positive");
            let spec = ScheduleSpec { steps: a.steps, ..cfg.schedule };
            let lat = sampler::ping_pong_sample(&model, tokens.clone(), a.seconds, cfg.sampler.silence_seconds, &spec, a.seed)?;
            formats::save_latent(&a.out, &tokens, &lat)?;
            sink.record(&[("frames", lat.len().to_string()), ("channels", lat.channels().to_string()), ("seconds", a.seconds.to_string())])?;
        }
        Command::Inpaint(a) => {
            let (ck, model) = generator_ckpt(&a.ckpt)?;
            let cfg = &ck.meta.config;
            let reference = formats::load_latent(&a.reference)?;
            let tokens = match &a.prompt {
                Some(p) => parse_tokens(p)?,
                None => reference.tokens.clone(),
            };
            check_tokens(&tokens, cfg)?;
            let keep = pipeline::parse_mask(&a.mask, reference.latent.len(), reference.latent.frame_rate_hz)?;
            let spec = ScheduleSpec { steps: a.steps, ..cfg.schedule };
            let lat = sampler::inpaint_sample(&model, &reference.latent, &keep, tokens.clone(), &spec, a.seed)?;
            formats::save_latent(&a.out, &tokens, &lat)?;
            let kept = keep.iter().filter(|&&k| k).count();
            sink.record(&[("frames", lat.len().to_string()), ("kept", kept.to_string()), ("generated", (lat.len() - kept).to_string())])?;
        }
        Command::Eval(a) => {
            let (ck, model) = generator_ckpt(&a.ckpt)?;
            let cfg = &ck.meta.config;
            let data = formats::load_dataset(&a.data)?;
            check_data(&data, cfg)?;
            let gen = match a.sampler {
                SamplerKind::PingPong => Generator::PingPong { steps: a.steps },
                SamplerKind::Euler => Generator::Euler { steps: a.steps, cfg_scale: cfg.sampler.cfg_scale },
            };
            let rep = pipeline::evaluate(&model, &data, a.n, gen, cfg, a.seed)?;
            let mut fields = vec![("stage", ck.meta.stage.to_string())];
            fields.extend(rep.fields());
            let mut file = std::fs::File::create(&a.report).with_context(|| format!("creating {}", a.report.display()))?;
            for (k, v) in &fields {
                writeln!(file, "{k}={v}")?;
            }
            sink.record(&fields)?;
        }
        Command::Schedule { action: ScheduleAction::Dump { steps, lambda_min, lambda_max } } => {
            let spec = ScheduleSpec { steps, lambda_min, lambda_max, ..ScheduleSpec::default() };
            spec.validate()?;
            ensure!(steps > 0, "--steps must be positive");
            for (i, (l, t)) in schedules::schedule_table(&spec).into_iter().enumerate() {
                sink.record(&[("i", i.to_string()), ("lambda", format!("{l:.6}")), ("t", format!("{t:.6}"))])?;
            }
        }
        Command::Codec { action } => codec(action, &mut sink)?,
        Command::Inspect { ckpt } => {
            let ck = Checkpoint::load(&ckpt)?;
            let m = &ck.meta.config.model;
            sink.record(&[
                ("stage", ck.meta.stage.to_string()),
                ("ema", ck.meta.ema.to_string()),
                ("step", ck.meta.step.to_string()),
                ("parameters", ck.num_parameters().to_string()),
                ("tensors", ck.tensors.len().to_string()),
            ])?;
            if ck.meta.stage == Stage::Codec {
                let c = &ck.meta.config.codec;
                sink.record(&[
                    ("patch_size", c.patch_size.to_string()),
                    ("factor", c.factor.to_string()),
                    ("d", c.d.to_string()),
                    ("layers", c.layers.to_string()),
                    ("latent_dim", c.latent_dim.to_string()),
                ])?;
            } else {
                sink.record(&[
                    ("latent_channels", m.latent_channels.to_string()),
                    ("d", m.d.to_string()),
                    ("depth", m.depth.to_string()),
                    ("heads", m.heads.to_string()),
                    ("memory_count", m.memory_count.to_string()),
                    ("differential_attention", m.differential_attention.to_string()),
                    ("max_frames", m.max_frames.to_string()),
                    ("max_seconds", m.max_seconds.to_string()),
                ])?;
            }
        }
    }
    Ok(())
}

fn codec(action: CodecAction, sink: &mut MetricSink<&mut dyn Write>) -> Result<()> {
    match action {
        CodecAction::Train { config, out, steps, seed } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let mut r = rng::seeded(cfg.seed);
            let mut codec = Codec::new(cfg.codec, &mut r)?;
            let mut opt = vflow_core::optim::Adam::new(cfg.flow.adam, &codec.params);
            let n = cfg.codec.hop() * 2;
            for step in 0..steps {
                let batch: Vec<_> = (0..4).map(|_| toy_waveform(&mut r, cfg.codec.audio_channels, n)).collect();
                let loss = codec.train_step(&mut opt, &batch)?;
                sink.record(&[("stage", "codec".into()), ("step", step.to_string()), ("loss", format!("{loss:.6}"))])?;
            }
            let meta = Metadata { stage: Stage::Codec, ema: false, step: steps as u64, config: cfg };
            save_with_snapshot(&Checkpoint::from_codec(meta, &codec), &out)?;
        }
        CodecAction::Encode { ckpt, input, out } => {
            let codec = Checkpoint::load(&ckpt)?.codec()?;
            let bytes = std::fs::read(&input).with_context(|| format!("reading {}", input.display()))?;
            let signal = formats::read_raw_f32(&bytes, codec.config.audio_channels)?;
            let lat = codec.encode(&signal)?;
            formats::save_latent(&out, &[], &lat)?;
            sink.record(&[("samples", signal.cols().to_string()), ("frames", lat.len().to_string()), ("channels", lat.channels().to_string())])?;
        }
        CodecAction::Decode { ckpt, input, out } => {
            let codec = Checkpoint::load(&ckpt)?.codec()?;
            let lat = formats::load_latent(&input)?;
            let signal = codec.decode(&lat.latent)?;
            let mut w = std::io::BufWriter::new(std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?);
            formats::write_raw_f32(&mut w, &signal)?;
            w.flush()?;
            sink.record(&[("frames", lat.latent.len().to_string()), ("samples", signal.cols().to_string())])?;
        }
    }
    Ok(())
}

/// Sum of two random sinusoids per channel.
fn toy_waveform(r: &mut rng::Rng, channels: usize, n: usize) -> vflow_core::Tensor<f32> {
    let params: Vec<(f64, f64, f64)> = (0..2 * channels).map(|_| (0.001 + 0.05 * rng::uniform(r), std::f64::consts::TAU * rng::uniform(r), 0.2 + 0.3 * rng::uniform(r))).collect();
    vflow_core::Tensor::from_fn(channels, n, |c, s| {
        params[2 * c..2 * c + 2].iter().map(|(f, ph, a)| a * (f * s as f64 + ph).sin()).sum::<f64>() as f32
    })
}
