//! Stage orchestration shared by the CLI and the end-to-end tests.

use std::io::Write;

use anyhow::{ensure, Context, Result};
use vflow_core::adversarial::{Discriminator, PostTrainMetrics, PostTrainer};
use vflow_core::distill::{DistillMetrics, DistillTrainer};
use vflow_core::dit::Dit;
use vflow_core::eval::{self, alignment_score};
use vflow_core::flow::{FlowMetrics, FlowTrainer};
use vflow_core::latent::{Example, LatentSequence};
use vflow_core::oracle::OracleEmbedder;
use vflow_core::rng::{self, Rng};
use vflow_core::sampler::{self, SampleRequest, VelocityModel};
use vflow_core::schedules::{self, ScheduleSpec};

use crate::config::RunConfig;

/// Generated dataset split into training records and a held-out tail.
pub fn generate_split(cfg: &RunConfig, seed: u64) -> Result<(Vec<Example>, Vec<Example>)> {
    let mut data = eval::generate_dataset(&mut rng::seeded(seed), &cfg.data)?;
    let held = held_out_count(data.len(), cfg.eval.held_out_fraction);
    let tail = data.split_off(data.len() - held);
    Ok((data, tail))
}

pub fn held_out_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).min(n.saturating_sub(1))
}

pub fn embedder(cfg: &RunConfig) -> Result<OracleEmbedder> {
    Ok(OracleEmbedder::new(cfg.data.grammar.clone(), cfg.model.latent_channels)?)
}

/// Writes one `key=value ...` record per line.
pub struct MetricSink<W: Write> {
    out: W,
}

impl<W: Write> MetricSink<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn record(&mut self, fields: &[(&str, String)]) -> Result<()> {
        let line: Vec<String> = fields.iter().map(|(k, v)| format!("{k}={v}")).collect();
        writeln!(self.out, "{}", line.join(" "))?;
        Ok(())
    }
}

pub fn flow_fields(m: &FlowMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("stage", "flow".into()),
        ("step", m.step.to_string()),
        ("loss", format!("{:.6}", m.loss)),
        ("loss_gen", format!("{:.6}", m.loss_gen)),
        ("loss_ctx", format!("{:.6}", m.loss_ctx)),
        ("grad_norm", format!("{:.4}", m.grad_norm)),
        ("lr", format!("{:.3e}", m.lr)),
        ("mean_t", format!("{:.4}", m.mean_t)),
        ("ot_fallback", m.ot_fallback.to_string()),
        ("skipped", m.skipped.to_string()),
    ]
}

pub fn distill_fields(m: &DistillMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("stage", "distill".into()),
        ("step", m.step.to_string()),
        ("loss", format!("{:.6}", m.loss)),
        ("grad_norm", format!("{:.4}", m.grad_norm)),
        ("refreshed", m.refreshed.to_string()),
        ("skipped", m.skipped.to_string()),
    ]
}

pub fn post_fields(m: &PostTrainMetrics) -> Vec<(&'static str, String)> {
    vec![
        ("stage", "post-train".into()),
        ("step", m.step.to_string()),
        ("loss_r_g", format!("{:.6}", m.loss_r_g)),
        ("loss_clap_g", format!("{:.6}", m.loss_clap_g)),
        ("loss_r_d", format!("{:.6}", m.loss_r_d)),
        ("loss_c_d", format!("{:.6}", m.loss_c_d)),
        ("grad_norm_g", format!("{:.4}", m.grad_norm_g)),
        ("grad_norm_d", format!("{:.4}", m.grad_norm_d)),
        ("skipped", m.skipped.to_string()),
    ]
}

/// Logs every `every` steps plus the last one.
fn due(step: usize, steps: usize, every: usize) -> bool {
    every > 0 && (step % every == 0 || step + 1 == steps)
}

pub fn new_flow_trainer(cfg: &RunConfig, rng: &mut Rng, silence: Vec<f32>) -> Result<FlowTrainer> {
    let model = Dit::<f32>::new(cfg.model.clone(), rng)?;
    Ok(FlowTrainer::new(model, cfg.flow.clone(), cfg.schedule, silence)?)
}

pub fn run_flow(trainer: &mut FlowTrainer, data: &[Example], steps: usize, rng: &mut Rng, log_every: usize, mut log: impl FnMut(&FlowMetrics) -> Result<()>) -> Result<()> {
    for s in 0..steps {
        let m = trainer.train_step(data, rng)?;
        if due(s, steps, log_every) {
            log(&m)?;
        }
    }
    Ok(())
}

pub fn run_distill(trainer: &mut DistillTrainer, data: &[Example], steps: usize, rng: &mut Rng, log_every: usize, mut log: impl FnMut(&DistillMetrics) -> Result<()>) -> Result<()> {
    for s in 0..steps {
        let m = trainer.train_step(data, rng)?;
        if due(s, steps, log_every) {
            log(&m)?;
        }
    }
    Ok(())
}

pub fn new_post_trainer(cfg: &RunConfig, gen: Dit<f32>, disc_backbone: Dit<f32>, silence: Vec<f32>, rng: &mut Rng) -> Result<PostTrainer> {
    let disc = Discriminator::new(disc_backbone, cfg.post.disc.clone(), rng)?;
    Ok(PostTrainer::new(gen, disc, cfg.post.clone(), cfg.schedule, silence, embedder(cfg)?)?)
}

pub fn run_post(trainer: &mut PostTrainer, data: &[Example], steps: usize, rng: &mut Rng, log_every: usize, mut log: impl FnMut(&PostTrainMetrics) -> Result<()>) -> Result<()> {
    for s in 0..steps {
        let m = trainer.train_step(data, rng)?;
        if due(s, steps, log_every) {
            log(&m)?;
        }
    }
    Ok(())
}

/// How latents are drawn from a model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Generator {
    /// Ping-pong over the logSNR-uniform grid with `steps` denoising steps.
    PingPong { steps: usize },
    /// Guided Euler integration of the flow ODE.
    Euler { steps: usize, cfg_scale: f64 },
}

impl std::fmt::Display for Generator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Generator::PingPong { steps } => write!(f, "ping-pong:{steps}"),
            Generator::Euler { steps, cfg_scale } => write!(f, "euler:{steps}:cfg{cfg_scale}"),
        }
    }
}

/// Runs `reqs` in chunks of `batch_size`.
pub fn generate(model: &impl VelocityModel, reqs: &[SampleRequest], gen: Generator, spec: &ScheduleSpec, batch_size: usize, rng: &mut Rng) -> Result<Vec<LatentSequence>> {
    let mut out = Vec::with_capacity(reqs.len());
    for chunk in reqs.chunks(batch_size.max(1)) {
        let part = match gen {
            Generator::PingPong { steps } => {
                let grid = schedules::inference_schedule(&ScheduleSpec { steps, ..*spec });
                sampler::ping_pong_batch(model, chunk, &grid, rng)?
            }
            Generator::Euler { steps, cfg_scale } => sampler::euler_cfg_batch(model, chunk, steps, cfg_scale, rng)?,
        };
        out.extend(part);
    }
    Ok(out)
}

/// Text requests mirroring each example's prompt and duration.
pub fn requests_like(model: &impl VelocityModel, examples: &[Example], silence_seconds: f64) -> Result<Vec<SampleRequest>> {
    examples
        .iter()
        .map(|e| {
            let d = e.latent.len() as f64 / e.latent.frame_rate_hz;
            Ok(SampleRequest::text(model, e.tokens.clone(), d, silence_seconds)?)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub generator: String,
    pub n: usize,
    /// Fréchet distance between generated and held-out oracle embeddings.
    pub fd: f64,
    /// Mean cosine between each output and its prompt's text embedding.
    pub alignment: f64,
    /// Same, for the held-out references.
    pub reference_alignment: f64,
}

impl EvalReport {
    pub fn fields(&self) -> Vec<(&'static str, String)> {
        vec![
            ("generator", self.generator.clone()),
            ("n", self.n.to_string()),
            ("fd", format!("{:.6}", self.fd)),
            ("alignment", format!("{:.6}", self.alignment)),
            ("reference_alignment", format!("{:.6}", self.reference_alignment)),
        ]
    }
}

pub fn mean_alignment(embedder: &OracleEmbedder, tokens: &[Vec<u32>], emb: &[Vec<f64>]) -> f64 {
    let s: f64 = tokens.iter().zip(emb).map(|(t, e)| alignment_score(&embedder.embed_text(t), e)).sum();
    s / emb.len().max(1) as f64
}

/// Generates one latent per held-out example and scores the set.
pub fn evaluate(model: &impl VelocityModel, held_out: &[Example], n: usize, gen: Generator, cfg: &RunConfig, seed: u64) -> Result<EvalReport> {
    let n = n.min(held_out.len());
    ensure!(n >= 2, "evaluation needs at least two held-out examples");
    let refs = &held_out[..n];
    let reqs = requests_like(model, refs, cfg.sampler.silence_seconds)?;
    let out = generate(model, &reqs, gen, &cfg.schedule, cfg.sampler.batch_size, &mut rng::seeded(seed))?;
    let emb = embedder(cfg)?;
    let e_gen = emb.embed_latents(&out)?;
    let ref_lat: Vec<LatentSequence> = refs.iter().map(|e| e.latent.clone()).collect();
    let e_ref = emb.embed_latents(&ref_lat)?;
    let tokens: Vec<Vec<u32>> = refs.iter().map(|e| e.tokens.clone()).collect();
    Ok(EvalReport {
        generator: gen.to_string(),
        n,
        fd: eval::frechet_distance(&e_gen, &e_ref).context("Fréchet distance")?,
        alignment: mean_alignment(&emb, &tokens, &e_gen),
        reference_alignment: mean_alignment(&emb, &tokens, &e_ref),
    })
}

/// Keep mask from a comma list of `keep:a-b` / `gen:a-b` ranges in seconds
/// (frames not covered are generated), or `causal:<prefix-seconds>`.
/// A frame belongs to a range when its start time lies in `[a, b)`.
pub fn parse_mask(spec: &str, len: usize, frame_rate_hz: f64) -> Result<Vec<bool>> {
    let spec = spec.trim();
    ensure!(!spec.is_empty(), "empty mask spec");
    let time = |j: usize| j as f64 / frame_rate_hz;
    if let Some(p) = spec.strip_prefix("causal:") {
        let s: f64 = p.trim().parse().with_context(|| format!("bad causal prefix `{p}`"))?;
        ensure!(s >= 0.0, "causal prefix must be non-negative");
        return Ok((0..len).map(|j| time(j) < s).collect());
    }
    let mut keep = vec![false; len];
    for part in spec.split(',') {
        let (kind, range) = part.trim().split_once(':').with_context(|| format!("mask range `{part}` lacks a keep:/gen: prefix"))?;
        let value = match kind {
            "keep" => true,
            "gen" => false,
            other => anyhow::bail!("unknown mask range kind `{other}`"),
        };
        let (a, b) = range.split_once('-').with_context(|| format!("range `{range}` is not a-b"))?;
        let a: f64 = a.trim().parse().with_context(|| format!("bad range start `{a}`"))?;
        let b: f64 = b.trim().parse().with_context(|| format!("bad range end `{b}`"))?;
        ensure!(0.0 <= a && a < b, "range {a}-{b} is empty or negative");
        for (j, k) in keep.iter_mut().enumerate() {
            if (a..b).contains(&time(j)) {
                *k = value;
            }
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_specs() {
        let r = 2.0; // two frames per second
        assert_eq!(parse_mask("causal:1.0", 5, r).unwrap(), vec![true, true, false, false, false]);
        assert_eq!(parse_mask("keep:0-1,keep:2-2.5", 6, r).unwrap(), vec![true, true, false, false, true, false]);
        assert_eq!(parse_mask("keep:0-3, gen:1-2", 6, r).unwrap(), vec![true, true, false, false, true, true]);
        for bad in ["", "keep:1", "hold:0-1", "keep:2-1", "causal:x"] {
            assert!(parse_mask(bad, 4, r).is_err(), "{bad}");
        }
    }

    #[test]
    fn held_out_split() {
        assert_eq!(held_out_count(4096, 0.125), 512);
        assert_eq!(held_out_count(3, 0.9), 2);
        assert_eq!(held_out_count(10, 0.0), 0);
    }
}
