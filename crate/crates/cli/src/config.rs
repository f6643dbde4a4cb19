//! Run configuration: one nested TOML document covering every stage.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use vflow_core::adversarial::PostTrainConfig;
use vflow_core::distill::DistillConfig;
use vflow_core::dit::ModelConfig;
use vflow_core::eval::DatasetConfig;
use vflow_core::flow::{BatchConfig, FlowConfig};
use vflow_core::optim::AdamConfig;
use vflow_core::schedules::ScheduleSpec;
use vflow_core::trb::CodecConfig;

/// Inference settings shared by `sample`, `inpaint` and `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Silence tail generated and trimmed away, in seconds.
    pub silence_seconds: f64,
    /// Euler steps for the multi-step base-model baseline.
    pub ode_steps: usize,
    pub cfg_scale: f64,
    /// Items per generation batch.
    pub batch_size: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { silence_seconds: 0.0, ode_steps: 50, cfg_scale: 5.0, batch_size: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Held-out items generated and compared.
    pub n: usize,
    /// Fraction of the dataset reserved as held-out (taken from the end).
    pub held_out_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { n: 512, held_out_fraction: 0.125 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub flow: FlowConfig,
    pub distill: DistillConfig,
    pub post: PostTrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub codec: CodecConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleSpec::default(),
            flow: FlowConfig::default(),
            distill: DistillConfig::default(),
            post: PostTrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            codec: CodecConfig::default(),
        }
    }
}

impl RunConfig {
    /// Tiny CPU setup: C=8, d=64, D=4, H=4 on clips of 16 to 48 frames.
    pub fn desk() -> Self {
        let model = ModelConfig {
            latent_channels: 8,
            d: 64,
            depth: 4,
            heads: 4,
            memory_count: 16,
            rope_rotate_dims: 8,
            differential_attention: true,
            fourier_dim: 64,
            text_ctx_len: 8,
            text_dim: 32,
            vocab_size: 16,
            max_frames: 64,
            max_seconds: 5.9,
            ..ModelConfig::default()
        };
        let batch = BatchConfig { batch_size: 16, silence_mean_seconds: 1.0, ..BatchConfig::default() };
        Self {
            data: DatasetConfig { size: 4096, channels: 8, min_frames: 16, max_frames: 48, ..DatasetConfig::default() },
            model,
            flow: FlowConfig { batch, adam: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..FlowConfig::default() },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("malformed config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.codec.validate()?;
        self.data.grammar.validate()?;
        anyhow::ensure!(self.data.channels == self.model.latent_channels, "data.channels ({}) must equal model.latent_channels ({})", self.data.channels, self.model.latent_channels);
        anyhow::ensure!(self.data.max_frames <= self.model.max_frames, "data.max_frames ({}) exceeds model.max_frames ({})", self.data.max_frames, self.model.max_frames);
        anyhow::ensure!(
            self.data.grammar.vocab_size() <= self.model.vocab_size,
            "grammar vocabulary ({}) exceeds model.vocab_size ({})",
            self.data.grammar.vocab_size(),
            self.model.vocab_size
        );
        anyhow::ensure!((0.0..1.0).contains(&self.eval.held_out_fraction), "eval.held_out_fraction must lie in [0,1)");
        anyhow::ensure!(self.sampler.batch_size > 0, "sampler.batch_size must be positive");
        Ok(())
    }

    /// Writes `<stem>.config.toml` next to `output`.
    pub fn snapshot_next_to(&self, output: &Path) -> Result<std::path::PathBuf> {
        let mut name = output.file_name().map(|s| s.to_os_string()).unwrap_or_default();
        name.push(".config.toml");
        let path = output.with_file_name(name);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        for cfg in [RunConfig::default(), RunConfig::desk()] {
            assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[model]\nd = 128\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.model.d, 128);
        assert_eq!(cfg.model.depth, ModelConfig::default().depth);
    }

    #[test]
    fn rejects_unknown_and_inconsistent_keys() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[sampler]\nsteps_typo = 3").is_err());
        assert!(RunConfig::from_toml("[data]\nchannels = 4").is_err());
        assert!(RunConfig::from_toml("[model]\nheads = 3").is_err());
    }

    #[test]
    fn shipped_desk_file_matches_preset() {
        let text = include_str!("../../../configs/desk.toml");
        assert_eq!(RunConfig::from_toml(text).unwrap(), RunConfig::desk());
    }
}
