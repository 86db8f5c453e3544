use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use musicform_core::form::FormConstraints;
use musicform_core::optimizer::OptimizerConfig;
use musicform_core::rvq::{CodecPreset, FrameRate};
use musicform_core::{OrchestratorConfig, SamplerConfig};
use serde::{Deserialize, Serialize};

/// Whole-program settings, read from TOML. Every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub frame_rate: u32,
    pub codec_preset: CodecPreset,
    /// Seed for codec training; kept apart from piece seeds.
    pub codec_seed: u64,
    /// Root seed; also replaces `optimizer.seed`.
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub generation: GenerationConfig,
    pub optimizer: OptimizerConfig,
    pub backend: BackendConfig,
    pub llm: LlmConfig,
    pub store: StoreConfig,
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub transition_s: u32,
    pub decay_s: u32,
    pub prompt_s: u32,
    pub total_s: i64,
    pub min_part_s: i64,
    pub max_part_s: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub url: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub base_url: Option<String>,
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    pub credential_env: Option<String>,
    pub fixture: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub out: PathBuf,
    /// Saved codec; trained from the preset when absent.
    pub codec: Option<PathBuf>,
    pub clips: PathBuf,
    pub desk_log: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub addr: String,
    pub qualification_seconds: f32,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            frame_rate: 75,
            codec_preset: CodecPreset::Toy,
            codec_seed: 0,
            seed: 0,
            sampler: SamplerConfig::default(),
            generation: GenerationConfig::default(),
            optimizer: OptimizerConfig::default(),
            backend: BackendConfig::default(),
            llm: LlmConfig::default(),
            store: StoreConfig::default(),
            service: ServiceConfig::default(),
        }
    }
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let o = OrchestratorConfig::default();
        Self {
            transition_s: o.transition_s,
            decay_s: o.decay_s,
            prompt_s: o.prompt_s,
            total_s: o.constraints.total_s,
            min_part_s: o.constraints.min_part_s,
            max_part_s: o.constraints.max_part_s,
        }
    }
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            codec: None,
            clips: PathBuf::from("clips"),
            desk_log: PathBuf::from("desk.jsonl"),
        }
    }
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:8080".into(),
            qualification_seconds: 60.0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Config = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let g = &self.generation;
        if self.frame_rate == 0 {
            bail!("frame_rate must be positive");
        }
        for (name, v) in [("transition_s", g.transition_s), ("decay_s", g.decay_s), ("prompt_s", g.prompt_s)] {
            if v == 0 {
                bail!("generation.{name} must be positive");
            }
        }
        if g.total_s <= 0 || g.min_part_s <= 0 || g.max_part_s < g.min_part_s {
            bail!("generation durations must be positive with min_part_s <= max_part_s");
        }
        if self.service.qualification_seconds <= 0.0 {
            bail!("service.qualification_seconds must be positive");
        }
        let o = &self.optimizer;
        if o.n_explore == 0 || o.pieces_per_prompt == 0 || o.raters_per_piece == 0 || o.top_k == 0 {
            bail!("optimizer counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.sampler.guidance) || self.sampler.temperature <= 0.0 {
            bail!("sampler.guidance must lie in [0, 1] and temperature must be positive");
        }
        Ok(())
    }

    pub fn orchestrator(&self) -> OrchestratorConfig {
        let g = &self.generation;
        OrchestratorConfig {
            frame_rate: FrameRate::new(self.frame_rate),
            transition_s: g.transition_s,
            decay_s: g.decay_s,
            prompt_s: g.prompt_s,
            constraints: FormConstraints {
                total_s: g.total_s,
                min_part_s: g.min_part_s,
                max_part_s: g.max_part_s,
            },
            sampler: SamplerConfig {
                seed: self.seed,
                ..self.sampler
            },
        }
    }
}
