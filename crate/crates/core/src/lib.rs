//! Form-driven long music generation over a pluggable autoregressive token model.
//!
//! The engine takes a part-based form description (usually written by an LLM),
//! schedules per-step condition weights so adjacent parts crossfade and
//! variation parts are seeded from earlier material, and samples a token grid
//! from any backend that exposes next-step logits. Around that sits a
//! residual vector quantizer, token interleaving patterns, a two-phase prompt
//! optimizer and MOS statistics.

pub mod backend;
pub mod exec;
pub mod form;
pub mod optimizer;
pub mod orchestrator;
pub mod pattern;
pub mod rvq;
pub mod sampler;
pub mod stats;
pub mod synth;

pub use backend::{BackendInfo, ConditionId, ConditionKind, LogitsStep, RemoteBackend, TokenModel, ToyBackend};
pub use form::{FormConstraints, FormSpec, PartSpec, ValidationReport};
pub use pattern::{Pattern, StepSequence, TokenGrid};
pub use rvq::{FrameRate, RvqCodec};
pub use sampler::SamplerConfig;
pub use orchestrator::{plan_piece, render_piece, GenerationPlan, OrchestratorConfig};

