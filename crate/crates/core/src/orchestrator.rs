//! From a validated form to a finished piece.
//!
//! Parts are generated in order, each as one sampling segment whose context
//! is everything generated so far. Two schedules shape the condition weights:
//!
//! * **Transitions.** The first `min(transition_s, part length)` of every part
//!   after the first crossfades linearly from the previous part's text
//!   condition to its own. The boundary step is fully the old condition.
//! * **Variations.** A part that references an earlier part gets the last
//!   `min(prompt_s, referenced length)` of that part's tokens as an audio
//!   prompt. The prompted distribution starts at full weight and decays
//!   linearly to zero over `decay_s`; the remaining weight goes to the same
//!   text condition without the prompt. Prompt tokens are context only and
//!   never land in the output.
//!
//! When both apply, the weights multiply and are renormalized.

use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{splitmix64, BackendInfo, ConditionId, TokenModel};
use crate::exec::{self, Strategy};
use crate::form::{validate_form, FormConstraints, FormSpec, ValidationReport};
use crate::pattern::{Pattern, PatternError, TokenGrid, TokenStream};
use crate::rvq::{FrameRate, RvqCodec, RvqError};
use crate::sampler::{
    decay_weight, generate_segment, transition_weights, Checkpoint, DecaySchedule, SamplerConfig, SamplerError,
    StepConditions, TransitionWindow, WeightedCondition,
};
use crate::synth::{self, SynthConfig, SynthError};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("form is not valid:\n{0}")]
    InvalidSpec(ValidationReport),
    #[error("plan does not match: {0}")]
    PlanMismatch(String),
    #[error("part {part} references part {referenced}, which has not been generated yet")]
    ReferenceNotYetGenerated { part: u32, referenced: u32 },
    #[error("part {0} is not a variation")]
    NotAVariation(u32),
    #[error("unknown part {0}")]
    UnknownPart(u32),
    #[error("generation of part {part} failed: {source}")]
    Generation {
        part: u32,
        #[source]
        source: SamplerError,
        checkpoint: Option<Box<Checkpoint>>,
        /// Tokens of all parts completed before the failing one.
        completed: TokenGrid,
    },
    #[error(transparent)]
    Codec(#[from] RvqError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Tokens(#[from] PatternError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrchestratorConfig {
    pub frame_rate: FrameRate,
    /// Crossfade length between adjacent parts; 0 disables transitions.
    pub transition_s: u32,
    /// Audio-prompt weight decay length.
    pub decay_s: u32,
    /// Audio-prompt length taken from the referenced part.
    pub prompt_s: u32,
    pub constraints: FormConstraints,
    pub sampler: SamplerConfig,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            frame_rate: FrameRate::default(),
            transition_s: 5,
            decay_s: 10,
            prompt_s: 15,
            constraints: FormConstraints::default(),
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationPlan {
    pub referenced_part: u32,
    pub prompt_steps: u64,
    /// Token span of the audio prompt inside the piece, `[start, end)`.
    pub source_start: u64,
    pub source_end: u64,
    pub decay: DecaySchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartPlan {
    pub index: u32,
    pub prompt: String,
    pub condition: ConditionId,
    pub start_step: u64,
    pub length_steps: u64,
    pub transition: Option<TransitionWindow>,
    pub variation: Option<VariationPlan>,
    /// Seed of this part's sampling stream.
    pub seed: u64,
}

impl PartPlan {
    pub fn end_step(&self) -> u64 {
        self.start_step + self.length_steps
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub parts: Vec<PartPlan>,
    pub frame_rate: FrameRate,
    pub sampler: SamplerConfig,
    pub total_steps: u64,
}

impl GenerationPlan {
    pub fn part(&self, index: u32) -> Option<&PartPlan> {
        self.parts.iter().find(|p| p.index == index)
    }

    pub fn boundaries(&self) -> Vec<u64> {
        self.parts.iter().map(|p| p.start_step).collect()
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.parts.iter().map(|p| p.seed).collect()
    }

    /// Per-step condition weights for one part.
    pub fn schedule_for(&self, index: u32, prompt: Option<Arc<TokenGrid>>) -> Result<Vec<StepConditions>> {
        let pos = self
            .parts
            .iter()
            .position(|p| p.index == index)
            .ok_or(OrchestratorError::UnknownPart(index))?;
        let part = &self.parts[pos];
        let previous = pos.checked_sub(1).map(|i| &self.parts[i].condition);
        let prompted = match (&part.variation, prompt) {
            (Some(_), Some(p)) => Some(ConditionId::audio_prefix(&part.condition, p)),
            (Some(_), None) => return Err(OrchestratorError::PlanMismatch(format!("part {index} needs its audio prompt"))),
            (None, _) => None,
        };

        let schedule = (0..part.length_steps)
            .map(|s| {
                let abs = part.start_step + s;
                let (w_old, w_new) = match (&part.transition, previous) {
                    (Some(window), Some(_)) => transition_weights(abs, window),
                    _ => (0.0, 1.0),
                };
                let mut weighted = Vec::with_capacity(3);
                if w_old > 0.0 {
                    weighted.push(WeightedCondition {
                        condition: previous.expect("transition implies a previous part").clone(),
                        weight: w_old,
                    });
                }
                match (&part.variation, &prompted) {
                    (Some(v), Some(prompted)) => {
                        let w_audio = decay_weight(s, &v.decay);
                        weighted.push(WeightedCondition {
                            condition: prompted.clone(),
                            weight: w_new * w_audio,
                        });
                        weighted.push(WeightedCondition {
                            condition: part.condition.clone(),
                            weight: w_new * (1.0 - w_audio),
                        });
                    }
                    _ => weighted.push(WeightedCondition {
                        condition: part.condition.clone(),
                        weight: w_new,
                    }),
                }
                weighted.retain(|w| w.weight > 0.0);
                let total: f64 = weighted.iter().map(|w| w.weight).sum();
                if total != 1.0 {
                    for w in &mut weighted {
                        w.weight /= total;
                    }
                }
                StepConditions {
                    uncond: ConditionId::unconditional(),
                    weighted,
                }
            })
            .collect();
        Ok(schedule)
    }
}

/// Derive a part's sampling seed from the piece seed.
pub fn part_seed(piece_seed: u64, part_index: u32) -> u64 {
    splitmix64(piece_seed ^ splitmix64(u64::from(part_index)))
}

/// Lay out a validated form on the step grid.
pub fn plan_piece(spec: &FormSpec, config: &OrchestratorConfig) -> Result<GenerationPlan> {
    let report = validate_form(spec, &config.constraints);
    if !report.valid {
        return Err(OrchestratorError::InvalidSpec(report));
    }
    config
        .sampler
        .validate()
        .map_err(|e| OrchestratorError::PlanMismatch(e.to_string()))?;
    let rate = config.frame_rate;
    let transition_steps = rate.seconds_to_steps(u64::from(config.transition_s));
    let prompt_steps_max = rate.seconds_to_steps(u64::from(config.prompt_s));
    let decay = DecaySchedule {
        length_steps: rate.seconds_to_steps(u64::from(config.decay_s)),
    };

    let mut parts: Vec<PartPlan> = Vec::with_capacity(spec.parts.len());
    let mut cursor = 0u64;
    for p in &spec.parts {
        let length_steps = rate.seconds_to_steps(p.length_s as u64);
        let transition = (!parts.is_empty() && transition_steps > 0).then(|| TransitionWindow {
            start_step: cursor,
            length_steps: transition_steps.min(length_steps),
        });
        let variation = match p.reference() {
            Some(r) => {
                let src = parts.iter().find(|q| q.index == r).ok_or(OrchestratorError::UnknownPart(r))?;
                let prompt_steps = prompt_steps_max.min(src.length_steps);
                Some(VariationPlan {
                    referenced_part: r,
                    prompt_steps,
                    source_start: src.end_step() - prompt_steps,
                    source_end: src.end_step(),
                    decay,
                })
            }
            None => None,
        };
        parts.push(PartPlan {
            index: p.index,
            prompt: p.prompt.clone(),
            condition: ConditionId::text(&p.prompt),
            start_step: cursor,
            length_steps,
            transition,
            variation,
            seed: part_seed(config.sampler.seed, p.index),
        });
        cursor += length_steps;
    }
    Ok(GenerationPlan {
        parts,
        frame_rate: rate,
        sampler: config.sampler,
        total_steps: cursor,
    })
}

/// The audio prompt for a variation part: the last `prompt_steps` rows of
/// the referenced part.
pub fn extract_audio_prompt(piece_so_far: &TokenGrid, plan: &GenerationPlan, part_index: u32) -> Result<TokenGrid> {
    let part = plan.part(part_index).ok_or(OrchestratorError::UnknownPart(part_index))?;
    let v = part.variation.as_ref().ok_or(OrchestratorError::NotAVariation(part_index))?;
    if (piece_so_far.steps() as u64) < v.source_end {
        return Err(OrchestratorError::ReferenceNotYetGenerated {
            part: part_index,
            referenced: v.referenced_part,
        });
    }
    Ok(piece_so_far.slice(v.source_start as usize, v.source_end as usize))
}

/// Sample the token grid of a whole piece.
pub fn render_grid(plan: &GenerationPlan, backend: &dyn TokenModel) -> Result<TokenGrid> {
    check_plan(plan)?;
    let k = backend.info().codebooks;
    let mut piece = TokenGrid::with_capacity(k, plan.total_steps as usize);
    for part in &plan.parts {
        let prompt = match part.variation {
            Some(_) => Some(Arc::new(extract_audio_prompt(&piece, plan, part.index)?)),
            None => None,
        };
        let schedule = plan.schedule_for(part.index, prompt)?;
        let config = SamplerConfig {
            seed: part.seed,
            ..plan.sampler
        };
        let tokens = generate_segment(backend, &schedule, part.length_steps as usize, &piece, &config).map_err(|e| {
            OrchestratorError::Generation {
                part: part.index,
                source: e.source,
                checkpoint: e.checkpoint,
                completed: piece.clone(),
            }
        })?;
        piece.extend_from(&tokens);
    }
    Ok(piece)
}

fn check_plan(plan: &GenerationPlan) -> Result<()> {
    let mut cursor = 0;
    for p in &plan.parts {
        if p.start_step != cursor {
            return Err(OrchestratorError::PlanMismatch(format!(
                "part {} starts at {} instead of {cursor}",
                p.index, p.start_step
            )));
        }
        cursor += p.length_steps;
    }
    if cursor != plan.total_steps {
        return Err(OrchestratorError::PlanMismatch(format!(
            "parts cover {cursor} steps, plan says {}",
            plan.total_steps
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartRange {
    pub part: u32,
    pub start_step: u64,
    pub end_step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PieceManifest {
    pub spec: FormSpec,
    pub plan: GenerationPlan,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub backend: BackendInfo,
    pub codec_hash: String,
    pub grid_hash: String,
    pub total_steps: u64,
    pub part_ranges: Vec<PartRange>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone)]
pub struct PieceArtifact {
    pub grid: TokenGrid,
    pub frames: Vec<Vec<f64>>,
    pub manifest: PieceManifest,
}

impl PieceArtifact {
    /// Write `manifest.json`, `tokens.toks` (delay pattern) and `piece.wav`.
    pub fn write_to(&self, dir: impl AsRef<Path>, vocab: usize, synth_config: &SynthConfig) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&self.manifest)?)?;
        TokenStream::from_grid(&self.grid, vocab, Pattern::Delay).save(dir.join("tokens.toks"))?;
        synth::export_wav(dir.join("piece.wav"), &self.frames, synth_config)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Generate a piece, decode it to latent frames and build its manifest.
pub fn render_piece(
    spec: &FormSpec,
    plan: &GenerationPlan,
    backend: &dyn TokenModel,
    codec: &RvqCodec,
    strategy: Strategy,
) -> Result<PieceArtifact> {
    let info = backend.info().clone();
    if info.codebooks != codec.num_codebooks() || info.vocab_size != codec.codebook_size() {
        return Err(OrchestratorError::PlanMismatch(format!(
            "backend is {}x{} but codec is {}x{}",
            info.codebooks,
            info.vocab_size,
            codec.num_codebooks(),
            codec.codebook_size()
        )));
    }
    let started_unix = unix_now();
    let grid = render_grid(plan, backend)?;
    let rows: Vec<&[u32]> = grid.rows().collect();
    let frames = codec.decode_batch(&rows, strategy)?;
    let manifest = PieceManifest {
        spec: spec.clone(),
        plan: plan.clone(),
        seed: plan.sampler.seed,
        seeds: plan.seeds(),
        backend: info,
        codec_hash: codec.content_hash(),
        grid_hash: grid.content_hash(),
        total_steps: grid.steps() as u64,
        part_ranges: plan
            .parts
            .iter()
            .map(|p| PartRange {
                part: p.index,
                start_step: p.start_step,
                end_step: p.end_step(),
            })
            .collect(),
        started_unix,
        finished_unix: unix_now(),
    };
    Ok(PieceArtifact { grid, frames, manifest })
}

/// Render independent plans, fanning out per the strategy. Each plan
/// carries its own seeds, so results do not depend on scheduling.
pub fn render_many(plans: &[GenerationPlan], backend: &dyn TokenModel, strategy: Strategy) -> Vec<Result<TokenGrid>> {
    exec::map_slice(plans, strategy, |p| render_grid(p, backend))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::form::{parse_form, PartSpec};

    fn spec(parts: &[(i64, i64)]) -> FormSpec {
        FormSpec {
            parts: parts
                .iter()
                .enumerate()
                .map(|(i, &(len, r))| PartSpec {
                    index: i as u32 + 1,
                    prompt: format!("part {i}"),
                    length_s: len,
                    referenced_part: r,
                })
                .collect(),
            description: None,
        }
    }

    fn loose() -> OrchestratorConfig {
        OrchestratorConfig {
            constraints: FormConstraints {
                total_s: 0,
                min_part_s: 1,
                max_part_s: 1000,
            },
            ..OrchestratorConfig::default()
        }
    }

    fn loose_for(s: &FormSpec) -> OrchestratorConfig {
        let mut c = loose();
        c.constraints.total_s = s.total_s();
        c
    }

    #[test]
    fn single_part_has_no_transition_or_variation() {
        let s = spec(&[(20, -1)]);
        let plan = plan_piece(&s, &loose_for(&s)).unwrap();
        assert_eq!(plan.total_steps, 1500);
        assert!(plan.parts[0].transition.is_none());
        assert!(plan.parts[0].variation.is_none());
        let sched = plan.schedule_for(1, None).unwrap();
        assert!(sched.iter().all(|s| s.weighted.len() == 1 && s.weighted[0].weight == 1.0));
    }

    #[test]
    fn short_part_referencing_longer_one() {
        let s = spec(&[(25, -1), (20, 1)]);
        let plan = plan_piece(&s, &loose_for(&s)).unwrap();
        let v = plan.parts[1].variation.as_ref().unwrap();
        assert_eq!(v.prompt_steps, 1125);
        assert_eq!((v.source_start, v.source_end), (1875 - 1125, 1875));
        assert_eq!(v.decay.length_steps, 750);
        let sched = plan.schedule_for(2, Some(Arc::new(TokenGrid::new(4)))).unwrap();
        assert_eq!(sched.len(), 1500);
    }

    #[test]
    fn prompt_clamps_to_short_reference() {
        for (ref_len, expected) in [(10, 750), (15, 1125), (25, 1125)] {
            let s = spec(&[(ref_len, -1), (20, 1)]);
            let plan = plan_piece(&s, &loose_for(&s)).unwrap();
            let piece = TokenGrid::from_flat(4, vec![0; ref_len as usize * 75 * 4]).unwrap();
            let prompt = extract_audio_prompt(&piece, &plan, 2).unwrap();
            assert_eq!(prompt.steps(), expected);
        }
    }

    #[test]
    fn prompt_requires_generated_reference() {
        let s = spec(&[(25, -1), (20, 1)]);
        let plan = plan_piece(&s, &loose_for(&s)).unwrap();
        let partial = TokenGrid::from_flat(4, vec![0; 100 * 4]).unwrap();
        assert!(matches!(
            extract_audio_prompt(&partial, &plan, 2),
            Err(OrchestratorError::ReferenceNotYetGenerated { part: 2, referenced: 1 })
        ));
        assert!(matches!(extract_audio_prompt(&partial, &plan, 1), Err(OrchestratorError::NotAVariation(1))));
    }

    #[test]
    fn transition_weights_flow_into_schedule() {
        let s = spec(&[(20, -1), (20, -1)]);
        let plan = plan_piece(&s, &loose_for(&s)).unwrap();
        let w = plan.parts[1].transition.unwrap();
        assert_eq!(w, TransitionWindow { start_step: 1500, length_steps: 375 });
        let sched = plan.schedule_for(2, None).unwrap();
        for (s, step) in sched.iter().enumerate() {
            let (old, new) = transition_weights(1500 + s as u64, &w);
            let got_old = step.weighted.iter().find(|c| c.condition == plan.parts[0].condition).map_or(0.0, |c| c.weight);
            let got_new = step.weighted.iter().find(|c| c.condition == plan.parts[1].condition).map_or(0.0, |c| c.weight);
            assert_eq!((got_old, got_new), (old, new));
        }
    }

    #[test]
    fn variation_inside_transition_renormalizes() {
        let s = spec(&[(20, -1), (20, 1)]);
        let plan = plan_piece(&s, &loose_for(&s)).unwrap();
        let sched = plan.schedule_for(2, Some(Arc::new(TokenGrid::new(4)))).unwrap();
        for step in &sched {
            let total: f64 = step.weighted.iter().map(|w| w.weight).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        // first step: fully the previous part
        assert_eq!(sched[0].weighted.len(), 1);
        // after the window: prompted + plain current condition
        assert_eq!(sched[400].weighted.len(), 2);
    }

    #[test]
    fn invalid_spec_rejected() {
        let s = parse_form(r#"{"1": ["a", 150, -1]}"#).unwrap();
        assert!(matches!(plan_piece(&s, &OrchestratorConfig::default()), Err(OrchestratorError::InvalidSpec(_))));
    }
}
