//! Multi-condition classifier-free guidance and the autoregressive sampling loop.
//!
//! Each step the backend is queried once per distinct condition. The
//! conditional distributions are mixed by their schedule weights and then
//! interpolated against the unconditional one:
//!
//! ```text
//! q = (1 − g) · p_uncond + g · Σᵢ wᵢ · pᵢ
//! ```
//!
//! Weights move over time: a crossfade between the previous and the current
//! part's text ([`transition_weights`]) and a decaying audio-prompt weight
//! ([`decay_weight`]). One token per codebook is then drawn from `q`.
//!
//! Random draws: one `f64` per codebook per step, in codebook order, from a
//! ChaCha8 stream seeded with [`SamplerConfig::seed`].

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{BackendError, ConditionId, ConditionKind, LogitsStep, TokenModel};
use crate::pattern::TokenGrid;

/// Tolerance on "weights sum to one" and "distribution sums to one".
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("top_k = 0 masks every token")]
    AllMasked,
    #[error("condition weights sum to {0}, expected 1")]
    WeightSumInvalid(f64),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid sampler config: {0}")]
    InvalidConfig(String),
    #[error("schedule has {got} steps, segment needs {expected}")]
    ScheduleLength { got: usize, expected: usize },
    #[error("checkpoint does not belong to this schedule")]
    CheckpointMismatch,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    /// Convex combination of probabilities; `g` must lie in `[0, 1]`.
    #[default]
    Probability,
    /// `softmax(l_uncond + g · (Σ wᵢ lᵢ − l_uncond))`; any `g ≥ 0`.
    LogitExtrapolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub guidance: f64,
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub mode: GuidanceMode,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: 0.85,
            temperature: 1.0,
            top_k: Some(250),
            seed: 0,
            mode: GuidanceMode::Probability,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(SamplerError::InvalidConfig(format!("temperature {} must be > 0", self.temperature)));
        }
        match self.mode {
            GuidanceMode::Probability if !(0.0..=1.0).contains(&self.guidance) => Err(SamplerError::InvalidConfig(
                format!("guidance {} must be in [0, 1] in probability mode", self.guidance),
            )),
            GuidanceMode::LogitExtrapolation if !(self.guidance >= 0.0 && self.guidance.is_finite()) => {
                Err(SamplerError::InvalidConfig(format!("guidance {} must be >= 0", self.guidance)))
            }
            _ => Ok(()),
        }
    }
}

/// `K` probability vectors of length `V`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub codebooks: usize,
    pub vocab: usize,
    pub probs: Vec<f64>,
}

impl Distributions {
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let vocab = rows.first().map_or(0, Vec::len);
        Self {
            codebooks: rows.len(),
            vocab,
            probs: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn row(&self, codebook: usize) -> &[f64] {
        &self.probs[codebook * self.vocab..(codebook + 1) * self.vocab]
    }

    fn same_shape(&self, other: &Distributions) -> bool {
        self.codebooks == other.codebooks && self.vocab == other.vocab
    }
}

/// Per codebook: keep the `top_k` largest logits (ties to the lower index),
/// divide by temperature, exponentiate and normalize.
pub fn softmax_with(logits: &LogitsStep, temperature: f64, top_k: Option<usize>) -> Result<Distributions, SamplerError> {
    if top_k == Some(0) {
        return Err(SamplerError::AllMasked);
    }
    if temperature.is_nan() || temperature <= 0.0 {
        return Err(SamplerError::InvalidConfig(format!("temperature {temperature} must be > 0")));
    }
    let v = logits.vocab;
    let mut probs = Vec::with_capacity(logits.values.len());
    let mut order: Vec<usize> = Vec::new();
    for j in 0..logits.codebooks {
        let row = logits.row(j);
        let keep = top_k.filter(|&k| k < v).map(|k| {
            order.clear();
            order.extend(0..v);
            order.select_nth_unstable_by(k - 1, |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            let mut mask = vec![false; v];
            for &i in &order[..k] {
                mask[i] = true;
            }
            mask
        });
        let kept = |i: usize| keep.as_ref().is_none_or(|m| m[i]);
        let max = (0..v).filter(|&i| kept(i)).map(|i| row[i]).fold(f64::NEG_INFINITY, f64::max);
        let start = probs.len();
        for (i, &x) in row.iter().enumerate() {
            probs.push(if kept(i) { ((x - max) / temperature).exp() } else { 0.0 });
        }
        let total: f64 = probs[start..].iter().sum();
        for p in &mut probs[start..] {
            *p /= total;
        }
    }
    Ok(Distributions {
        codebooks: logits.codebooks,
        vocab: v,
        probs,
    })
}

/// `q = (1 − g)·p_uncond + g·Σ wᵢ·pᵢ`, per cell.
pub fn blend(p_uncond: &Distributions, conds: &[(&Distributions, f64)], guidance: f64) -> Result<Distributions, SamplerError> {
    let total: f64 = conds.iter().map(|(_, w)| w).sum();
    if conds.is_empty() || (total - 1.0).abs() > WEIGHT_TOLERANCE || conds.iter().any(|(_, w)| !(0.0..=1.0).contains(w)) {
        return Err(SamplerError::WeightSumInvalid(total));
    }
    if !(0.0..=1.0).contains(&guidance) {
        return Err(SamplerError::InvalidConfig(format!("guidance {guidance} outside [0, 1]")));
    }
    for (d, _) in conds {
        if !d.same_shape(p_uncond) {
            return Err(SamplerError::ShapeMismatch(format!(
                "{}x{} vs {}x{}",
                d.codebooks, d.vocab, p_uncond.codebooks, p_uncond.vocab
            )));
        }
    }
    let mut mixed = vec![0.0; p_uncond.probs.len()];
    for (d, w) in conds {
        for (m, p) in mixed.iter_mut().zip(&d.probs) {
            *m += w * p;
        }
    }
    let probs = p_uncond
        .probs
        .iter()
        .zip(&mixed)
        .map(|(pu, m)| (1.0 - guidance) * pu + guidance * m)
        .collect();
    Ok(Distributions {
        codebooks: p_uncond.codebooks,
        vocab: p_uncond.vocab,
        probs,
    })
}

/// Logit-space guidance, the usual CFG extrapolation; not the default.
pub fn blend_logits(l_uncond: &LogitsStep, conds: &[(&LogitsStep, f64)], guidance: f64) -> Result<LogitsStep, SamplerError> {
    let total: f64 = conds.iter().map(|(_, w)| w).sum();
    if conds.is_empty() || (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(SamplerError::WeightSumInvalid(total));
    }
    let mut mixed = vec![0.0; l_uncond.values.len()];
    for (l, w) in conds {
        if l.codebooks != l_uncond.codebooks || l.vocab != l_uncond.vocab {
            return Err(SamplerError::ShapeMismatch("logit shapes differ".into()));
        }
        for (m, x) in mixed.iter_mut().zip(&l.values) {
            *m += w * x;
        }
    }
    Ok(LogitsStep {
        codebooks: l_uncond.codebooks,
        vocab: l_uncond.vocab,
        values: l_uncond.values.iter().zip(&mixed).map(|(u, m)| u + guidance * (m - u)).collect(),
    })
}

/// Linear crossfade from the previous condition to the next one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionWindow {
    pub start_step: u64,
    pub length_steps: u64,
}

/// Linear fade-out of the audio-prompt condition, counted from part start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecaySchedule {
    pub length_steps: u64,
}

/// `(w_old, w_new)` at `step`. Both endpoints of the window are attained
/// exactly; a window of length 1 is already fully new.
pub fn transition_weights(step: u64, window: &TransitionWindow) -> (f64, f64) {
    if step < window.start_step {
        return (1.0, 0.0);
    }
    let offset = step - window.start_step;
    if window.length_steps <= 1 || offset >= window.length_steps - 1 {
        return (0.0, 1.0);
    }
    let w_old = 1.0 - offset as f64 / (window.length_steps - 1) as f64;
    (w_old, 1.0 - w_old)
}

/// Weight of the audio-prompted distribution `step_in_part` steps into a part.
pub fn decay_weight(step_in_part: u64, schedule: &DecaySchedule) -> f64 {
    if schedule.length_steps <= 1 {
        return 0.0;
    }
    (1.0 - step_in_part as f64 / (schedule.length_steps - 1) as f64).max(0.0)
}

/// One categorical draw per codebook by inverse CDF.
pub fn sample_step<R: Rng + ?Sized>(q: &Distributions, rng: &mut R) -> Vec<u32> {
    (0..q.codebooks)
        .map(|j| {
            let u: f64 = rng.random();
            let row = q.row(j);
            let mut cum = 0.0;
            let mut last_positive = 0;
            for (i, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    last_positive = i;
                }
                cum += p;
                if u < cum {
                    return i as u32;
                }
            }
            // Rounding left the CDF just short of u.
            last_positive as u32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedCondition {
    pub condition: ConditionId,
    pub weight: f64,
}

/// Conditions in force at one step of a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepConditions {
    pub uncond: ConditionId,
    pub weighted: Vec<WeightedCondition>,
}

impl StepConditions {
    pub fn single(condition: ConditionId) -> Self {
        Self {
            uncond: ConditionId::unconditional(),
            weighted: vec![WeightedCondition { condition, weight: 1.0 }],
        }
    }

    /// Merge identical conditions and drop zero weights.
    fn distinct(&self) -> Vec<(&ConditionId, f64)> {
        let mut out: Vec<(&ConditionId, f64)> = Vec::with_capacity(self.weighted.len());
        for wc in &self.weighted {
            if wc.weight == 0.0 {
                continue;
            }
            match out.iter_mut().find(|(c, _)| **c == wc.condition) {
                Some(entry) => entry.1 += wc.weight,
                None => out.push((&wc.condition, wc.weight)),
            }
        }
        out
    }
}

/// Where an interrupted segment stopped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Tokens generated in this segment so far.
    pub generated: TokenGrid,
    pub step: usize,
    pub seed: u64,
    /// ChaCha8 word position of the sampling stream.
    pub rng_word_pos: u128,
    pub schedule_hash: String,
}

#[derive(Debug, Error)]
#[error("segment generation stopped at step {}: {source}", checkpoint.as_ref().map_or(0, |c| c.step))]
pub struct SegmentError {
    #[source]
    pub source: SamplerError,
    /// Present when the failure happened mid-loop.
    pub checkpoint: Option<Box<Checkpoint>>,
}

impl From<SamplerError> for SegmentError {
    fn from(source: SamplerError) -> Self {
        Self { source, checkpoint: None }
    }
}

/// Hex SHA-256 identifying a schedule (condition kinds, ids, texts, prefix
/// contents and exact weight bits per step).
pub fn schedule_hash(schedule: &[StepConditions]) -> String {
    let mut hasher = Sha256::new();
    let mut prefix_hashes: HashMap<*const TokenGrid, String> = HashMap::new();
    let mut feed = |hasher: &mut Sha256, c: &ConditionId| {
        hasher.update([c.kind as u8]);
        hasher.update(c.id.to_le_bytes());
        if let Some(t) = &c.text {
            hasher.update((t.len() as u64).to_le_bytes());
            hasher.update(t.as_bytes());
        }
        if let Some(p) = &c.prefix {
            let h = prefix_hashes.entry(Arc::as_ptr(p)).or_insert_with(|| p.content_hash());
            hasher.update(h.as_bytes());
        }
    };
    for step in schedule {
        hasher.update(b"S");
        feed(&mut hasher, &step.uncond);
        for wc in &step.weighted {
            feed(&mut hasher, &wc.condition);
            hasher.update(wc.weight.to_bits().to_le_bytes());
        }
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Last `window` rows of `base ++ generated` as a grid.
fn context_window(base: &TokenGrid, generated: &TokenGrid, window: usize) -> TokenGrid {
    let k = generated.codebooks();
    let from_generated = generated.steps().min(window);
    let from_base = (window - from_generated).min(base.steps());
    let mut flat = Vec::with_capacity((from_base + from_generated) * k);
    flat.extend_from_slice(base.tail(from_base));
    flat.extend_from_slice(generated.tail(from_generated));
    TokenGrid::from_flat(k, flat).expect("rows have width k")
}

/// Autoregressively sample `length_steps` new rows after `ctx0`.
///
/// Audio-prefix conditions see `prefix ++ generated`; every other condition
/// sees `ctx0 ++ generated`. Both are cut to the backend's context window.
pub fn generate_segment(
    backend: &dyn TokenModel,
    schedule: &[StepConditions],
    length_steps: usize,
    ctx0: &TokenGrid,
    config: &SamplerConfig,
) -> Result<TokenGrid, SegmentError> {
    run_segment(backend, schedule, length_steps, ctx0, config, None)
}

/// Continue a segment from a checkpoint produced by a failed run.
pub fn resume_segment(
    backend: &dyn TokenModel,
    schedule: &[StepConditions],
    length_steps: usize,
    ctx0: &TokenGrid,
    config: &SamplerConfig,
    checkpoint: &Checkpoint,
) -> Result<TokenGrid, SegmentError> {
    if checkpoint.seed != config.seed || checkpoint.schedule_hash != schedule_hash(schedule) {
        return Err(SamplerError::CheckpointMismatch.into());
    }
    run_segment(backend, schedule, length_steps, ctx0, config, Some(checkpoint))
}

fn run_segment(
    backend: &dyn TokenModel,
    schedule: &[StepConditions],
    length_steps: usize,
    ctx0: &TokenGrid,
    config: &SamplerConfig,
    resume: Option<&Checkpoint>,
) -> Result<TokenGrid, SegmentError> {
    config.validate()?;
    if schedule.len() != length_steps {
        return Err(SamplerError::ScheduleLength {
            got: schedule.len(),
            expected: length_steps,
        }
        .into());
    }
    let info = backend.info();
    let k = info.codebooks;
    if ctx0.codebooks() != k {
        return Err(SamplerError::ShapeMismatch(format!("context has {} codebooks, backend {}", ctx0.codebooks(), k)).into());
    }
    let window = info.context_window.min(info.max_context.max(1));

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut generated, start) = match resume {
        Some(cp) => {
            rng.set_word_pos(cp.rng_word_pos);
            (cp.generated.clone(), cp.step)
        }
        None => (TokenGrid::with_capacity(k, length_steps), 0),
    };

    for (step, conds) in schedule.iter().enumerate().skip(start) {
        let word_pos = rng.get_word_pos();
        match sample_one(backend, conds, ctx0, &generated, window, config, &mut rng) {
            Ok(row) => generated.push_row(&row).map_err(|e| SamplerError::ShapeMismatch(e.to_string()))?,
            Err(source) => {
                return Err(SegmentError {
                    source,
                    checkpoint: Some(Box::new(Checkpoint {
                        generated,
                        step,
                        seed: config.seed,
                        rng_word_pos: word_pos,
                        schedule_hash: schedule_hash(schedule),
                    })),
                })
            }
        }
    }
    Ok(generated)
}

fn sample_one(
    backend: &dyn TokenModel,
    conds: &StepConditions,
    ctx0: &TokenGrid,
    generated: &TokenGrid,
    window: usize,
    config: &SamplerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>, SamplerError> {
    let distinct = conds.distinct();
    let total: f64 = distinct.iter().map(|(_, w)| w).sum();
    if distinct.is_empty() || (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(SamplerError::WeightSumInvalid(total));
    }
    let g = config.guidance;
    let query = |c: &ConditionId| -> Result<LogitsStep, SamplerError> {
        let ctx = match (&c.kind, &c.prefix) {
            (ConditionKind::AudioPrefix, Some(prefix)) => context_window(prefix, generated, window),
            _ => context_window(ctx0, generated, window),
        };
        Ok(backend.next_logits(&ctx, c)?)
    };

    let q = match config.mode {
        GuidanceMode::Probability => {
            // Terms with a zero coefficient are skipped: they contribute exact zeros.
            let uncond = if g < 1.0 {
                Some(softmax_with(&query(&conds.uncond)?, config.temperature, config.top_k)?)
            } else {
                None
            };
            let cond_dists = if g > 0.0 {
                distinct
                    .iter()
                    .map(|(c, w)| Ok((softmax_with(&query(c)?, config.temperature, config.top_k)?, *w)))
                    .collect::<Result<Vec<_>, SamplerError>>()?
            } else {
                Vec::new()
            };
            match (uncond, cond_dists.is_empty()) {
                (Some(u), true) => u,
                (None, _) => {
                    let placeholder = &cond_dists[0].0;
                    let refs: Vec<_> = cond_dists.iter().map(|(d, w)| (d, *w)).collect();
                    blend(placeholder, &refs, 1.0)?
                }
                (Some(u), false) => {
                    let refs: Vec<_> = cond_dists.iter().map(|(d, w)| (d, *w)).collect();
                    blend(&u, &refs, g)?
                }
            }
        }
        GuidanceMode::LogitExtrapolation => {
            let lu = query(&conds.uncond)?;
            let lc = distinct
                .iter()
                .map(|(c, w)| Ok((query(c)?, *w)))
                .collect::<Result<Vec<_>, SamplerError>>()?;
            let refs: Vec<_> = lc.iter().map(|(l, w)| (l, *w)).collect();
            softmax_with(&blend_logits(&lu, &refs, g)?, config.temperature, config.top_k)?
        }
    };
    Ok(sample_step(&q, rng))
}
