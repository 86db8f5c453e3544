//! Black-box optimization of the instruction prompt given to the form-writing
//! model.
//!
//! Two language models take part. The *prompt optimizer* (PO) proposes
//! instruction prompts; the *music prompter* (MP) turns an instruction
//! prompt into forms. A candidate's score is the mean opinion score of the
//! pieces rendered from its forms.
//!
//! Exploration asks the PO model for a batch of variations of the seed
//! prompt and scores each. Exploitation repeatedly shows the PO model the
//! best prompts with their scores and scores its proposal, which enters the
//! top set only if it beats the current minimum.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{splitmix64, Fnv1a, TokenModel};
use crate::exec::{self, Strategy};
use crate::form::{parse_all_forms, validate_form, FormConstraints, FormSpec};
use crate::orchestrator::{plan_piece, render_grid, OrchestratorConfig};

pub const EXPLORATION_TEMPLATE: &str = include_str!("prompts/explore.txt");
pub const EXPLOITATION_TEMPLATE: &str = include_str!("prompts/exploit.txt");
/// Hand-written instruction prompt used as the default seed.
pub const DEFAULT_SEED_PROMPT: &str = include_str!("prompts/instruction.txt");

pub const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("language model unavailable: {0}")]
    Unavailable(String),
    #[error("scripted responses exhausted at request {0}")]
    ScriptExhausted(usize),
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
    #[error("unexpected response: {0}")]
    Protocol(String),
}

#[derive(Debug, Error)]
pub enum OptimizerError {
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error("expected {expected:?} prompts, response had {count}")]
    MalformedResponse { count: usize, expected: Option<usize> },
    #[error("no valid form after {attempts} attempts")]
    RetryBudgetExhausted { attempts: usize },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("{0}")]
    Precondition(String),
    #[error("render failed: {0}")]
    Render(String),
    #[error("rating failed: {0}")]
    Rating(String),
    #[error("state file version {0} is not supported")]
    StateVersion(u32),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, OptimizerError>;

// ---------------------------------------------------------------------------
// Language model clients

/// A chat model queried with single-turn requests. Every request opens a
/// fresh session; `request_index` counts requests made to this client over
/// the whole run, which lets scripted clients replay after a resume.
pub trait LlmClient: Send + Sync {
    fn complete(&self, request_index: usize, prompt: &str) -> std::result::Result<String, LlmError>;
}

/// Replays responses from a fixture, one per request index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedLlm {
    pub responses: Vec<String>,
    /// Wrap around instead of failing past the end.
    #[serde(default)]
    pub cycle: bool,
}

impl ScriptedLlm {
    pub fn new(responses: Vec<String>) -> Self {
        Self { responses, cycle: false }
    }

    pub fn cycling(responses: Vec<String>) -> Self {
        Self { responses, cycle: true }
    }

    /// Fixture file: `{"responses": [...], "cycle": false}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

impl LlmClient for ScriptedLlm {
    fn complete(&self, request_index: usize, _prompt: &str) -> std::result::Result<String, LlmError> {
        let i = if self.cycle && !self.responses.is_empty() {
            request_index % self.responses.len()
        } else {
            request_index
        };
        self.responses.get(i).cloned().ok_or(LlmError::ScriptExhausted(request_index))
    }
}

/// OpenAI-compatible chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    base_url: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    agent: ureq::Agent,
}

impl HttpLlm {
    /// `credential_env` names the variable holding the bearer token, if any.
    pub fn new(base_url: &str, model: &str, credential_env: Option<&str>) -> std::result::Result<Self, LlmError> {
        let api_key = match credential_env {
            Some(var) => Some(std::env::var(var).map_err(|_| LlmError::MissingCredential(var.to_string()))?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            temperature: 1.0,
            agent,
        })
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, _request_index: usize, prompt: &str) -> std::result::Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": prompt}],
        });
        let mut req = self.agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| LlmError::Unavailable(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        if status != 200 {
            return Err(LlmError::Unavailable(format!("status {status}: {text}")));
        }
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| LlmError::Protocol(e.to_string()))?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| LlmError::Protocol("missing choices[0].message.content".into()))
    }
}

// ---------------------------------------------------------------------------
// Meta prompts and response parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Exploration,
    Exploitation,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrompt {
    pub prompt: String,
    pub score: f64,
}

pub fn exploration_meta_prompt(seed_prompt: &str) -> String {
    format!("{EXPLORATION_TEMPLATE}\n{seed_prompt}")
}

/// Scores are shown to two decimals.
pub fn exploitation_meta_prompt(scored: &[ScoredPrompt]) -> Result<String> {
    if scored.is_empty() {
        return Err(OptimizerError::Precondition("exploitation needs at least one scored prompt".into()));
    }
    let list: Vec<serde_json::Value> = scored
        .iter()
        .map(|s| {
            serde_json::json!({
                "prompt": s.prompt,
                "score": (s.score * 100.0).round() / 100.0,
            })
        })
        .collect();
    Ok(format!("{EXPLOITATION_TEMPLATE}\n{}", serde_json::to_string_pretty(&list)?))
}

/// The first array of strings in `response`. Single-quoted arrays are
/// accepted too.
pub fn parse_llm_prompt_list(response: &str, expected_n: Option<usize>) -> Result<Vec<String>> {
    let list = first_string_array(response).ok_or(OptimizerError::MalformedResponse {
        count: 0,
        expected: expected_n,
    })?;
    match expected_n {
        Some(n) if n != list.len() => Err(OptimizerError::MalformedResponse {
            count: list.len(),
            expected: expected_n,
        }),
        _ => Ok(list),
    }
}

fn first_string_array(text: &str) -> Option<Vec<String>> {
    for (start, _) in text.match_indices('[') {
        let Some(json) = array_as_json(&text[start..]) else { continue };
        if let Ok(list) = serde_json::from_str::<Vec<String>>(&json) {
            return Some(list);
        }
    }
    None
}

/// Rewrite a bracketed array starting at `s[0]` as JSON, converting
/// single-quoted strings. `None` if the brackets never balance.
fn array_as_json(s: &str) -> Option<String> {
    let mut out = String::new();
    let mut depth = 0usize;
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        match c {
            '"' | '\'' => {
                let quote = c;
                let mut body = String::new();
                let mut closed = false;
                while let Some(d) = chars.next() {
                    match d {
                        '\\' => {
                            let e = chars.next()?;
                            if e == quote {
                                body.push(e);
                            } else {
                                body.push('\\');
                                body.push(e);
                            }
                        }
                        _ if d == quote => {
                            closed = true;
                            break;
                        }
                        _ => body.push(d),
                    }
                }
                if !closed {
                    return None;
                }
                let text: String = if quote == '"' {
                    serde_json::from_str(&format!("\"{body}\"")).ok()?
                } else {
                    // single-quoted bodies keep their backslash escapes
                    serde_json::from_str(&format!("\"{}\"", body.replace('"', "\\\""))).unwrap_or(body)
                };
                out.push_str(&serde_json::to_string(&text).ok()?);
            }
            '[' => {
                depth += 1;
                out.push(c);
            }
            ']' => {
                depth = depth.checked_sub(1)?;
                out.push(c);
                if depth == 0 {
                    return Some(out);
                }
            }
            _ => out.push(c),
        }
    }
    None
}

/// One proposed prompt from an exploitation response: the first string
/// array's first entry, else a JSON object's `prompt` field, else the
/// trimmed response.
pub fn parse_proposed_prompt(response: &str) -> Result<String> {
    if let Some(first) = first_string_array(response).and_then(|l| l.into_iter().next()) {
        if !first.trim().is_empty() {
            return Ok(first);
        }
    }
    if let Some(obj) = crate::form::extract_json_object(response) {
        if let Ok(serde_json::Value::Object(map)) = serde_json::from_str::<serde_json::Value>(obj) {
            if let Some(p) = map.get("prompt").and_then(|v| v.as_str()) {
                if !p.trim().is_empty() {
                    return Ok(p.to_string());
                }
            }
        }
    }
    let trimmed = response.trim();
    if trimmed.is_empty() {
        return Err(OptimizerError::EmptyPrompt);
    }
    Ok(trimmed.to_string())
}

// ---------------------------------------------------------------------------
// Rendering and rating

/// Renders one piece from a form and returns an id for the rendered clip.
pub trait PieceEngine: Send + Sync {
    fn constraints(&self) -> FormConstraints;
    fn render(&self, form: &FormSpec, seed: u64) -> Result<String>;
}

/// Token-level rendering on a model backend; the clip id is the grid hash.
pub struct BackendEngine {
    pub backend: Arc<dyn TokenModel>,
    pub config: OrchestratorConfig,
}

impl PieceEngine for BackendEngine {
    fn constraints(&self) -> FormConstraints {
        self.config.constraints
    }

    fn render(&self, form: &FormSpec, seed: u64) -> Result<String> {
        let mut config = self.config;
        config.sampler.seed = seed;
        let plan = plan_piece(form, &config).map_err(|e| OptimizerError::Render(e.to_string()))?;
        let grid = render_grid(&plan, self.backend.as_ref()).map_err(|e| OptimizerError::Render(e.to_string()))?;
        Ok(grid.content_hash())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RatingRequest<'a> {
    /// Instruction prompt under evaluation.
    pub prompt: &'a str,
    pub form: &'a FormSpec,
    pub clip_id: &'a str,
    pub piece: usize,
    pub rater: usize,
}

pub trait RaterSource: Send + Sync {
    /// A score in [1, 5].
    fn rate(&self, request: &RatingRequest<'_>) -> Result<f64>;
}

pub struct ConstantRater(pub f64);

impl RaterSource for ConstantRater {
    fn rate(&self, _: &RatingRequest<'_>) -> Result<f64> {
        Ok(self.0)
    }
}

/// Scores indexed by `piece * raters_per_piece + rater`.
pub struct FixtureRater {
    pub scores: Vec<f64>,
    pub raters_per_piece: usize,
}

impl RaterSource for FixtureRater {
    fn rate(&self, r: &RatingRequest<'_>) -> Result<f64> {
        let i = r.piece * self.raters_per_piece + r.rater;
        self.scores
            .get(i)
            .copied()
            .ok_or_else(|| OptimizerError::Rating(format!("no fixture score at {i}")))
    }
}

/// Stand-in for human raters.
///
/// A prompt's ground-truth quality is `1 + 4·σ(f)` where `f` is
/// [`SimulatedRater::feature_score`]. Each rating adds Gaussian noise seeded
/// by (seed, prompt, clip, piece, rater) and is clamped to [1, 5].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRater {
    pub seed: u64,
    pub noise_sd: f64,
}

const INSTRUMENT_TERMS: &[&str] = &[
    "guitar", "piano", "drum", "bass", "synth", "string", "brass", "pad", "percussion", "violin", "organ", "bell",
];
const STRUCTURE_TERMS: &[&str] = &[
    "form", "variation", "contrast", "transition", "coherent", "unity", "theme", "climax", "bpm",
];
const PENALTY_TERMS: &[&str] = &["jazz", "classical", "slow", "soft", "vague", "world fusion"];

impl Default for SimulatedRater {
    fn default() -> Self {
        Self { seed: 0, noise_sd: 0.5 }
    }
}

impl SimulatedRater {
    pub fn new(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    /// Keyword heuristic over the lowercased prompt:
    /// `-1.5 + 0.3·instruments + 0.35·structure − 0.6·penalties`, where each
    /// count is the number of distinct listed terms present (instruments
    /// capped at 6, structure at 5), minus 0.5 for prompts under 8 words.
    pub fn feature_score(text: &str) -> f64 {
        let lower = text.to_lowercase();
        let count = |terms: &[&str]| terms.iter().filter(|t| lower.contains(**t)).count() as f64;
        let words = lower.split_whitespace().count();
        -1.5 + 0.3 * count(INSTRUMENT_TERMS).min(6.0) + 0.35 * count(STRUCTURE_TERMS).min(5.0)
            - 0.6 * count(PENALTY_TERMS)
            - if words < 8 { 0.5 } else { 0.0 }
    }

    /// Noise-free score of a prompt.
    pub fn expected_score(text: &str) -> f64 {
        1.0 + 4.0 / (1.0 + (-Self::feature_score(text)).exp())
    }
}

impl RaterSource for SimulatedRater {
    fn rate(&self, r: &RatingRequest<'_>) -> Result<f64> {
        let h = Fnv1a::new()
            .bytes(&self.seed.to_le_bytes())
            .bytes(r.prompt.as_bytes())
            .bytes(r.clip_id.as_bytes())
            .bytes(&(r.piece as u64).to_le_bytes())
            .bytes(&(r.rater as u64).to_le_bytes())
            .finish();
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        let eps = Normal::new(0.0, self.noise_sd)
            .map_err(|e| OptimizerError::Rating(e.to_string()))?
            .sample(&mut rng);
        Ok((Self::expected_score(r.prompt) + eps).clamp(1.0, 5.0))
    }
}

// ---------------------------------------------------------------------------
// State

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Seed,
    Exploration,
    Exploitation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePrompt {
    pub text: String,
    pub origin: Origin,
    pub avg_mos: Option<f64>,
    pub num_ratings: usize,
    /// Scored at the floor because no valid form came back.
    #[serde(default)]
    pub floored: bool,
}

impl CandidatePrompt {
    pub fn new(text: impl Into<String>, origin: Origin) -> Self {
        Self {
            text: text.into(),
            origin,
            avg_mos: None,
            num_ratings: 0,
            floored: false,
        }
    }

    fn score(&self) -> f64 {
        self.avg_mos.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub n_explore: usize,
    pub pieces_per_prompt: usize,
    pub raters_per_piece: usize,
    pub top_k: usize,
    pub max_iterations: usize,
    /// Extra MP requests allowed when a response has too few valid forms.
    pub form_retries: usize,
    pub floor_score: f64,
    /// Root of all piece seeds.
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            n_explore: 20,
            pieces_per_prompt: 10,
            raters_per_piece: 5,
            top_k: 5,
            max_iterations: 20,
            form_retries: 3,
            floor_score: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopSnapshot {
    pub iteration: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Score of this iteration's proposal; absent for the initial snapshot.
    pub candidate_score: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestCounters {
    pub po: usize,
    pub mp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub version: u32,
    pub phase: Phase,
    pub config: OptimizerConfig,
    pub seed: CandidatePrompt,
    /// Proposals from the exploration request, scored or not.
    pub proposals: Vec<String>,
    pub pool: Vec<CandidatePrompt>,
    pub top_set: Vec<CandidatePrompt>,
    pub iteration: usize,
    pub evaluations: u64,
    pub requests: RequestCounters,
    pub trajectory: Vec<TopSnapshot>,
}

impl OptimizerState {
    pub fn new(seed_prompt: &str, config: OptimizerConfig) -> Self {
        Self {
            version: STATE_VERSION,
            phase: Phase::Exploration,
            config,
            seed: CandidatePrompt::new(seed_prompt, Origin::Seed),
            proposals: Vec::new(),
            pool: Vec::new(),
            top_set: Vec::new(),
            iteration: 0,
            evaluations: 0,
            requests: RequestCounters::default(),
            trajectory: Vec::new(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let state: Self = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if state.version != STATE_VERSION {
            return Err(OptimizerError::StateVersion(state.version));
        }
        Ok(state)
    }

    pub fn top_scores(&self) -> Vec<f64> {
        self.top_set.iter().map(CandidatePrompt::score).collect()
    }

    fn snapshot(&self, candidate_score: Option<f64>, accepted: bool) -> TopSnapshot {
        let scores = self.top_scores();
        TopSnapshot {
            iteration: self.iteration,
            min: scores.iter().copied().fold(f64::INFINITY, f64::min),
            max: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean: scores.iter().sum::<f64>() / scores.len().max(1) as f64,
            candidate_score,
            accepted,
        }
    }

    /// Insert if the set has room or `c` strictly beats the minimum.
    fn offer(&mut self, c: CandidatePrompt) -> bool {
        let k = self.config.top_k;
        let min = self.top_set.last().map(CandidatePrompt::score);
        let accept = self.top_set.len() < k || min.is_some_and(|m| c.score() > m);
        if accept {
            self.top_set.push(c);
            sort_desc(&mut self.top_set);
            self.top_set.truncate(k);
        }
        accept
    }
}

fn sort_desc(set: &mut [CandidatePrompt]) {
    set.sort_by(|a, b| b.score().total_cmp(&a.score()));
}

// ---------------------------------------------------------------------------
// The loop

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub avg_mos: f64,
    pub scores: Vec<f64>,
    pub forms_used: usize,
    pub mp_requests: usize,
}

pub struct Optimizer<'a> {
    pub po_llm: &'a dyn LlmClient,
    pub mp_llm: &'a dyn LlmClient,
    pub engine: &'a dyn PieceEngine,
    pub raters: &'a dyn RaterSource,
    pub strategy: Strategy,
}

/// Seed of piece `piece` in evaluation `evaluation`.
pub fn piece_seed(root: u64, evaluation: u64, piece: usize) -> u64 {
    splitmix64(root ^ splitmix64(evaluation.wrapping_mul(0x1_0000) ^ piece as u64))
}

impl Optimizer<'_> {
    /// Score one instruction prompt. MP requests start at `mp_cursor`.
    ///
    /// Valid forms are collected from up to `1 + form_retries` responses.
    /// If fewer than `pieces_per_prompt` arrive, the valid ones are reused
    /// with fresh seeds; if none arrive the budget is exhausted.
    pub fn evaluate_candidate(
        &self,
        prompt: &str,
        config: &OptimizerConfig,
        evaluation: u64,
        mp_cursor: usize,
    ) -> Result<Evaluation> {
        if prompt.trim().is_empty() {
            return Err(OptimizerError::EmptyPrompt);
        }
        let constraints = self.engine.constraints();
        let mut forms: Vec<FormSpec> = Vec::new();
        let mut requests = 0;
        while forms.len() < config.pieces_per_prompt && requests <= config.form_retries {
            let response = self.mp_llm.complete(mp_cursor + requests, prompt)?;
            requests += 1;
            forms.extend(
                parse_all_forms(&response)
                    .into_iter()
                    .filter_map(|f| f.ok())
                    .filter(|f| validate_form(f, &constraints).valid),
            );
        }
        if forms.is_empty() {
            return Err(OptimizerError::RetryBudgetExhausted { attempts: requests });
        }
        let forms_used = forms.len().min(config.pieces_per_prompt);
        let jobs: Vec<(usize, &FormSpec)> = (0..config.pieces_per_prompt).map(|i| (i, &forms[i % forms_used])).collect();
        let clips = exec::map_slice(&jobs, self.strategy, |&(i, form)| {
            self.engine.render(form, piece_seed(config.seed, evaluation, i))
        });
        let mut scores = Vec::with_capacity(config.pieces_per_prompt * config.raters_per_piece);
        for (&(piece, form), clip) in jobs.iter().zip(clips) {
            let clip_id = clip?;
            for rater in 0..config.raters_per_piece {
                let s = self.raters.rate(&RatingRequest {
                    prompt,
                    form,
                    clip_id: &clip_id,
                    piece,
                    rater,
                })?;
                scores.push(s);
            }
        }
        let avg_mos = scores.iter().sum::<f64>() / scores.len() as f64;
        Ok(Evaluation {
            avg_mos,
            scores,
            forms_used,
            mp_requests: requests,
        })
    }

    /// Evaluate and book-keep, flooring candidates without a valid form.
    fn score_into(&self, state: &mut OptimizerState, candidate: &mut CandidatePrompt) -> Result<()> {
        let config = state.config;
        match self.evaluate_candidate(&candidate.text, &config, state.evaluations, state.requests.mp) {
            Ok(e) => {
                candidate.avg_mos = Some(e.avg_mos);
                candidate.num_ratings = e.scores.len();
                state.requests.mp += e.mp_requests;
            }
            Err(OptimizerError::RetryBudgetExhausted { attempts }) => {
                candidate.avg_mos = Some(config.floor_score);
                candidate.num_ratings = 0;
                candidate.floored = true;
                state.requests.mp += attempts;
            }
            Err(e) => return Err(e),
        }
        state.evaluations += 1;
        Ok(())
    }

    /// Score the seed and every exploration proposal, then seed the top set.
    pub fn run_exploration(&self, state: &mut OptimizerState, checkpoint: &mut dyn FnMut(&OptimizerState)) -> Result<()> {
        if state.phase != Phase::Exploration {
            return Err(OptimizerError::Precondition("not in the exploration phase".into()));
        }
        if state.seed.avg_mos.is_none() {
            let mut seed = state.seed.clone();
            self.score_into(state, &mut seed)?;
            state.seed = seed;
            checkpoint(state);
        }
        if state.proposals.is_empty() {
            let n = state.config.n_explore;
            let meta = exploration_meta_prompt(&state.seed.text);
            let mut last = None;
            for _ in 0..=state.config.form_retries {
                let response = self.po_llm.complete(state.requests.po, &meta)?;
                state.requests.po += 1;
                match parse_llm_prompt_list(&response, Some(n)) {
                    Ok(list) => {
                        state.proposals = list;
                        last = None;
                        break;
                    }
                    Err(e) => last = Some(e),
                }
            }
            if let Some(e) = last {
                return Err(e);
            }
            checkpoint(state);
        }
        while state.pool.len() < state.proposals.len() {
            let mut c = CandidatePrompt::new(state.proposals[state.pool.len()].clone(), Origin::Exploration);
            self.score_into(state, &mut c)?;
            state.pool.push(c);
            checkpoint(state);
        }
        let mut all: Vec<CandidatePrompt> = std::iter::once(state.seed.clone()).chain(state.pool.iter().cloned()).collect();
        sort_desc(&mut all);
        all.truncate(state.config.top_k);
        state.top_set = all;
        state.phase = if state.config.max_iterations == 0 {
            Phase::Done
        } else {
            Phase::Exploitation
        };
        state.trajectory = vec![state.snapshot(None, false)];
        checkpoint(state);
        Ok(())
    }

    /// One proposal from the current top set, scored and offered.
    pub fn run_exploitation_step(
        &self,
        state: &mut OptimizerState,
        checkpoint: &mut dyn FnMut(&OptimizerState),
    ) -> Result<()> {
        if state.phase != Phase::Exploitation || state.iteration >= state.config.max_iterations {
            return Err(OptimizerError::Precondition("no exploitation iteration left".into()));
        }
        let scored: Vec<ScoredPrompt> = state
            .top_set
            .iter()
            .map(|c| ScoredPrompt {
                prompt: c.text.clone(),
                score: c.score(),
            })
            .collect();
        let meta = exploitation_meta_prompt(&scored)?;
        let response = self.po_llm.complete(state.requests.po, &meta)?;
        let proposal = parse_proposed_prompt(&response)?;
        let mut c = CandidatePrompt::new(proposal, Origin::Exploitation);
        let mut next = state.clone();
        next.requests.po += 1;
        self.score_into(&mut next, &mut c)?;
        let score = c.avg_mos;
        next.pool.push(c.clone());
        let accepted = next.offer(c);
        next.iteration += 1;
        next.trajectory.push(next.snapshot(score, accepted));
        if next.iteration >= next.config.max_iterations {
            next.phase = Phase::Done;
        }
        *state = next;
        checkpoint(state);
        Ok(())
    }

    /// Continue from any state until done.
    pub fn run(&self, state: &mut OptimizerState, checkpoint: &mut dyn FnMut(&OptimizerState)) -> Result<()> {
        loop {
            match state.phase {
                Phase::Exploration => self.run_exploration(state, checkpoint)?,
                Phase::Exploitation => self.run_exploitation_step(state, checkpoint)?,
                Phase::Done => return Ok(()),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplorationHistogram {
    pub bins: Vec<HistogramBin>,
    pub seed_score: Option<f64>,
    pub scores: Vec<f64>,
}

/// Scores of the exploration pool in `bin_width` bins over [1, 5].
pub fn exploration_histogram(state: &OptimizerState, bin_width: f64) -> ExplorationHistogram {
    let scores: Vec<f64> = state
        .pool
        .iter()
        .filter(|c| c.origin == Origin::Exploration)
        .filter_map(|c| c.avg_mos)
        .collect();
    let n = ((4.0 / bin_width).ceil() as usize).max(1);
    let mut bins: Vec<HistogramBin> = (0..n)
        .map(|i| HistogramBin {
            lo: 1.0 + i as f64 * bin_width,
            hi: (1.0 + (i + 1) as f64 * bin_width).min(5.0),
            count: 0,
        })
        .collect();
    for s in &scores {
        let i = (((s - 1.0) / bin_width).floor().max(0.0) as usize).min(n - 1);
        bins[i].count += 1;
    }
    ExplorationHistogram {
        bins,
        seed_score: state.seed.avg_mos,
        scores,
    }
}

impl ExplorationHistogram {
    pub fn render_text(&self) -> String {
        let mut out = String::from("exploration scores\n");
        for b in &self.bins {
            let seed_mark = match self.seed_score {
                Some(s) if s >= b.lo && (s < b.hi || (b.hi == 5.0 && s <= 5.0)) => "  <- seed",
                _ => "",
            };
            out.push_str(&format!("{:.2}-{:.2} | {:<20}{}\n", b.lo, b.hi, "#".repeat(b.count), seed_mark));
        }
        out
    }
}

pub fn trajectory_text(state: &OptimizerState) -> String {
    let mut out = String::from("iter    min    max   mean  candidate\n");
    for t in &state.trajectory {
        let cand = match t.candidate_score {
            Some(s) => format!("{s:.2}{}", if t.accepted { " accepted" } else { "" }),
            None => "-".into(),
        };
        out.push_str(&format!("{:>4} {:>6.2} {:>6.2} {:>6.2}  {}\n", t.iteration, t.min, t.max, t.mean, cand));
    }
    out
}

/// Summary of a run for JSON reports.
pub fn summary(state: &OptimizerState) -> BTreeMap<&'static str, serde_json::Value> {
    let mut m = BTreeMap::new();
    m.insert("phase", serde_json::json!(state.phase));
    m.insert("iteration", serde_json::json!(state.iteration));
    m.insert("evaluations", serde_json::json!(state.evaluations));
    m.insert("seed_score", serde_json::json!(state.seed.avg_mos));
    m.insert("top_set", serde_json::json!(state.top_set));
    m.insert("trajectory", serde_json::json!(state.trajectory));
    m
}
