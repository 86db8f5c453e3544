//! Autoregressive token models behind a common trait.
//!
//! A backend maps a context window of token rows plus a condition to raw
//! next-step logits for every codebook. The engine does all normalization,
//! blending and sampling itself, which is why the remote protocol carries
//! logits rather than samples.
//!
//! [`ToyBackend`] is a deterministic stand-in. For a context window `w` (the
//! last `context_window` rows, oldest first), codebook `j`, condition id `c`
//! and vocabulary index `v`:
//!
//! ```text
//! h = fnv1a64( le32(tokens of w, row-major) ‖ le32(j) ‖ le64(c) ‖ le32(v) )
//! logit[j][v] = (splitmix64(h) >> 11) · 2⁻⁵³            ∈ [0, 1)
//! ```

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pattern::TokenGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("backend protocol error: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionKind {
    None,
    Text,
    AudioPrefix,
}

/// What the model is conditioned on. Text is opaque to the engine; only the
/// id reaches the toy backend. Audio-prefix conditions carry their prompt
/// tokens, which the engine prepends to the context before calling the
/// backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionId {
    pub kind: ConditionKind,
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<Arc<str>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Arc<TokenGrid>>,
}

impl PartialEq for ConditionId {
    fn eq(&self, other: &Self) -> bool {
        let prefix_eq = match (&self.prefix, &other.prefix) {
            (None, None) => true,
            (Some(a), Some(b)) => Arc::ptr_eq(a, b) || a == b,
            _ => false,
        };
        self.kind == other.kind && self.id == other.id && self.text == other.text && prefix_eq
    }
}

impl ConditionId {
    pub fn unconditional() -> Self {
        Self {
            kind: ConditionKind::None,
            id: 0,
            text: None,
            prefix: None,
        }
    }

    /// Text condition; see [`toy_condition_from_text`].
    pub fn text(text: &str) -> Self {
        toy_condition_from_text(text)
    }

    /// Text condition plus an audio prompt. Keeps the text id so the
    /// backend sees the same conditioning, only with a different context.
    pub fn audio_prefix(base: &ConditionId, prefix: Arc<TokenGrid>) -> Self {
        Self {
            kind: ConditionKind::AudioPrefix,
            id: base.id,
            text: base.text.clone(),
            prefix: Some(prefix),
        }
    }

    pub fn is_valid(&self) -> bool {
        match self.kind {
            ConditionKind::None => true,
            ConditionKind::Text => self.text.is_some(),
            ConditionKind::AudioPrefix => self.prefix.is_some(),
        }
    }
}

/// Stable id for a text prompt: FNV-1a 64 of the trimmed, lowercased text.
pub fn toy_condition_from_text(text: &str) -> ConditionId {
    let normalized = text.trim().to_lowercase();
    ConditionId {
        kind: ConditionKind::Text,
        id: Fnv1a::new().bytes(normalized.as_bytes()).finish(),
        text: Some(Arc::from(text)),
        prefix: None,
    }
}

/// Raw scores, `K × V` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitsStep {
    pub codebooks: usize,
    pub vocab: usize,
    pub values: Vec<f64>,
}

impl LogitsStep {
    pub fn row(&self, codebook: usize) -> &[f64] {
        &self.values[codebook * self.vocab..(codebook + 1) * self.vocab]
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, BackendError> {
        let codebooks = rows.len();
        let vocab = rows.first().map_or(0, Vec::len);
        if codebooks == 0 || rows.iter().any(|r| r.len() != vocab) {
            return Err(BackendError::ShapeMismatch("logit rows are ragged or empty".into()));
        }
        let values: Vec<f64> = rows.into_iter().flatten().collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Protocol("non-finite logit".into()));
        }
        Ok(Self { codebooks, vocab, values })
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks_exact(self.vocab).map(<[f64]>::to_vec).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub name: String,
    pub codebooks: usize,
    pub vocab_size: usize,
    /// Rows of context the backend looks at.
    pub context_window: usize,
    /// Largest context a single request may carry.
    #[serde(default)]
    pub max_context: usize,
    #[serde(default)]
    pub timeout_ms: u64,
}

pub trait TokenModel: Send + Sync {
    fn info(&self) -> &BackendInfo;

    /// Next-step logits for `ctx` under `condition`. Deterministic for fixed inputs.
    fn next_logits(&self, ctx: &TokenGrid, condition: &ConditionId) -> Result<LogitsStep, BackendError>;
}

pub(crate) fn check_context(info: &BackendInfo, ctx: &TokenGrid) -> Result<(), BackendError> {
    if ctx.codebooks() != info.codebooks {
        return Err(BackendError::ShapeMismatch(format!(
            "context has {} codebooks, backend has {}",
            ctx.codebooks(),
            info.codebooks
        )));
    }
    ctx.check_vocab(info.vocab_size)
        .map_err(|e| BackendError::ShapeMismatch(e.to_string()))
}

/// Streaming FNV-1a 64.
#[derive(Debug, Clone, Copy)]
pub struct Fnv1a(u64);

impl Fnv1a {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Self(Self::OFFSET)
    }

    pub fn bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(Self::PRIME);
        }
        self
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn unit_interval(h: u64) -> f64 {
    (splitmix64(h) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Stateless hash-based model; see the module docs for the formula.
#[derive(Debug, Clone)]
pub struct ToyBackend {
    info: BackendInfo,
}

impl ToyBackend {
    pub fn new(codebooks: usize, vocab_size: usize, context_window: usize) -> Self {
        assert!(codebooks >= 1 && vocab_size >= 2, "toy backend needs K >= 1 and V >= 2");
        Self {
            info: BackendInfo {
                name: "toy".into(),
                codebooks,
                vocab_size,
                context_window,
                max_context: usize::MAX,
                timeout_ms: 0,
            },
        }
    }
}

impl Default for ToyBackend {
    fn default() -> Self {
        Self::new(4, 64, 4)
    }
}

impl TokenModel for ToyBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn next_logits(&self, ctx: &TokenGrid, condition: &ConditionId) -> Result<LogitsStep, BackendError> {
        check_context(&self.info, ctx)?;
        let mut base = Fnv1a::new();
        for t in ctx.tail(self.info.context_window) {
            base = base.bytes(&t.to_le_bytes());
        }
        let (k, v) = (self.info.codebooks, self.info.vocab_size);
        let mut values = Vec::with_capacity(k * v);
        for j in 0..k {
            let prefix = base.bytes(&(j as u32).to_le_bytes()).bytes(&condition.id.to_le_bytes());
            for tok in 0..v {
                values.push(unit_interval(prefix.bytes(&(tok as u32).to_le_bytes()).finish()));
            }
        }
        Ok(LogitsStep { codebooks: k, vocab: v, values })
    }
}

/// JSON body of `POST /v1/logits`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsRequest {
    /// Context rows, oldest first. For audio-prefix conditions the prompt
    /// tokens are already prepended.
    pub context: Vec<Vec<u32>>,
    pub condition: WireCondition,
    #[serde(default = "default_want")]
    pub want: String,
}

fn default_want() -> String {
    "logits".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCondition {
    pub kind: ConditionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Vec<Vec<u32>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<u64>,
}

impl WireCondition {
    pub fn from_condition(c: &ConditionId) -> Self {
        Self {
            kind: c.kind,
            text: c.text.as_deref().map(str::to_string),
            prefix: None,
            id: Some(c.id),
        }
    }

    pub fn to_condition(&self) -> ConditionId {
        let text_id = self.text.as_deref().map(|t| toy_condition_from_text(t).id);
        ConditionId {
            kind: self.kind,
            id: self.id.or(text_id).unwrap_or(0),
            text: self.text.as_deref().map(Arc::from),
            prefix: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: Vec<Vec<f64>>,
}

/// Answer a wire request with a local model; used by backend servers.
pub fn serve_logits(model: &dyn TokenModel, request: &LogitsRequest) -> Result<LogitsResponse, BackendError> {
    if request.want != "logits" {
        return Err(BackendError::Protocol(format!("unsupported want {:?}", request.want)));
    }
    let info = model.info();
    if request.context.len() > info.max_context {
        return Err(BackendError::ShapeMismatch(format!(
            "context of {} rows exceeds max_context {}",
            request.context.len(),
            info.max_context
        )));
    }
    let ctx = TokenGrid::from_rows(info.codebooks, &request.context)
        .map_err(|e| BackendError::ShapeMismatch(e.to_string()))?;
    let logits = model.next_logits(&ctx, &request.condition.to_condition())?;
    Ok(LogitsResponse { logits: logits.to_rows() })
}

/// HTTP client for the remote logits protocol.
pub struct RemoteBackend {
    base_url: String,
    agent: ureq::Agent,
    info: BackendInfo,
    max_attempts: usize,
}

impl std::fmt::Debug for RemoteBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteBackend")
            .field("base_url", &self.base_url)
            .field("info", &self.info)
            .finish()
    }
}

impl RemoteBackend {
    /// Fetch `GET /v1/info` and build a client that honors the declared timeout.
    pub fn connect(base_url: &str) -> Result<Self, BackendError> {
        let base_url = base_url.trim_end_matches('/').to_string();
        let probe = agent_with_timeout(Duration::from_secs(10));
        let info: BackendInfo = probe
            .get(&format!("{base_url}/v1/info"))
            .call()
            .map_err(|e| BackendError::Unavailable(format!("{base_url}: {e}")))?
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        if info.codebooks == 0 || info.vocab_size < 2 {
            return Err(BackendError::Protocol(format!("implausible backend info {info:?}")));
        }
        let timeout = if info.timeout_ms == 0 {
            Duration::from_secs(30)
        } else {
            Duration::from_millis(info.timeout_ms)
        };
        Ok(Self {
            base_url,
            agent: agent_with_timeout(timeout),
            info,
            max_attempts: 3,
        })
    }

    fn post_once(&self, body: &LogitsRequest) -> Result<LogitsResponse, (BackendError, bool)> {
        let url = format!("{}/v1/logits", self.base_url);
        match self.agent.post(&url).send_json(body) {
            Ok(mut resp) => resp
                .body_mut()
                .read_json::<LogitsResponse>()
                .map_err(|e| (BackendError::Protocol(e.to_string()), false)),
            Err(ureq::Error::StatusCode(code)) if code >= 500 => {
                Err((BackendError::Unavailable(format!("HTTP {code}")), true))
            }
            Err(ureq::Error::StatusCode(code)) => Err((BackendError::Protocol(format!("HTTP {code}")), false)),
            Err(e) => Err((BackendError::Unavailable(e.to_string()), true)),
        }
    }
}

fn agent_with_timeout(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

impl TokenModel for RemoteBackend {
    fn info(&self) -> &BackendInfo {
        &self.info
    }

    fn next_logits(&self, ctx: &TokenGrid, condition: &ConditionId) -> Result<LogitsStep, BackendError> {
        check_context(&self.info, ctx)?;
        let body = LogitsRequest {
            context: ctx.rows().map(<[u32]>::to_vec).collect(),
            condition: WireCondition::from_condition(condition),
            want: default_want(),
        };
        // Requests are pure, so retrying transport failures is safe.
        let mut last = BackendError::Unavailable("no attempt made".into());
        for attempt in 0..self.max_attempts {
            match self.post_once(&body) {
                Ok(resp) => {
                    let step = LogitsStep::from_rows(resp.logits)?;
                    if step.codebooks != self.info.codebooks || step.vocab != self.info.vocab_size {
                        return Err(BackendError::ShapeMismatch(format!(
                            "got {}x{} logits, expected {}x{}",
                            step.codebooks, step.vocab, self.info.codebooks, self.info.vocab_size
                        )));
                    }
                    return Ok(step);
                }
                Err((e, retryable)) => {
                    last = e;
                    if !retryable {
                        break;
                    }
                    std::thread::sleep(Duration::from_millis(20 << attempt));
                }
            }
        }
        Err(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_vectors() {
        // Published FNV-1a 64 test vectors.
        assert_eq!(Fnv1a::new().finish(), 0xcbf29ce484222325);
        assert_eq!(Fnv1a::new().bytes(b"a").finish(), 0xaf63dc4c8601ec8c);
        assert_eq!(Fnv1a::new().bytes(b"foobar").finish(), 0x85944171f73967e8);
    }

    #[test]
    fn condition_ids_normalize() {
        let a = toy_condition_from_text("Electro swing");
        let b = toy_condition_from_text("electro swing ");
        assert_eq!(a.id, b.id);
        assert_eq!(a.id, Fnv1a::new().bytes(b"electro swing").finish());
        let empty = toy_condition_from_text("");
        assert_eq!(empty.id, Fnv1a::new().finish());
        assert!(empty.is_valid());
    }

    #[test]
    fn toy_is_deterministic_and_condition_sensitive() {
        let model = ToyBackend::default();
        let ctx = TokenGrid::from_rows(4, &[[1u32, 2, 3, 4], [5, 6, 7, 8]]).unwrap();
        let a = toy_condition_from_text("electro swing");
        let b = toy_condition_from_text("smooth guitar ballad");
        let la = model.next_logits(&ctx, &a).unwrap();
        assert_eq!(la, model.next_logits(&ctx, &a).unwrap());
        assert_ne!(la, model.next_logits(&ctx, &b).unwrap());
        assert!(la.values.iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn empty_context_unconditional() {
        let model = ToyBackend::default();
        let l = model.next_logits(&TokenGrid::new(4), &ConditionId::unconditional()).unwrap();
        assert_eq!(l.values.len(), 4 * 64);
    }

    #[test]
    fn shape_checks() {
        let model = ToyBackend::default();
        let bad_k = TokenGrid::from_rows(2, &[[0u32, 0]]).unwrap();
        assert!(matches!(model.next_logits(&bad_k, &ConditionId::unconditional()), Err(BackendError::ShapeMismatch(_))));
        let bad_v = TokenGrid::from_rows(4, &[[0u32, 0, 64, 0]]).unwrap();
        assert!(matches!(model.next_logits(&bad_v, &ConditionId::unconditional()), Err(BackendError::ShapeMismatch(_))));
    }

    #[test]
    fn wire_request_reproduces_local_logits() {
        let model = ToyBackend::default();
        let ctx = TokenGrid::from_rows(4, &[[9u32, 8, 7, 6]]).unwrap();
        let cond = toy_condition_from_text("Chillstep, calm EDM");
        let req = LogitsRequest {
            context: ctx.rows().map(<[u32]>::to_vec).collect(),
            condition: WireCondition::from_condition(&cond),
            want: "logits".into(),
        };
        let json = serde_json::to_string(&req).unwrap();
        let back: LogitsRequest = serde_json::from_str(&json).unwrap();
        let resp = serve_logits(&model, &back).unwrap();
        assert_eq!(LogitsStep::from_rows(resp.logits).unwrap(), model.next_logits(&ctx, &cond).unwrap());
    }
}
