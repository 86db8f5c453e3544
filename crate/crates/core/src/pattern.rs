//! Token grids and the interleaving patterns that turn them into step
//! sequences for an autoregressive model.
//!
//! * `parallel`: one step per frame, all `K` codebooks at once.
//! * `delay`: codebook `j` is shifted right by `j` steps, so at step `s` the
//!   slot for codebook `j` carries frame `s - j`. Length `T + K - 1`.
//! * `flatten`: row-major, one token per step. Length `T * K`.
//!
//! PAD is out of band (`None`); it only becomes `0xFFFFFFFF` inside
//! serialized token streams.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Serialized PAD marker.
pub const PAD_WIRE: u32 = 0xFFFF_FFFF;
const STREAM_MAGIC: &[u8; 4] = b"TOKS";
const STREAM_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum PatternError {
    #[error("sequence has {got} steps of width {width}, expected {expected} steps of width {expected_width}")]
    InconsistentLength {
        got: usize,
        width: usize,
        expected: usize,
        expected_width: usize,
    },
    #[error("PAD at step {step}, slot {slot} where the pattern requires a token")]
    PadInDataPosition { step: usize, slot: usize },
    #[error("token at step {step}, slot {slot} where the pattern requires PAD")]
    DataInPadPosition { step: usize, slot: usize },
    #[error("row has {got} tokens, grid has {expected} codebooks")]
    RowWidth { got: usize, expected: usize },
    #[error("token {token} at step {step} codebook {codebook} is outside vocabulary of size {vocab}")]
    TokenOutOfRange {
        step: usize,
        codebook: usize,
        token: u32,
        vocab: usize,
    },
    #[error("token stream: {0}")]
    Format(String),
    #[error("token stream io: {0}")]
    Io(String),
}

/// `T × K` matrix of codebook indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenGrid {
    codebooks: usize,
    tokens: Vec<u32>,
}

impl TokenGrid {
    pub fn new(codebooks: usize) -> Self {
        assert!(codebooks > 0, "a token grid needs at least one codebook");
        Self {
            codebooks,
            tokens: Vec::new(),
        }
    }

    pub fn with_capacity(codebooks: usize, steps: usize) -> Self {
        let mut g = Self::new(codebooks);
        g.tokens.reserve(steps * codebooks);
        g
    }

    pub fn from_rows<R: AsRef<[u32]>>(codebooks: usize, rows: &[R]) -> Result<Self, PatternError> {
        let mut g = Self::with_capacity(codebooks, rows.len());
        for r in rows {
            g.push_row(r.as_ref())?;
        }
        Ok(g)
    }

    pub fn from_flat(codebooks: usize, tokens: Vec<u32>) -> Result<Self, PatternError> {
        if codebooks == 0 || !tokens.len().is_multiple_of(codebooks) {
            return Err(PatternError::RowWidth {
                got: tokens.len(),
                expected: codebooks,
            });
        }
        Ok(Self { codebooks, tokens })
    }

    pub fn steps(&self) -> usize {
        self.tokens.len() / self.codebooks
    }

    pub fn codebooks(&self) -> usize {
        self.codebooks
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, step: usize, codebook: usize) -> u32 {
        self.tokens[step * self.codebooks + codebook]
    }

    pub fn row(&self, step: usize) -> &[u32] {
        &self.tokens[step * self.codebooks..(step + 1) * self.codebooks]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u32]> {
        self.tokens.chunks_exact(self.codebooks)
    }

    pub fn as_flat(&self) -> &[u32] {
        &self.tokens
    }

    pub fn push_row(&mut self, row: &[u32]) -> Result<(), PatternError> {
        if row.len() != self.codebooks {
            return Err(PatternError::RowWidth {
                got: row.len(),
                expected: self.codebooks,
            });
        }
        self.tokens.extend_from_slice(row);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &TokenGrid) {
        assert_eq!(self.codebooks, other.codebooks, "codebook count mismatch");
        self.tokens.extend_from_slice(&other.tokens);
    }

    /// Rows `start..end` as a new grid.
    pub fn slice(&self, start: usize, end: usize) -> TokenGrid {
        TokenGrid {
            codebooks: self.codebooks,
            tokens: self.tokens[start * self.codebooks..end * self.codebooks].to_vec(),
        }
    }

    /// The last `n` rows (or all of them if there are fewer).
    pub fn tail(&self, n: usize) -> &[u32] {
        let start = self.steps().saturating_sub(n);
        &self.tokens[start * self.codebooks..]
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<(), PatternError> {
        for (i, &t) in self.tokens.iter().enumerate() {
            if t as usize >= vocab {
                return Err(PatternError::TokenOutOfRange {
                    step: i / self.codebooks,
                    codebook: i % self.codebooks,
                    token: t,
                    vocab,
                });
            }
        }
        Ok(())
    }

    /// Hex SHA-256 over the little-endian token bytes, prefixed by `K`.
    pub fn content_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(4 + 4 * self.tokens.len());
        bytes.extend_from_slice(&(self.codebooks as u32).to_le_bytes());
        for t in &self.tokens {
            bytes.extend_from_slice(&t.to_le_bytes());
        }
        crate::rvq::hex_digest(&bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    Parallel,
    #[default]
    Delay,
    Flatten,
}

impl Pattern {
    fn code(self) -> u32 {
        match self {
            Pattern::Parallel => 0,
            Pattern::Delay => 1,
            Pattern::Flatten => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Pattern::Parallel),
            1 => Some(Pattern::Delay),
            2 => Some(Pattern::Flatten),
            _ => None,
        }
    }

    /// `(number of steps, slots per step)` for a `T × K` grid.
    pub fn shape(self, steps: usize, codebooks: usize) -> (usize, usize) {
        match self {
            Pattern::Parallel => (steps, codebooks),
            Pattern::Delay => (if steps == 0 { 0 } else { steps + codebooks - 1 }, codebooks),
            Pattern::Flatten => (steps * codebooks, 1),
        }
    }
}

/// Model-facing view of a grid; `None` is PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepSequence {
    pub pattern: Pattern,
    pub steps: Vec<Vec<Option<u32>>>,
}

impl StepSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn apply_pattern(grid: &TokenGrid, pattern: Pattern) -> StepSequence {
    let (t, k) = (grid.steps(), grid.codebooks());
    let steps = match pattern {
        Pattern::Parallel => grid.rows().map(|r| r.iter().copied().map(Some).collect()).collect(),
        Pattern::Flatten => grid.as_flat().iter().map(|&x| vec![Some(x)]).collect(),
        Pattern::Delay => {
            let (len, _) = pattern.shape(t, k);
            (0..len)
                .map(|s| {
                    (0..k)
                        .map(|j| s.checked_sub(j).filter(|&src| src < t).map(|src| grid.get(src, j)))
                        .collect()
                })
                .collect()
        }
    };
    StepSequence { pattern, steps }
}

pub fn invert_pattern(seq: &StepSequence, steps: usize, codebooks: usize) -> Result<TokenGrid, PatternError> {
    let (expected, expected_width) = seq.pattern.shape(steps, codebooks);
    let width = seq.steps.first().map_or(expected_width, Vec::len);
    if seq.steps.len() != expected || seq.steps.iter().any(|s| s.len() != expected_width) {
        return Err(PatternError::InconsistentLength {
            got: seq.steps.len(),
            width,
            expected,
            expected_width,
        });
    }
    let mut flat = vec![0u32; steps * codebooks];
    for (s, slots) in seq.steps.iter().enumerate() {
        for (j, slot) in slots.iter().enumerate() {
            let target = match seq.pattern {
                Pattern::Parallel => Some(s * codebooks + j),
                Pattern::Flatten => Some(s),
                Pattern::Delay => s.checked_sub(j).filter(|&src| src < steps).map(|src| src * codebooks + j),
            };
            match (target, slot) {
                (Some(at), Some(tok)) => flat[at] = *tok,
                (Some(_), None) => return Err(PatternError::PadInDataPosition { step: s, slot: j }),
                (None, Some(_)) => return Err(PatternError::DataInPadPosition { step: s, slot: j }),
                (None, None) => {}
            }
        }
    }
    TokenGrid::from_flat(codebooks, flat)
}

/// A serialized step sequence with the shape needed to invert it.
///
/// Layout (little-endian): magic `TOKS`, u32 version, u32 `T`, u32 `K`,
/// u32 `V`, u32 pattern (0 parallel, 1 delay, 2 flatten), then every slot of
/// every step as u32, PAD as `0xFFFFFFFF`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub steps: usize,
    pub codebooks: usize,
    pub vocab: usize,
    pub sequence: StepSequence,
}

impl TokenStream {
    pub fn from_grid(grid: &TokenGrid, vocab: usize, pattern: Pattern) -> Self {
        Self {
            steps: grid.steps(),
            codebooks: grid.codebooks(),
            vocab,
            sequence: apply_pattern(grid, pattern),
        }
    }

    pub fn to_grid(&self) -> Result<TokenGrid, PatternError> {
        let grid = invert_pattern(&self.sequence, self.steps, self.codebooks)?;
        grid.check_vocab(self.vocab)?;
        Ok(grid)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STREAM_MAGIC);
        for w in [
            STREAM_VERSION,
            self.steps as u32,
            self.codebooks as u32,
            self.vocab as u32,
            self.sequence.pattern.code(),
        ] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for slot in self.sequence.steps.iter().flatten() {
            out.extend_from_slice(&slot.unwrap_or(PAD_WIRE).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PatternError> {
        if bytes.len() < 24 || &bytes[..4] != STREAM_MAGIC {
            return Err(PatternError::Format("missing TOKS header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        if word(4) != STREAM_VERSION {
            return Err(PatternError::Format(format!("unsupported version {}", word(4))));
        }
        let (steps, codebooks, vocab) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let pattern = Pattern::from_code(word(20)).ok_or_else(|| PatternError::Format(format!("unknown pattern {}", word(20))))?;
        if codebooks == 0 {
            return Err(PatternError::Format("K must be positive".into()));
        }
        let (n, width) = pattern.shape(steps, codebooks);
        let body = &bytes[24..];
        if body.len() != 4 * n * width {
            return Err(PatternError::Format(format!(
                "expected {} token bytes, got {}",
                4 * n * width,
                body.len()
            )));
        }
        let slots: Vec<Option<u32>> = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .map(|w| (w != PAD_WIRE).then_some(w))
            .collect();
        let steps_vec = slots.chunks(width.max(1)).map(<[_]>::to_vec).collect();
        Ok(Self {
            steps,
            codebooks,
            vocab,
            sequence: StepSequence { pattern, steps: steps_vec },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PatternError> {
        let mut f = std::fs::File::create(path).map_err(|e| PatternError::Io(e.to_string()))?;
        f.write_all(&self.to_bytes()).map_err(|e| PatternError::Io(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PatternError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| PatternError::Io(e.to_string()))?;
        Self::from_bytes(&buf)
    }
}
