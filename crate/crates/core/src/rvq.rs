//! Residual vector quantization over latent frames.
//!
//! Stage 1 quantizes a frame against codebook 1; every later stage quantizes
//! what the previous stages left over. Decoding sums the selected entries.
//! Codebooks are trained stage by stage with Lloyd's k-means and are frozen
//! afterwards.
//!
//! Codec file layout (all integers little-endian):
//!
//! | offset | size        | field                                   |
//! |--------|-------------|-----------------------------------------|
//! | 0      | 4           | magic `RVQC`                            |
//! | 4      | 4 (u32)     | format version, currently 1             |
//! | 8      | 4 (u32)     | latent dimension `d`                    |
//! | 12     | 4 (u32)     | number of codebooks `K`                 |
//! | 16     | 4 (u32)     | entries per codebook `V`                |
//! | 20     | 8·K·V·d     | f64 entries, codebook-major, row-major  |

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::{self, Strategy};

const MAGIC: &[u8; 4] = b"RVQC";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum RvqError {
    #[error("need at least {need} frames to train {need} centroids, got {have}")]
    InsufficientData { have: usize, need: usize },
    #[error("frame has dimension {got}, codec expects {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token {token} out of range for codebook {stage} of size {size}")]
    TokenOutOfRange { stage: usize, token: u32, size: usize },
    #[error("expected between 1 and {max} tokens, got {got}")]
    TokenCount { max: usize, got: usize },
    #[error("invalid codec: {0}")]
    InvalidCodec(String),
    #[error("codec file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, RvqError>;

/// Latent steps per second of audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRate {
    pub steps_per_second: u32,
}

impl Default for FrameRate {
    fn default() -> Self {
        Self { steps_per_second: 75 }
    }
}

impl FrameRate {
    pub fn new(steps_per_second: u32) -> Self {
        Self { steps_per_second }
    }

    pub fn seconds_to_steps(self, seconds: u64) -> u64 {
        seconds * u64::from(self.steps_per_second)
    }

    pub fn steps_to_seconds(self, steps: u64) -> f64 {
        steps as f64 / f64::from(self.steps_per_second)
    }
}

/// Named codec shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecPreset {
    /// d=8, K=4, V=64; fast enough for exhaustive test oracles.
    Toy,
    /// d=128, K=4, V=1024, the production EnCodec-like shape.
    Full,
}

impl CodecPreset {
    /// `(dim, num_codebooks, codebook_size)`
    pub fn shape(self) -> (usize, usize, usize) {
        match self {
            CodecPreset::Toy => (8, 4, 64),
            CodecPreset::Full => (128, 4, 1024),
        }
    }
}

/// Frozen residual quantizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqCodec {
    dim: usize,
    codebook_size: usize,
    /// One flat `V × d` row-major matrix per stage.
    codebooks: Vec<Vec<f64>>,
}

impl RvqCodec {
    pub fn new(dim: usize, codebook_size: usize, codebooks: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 || codebook_size == 0 || codebooks.is_empty() {
            return Err(RvqError::InvalidCodec("d, K and V must all be positive".into()));
        }
        for (j, cb) in codebooks.iter().enumerate() {
            if cb.len() != dim * codebook_size {
                return Err(RvqError::InvalidCodec(format!(
                    "codebook {j} has {} values, expected {}",
                    cb.len(),
                    dim * codebook_size
                )));
            }
            if cb.iter().any(|x| !x.is_finite()) {
                return Err(RvqError::InvalidCodec(format!("codebook {j} has non-finite entries")));
            }
        }
        Ok(Self {
            dim,
            codebook_size,
            codebooks,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_codebooks(&self) -> usize {
        self.codebooks.len()
    }

    pub fn codebook_size(&self) -> usize {
        self.codebook_size
    }

    pub fn codebook(&self, stage: usize) -> &[f64] {
        &self.codebooks[stage]
    }

    pub fn entry(&self, stage: usize, token: usize) -> &[f64] {
        &self.codebooks[stage][token * self.dim..(token + 1) * self.dim]
    }

    /// Quantize one frame to `K` tokens.
    pub fn encode_frame(&self, frame: &[f64]) -> Result<Vec<u32>> {
        self.check_dim(frame)?;
        let mut residual = frame.to_vec();
        let mut tokens = Vec::with_capacity(self.codebooks.len());
        for cb in &self.codebooks {
            let (best, _) = nearest(cb, self.dim, &residual);
            let e = &cb[best * self.dim..(best + 1) * self.dim];
            for (r, v) in residual.iter_mut().zip(e) {
                *r -= v;
            }
            tokens.push(best as u32);
        }
        Ok(tokens)
    }

    pub fn encode_batch(&self, frames: &[Vec<f64>], strategy: Strategy) -> Result<Vec<Vec<u32>>> {
        exec::map_slice(frames, strategy, |f| self.encode_frame(f))
            .into_iter()
            .collect()
    }

    /// Sum of the selected entries over the first `tokens.len()` codebooks.
    pub fn decode_tokens(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        if tokens.is_empty() || tokens.len() > self.codebooks.len() {
            return Err(RvqError::TokenCount {
                max: self.codebooks.len(),
                got: tokens.len(),
            });
        }
        let mut out = vec![0.0; self.dim];
        for (stage, &t) in tokens.iter().enumerate() {
            if t as usize >= self.codebook_size {
                return Err(RvqError::TokenOutOfRange {
                    stage,
                    token: t,
                    size: self.codebook_size,
                });
            }
            for (o, v) in out.iter_mut().zip(self.entry(stage, t as usize)) {
                *o += v;
            }
        }
        Ok(out)
    }

    pub fn decode_batch(&self, rows: &[&[u32]], strategy: Strategy) -> Result<Vec<Vec<f64>>> {
        exec::map_slice(rows, strategy, |r| self.decode_tokens(r))
            .into_iter()
            .collect()
    }

    fn check_dim(&self, frame: &[f64]) -> Result<()> {
        if frame.len() != self.dim {
            return Err(RvqError::DimensionMismatch {
                expected: self.dim,
                got: frame.len(),
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * self.codebooks.len() * self.codebook_size * self.dim);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.codebooks.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.codebook_size as u32).to_le_bytes());
        for cb in &self.codebooks {
            for v in cb {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(RvqError::Format("missing RVQC header".into()));
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
        let version = word(4);
        if version != FORMAT_VERSION {
            return Err(RvqError::Format(format!("unsupported version {version}")));
        }
        let (dim, k, v) = (word(8) as usize, word(12) as usize, word(16) as usize);
        let expected = 20 + 8 * k * v * dim;
        if bytes.len() != expected {
            return Err(RvqError::Format(format!(
                "expected {expected} bytes for d={dim} K={k} V={v}, got {}",
                bytes.len()
            )));
        }
        let mut values = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let codebooks = (0..k)
            .map(|_| values.by_ref().take(v * dim).collect())
            .collect();
        Self::new(dim, v, codebooks)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Hex SHA-256 of the serialized codec.
    pub fn content_hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest row; lowest index wins ties.
#[inline]
pub(crate) fn nearest(codebook: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, row) in codebook.chunks_exact(dim).enumerate() {
        let d = squared_distance(row, x);
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    (best, best_d)
}

/// Codebook training parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_codebooks: usize,
    pub codebook_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    #[serde(default)]
    pub strategy: Strategy,
    /// Keep every iteration's centroids in the report.
    #[serde(default)]
    pub record_history: bool,
    /// Fix entry 0 of every residual stage (stage 2 on) at the zero vector,
    /// so adding a stage never increases a frame's reconstruction error.
    #[serde(default = "yes")]
    pub zero_residual_entry: bool,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(num_codebooks: usize, codebook_size: usize, seed: u64) -> Self {
        Self {
            num_codebooks,
            codebook_size,
            max_iters: 50,
            seed,
            strategy: Strategy::default(),
            record_history: false,
            zero_residual_entry: true,
        }
    }
}

/// What happened while fitting one stage.
#[derive(Debug, Clone, Default)]
pub struct StageReport {
    /// Mean squared quantization error of the centroids in use at each
    /// iteration (best assignment). The last value belongs to the final codebook.
    pub errors: Vec<f64>,
    /// Number of empty clusters that were reseeded.
    pub reseeds: usize,
    /// Flat `V × d` centroids per iteration, aligned with `errors`, when
    /// history recording is on.
    pub history: Vec<Vec<f64>>,
    pub converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub stages: Vec<StageReport>,
}

/// Fit `K` codebooks stage by stage: stage 1 on the frames, stage `j` on the
/// residuals left by stages `1..j`.
pub fn train_codebooks(frames: &[Vec<f64>], config: &TrainConfig) -> Result<(RvqCodec, TrainReport)> {
    let v = config.codebook_size;
    if frames.len() < v || v == 0 {
        return Err(RvqError::InsufficientData {
            have: frames.len(),
            need: v.max(1),
        });
    }
    if config.num_codebooks == 0 {
        return Err(RvqError::InvalidCodec("need at least one codebook".into()));
    }
    let dim = frames[0].len();
    if dim == 0 {
        return Err(RvqError::InvalidCodec("frames have dimension 0".into()));
    }
    let mut residuals = Vec::with_capacity(frames.len() * dim);
    for f in frames {
        if f.len() != dim {
            return Err(RvqError::DimensionMismatch {
                expected: dim,
                got: f.len(),
            });
        }
        residuals.extend_from_slice(f);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut codebooks = Vec::with_capacity(config.num_codebooks);
    let mut report = TrainReport::default();
    for stage_index in 0..config.num_codebooks {
        let pin_zero = config.zero_residual_entry && stage_index > 0;
        let (centroids, stage) = lloyd(&residuals, dim, config, pin_zero, &mut rng);
        // Pass the residual of this stage on to the next one.
        let assignment = assign(&residuals, &centroids, dim, config.strategy);
        for (x, (c, _)) in residuals.chunks_exact_mut(dim).zip(&assignment) {
            for (xi, ci) in x.iter_mut().zip(&centroids[c * dim..(c + 1) * dim]) {
                *xi -= ci;
            }
        }
        codebooks.push(centroids);
        report.stages.push(stage);
    }
    Ok((RvqCodec::new(dim, v, codebooks)?, report))
}

fn assign(data: &[f64], centroids: &[f64], dim: usize, strategy: Strategy) -> Vec<(usize, f64)> {
    let n = data.len() / dim;
    exec::map_range(n, strategy, |i| nearest(centroids, dim, &data[i * dim..(i + 1) * dim]))
}

/// With `pin_zero`, centroid 0 is the zero vector throughout.
fn lloyd(data: &[f64], dim: usize, config: &TrainConfig, pin_zero: bool, rng: &mut ChaCha8Rng) -> (Vec<f64>, StageReport) {
    let n = data.len() / dim;
    let v = config.codebook_size;
    let first_free = usize::from(pin_zero);
    let mut centroids = vec![0.0; first_free * dim];
    let mut picks: Vec<usize> = index::sample(rng, n, v - first_free).into_vec();
    picks.sort_unstable();
    for i in picks {
        centroids.extend_from_slice(&data[i * dim..(i + 1) * dim]);
    }

    let mut report = StageReport::default();
    let mut previous: Option<Vec<usize>> = None;
    let max_iters = config.max_iters.max(1);
    for iter in 0..=max_iters {
        let assignment = assign(data, &centroids, dim, config.strategy);
        let error = assignment.iter().map(|(_, d)| d).sum::<f64>() / n as f64;
        report.errors.push(error);
        if config.record_history {
            report.history.push(centroids.clone());
        }
        let labels: Vec<usize> = assignment.iter().map(|(c, _)| *c).collect();
        if previous.as_ref() == Some(&labels) {
            report.converged = true;
            break;
        }
        if iter == max_iters {
            break;
        }

        let mut sums = vec![0.0; v * dim];
        let mut counts = vec![0usize; v];
        for (i, &c) in labels.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(&data[i * dim..(i + 1) * dim]) {
                *s += x;
            }
        }
        // Empty clusters take over the points quantized worst, one point each.
        let mut far: Vec<(usize, f64)> = assignment.iter().map(|&(_, d)| d).enumerate().collect();
        let empties = counts[first_free..].iter().filter(|&&c| c == 0).count();
        if empties > 0 {
            far.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        }
        let mut far = far.into_iter();
        for c in first_free..v {
            let row = &mut centroids[c * dim..(c + 1) * dim];
            if counts[c] == 0 {
                let (p, _) = far.next().expect("more points than clusters");
                row.copy_from_slice(&data[p * dim..(p + 1) * dim]);
                report.reseeds += 1;
            } else {
                let inv = counts[c] as f64;
                for (r, s) in row.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *r = s / inv;
                }
            }
        }
        previous = Some(labels);
    }
    (centroids, report)
}

/// Deterministic synthetic latent frames for desk-scale runs: a mixture of
/// Gaussian blobs so the codebooks have structure to find.
pub fn synthetic_frames(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blobs: Vec<Vec<f64>> = (0..16)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.25).unwrap();
    (0..n)
        .map(|_| {
            let b = &blobs[rng.random_range(0..blobs.len())];
            b.iter().map(|c| c + noise.sample(&mut rng)).collect()
        })
        .collect()
}

/// Train a codec of the given preset on [`synthetic_frames`].
pub fn train_preset(preset: CodecPreset, seed: u64, strategy: Strategy) -> Result<RvqCodec> {
    let (dim, k, v) = preset.shape();
    let frames = synthetic_frames(v * 8, dim, seed);
    let mut config = TrainConfig::new(k, v, seed);
    config.max_iters = 25;
    config.strategy = strategy;
    Ok(train_codebooks(&frames, &config)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point_codec() -> RvqCodec {
        RvqCodec::new(2, 2, vec![vec![0.0, 0.0, 1.0, 1.0], vec![0.0, 0.0, -0.1, 0.2]]).unwrap()
    }

    #[test]
    fn encode_picks_nearest_and_chains_residual() {
        let codec = two_point_codec();
        let tokens = codec.encode_frame(&[0.9, 1.2]).unwrap();
        assert_eq!(tokens[0], 1);
        // residual (-0.1, 0.2) lands exactly on entry 1 of stage 2
        assert_eq!(tokens[1], 1);
        let decoded = codec.decode_tokens(&tokens).unwrap();
        assert!((decoded[0] - 0.9).abs() < 1e-12 && (decoded[1] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let codec = RvqCodec::new(1, 3, vec![vec![-1.0, 1.0, 1.0]]).unwrap();
        assert_eq!(codec.encode_frame(&[0.0]).unwrap(), vec![0]);
        assert_eq!(codec.encode_frame(&[1.0]).unwrap(), vec![1]);
    }

    #[test]
    fn entry_with_zero_rows_roundtrips() {
        let codec = RvqCodec::new(2, 3, vec![vec![0.0, 0.0, 1.0, 2.0, -3.0, 0.5], vec![0.0, 0.0, 5.0, 5.0, 7.0, 7.0]]).unwrap();
        let tokens = codec.encode_frame(&[-3.0, 0.5]).unwrap();
        assert_eq!(tokens, vec![2, 0]);
        assert_eq!(codec.decode_tokens(&tokens).unwrap(), vec![-3.0, 0.5]);
    }

    #[test]
    fn decode_prefix_and_errors() {
        let codec = two_point_codec();
        assert_eq!(codec.decode_tokens(&[1]).unwrap(), vec![1.0, 1.0]);
        assert!(matches!(codec.decode_tokens(&[2]), Err(RvqError::TokenOutOfRange { stage: 0, .. })));
        assert!(matches!(codec.decode_tokens(&[]), Err(RvqError::TokenCount { .. })));
        assert!(matches!(codec.decode_tokens(&[0, 0, 0]), Err(RvqError::TokenCount { .. })));
        assert!(matches!(codec.encode_frame(&[1.0]), Err(RvqError::DimensionMismatch { .. })));
    }

    #[test]
    fn frame_rate_conversions() {
        let rate = FrameRate::default();
        assert_eq!(rate.seconds_to_steps(150), 11_250);
        assert_eq!(rate.seconds_to_steps(15), 1_125);
        assert_eq!(rate.seconds_to_steps(0), 0);
        assert_eq!(rate.steps_to_seconds(11_250), 150.0);
    }

    #[test]
    fn insufficient_data() {
        let frames = vec![vec![0.0; 4]; 10];
        let err = train_codebooks(&frames, &TrainConfig::new(1, 11, 0)).unwrap_err();
        assert!(matches!(err, RvqError::InsufficientData { have: 10, need: 11 }));
    }

    #[test]
    fn duplicate_heavy_data_reseeds_empty_clusters() {
        // 3 distinct values but 4 clusters: the initial picks include a
        // duplicate, so one cluster ends up empty and must be reseeded.
        let mut frames = vec![vec![0.0, 0.0]; 50];
        frames.extend(vec![vec![1.0, 0.0]; 3]);
        frames.push(vec![5.0, 5.0]);
        let mut config = TrainConfig::new(1, 4, 3);
        config.max_iters = 10;
        let (codec, report) = train_codebooks(&frames, &config).unwrap();
        let errs = &report.stages[0].errors;
        assert!(errs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*errs.last().unwrap(), 0.0);
        assert!(report.stages[0].reseeds > 0);
        assert_eq!(codec.num_codebooks(), 1);
    }

    #[test]
    fn file_roundtrip() {
        let codec = train_preset(CodecPreset::Toy, 9, Strategy::Sequential).unwrap();
        let bytes = codec.to_bytes();
        assert_eq!(bytes.len(), 20 + 8 * 4 * 64 * 8);
        assert_eq!(&bytes[..4], b"RVQC");
        assert_eq!(RvqCodec::from_bytes(&bytes).unwrap(), codec);
        assert!(RvqCodec::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn strategies_train_identically() {
        let frames = synthetic_frames(400, 4, 1);
        let mut config = TrainConfig::new(2, 16, 5);
        config.strategy = Strategy::Sequential;
        let (a, _) = train_codebooks(&frames, &config).unwrap();
        config.strategy = Strategy::Parallel;
        let (b, _) = train_codebooks(&frames, &config).unwrap();
        assert_eq!(a, b);
    }
}
