//! Where clip audio comes from.

use std::f32::consts::TAU;
use std::path::PathBuf;

use musicform_core::stats::QualificationKind;
use musicform_core::synth::wav_bytes;

use crate::desk::check_clip_id;

pub trait ClipStore: Send + Sync {
    fn exists(&self, clip_id: &str) -> bool;
    /// WAV bytes, or `None` for an unknown clip.
    fn audio(&self, clip_id: &str) -> Option<Vec<u8>>;
}

/// Clips are `<root>/<clip_id>.wav`.
#[derive(Debug, Clone)]
pub struct DirClipStore {
    root: PathBuf,
}

impl DirClipStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn path(&self, clip_id: &str) -> Option<PathBuf> {
        check_clip_id(clip_id).ok()?;
        Some(self.root.join(format!("{clip_id}.wav")))
    }
}

impl ClipStore for DirClipStore {
    fn exists(&self, clip_id: &str) -> bool {
        self.path(clip_id).is_some_and(|p| p.is_file())
    }

    fn audio(&self, clip_id: &str) -> Option<Vec<u8>> {
        std::fs::read(self.path(clip_id)?).ok()
    }
}

/// Fixed set of ids, each served as a short tone. For tests and demos.
#[derive(Debug, Clone, Default)]
pub struct MemoryClipStore {
    ids: std::collections::BTreeSet<String>,
}

impl MemoryClipStore {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(ids: I) -> Self {
        Self {
            ids: ids.into_iter().map(Into::into).collect(),
        }
    }
}

impl ClipStore for MemoryClipStore {
    fn exists(&self, clip_id: &str) -> bool {
        self.ids.contains(clip_id)
    }

    fn audio(&self, clip_id: &str) -> Option<Vec<u8>> {
        self.exists(clip_id)
            .then(|| wav_bytes(&tone(1.0, 440.0, SAMPLE_RATE), SAMPLE_RATE).ok())
            .flatten()
    }
}

pub const SAMPLE_RATE: u32 = 16_000;

fn tone(seconds: f32, freq: f32, sr: u32) -> Vec<f32> {
    let n = (seconds * sr as f32) as usize;
    (0..n).map(|i| 0.3 * (TAU * freq * i as f32 / sr as f32).sin()).collect()
}

/// Placeholder audio for qualification clips. Instructed clips carry one
/// beep per expected score point; silence is all zeros; plain clips are a
/// slow two-tone figure.
pub fn qualification_audio(kind: QualificationKind, seconds: f32) -> Vec<f32> {
    let sr = SAMPLE_RATE as f32;
    let n = (seconds * sr) as usize;
    match kind {
        QualificationKind::Silence => vec![0.0; n],
        QualificationKind::Instructed(count) => (0..n)
            .map(|i| {
                let t = i as f32 / sr;
                let beep = (t / 0.5) as usize;
                let on = beep < usize::from(count) * 2 && beep.is_multiple_of(2);
                if on { 0.4 * (TAU * 880.0 * t).sin() } else { 0.0 }
            })
            .collect(),
        QualificationKind::Plain => (0..n)
            .map(|i| {
                let t = i as f32 / sr;
                let f = if (t as usize).is_multiple_of(2) { 330.0 } else { 392.0 };
                0.25 * (TAU * f * t).sin()
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beeps_match_count() {
        let a = qualification_audio(QualificationKind::Instructed(3), 4.0);
        let active: Vec<bool> = a.chunks(SAMPLE_RATE as usize / 2).map(|c| c.iter().any(|s| s.abs() > 0.01)).collect();
        assert_eq!(active, [true, false, true, false, true, false, false, false]);
        assert!(qualification_audio(QualificationKind::Silence, 1.0).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn dir_store_rejects_traversal() {
        let s = DirClipStore::new("/tmp");
        assert!(s.path("../etc/passwd").is_none());
        assert!(s.path("a/b").is_some());
    }
}
