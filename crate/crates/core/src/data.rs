//! Videos, queries, annotated moments and dataset splits.
//!
//! Frames are sampled at a fixed rate (1 fps unless configured otherwise), so a
//! timestamp maps to a frame index by `floor(tau / duration * T)` clamped into
//! `[0, T - 1]`. End frames are inclusive, which makes a one-frame moment
//! representable.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FRAME_RATE: f64 = 1.0;

/// A `T x D` matrix of per-frame visual features, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeatures {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
    duration: f64,
}

impl FrameFeatures {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>, duration: f64) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Shape(format!(
                "feature matrix must be non-empty, got {frames}x{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::Shape(format!(
                "expected {} values for {frames}x{dim}, got {}",
                frames * dim,
                data.len()
            )));
        }
        if !(duration > 0.0) || !duration.is_finite() {
            return Err(Error::Domain(format!("duration must be positive, got {duration}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("feature matrix contains non-finite values".into()));
        }
        Ok(Self {
            frames,
            dim,
            data,
            duration,
        })
    }

    /// Checks `T == ceil(duration * fps)` within one frame.
    pub fn check_frame_rate(&self, fps: f64) -> Result<()> {
        let expected = libm::ceil(self.duration * fps);
        if libm::fabs(expected - self.frames as f64) > 1.0 {
            return Err(Error::Domain(format!(
                "{} frames inconsistent with duration {}s at {fps} fps",
                self.frames, self.duration
            )));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Builds a new matrix whose row `i` is row `order[i]` of `self`.
    pub fn reorder(&self, order: &[usize]) -> Self {
        debug_assert_eq!(order.len(), self.frames);
        let mut data = Vec::with_capacity(self.data.len());
        for &src in order {
            data.extend_from_slice(self.row(src));
        }
        Self {
            frames: self.frames,
            dim: self.dim,
            data,
            duration: self.duration,
        }
    }
}

/// Lowercased, whitespace-separated query tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<String>,
}

impl TokenSequence {
    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.split_whitespace().map(|t| t.to_lowercase()).collect();
        if tokens.is_empty() {
            return Err(Error::Domain("query has no tokens".into()));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.tokens.iter().any(|t| t == word)
    }

    pub fn reversed(&self) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.reverse();
        Self { tokens }
    }
}

/// Maps a timestamp to the frame containing it.
pub fn timestamp_to_frame(tau: f64, duration: f64, frames: usize) -> Result<usize> {
    if frames == 0 {
        return Err(Error::Domain("frame count must be positive".into()));
    }
    if !(duration > 0.0) {
        return Err(Error::Domain(format!("duration must be positive, got {duration}")));
    }
    if !(0.0..=duration).contains(&tau) {
        return Err(Error::Domain(format!("timestamp {tau} outside [0, {duration}]")));
    }
    let mut idx = (libm::floor(tau * frames as f64 / duration).max(0.0) as usize).min(frames - 1);
    // Snap to the frame boundaries produced by `frame_start_time` so the two round-trip.
    if idx > 0 && frame_start_time(idx, duration, frames) > tau {
        idx -= 1;
    } else if idx + 1 < frames && frame_start_time(idx + 1, duration, frames) <= tau {
        idx += 1;
    }
    Ok(idx)
}

/// Start time of frame `index`.
pub fn frame_start_time(index: usize, duration: f64, frames: usize) -> f64 {
    index as f64 * duration / frames as f64
}

/// End time of frame `index` (the start of the next frame).
pub fn frame_end_time(index: usize, duration: f64, frames: usize) -> f64 {
    ((index + 1) as f64 * duration / frames as f64).min(duration)
}

/// A target moment in seconds together with its inclusive frame span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub start_sec: f64,
    pub end_sec: f64,
    pub start_frame: usize,
    pub end_frame: usize,
}

impl MomentSpan {
    pub fn from_seconds(start: f64, end: f64, duration: f64, frames: usize) -> Result<Self> {
        if !(start <= end) {
            return Err(Error::Domain(format!("span end {end} precedes start {start}")));
        }
        let start_frame = timestamp_to_frame(start, duration, frames)?;
        let end_frame = timestamp_to_frame(end, duration, frames)?;
        Ok(Self {
            start_sec: start,
            end_sec: end,
            start_frame,
            end_frame,
        })
    }

    /// Span covering frames `start..=end` in full.
    pub fn from_frames(start: usize, end: usize, duration: f64, frames: usize) -> Result<Self> {
        if start > end || end >= frames {
            return Err(Error::Domain(format!(
                "frame span [{start}, {end}] invalid for {frames} frames"
            )));
        }
        Ok(Self {
            start_sec: frame_start_time(start, duration, frames),
            end_sec: frame_end_time(end, duration, frames),
            start_frame: start,
            end_frame: end,
        })
    }

    /// Number of frames covered (inclusive end).
    pub fn frame_len(&self) -> usize {
        self.end_frame - self.start_frame + 1
    }

    pub fn contains_frame(&self, t: usize) -> bool {
        (self.start_frame..=self.end_frame).contains(&t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSample {
    pub video_id: String,
    pub features: Arc<FrameFeatures>,
    pub query: TokenSequence,
    pub span: MomentSpan,
    pub text: String,
}

impl GroundingSample {
    pub fn new(
        video_id: impl Into<String>,
        features: Arc<FrameFeatures>,
        text: &str,
        start: f64,
        end: f64,
    ) -> Result<Self> {
        let video_id = video_id.into();
        let invalid = |reason: String| Error::Validation {
            video_id: video_id.clone(),
            reason,
        };
        let duration = features.duration();
        if !(start >= 0.0 && end <= duration) {
            return Err(invalid(format!(
                "span [{start}, {end}] outside video extent [0, {duration}]"
            )));
        }
        let span = MomentSpan::from_seconds(start, end, duration, features.frames())
            .map_err(|e| invalid(e.to_string()))?;
        let query = TokenSequence::from_text(text).map_err(|e| invalid(e.to_string()))?;
        Ok(Self {
            video_id,
            features,
            query,
            span,
            text: text.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.features.frames()
    }

    pub fn duration(&self) -> f64 {
        self.features.duration()
    }

    /// Same annotation over a different feature matrix of equal length.
    pub fn with_features(&self, features: Arc<FrameFeatures>) -> Self {
        Self {
            features,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SplitName {
    #[serde(rename = "training")]
    Training,
    #[serde(rename = "val")]
    Val,
    #[serde(rename = "test-iid")]
    TestIid,
    #[serde(rename = "test-ood")]
    TestOod,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Training,
        SplitName::Val,
        SplitName::TestIid,
        SplitName::TestOod,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Training => "training",
            SplitName::Val => "val",
            SplitName::TestIid => "test-iid",
            SplitName::TestOod => "test-ood",
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown split name {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    samples: Vec<GroundingSample>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, samples: Vec<GroundingSample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptySplit);
        }
        Ok(Self { name, samples })
    }

    pub fn samples(&self) -> &[GroundingSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn video_count(&self) -> usize {
        self.samples
            .iter()
            .map(|s| s.video_id.as_str())
            .collect::<BTreeSet<_>>()
            .len()
    }
}

/// A set of splits with unique names.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    splits: Vec<DatasetSplit>,
}

impl Dataset {
    pub fn new(splits: Vec<DatasetSplit>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &splits {
            if !seen.insert(s.name) {
                return Err(Error::Config(format!("duplicate split {}", s.name)));
            }
        }
        Ok(Self { splits })
    }

    pub fn split(&self, name: SplitName) -> Option<&DatasetSplit> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn splits(&self) -> &[DatasetSplit] {
        &self.splits
    }
}

/// Per-split counts for data audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStatistics {
    pub split: SplitName,
    pub videos: usize,
    pub pairs: usize,
    pub mean_moment_sec: f64,
    pub mean_video_duration_sec: f64,
}

pub fn split_statistics(splits: &[DatasetSplit]) -> Result<Vec<SplitStatistics>> {
    if splits.is_empty() {
        return Err(Error::Config("no splits to summarize".into()));
    }
    Ok(splits
        .iter()
        .map(|split| {
            let pairs = split.len();
            let moment: f64 = split
                .samples()
                .iter()
                .map(|s| s.span.end_sec - s.span.start_sec)
                .sum();
            let mut durations = alloc::collections::BTreeMap::new();
            for s in split.samples() {
                durations.insert(s.video_id.as_str(), s.duration());
            }
            let videos = durations.len();
            SplitStatistics {
                split: split.name,
                videos,
                pairs,
                mean_moment_sec: moment / pairs as f64,
                mean_video_duration_sec: durations.values().sum::<f64>() / videos as f64,
            }
        })
        .collect())
}
