//! Pseudo-video construction: cut the target moment out of a video and
//! reinsert it at a random position of the remaining frames.

use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{FrameFeatures, GroundingSample, MomentSpan};
use crate::error::Result;

/// A shuffled copy of a video.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoVideo {
    pub features: Arc<FrameFeatures>,
    pub span: MomentSpan,
    /// `source_rows[i]` is the original frame index now at position `i`.
    pub source_rows: Vec<usize>,
    /// Set when no placement other than the original one exists.
    pub degenerate: bool,
}

/// Original video, its pseudo counterpart and the shared query.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingTriplet {
    pub original: GroundingSample,
    pub pseudo: PseudoVideo,
}

impl TrainingTriplet {
    pub fn degenerate(&self) -> bool {
        self.pseudo.degenerate
    }
}

/// Offsets into the remainder sequence where the cut moment may be reinserted.
///
/// The offset that reproduces the original video (`span.start_frame`) is left
/// out unless it is the only one.
pub fn enumerate_insertion_points(frames: usize, span: &MomentSpan) -> Vec<usize> {
    let len = span.frame_len();
    debug_assert!(len <= frames && span.end_frame < frames);
    let remainder = frames - len;
    if remainder == 0 {
        return alloc::vec![0];
    }
    (0..=remainder).filter(|&k| k != span.start_frame).collect()
}

/// Frame order of a video whose moment was moved to offset `k`.
pub fn insertion_order(frames: usize, span: &MomentSpan, k: usize) -> Vec<usize> {
    let rest: Vec<usize> = (0..frames).filter(|t| !span.contains_frame(*t)).collect();
    let mut order = Vec::with_capacity(frames);
    order.extend_from_slice(&rest[..k]);
    order.extend(span.start_frame..=span.end_frame);
    order.extend_from_slice(&rest[k..]);
    order
}

pub fn generate_pseudo_video<R: Rng + ?Sized>(
    features: &FrameFeatures,
    span: &MomentSpan,
    rng: &mut R,
) -> Result<PseudoVideo> {
    let frames = features.frames();
    let candidates = enumerate_insertion_points(frames, span);
    let k = candidates[rng.random_range(0..candidates.len())];
    let degenerate = candidates.len() == 1 && k == span.start_frame;
    let source_rows = insertion_order(frames, span, k);
    let new_span = MomentSpan::from_frames(k, k + span.frame_len() - 1, features.duration(), frames)?;
    Ok(PseudoVideo {
        features: Arc::new(features.reorder(&source_rows)),
        span: new_span,
        source_rows,
        degenerate,
    })
}

pub fn make_triplet<R: Rng + ?Sized>(sample: &GroundingSample, rng: &mut R) -> Result<TrainingTriplet> {
    let pseudo = generate_pseudo_video(&sample.features, &sample.span, rng)?;
    Ok(TrainingTriplet {
        original: sample.clone(),
        pseudo,
    })
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Independent rng stream for `(seed, a, b)`, e.g. `(global seed, epoch, sample index)`.
pub fn stream_rng(seed: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mixed = splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    ChaCha8Rng::seed_from_u64(mixed)
}
