//! Span decoding, IoU metrics, the randomized-video sanity check and
//! query-position bias histograms.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{frame_end_time, frame_start_time, DatasetSplit, GroundingSample, MomentSpan};
use crate::error::{Error, Result};
use crate::model::GroundingModel;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.3, 0.5, 0.7];
pub const DEFAULT_SEGMENT_LEN: usize = 4;
pub const DEFAULT_BINS: usize = 20;
const EVAL_BATCH: usize = 32;

/// Most probable `(start, end)` frame pair with `start <= end`, both on valid
/// frames and, when `max_len` is set, `end - start < max_len`. Ties go to the
/// smallest start, then the smallest end.
pub fn select_frames(
    start_probs: &[f64],
    end_probs: &[f64],
    mask: &[bool],
    max_len: Option<usize>,
) -> Result<(usize, usize)> {
    let n = start_probs.len();
    if end_probs.len() != n || mask.len() != n {
        return Err(Error::Shape("probability vectors and mask differ in length".into()));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for s in (0..n).filter(|&s| mask[s]) {
        let limit = max_len.map_or(n, |m| (s + m).min(n));
        for e in (s..limit).filter(|&e| mask[e]) {
            let p = start_probs[s] * end_probs[e];
            if best.is_none_or(|(b, _, _)| p > b) {
                best = Some((p, s, e));
            }
        }
    }
    best.map(|(_, s, e)| (s, e))
        .ok_or_else(|| Error::Domain("no valid frames to decode".into()))
}

/// Decodes a span and converts it to seconds (start of the first frame to end of the last).
pub fn select_span(
    start_probs: &[f64],
    end_probs: &[f64],
    mask: &[bool],
    max_len: Option<usize>,
    duration: f64,
) -> Result<MomentSpan> {
    let (s, e) = select_frames(start_probs, end_probs, mask, max_len)?;
    let frames = start_probs.len();
    Ok(MomentSpan {
        start_sec: frame_start_time(s, duration, frames),
        end_sec: frame_end_time(e, duration, frames),
        start_frame: s,
        end_frame: e,
    })
}

/// Closed time interval in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
}

impl Interval {
    pub fn new(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    pub fn clip(self, duration: f64) -> Self {
        Self {
            start: self.start.clamp(0.0, duration),
            end: self.end.clamp(0.0, duration),
        }
    }
}

impl From<&MomentSpan> for Interval {
    fn from(s: &MomentSpan) -> Self {
        Self::new(s.start_sec, s.end_sec)
    }
}

pub fn temporal_iou(a: Interval, b: Interval) -> Result<f64> {
    for i in [a, b] {
        if !(i.start <= i.end) {
            return Err(Error::Domain(format!("reversed interval [{}, {}]", i.start, i.end)));
        }
    }
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = (a.end - a.start) + (b.end - b.start) - inter;
    if union <= 0.0 {
        return Ok(if a == b { 1.0 } else { 0.0 });
    }
    Ok((inter / union).clamp(0.0, 1.0))
}

/// Recall at one IoU threshold, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallAt {
    pub iou: f64,
    pub r1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub count: usize,
    pub recall: Vec<RecallAt>,
    pub miou: f64,
}

impl MetricsReport {
    /// Aggregates per-sample IoUs. `R@1(theta)` counts `IoU > theta` strictly.
    pub fn from_ious(split: &str, ious: &[f64], thresholds: &[f64]) -> Self {
        let n = ious.len().max(1) as f64;
        let recall = thresholds
            .iter()
            .map(|&t| RecallAt {
                iou: t,
                r1: 100.0 * ious.iter().filter(|&&x| x > t).count() as f64 / n,
            })
            .collect();
        Self {
            split: split.to_string(),
            count: ious.len(),
            recall,
            miou: 100.0 * ious.iter().sum::<f64>() / n,
        }
    }

    pub fn r1_at(&self, iou: f64) -> Option<f64> {
        self.recall.iter().find(|r| (r.iou - iou).abs() < 1e-12).map(|r| r.r1)
    }
}

/// One evaluated sample, for per-sample exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub video_id: String,
    pub query_index: usize,
    pub predicted: Interval,
    pub ground_truth: Interval,
    pub iou: f64,
}

/// Anything that maps samples to predicted moments.
pub trait SpanPredictor {
    fn predict_batch(&self, samples: &[&GroundingSample]) -> Result<Vec<Interval>>;
}

impl SpanPredictor for GroundingModel {
    fn predict_batch(&self, samples: &[&GroundingSample]) -> Result<Vec<Interval>> {
        let outs = self.forward_samples(samples)?;
        samples
            .iter()
            .zip(outs)
            .map(|(s, o)| {
                let mask = vec![true; o.start_probs.len()];
                select_span(&o.start_probs, &o.end_probs, &mask, None, s.duration()).map(|m| Interval::from(&m))
            })
            .collect()
    }
}

/// Index of each sample among the queries of its video, in split order.
pub fn query_indices(split: &DatasetSplit) -> Vec<usize> {
    let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
    split
        .samples()
        .iter()
        .map(|s| {
            let c = seen.entry(s.video_id.as_str()).or_insert(0);
            *c += 1;
            *c - 1
        })
        .collect()
}

pub fn predict_split<P: SpanPredictor + ?Sized>(predictor: &P, split: &DatasetSplit) -> Result<Vec<Interval>> {
    let samples: Vec<&GroundingSample> = split.samples().iter().collect();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        out.extend(predictor.predict_batch(chunk)?);
    }
    Ok(out)
}

/// Scores predictions (one per sample, in split order) after clipping them to the video.
pub fn score_predictions(
    split: &DatasetSplit,
    predictions: &[Interval],
    thresholds: &[f64],
) -> Result<(MetricsReport, Vec<SampleResult>)> {
    if predictions.len() != split.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} samples",
            predictions.len(),
            split.len()
        )));
    }
    let qidx = query_indices(split);
    let mut results = Vec::with_capacity(split.len());
    for ((s, p), q) in split.samples().iter().zip(predictions).zip(qidx) {
        let predicted = p.clip(s.duration());
        let ground_truth = Interval::from(&s.span);
        results.push(SampleResult {
            video_id: s.video_id.clone(),
            query_index: q,
            predicted,
            ground_truth,
            iou: temporal_iou(predicted, ground_truth)?,
        });
    }
    let ious: Vec<f64> = results.iter().map(|r| r.iou).collect();
    Ok((MetricsReport::from_ious(split.name.as_str(), &ious, thresholds), results))
}

pub fn evaluate<P: SpanPredictor + ?Sized>(
    predictor: &P,
    split: &DatasetSplit,
    thresholds: &[f64],
) -> Result<MetricsReport> {
    Ok(evaluate_detailed(predictor, split, thresholds)?.0)
}

pub fn evaluate_detailed<P: SpanPredictor + ?Sized>(
    predictor: &P,
    split: &DatasetSplit,
    thresholds: &[f64],
) -> Result<(MetricsReport, Vec<SampleResult>)> {
    let preds = predict_split(predictor, split)?;
    score_predictions(split, &preds, thresholds)
}

/// Frame order after cutting `frames` into consecutive segments of
/// `segment_len` and shuffling the segments.
pub fn segment_permutation<R: Rng + ?Sized>(frames: usize, segment_len: usize, rng: &mut R) -> Vec<usize> {
    let mut segments: Vec<core::ops::Range<usize>> = (0..frames)
        .step_by(segment_len)
        .map(|s| s..(s + segment_len).min(frames))
        .collect();
    segments.shuffle(rng);
    segments.into_iter().flatten().collect()
}

/// Copy of `split` whose videos are segment-shuffled; annotations are unchanged.
pub fn randomize_split<R: Rng + ?Sized>(split: &DatasetSplit, segment_len: usize, rng: &mut R) -> Result<DatasetSplit> {
    if segment_len == 0 {
        return Err(Error::Domain("segment length must be at least 1".into()));
    }
    // Queries on the same video see the same shuffled video.
    let mut shuffled: BTreeMap<&str, Arc<crate::data::FrameFeatures>> = BTreeMap::new();
    let mut samples = Vec::with_capacity(split.len());
    for s in split.samples() {
        let features = shuffled
            .entry(s.video_id.as_str())
            .or_insert_with(|| {
                let order = segment_permutation(s.frames(), segment_len, rng);
                Arc::new(s.features.reorder(&order))
            })
            .clone();
        samples.push(s.with_features(features));
    }
    DatasetSplit::new(split.name, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDrop {
    pub r1: Vec<RecallAt>,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityCheckResult {
    pub segment_len: usize,
    pub raw: MetricsReport,
    pub randomized: MetricsReport,
    /// Raw minus randomized.
    pub drop: MetricDrop,
}

impl SanityCheckResult {
    pub fn from_reports(segment_len: usize, raw: MetricsReport, randomized: MetricsReport) -> Self {
        let r1 = raw
            .recall
            .iter()
            .zip(&randomized.recall)
            .map(|(a, b)| RecallAt {
                iou: a.iou,
                r1: a.r1 - b.r1,
            })
            .collect();
        let drop = MetricDrop {
            r1,
            miou: raw.miou - randomized.miou,
        };
        Self {
            segment_len,
            raw,
            randomized,
            drop,
        }
    }

    pub fn drop_at(&self, iou: f64) -> Option<f64> {
        self.drop.r1.iter().find(|r| (r.iou - iou).abs() < 1e-12).map(|r| r.r1)
    }
}

/// Evaluates on raw and segment-shuffled videos against the same annotations.
pub fn randomized_video_test<P: SpanPredictor + ?Sized, R: Rng + ?Sized>(
    predictor: &P,
    split: &DatasetSplit,
    segment_len: usize,
    thresholds: &[f64],
    rng: &mut R,
) -> Result<SanityCheckResult> {
    let randomized = randomize_split(split, segment_len, rng)?;
    let raw = evaluate(predictor, split, thresholds)?;
    let shuffled = evaluate(predictor, &randomized, thresholds)?;
    Ok(SanityCheckResult::from_reports(segment_len, raw, shuffled))
}

/// Distribution of normalized `(start, end)` positions over a `bins x bins` grid.
/// Cell `(i, j)` (row-major, `i` the start bin) is empty whenever `i > j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasHistogram {
    pub word: String,
    pub bins: usize,
    pub counts: Vec<u64>,
    pub probabilities: Vec<f64>,
}

fn bin_of(x: f64, bins: usize) -> usize {
    ((x.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

impl BiasHistogram {
    /// Builds a histogram from normalized `(start, end)` pairs.
    pub fn from_points(word: &str, bins: usize, points: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Config("histogram needs at least one bin".into()));
        }
        let mut counts = vec![0u64; bins * bins];
        for (s, e) in points {
            let (i, j) = (bin_of(s, bins), bin_of(e.max(s), bins));
            counts[i * bins + j] += 1;
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::WordNotFound(word.to_string()));
        }
        let probabilities = counts.iter().map(|&c| c as f64 / total as f64).collect();
        Ok(Self {
            word: word.to_string(),
            bins,
            counts,
            probabilities,
        })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn probability(&self, start_bin: usize, end_bin: usize) -> f64 {
        self.probabilities[start_bin * self.bins + end_bin]
    }

    /// Cell with the highest count; ties go to the first in row-major order.
    pub fn mode(&self) -> (usize, usize) {
        let mut best = 0;
        for (k, &c) in self.counts.iter().enumerate() {
            if c > self.counts[best] {
                best = k;
            }
        }
        (best / self.bins, best % self.bins)
    }
}

/// Histogram of annotated moments whose query contains `word`.
pub fn bias_histogram(split: &DatasetSplit, word: &str, bins: usize) -> Result<BiasHistogram> {
    let spans: Vec<Interval> = split.samples().iter().map(|s| Interval::from(&s.span)).collect();
    predicted_bias_histogram(split, &spans, word, bins)
}

/// Histogram of `spans` (one per sample of `split`) restricted to queries containing `word`.
pub fn predicted_bias_histogram(
    split: &DatasetSplit,
    spans: &[Interval],
    word: &str,
    bins: usize,
) -> Result<BiasHistogram> {
    let points = split
        .samples()
        .iter()
        .zip(spans)
        .filter(|(s, _)| s.query.contains(word))
        .map(|(s, p)| {
            let d = s.duration();
            (p.start / d, p.end / d)
        });
    BiasHistogram::from_points(word, bins, points)
}

/// Jensen-Shannon divergence (natural log) between two histograms, in `[0, ln 2]`.
pub fn distribution_divergence(a: &BiasHistogram, b: &BiasHistogram) -> Result<f64> {
    if a.bins != b.bins {
        return Err(Error::Shape(format!("bins differ: {} vs {}", a.bins, b.bins)));
    }
    let kl_to_mid = |p: &[f64], q: &[f64]| -> f64 {
        p.iter()
            .zip(q)
            .filter(|(&pi, _)| pi > 0.0)
            .map(|(&pi, &qi)| pi * libm::log(pi / (0.5 * (pi + qi))))
            .sum()
    };
    let js = 0.5 * kl_to_mid(&a.probabilities, &b.probabilities) + 0.5 * kl_to_mid(&b.probabilities, &a.probabilities);
    Ok(js.clamp(0.0, core::f64::consts::LN_2))
}

/// The `k` most frequent query words, skipping words present in every query.
/// Ties are broken alphabetically.
pub fn top_words(split: &DatasetSplit, k: usize) -> Vec<(String, usize)> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in split.samples() {
        let mut tokens: Vec<&str> = s.query.tokens().iter().map(String::as_str).collect();
        tokens.sort_unstable();
        tokens.dedup();
        for t in tokens {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c < split.len())
        .map(|(w, c)| (w.to_string(), c))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(k);
    ranked
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FrameFeatures, SplitName};
    use crate::pseudo::stream_rng;
    use approx::assert_relative_eq;

    fn split_of(spans: &[(f64, f64)], text: &str) -> DatasetSplit {
        let samples = spans
            .iter()
            .enumerate()
            .map(|(i, &(s, e))| {
                let f = FrameFeatures::new(10, 1, (0..10).map(|x| x as f32).collect(), 10.0).unwrap();
                GroundingSample::new(alloc::format!("v{i}"), Arc::new(f), text, s, e).unwrap()
            })
            .collect();
        DatasetSplit::new(SplitName::TestIid, samples).unwrap()
    }

    #[test]
    fn select_examples() {
        let one_hot = |i: usize, n: usize| (0..n).map(|t| if t == i { 1.0 } else { 0.0 }).collect::<Vec<_>>();
        let m = [true; 8];
        assert_eq!(select_frames(&one_hot(2, 8), &one_hot(5, 8), &m, None).unwrap(), (2, 5));
        // Every valid pair scores zero, so the tie rule decides.
        let (s, e) = select_frames(&one_hot(5, 8), &one_hot(2, 8), &m, None).unwrap();
        assert!(s <= e);
        assert_eq!((s, e), (0, 0));
        assert_eq!(select_frames(&[0.25; 4], &[0.25; 4], &[true; 4], None).unwrap(), (0, 0));
        assert!(select_frames(&[0.5; 2], &[0.5; 2], &[false; 2], None).is_err());
    }

    #[test]
    fn select_respects_max_len_and_converts_to_seconds() {
        let ps = [0.7, 0.1, 0.1, 0.1];
        let pe = [0.0, 0.0, 0.1, 0.9];
        assert_eq!(select_frames(&ps, &pe, &[true; 4], None).unwrap(), (0, 3));
        assert_eq!(select_frames(&ps, &pe, &[true; 4], Some(2)).unwrap(), (2, 3));
        let span = select_span(&ps, &pe, &[true; 4], None, 8.0).unwrap();
        assert_eq!((span.start_sec, span.end_sec), (0.0, 8.0));
    }

    #[test]
    fn iou_examples() {
        assert_eq!(temporal_iou(Interval::new(0.0, 6.6), Interval::new(0.0, 6.6)).unwrap(), 1.0);
        assert_eq!(temporal_iou(Interval::new(2.0, 8.0), Interval::new(4.0, 10.0)).unwrap(), 0.5);
        assert_eq!(temporal_iou(Interval::new(0.0, 1.0), Interval::new(2.0, 3.0)).unwrap(), 0.0);
        assert_eq!(temporal_iou(Interval::new(2.0, 2.0), Interval::new(2.0, 2.0)).unwrap(), 1.0);
        assert_eq!(temporal_iou(Interval::new(2.0, 2.0), Interval::new(1.0, 3.0)).unwrap(), 0.0);
        assert!(temporal_iou(Interval::new(3.0, 2.0), Interval::new(1.0, 3.0)).is_err());
    }

    #[test]
    fn report_from_hand_ious() {
        let r = MetricsReport::from_ious("x", &[0.8, 0.4, 0.6], &[0.5]);
        assert_relative_eq!(r.r1_at(0.5).unwrap(), 200.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(r.miou, 60.0, max_relative = 1e-12);
        // Strict inequality: IoU exactly at the threshold does not count.
        let r = MetricsReport::from_ious("x", &[0.5], &[0.5]);
        assert_eq!(r.r1_at(0.5).unwrap(), 0.0);
    }

    #[test]
    fn perfect_predictions_score_100() {
        let split = split_of(&[(0.0, 3.0), (2.0, 9.5), (4.0, 4.5)], "a b");
        let preds: Vec<Interval> = split.samples().iter().map(|s| Interval::from(&s.span)).collect();
        let (r, rows) = score_predictions(&split, &preds, &DEFAULT_THRESHOLDS).unwrap();
        assert!(r.recall.iter().all(|x| x.r1 == 100.0));
        assert_eq!(r.miou, 100.0);
        assert_eq!(rows.len(), 3);
    }

    #[test]
    fn predictions_are_clipped() {
        let split = split_of(&[(0.0, 10.0)], "a");
        let (r, _) = score_predictions(&split, &[Interval::new(-5.0, 20.0)], &[0.5]).unwrap();
        assert_eq!(r.miou, 100.0);
    }

    #[test]
    fn segment_permutation_is_identity_for_long_segments() {
        let mut rng = stream_rng(0, 0, 0);
        assert_eq!(segment_permutation(7, 7, &mut rng), (0..7).collect::<Vec<_>>());
        assert_eq!(segment_permutation(7, 100, &mut rng), (0..7).collect::<Vec<_>>());
        let mut p = segment_permutation(10, 4, &mut rng);
        p.sort_unstable();
        assert_eq!(p, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn full_video_moments_fill_the_corner_cell() {
        let split = split_of(&[(0.0, 10.0), (0.0, 10.0)], "wake up");
        let h = bias_histogram(&split, "wake", 5).unwrap();
        assert_eq!(h.probability(0, 4), 1.0);
        assert!(matches!(bias_histogram(&split, "sleep", 5), Err(Error::WordNotFound(_))));
    }

    #[test]
    fn divergence_bounds() {
        let a = BiasHistogram::from_points("w", 4, [(0.0, 0.1)]).unwrap();
        let b = BiasHistogram::from_points("w", 4, [(0.9, 0.95)]).unwrap();
        assert_eq!(distribution_divergence(&a, &a).unwrap(), 0.0);
        assert_relative_eq!(distribution_divergence(&a, &b).unwrap(), core::f64::consts::LN_2, max_relative = 1e-12);
        let c = BiasHistogram::from_points("w", 5, [(0.0, 0.1)]).unwrap();
        assert!(distribution_divergence(&a, &c).is_err());
    }

    #[test]
    fn histogram_lower_triangle_is_empty() {
        let pts = (0..50).map(|i| {
            let s = (i as f64 * 0.37) % 1.0;
            (s, (s + 0.2).min(1.0))
        });
        let h = BiasHistogram::from_points("w", 6, pts).unwrap();
        for i in 0..6 {
            for j in 0..i {
                assert_eq!(h.counts[i * 6 + j], 0);
            }
        }
        assert_relative_eq!(h.probabilities.iter().sum::<f64>(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn top_words_skip_universal_tokens() {
        let mut s = split_of(&[(0.0, 1.0)], "person opens door").samples().to_vec();
        s.extend(split_of(&[(0.0, 1.0)], "person opens box").samples().iter().cloned());
        s.extend(split_of(&[(0.0, 1.0)], "person eats").samples().iter().cloned());
        let split = DatasetSplit::new(SplitName::Training, s).unwrap();
        let top = top_words(&split, 2);
        assert_eq!(top[0], ("opens".into(), 2));
        assert_eq!(top[1].0, "box");
    }

    proptest::proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in 0.0f64..50.0, la in 0.0f64..20.0, b in 0.0f64..50.0, lb in 0.0f64..20.0) {
            let x = Interval::new(a, a + la);
            let y = Interval::new(b, b + lb);
            let u = temporal_iou(x, y).unwrap();
            proptest::prop_assert_eq!(u, temporal_iou(y, x).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&u));
            if la > 0.0 {
                proptest::prop_assert_eq!(temporal_iou(x, x).unwrap(), 1.0);
            }
        }

        #[test]
        fn recall_is_monotone(ious in proptest::collection::vec(0.0f64..1.0, 1..40)) {
            let r = MetricsReport::from_ious("x", &ious, &DEFAULT_THRESHOLDS);
            proptest::prop_assert!(r.recall[0].r1 >= r.recall[1].r1 && r.recall[1].r1 >= r.recall[2].r1);
            proptest::prop_assert!((0.0..=100.0).contains(&r.miou));
        }
    }
}
