//! Synthetic grounding benchmarks with a planted query-position bias.
//!
//! Every token owns a random unit "signature" vector. A video is a sequence
//! of runs of signatures plus Gaussian noise; the target moment is a run of
//! the query token's signature. In training, val and test-iid the moment of
//! token `k` starts near a token-specific position inside the bias region
//! (the start of the video by default); in test-ood it starts inside a
//! disjoint region (the end of the video by default). A model that memorizes
//! where each token usually occurs does well on test-iid and fails on
//! test-ood; a model that matches content does well on both.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetSplit, FrameFeatures, GroundingSample, SplitName};
use crate::error::{Error, Result};
use crate::eval::{BiasHistogram, Interval, SpanPredictor, DEFAULT_BINS};
use crate::pseudo::stream_rng;

const ACTIONS: [&str; 24] = [
    "awakens", "opens", "closes", "sits", "stands", "eats", "drinks", "laughs", "walks", "undresses", "cooks",
    "reads", "sneezes", "washes", "holds", "throws", "pours", "smiles", "runs", "sweeps", "dresses", "tidies",
    "watches", "lies",
];

const TEMPLATES: [&str; 4] = [
    "person {} something",
    "a person {} the object",
    "someone {} it",
    "the person {} something here",
];

/// Truncated Gaussian over the normalized start position `start / (T - L)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionPrior {
    pub mean: f64,
    pub std: f64,
    pub low: f64,
    pub high: f64,
}

impl PositionPrior {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let normal = Normal::new(self.mean, self.std).expect("validated std");
        for _ in 0..10_000 {
            let u: f64 = normal.sample(rng);
            if (self.low..=self.high).contains(&u) {
                return u;
            }
        }
        rng.random_range(self.low..=self.high)
    }

    /// Unnormalized density, zero outside `[low, high]`.
    pub fn density(&self, u: f64) -> f64 {
        if !(self.low..=self.high).contains(&u) {
            return 0.0;
        }
        let z = (u - self.mean) / self.std;
        libm::exp(-0.5 * z * z)
    }
}

/// Range of normalized start positions used by a split, split per token.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionRegion {
    pub low: f64,
    pub high: f64,
    pub std: f64,
}

impl PositionRegion {
    /// Token `k` of `count` is centred at `low + (k + 0.5) / count * (high - low)`.
    pub fn prior(&self, k: usize, count: usize) -> PositionPrior {
        PositionPrior {
            mean: self.low + (k as f64 + 0.5) / count as f64 * (self.high - self.low),
            std: self.std,
            low: self.low,
            high: self.high,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(0.0 <= self.low && self.low < self.high && self.high <= 1.0) {
            return Err(Error::Config(format!(
                "{name} region [{}, {}] must satisfy 0 <= low < high <= 1",
                self.low, self.high
            )));
        }
        if !(self.std > 0.0) {
            return Err(Error::Config(format!("{name} std must be positive")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub training: usize,
    pub val: usize,
    pub test_iid: usize,
    pub test_ood: usize,
}

impl SplitSizes {
    pub fn get(&self, name: SplitName) -> usize {
        match name {
            SplitName::Training => self.training,
            SplitName::Val => self.val,
            SplitName::TestIid => self.test_iid,
            SplitName::TestOod => self.test_ood,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub vocab_size: usize,
    pub videos: SplitSizes,
    pub frames_min: usize,
    pub frames_max: usize,
    pub feature_dim: usize,
    pub moment_min: usize,
    pub moment_max: usize,
    pub frame_rate: f64,
    pub bias: PositionRegion,
    pub ood: PositionRegion,
    pub signature_strength: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            videos: SplitSizes {
                training: 512,
                val: 64,
                test_iid: 64,
                test_ood: 256,
            },
            frames_min: 48,
            frames_max: 64,
            feature_dim: 16,
            moment_min: 6,
            moment_max: 12,
            frame_rate: 1.0,
            bias: PositionRegion {
                low: 0.0,
                high: 1.0 / 3.0,
                std: 0.05,
            },
            ood: PositionRegion {
                low: 2.0 / 3.0,
                high: 1.0,
                std: 0.05,
            },
            signature_strength: 3.0,
            noise: 0.35,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.vocab_size < 2 {
            return err("vocab_size must be at least 2");
        }
        if SplitName::ALL.iter().any(|&n| self.videos.get(n) == 0) {
            return err("every split needs at least one video");
        }
        if self.feature_dim == 0 {
            return err("feature_dim must be positive");
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return err("frame range must satisfy 0 < frames_min <= frames_max");
        }
        if self.moment_min == 0 || self.moment_min > self.moment_max {
            return err("moment range must satisfy 0 < moment_min <= moment_max");
        }
        if self.moment_max > self.frames_min {
            return err("moment_max exceeds frames_min: position distribution infeasible");
        }
        if !(self.frame_rate > 0.0) {
            return err("frame_rate must be positive");
        }
        if !(self.signature_strength >= 0.0) || !(self.noise >= 0.0) {
            return err("signature_strength and noise must be non-negative");
        }
        self.bias.validate("bias")?;
        self.ood.validate("ood")?;
        if self.bias.high > self.ood.low && self.ood.high > self.bias.low {
            return err("bias and ood regions overlap");
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<String> {
        (0..self.vocab_size)
            .map(|k| match ACTIONS.get(k) {
                Some(a) => a.to_string(),
                None => format!("action{k}"),
            })
            .collect()
    }

    pub fn region(&self, split: SplitName) -> PositionRegion {
        match split {
            SplitName::TestOod => self.ood,
            _ => self.bias,
        }
    }
}

/// Ground truth the generator planted; used by oracles and tests only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchMetadata {
    pub config: BenchConfig,
    pub tokens: Vec<String>,
    /// Unit signature vector per token.
    pub signatures: Vec<Vec<f64>>,
    /// Planted token index per sample, keyed by split name.
    pub planted: BTreeMap<String, Vec<usize>>,
}

impl BenchMetadata {
    pub fn token_index(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    /// First query token that is an action token.
    pub fn action_of(&self, sample: &GroundingSample) -> Option<usize> {
        sample.query.tokens().iter().find_map(|t| self.token_index(t))
    }
}

pub struct Benchmark {
    pub dataset: Dataset,
    pub metadata: BenchMetadata,
}

fn unit_gaussian<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
        if norm > 1e-6 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn generate_benchmark(config: &BenchConfig) -> Result<Benchmark> {
    config.validate()?;
    let tokens = config.tokens();
    let mut sig_rng = stream_rng(config.seed, u64::MAX, 0);
    let signatures: Vec<Vec<f64>> = (0..config.vocab_size)
        .map(|_| unit_gaussian(&mut sig_rng, config.feature_dim))
        .collect();
    let mut splits = Vec::new();
    let mut planted = BTreeMap::new();
    for (si, name) in SplitName::ALL.into_iter().enumerate() {
        let region = config.region(name);
        let count = config.videos.get(name);
        let mut samples = Vec::with_capacity(count);
        let mut tokens_used = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = stream_rng(config.seed, si as u64, i as u64);
            let token = rng.random_range(0..config.vocab_size);
            let sample = generate_sample(config, &tokens, &signatures, region, name, i, token, &mut rng)?;
            samples.push(sample);
            tokens_used.push(token);
        }
        planted.insert(name.as_str().to_string(), tokens_used);
        splits.push(DatasetSplit::new(name, samples)?);
    }
    Ok(Benchmark {
        dataset: Dataset::new(splits)?,
        metadata: BenchMetadata {
            config: config.clone(),
            tokens,
            signatures,
            planted,
        },
    })
}

#[allow(clippy::too_many_arguments)]
fn generate_sample<R: Rng + ?Sized>(
    config: &BenchConfig,
    tokens: &[String],
    signatures: &[Vec<f64>],
    region: PositionRegion,
    split: SplitName,
    index: usize,
    token: usize,
    rng: &mut R,
) -> Result<GroundingSample> {
    let frames = rng.random_range(config.frames_min..=config.frames_max);
    let len = rng.random_range(config.moment_min..=config.moment_max);
    let u = region.prior(token, config.vocab_size).sample(rng);
    let start = libm::round(u * (frames - len) as f64) as usize;
    let end = start + len - 1;

    let mut owner = alloc::vec![token; frames];
    let mut t = 0;
    while t < frames {
        if t == start {
            t = end + 1;
            continue;
        }
        let run_end = (t + rng.random_range(2..=config.moment_max)).min(frames);
        let run_end = if t < start { run_end.min(start) } else { run_end };
        let mut other = rng.random_range(0..config.vocab_size - 1);
        if other >= token {
            other += 1;
        }
        owner[t..run_end].iter_mut().for_each(|o| *o = other);
        t = run_end;
    }

    let noise = Normal::new(0.0, config.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut data = Vec::with_capacity(frames * config.feature_dim);
    for &o in &owner {
        for &s in &signatures[o] {
            let n = if config.noise > 0.0 { noise.sample(rng) } else { 0.0 };
            data.push((config.signature_strength * s + n) as f32);
        }
    }
    let duration = frames as f64 / config.frame_rate;
    let features = FrameFeatures::new(frames, config.feature_dim, data, duration)?;
    let template = TEMPLATES[rng.random_range(0..TEMPLATES.len())];
    let text = template.replace("{}", &tokens[token]);
    // The annotated end lies just inside the last moment frame.
    let start_sec = start as f64 / config.frame_rate;
    let end_sec = (end as f64 + 0.99) / config.frame_rate;
    GroundingSample::new(
        format!("{}-{index:05}", split.as_str()),
        Arc::new(features),
        &text,
        start_sec,
        end_sec,
    )
}

/// Predictor that ignores the video and returns the most frequent normalized
/// `(start, end)` cell of the rarest known query word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOracle {
    pub histograms: BTreeMap<String, BiasHistogram>,
    pub word_counts: BTreeMap<String, u64>,
}

impl BiasOracle {
    /// Memorizes per-word position histograms of a training split.
    pub fn memorize(split: &DatasetSplit, bins: usize) -> Result<Self> {
        let mut words: Vec<&str> = split
            .samples()
            .iter()
            .flat_map(|s| s.query.tokens().iter().map(String::as_str))
            .collect();
        words.sort_unstable();
        words.dedup();
        let mut histograms = BTreeMap::new();
        let mut word_counts = BTreeMap::new();
        for w in words {
            let h = crate::eval::bias_histogram(split, w, bins)?;
            word_counts.insert(w.to_string(), h.total());
            histograms.insert(w.to_string(), h);
        }
        Ok(Self {
            histograms,
            word_counts,
        })
    }

    pub fn predict(&self, sample: &GroundingSample) -> Interval {
        let word = sample
            .query
            .tokens()
            .iter()
            .filter(|t| self.histograms.contains_key(t.as_str()))
            .min_by_key(|t| self.word_counts[t.as_str()]);
        let d = sample.duration();
        match word {
            Some(w) => {
                let h = &self.histograms[w.as_str()];
                let (i, j) = h.mode();
                let b = h.bins as f64;
                Interval::new((i as f64 + 0.5) / b * d, (j as f64 + 0.5) / b * d)
            }
            None => Interval::new(0.0, d),
        }
    }
}

impl SpanPredictor for BiasOracle {
    fn predict_batch(&self, samples: &[&GroundingSample]) -> Result<Vec<Interval>> {
        Ok(samples.iter().map(|s| self.predict(s)).collect())
    }
}

/// Predictor that labels each frame with its nearest signature and returns the
/// longest run of frames labelled with the query's token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentOracle {
    pub tokens: Vec<String>,
    pub signatures: Vec<Vec<f64>>,
}

impl ContentOracle {
    pub fn from_metadata(meta: &BenchMetadata) -> Self {
        Self {
            tokens: meta.tokens.clone(),
            signatures: meta.signatures.clone(),
        }
    }

    fn nearest(&self, row: &[f32]) -> (usize, Vec<f64>) {
        let scores: Vec<f64> = self
            .signatures
            .iter()
            .map(|s| s.iter().zip(row).map(|(a, &b)| a * b as f64).sum())
            .collect();
        let mut best = 0;
        for (k, &v) in scores.iter().enumerate() {
            if v > scores[best] {
                best = k;
            }
        }
        (best, scores)
    }

    pub fn predict_frames(&self, sample: &GroundingSample) -> (usize, usize) {
        let token = sample
            .query
            .tokens()
            .iter()
            .find_map(|t| self.tokens.iter().position(|x| x == t));
        let frames = sample.frames();
        let Some(token) = token else { return (0, frames - 1) };
        let mut best: Option<(usize, usize)> = None;
        let mut best_score = (f64::NEG_INFINITY, 0usize);
        let mut run_start = None;
        for t in 0..=frames {
            let hit = t < frames && self.nearest(sample.features.row(t)).0 == token;
            match (hit, run_start) {
                (true, None) => run_start = Some(t),
                (false, Some(s)) => {
                    if best.is_none_or(|(bs, be)| t - s > be - bs + 1) {
                        best = Some((s, t - 1));
                    }
                    run_start = None;
                }
                _ => {}
            }
            if t < frames {
                let score = self.nearest(sample.features.row(t)).1[token];
                if score > best_score.0 {
                    best_score = (score, t);
                }
            }
        }
        best.unwrap_or((best_score.1, best_score.1))
    }

    pub fn predict(&self, sample: &GroundingSample) -> Interval {
        let (s, e) = self.predict_frames(sample);
        let (d, n) = (sample.duration(), sample.frames());
        Interval::new(
            crate::data::frame_start_time(s, d, n),
            crate::data::frame_end_time(e, d, n),
        )
    }
}

impl SpanPredictor for ContentOracle {
    fn predict_batch(&self, samples: &[&GroundingSample]) -> Result<Vec<Interval>> {
        Ok(samples.iter().map(|s| self.predict(s)).collect())
    }
}

/// Either oracle behind one type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleModel {
    BiasOnly(BiasOracle),
    ContentOnly(ContentOracle),
}

impl SpanPredictor for OracleModel {
    fn predict_batch(&self, samples: &[&GroundingSample]) -> Result<Vec<Interval>> {
        match self {
            OracleModel::BiasOnly(o) => o.predict_batch(samples),
            OracleModel::ContentOnly(o) => o.predict_batch(samples),
        }
    }
}

pub fn run_oracle(oracle: &OracleModel, split: &DatasetSplit) -> Result<Vec<Interval>> {
    crate::eval::predict_split(oracle, split)
}

/// Memorizes a bias oracle from the training split with the default binning.
pub fn bias_oracle(dataset: &Dataset) -> Result<OracleModel> {
    let train = dataset
        .split(SplitName::Training)
        .ok_or_else(|| Error::Config("dataset has no training split".into()))?;
    Ok(OracleModel::BiasOnly(BiasOracle::memorize(train, DEFAULT_BINS)?))
}
