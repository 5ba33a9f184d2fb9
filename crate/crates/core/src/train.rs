//! Training loop: fresh pseudo videos every epoch, padded batches, Adam with
//! global-norm clipping, and model selection on the validation split.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, GroundingSample, MomentSpan};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricsReport, DEFAULT_THRESHOLDS};
use crate::graph::{Graph, Segment, Var};
use crate::losses::{frame_labels, total_loss, LossBundle, LossWeights, ORIGINAL, SHUFFLED};
use crate::model::{GroundingModel, ModelConfig, QueryBatch, VideoBatch};
use crate::pseudo::{make_triplet, stream_rng, TrainingTriplet};
use crate::tensor::Matrix;

/// Metric used to pick the best checkpoint on the validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SelectionMetric {
    MeanIou,
    RecallAt(f64),
}

impl SelectionMetric {
    pub fn read(&self, report: &MetricsReport) -> Result<f64> {
        match *self {
            SelectionMetric::MeanIou => Ok(report.miou),
            SelectionMetric::RecallAt(t) => report
                .r1_at(t)
                .ok_or_else(|| Error::Config(format!("report has no R@1 at IoU={t}"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            SelectionMetric::MeanIou => "miou".to_string(),
            SelectionMetric::RecallAt(t) => format!("r1@{t}"),
        }
    }
}

impl FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miou" | "mIoU" => Ok(Self::MeanIou),
            "r1@0.3" => Ok(Self::RecallAt(0.3)),
            "r1@0.5" => Ok(Self::RecallAt(0.5)),
            "r1@0.7" => Ok(Self::RecallAt(0.7)),
            other => Err(Error::Config(format!("unknown selection metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub model: ModelConfig,
    pub clip_norm: f64,
    pub selection_metric: SelectionMetric,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            batch_size: 32,
            epochs: 30,
            learning_rate: 1e-3,
            weights: LossWeights::FULL,
            seed: 0,
            model,
            clip_norm: 5.0,
            selection_metric: SelectionMetric::MeanIou,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.weights.validate()?;
        self.model.validate()
    }
}

/// Adam moments, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros = || params.iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Matrix], grads: &[Option<Matrix>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.step as f64);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for k in 0..p.data.len() {
                let gk = g.data[k];
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / bc1;
                let vh = v.data[k] / bc2;
                p.data[k] -= lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().flatten().map(Matrix::norm_sq).sum::<f64>());
    if norm > max_norm {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| g.scale(k));
    }
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub epoch: usize,
    pub metric: f64,
}

/// Everything needed to resume training at an epoch boundary. Per-sample
/// randomness is derived from `(seed, epoch, index)`, so no rng state is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub optimizer: Adam,
    pub best: Option<BestRecord>,
    /// Pseudo-video batches that went through a gradient-mode forward pass.
    pub pseudo_forward_passes: u64,
}

impl TrainState {
    pub fn new(model: &GroundingModel) -> Self {
        Self {
            epoch: 0,
            step: 0,
            optimizer: Adam::new(model.params.values()),
            best: None,
            pseudo_forward_passes: 0,
        }
    }
}

/// Loss components of one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub l_g: f64,
    pub l_intra: Option<f64>,
    pub l_inter: Option<f64>,
    pub l_d: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub l_g: f64,
    pub l_intra: Option<f64>,
    pub l_inter: Option<f64>,
    pub l_d: Option<f64>,
    pub total: f64,
}

/// Graph nodes of one batch objective.
pub struct BatchLoss {
    pub total: Var,
    pub l_g: Var,
    pub l_intra: Option<Var>,
    pub l_inter: Option<Var>,
    pub l_d: Option<Var>,
}

/// Builds the weighted objective of a batch of triplets on `g`. When all
/// auxiliary weights are zero only the original videos are encoded.
pub fn batch_objective(
    model: &GroundingModel,
    g: &mut Graph<'_>,
    triplets: &[TrainingTriplet],
    weights: LossWeights,
) -> Result<BatchLoss> {
    let n = triplets.len();
    if n == 0 {
        return Err(Error::EmptySplit);
    }
    let with_pseudo = !weights.is_baseline();
    let queries: Vec<_> = triplets.iter().map(|t| &t.original.query).collect();
    let q = QueryBatch::new(&model.vocab, &queries)?;
    let mut videos: Vec<_> = triplets.iter().map(|t| &*t.original.features).collect();
    let mut spans: Vec<MomentSpan> = triplets.iter().map(|t| t.original.span).collect();
    let mut query_of: Vec<usize> = (0..n).collect();
    if with_pseudo {
        videos.extend(triplets.iter().map(|t| &*t.pseudo.features));
        spans.extend(triplets.iter().map(|t| t.pseudo.span));
        query_of.extend(0..n);
    }
    let v = VideoBatch::new(&videos, query_of, model.config.feature_dim)?;
    let fv = model.forward_vars(g, &q, &v);
    let len = v.len;
    let inv = 1.0 / n as f64;

    let segments: Vec<Segment> = (0..n).map(|b| v.valid_segment(b)).collect();
    let start_rows = (0..n).map(|b| b * len + spans[b].start_frame).collect();
    let end_rows = (0..n).map(|b| b * len + spans[b].end_frame).collect();
    let nll_s = g.span_nll(fv.start_scores, segments.clone(), start_rows, alloc::vec![inv; n]);
    let nll_e = g.span_nll(fv.end_scores, segments, end_rows, alloc::vec![inv; n]);
    let l_g = g.weighted_sum(&[(nll_s, 1.0), (nll_e, 1.0)]);
    let mut terms = alloc::vec![(l_g, 1.0)];

    let l_intra = (weights.intra > 0.0).then(|| {
        let mut labels = alloc::vec![0.0; v.batch() * len];
        let mut w = alloc::vec![0.0; v.batch() * len];
        for b in 0..v.batch() {
            let lab = frame_labels(&spans[b], v.lens[b]);
            labels[b * len..b * len + v.lens[b]].copy_from_slice(&lab);
            w[b * len..b * len + v.lens[b]].iter_mut().for_each(|x| *x = 0.5 * inv);
        }
        let l = g.bce(fv.relevance, labels, w);
        terms.push((l, weights.intra));
        l
    });

    let l_inter = (weights.inter > 0.0).then(|| {
        let pairs = (0..n)
            .map(|b| {
                (
                    b * len + spans[b].start_frame,
                    (n + b) * len + spans[n + b].start_frame,
                    spans[b].frame_len(),
                )
            })
            .collect();
        let l = g.span_kl(fv.relevance_logits, fv.relevance_logits, pairs, alloc::vec![inv; n]);
        terms.push((l, weights.inter));
        l
    });

    let l_d = (weights.order > 0.0).then(|| {
        let pooled = model.pool_moments(g, fv.video, &v, &spans);
        let logits = model.order_logits(g, pooled);
        let mut labels = alloc::vec![ORIGINAL; n];
        labels.extend(core::iter::repeat_n(SHUFFLED, n));
        let mut w: Vec<f64> = triplets
            .iter()
            .map(|t| if t.degenerate() { 0.5 * inv } else { inv })
            .collect();
        w.extend(triplets.iter().map(|t| if t.degenerate() { 0.0 } else { inv }));
        let l = g.cross_entropy(logits, labels, w);
        terms.push((l, weights.order));
        l
    });

    let total = g.weighted_sum(&terms);
    Ok(BatchLoss {
        total,
        l_g,
        l_intra,
        l_inter,
        l_d,
    })
}

/// Triplets for one batch; baseline runs get a placeholder pseudo video that is never read.
fn make_batch(
    samples: &[GroundingSample],
    indices: &[usize],
    seed: u64,
    epoch: usize,
    with_pseudo: bool,
) -> Result<Vec<TrainingTriplet>> {
    indices
        .iter()
        .map(|&i| {
            let s = &samples[i];
            if with_pseudo {
                make_triplet(s, &mut stream_rng(seed, epoch as u64, i as u64))
            } else {
                Ok(TrainingTriplet {
                    original: s.clone(),
                    pseudo: crate::pseudo::PseudoVideo {
                        features: s.features.clone(),
                        span: s.span,
                        source_rows: Vec::new(),
                        degenerate: true,
                    },
                })
            }
        })
        .collect()
}

/// Sample order of an epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, epoch as u64, u64::MAX));
    order
}

/// Runs one epoch; `log` receives every step.
pub fn train_epoch(
    model: &mut GroundingModel,
    split: &DatasetSplit,
    config: &TrainConfig,
    state: &mut TrainState,
    log: &mut dyn FnMut(&StepLog),
) -> Result<EpochMetrics> {
    config.validate()?;
    if split.is_empty() {
        return Err(Error::EmptySplit);
    }
    let weights = config.weights;
    let with_pseudo = !weights.is_baseline();
    let order = epoch_order(split.len(), config.seed, state.epoch);
    let mut sums = [0.0f64; 5];
    let mut steps = 0usize;
    for chunk in order.chunks(config.batch_size) {
        let triplets = make_batch(split.samples(), chunk, config.seed, state.epoch, with_pseudo)?;
        let (bundle, mut grads) = {
            let mut g = model.graph();
            let loss = batch_objective(model, &mut g, &triplets, weights)?;
            if with_pseudo {
                state.pseudo_forward_passes += 1;
            }
            let value = |v: Option<Var>| v.map(|v| g.scalar(v));
            let bundle = total_loss(
                g.scalar(loss.l_g),
                value(loss.l_intra),
                value(loss.l_inter),
                value(loss.l_d),
                weights,
            )
            .map_err(|e| with_batch_ids(e, &triplets))?;
            (bundle, g.backward(loss.total).into_params())
        };
        let grad_norm = clip_gradients(&mut grads, config.clip_norm);
        if !grad_norm.is_finite() {
            return Err(with_batch_ids(
                Error::NonFinite {
                    component: "gradient".into(),
                    samples: Vec::new(),
                },
                &triplets,
            ));
        }
        state
            .optimizer
            .update(model.params.values_mut(), &grads, config.learning_rate);
        state.step += 1;
        steps += 1;
        accumulate(&mut sums, &bundle);
        log(&StepLog {
            step: state.step,
            epoch: state.epoch,
            l_g: bundle.l_g,
            l_intra: bundle.l_intra,
            l_inter: bundle.l_inter,
            l_d: bundle.l_d,
            total: bundle.total,
            grad_norm,
        });
    }
    let mean = |x: f64| x / steps as f64;
    let metrics = EpochMetrics {
        epoch: state.epoch,
        steps,
        l_g: mean(sums[0]),
        l_intra: (weights.intra > 0.0).then(|| mean(sums[1])),
        l_inter: (weights.inter > 0.0).then(|| mean(sums[2])),
        l_d: (weights.order > 0.0).then(|| mean(sums[3])),
        total: mean(sums[4]),
    };
    state.epoch += 1;
    Ok(metrics)
}

fn accumulate(sums: &mut [f64; 5], b: &LossBundle) {
    sums[0] += b.l_g;
    sums[1] += b.l_intra.unwrap_or(0.0);
    sums[2] += b.l_inter.unwrap_or(0.0);
    sums[3] += b.l_d.unwrap_or(0.0);
    sums[4] += b.total;
}

fn with_batch_ids(e: Error, triplets: &[TrainingTriplet]) -> Error {
    match e {
        Error::NonFinite { component, .. } => Error::NonFinite {
            component,
            samples: triplets.iter().map(|t| t.original.video_id.clone()).collect(),
        },
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: EpochMetrics,
    pub val: MetricsReport,
    pub selection: f64,
    pub improved: bool,
}

pub struct FitResult {
    pub best: GroundingModel,
    pub last: GroundingModel,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

/// Callbacks invoked by [`fit`].
pub trait FitObserver {
    fn step(&mut self, _log: &StepLog) {}
    fn epoch(&mut self, _record: &EpochRecord, _model: &GroundingModel, _state: &TrainState) {}
}

impl FitObserver for () {}

/// Trains for `config.epochs` epochs, keeping the model with the best
/// validation score (ties keep the earlier epoch).
pub fn fit(
    model: GroundingModel,
    train: &DatasetSplit,
    val: &DatasetSplit,
    config: &TrainConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    let state = TrainState::new(&model);
    resume(model, state, train, val, config, observer)
}

/// Continues training from `state` until `config.epochs` epochs are done.
pub fn resume(
    mut model: GroundingModel,
    mut state: TrainState,
    train: &DatasetSplit,
    val: &DatasetSplit,
    config: &TrainConfig,
    observer: &mut dyn FitObserver,
) -> Result<FitResult> {
    config.validate()?;
    if val.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut best = model.clone();
    let mut history = Vec::new();
    while state.epoch < config.epochs {
        let train_metrics = train_epoch(&mut model, train, config, &mut state, &mut |l| observer.step(l))?;
        let report = evaluate(&model, val, &DEFAULT_THRESHOLDS)?;
        let selection = config.selection_metric.read(&report)?;
        let improved = state.best.as_ref().is_none_or(|b| selection > b.metric);
        if improved {
            state.best = Some(BestRecord {
                epoch: train_metrics.epoch,
                metric: selection,
            });
            best = model.clone();
        }
        let record = EpochRecord {
            epoch: train_metrics.epoch,
            train: train_metrics,
            val: report,
            selection,
            improved,
        };
        observer.epoch(&record, &model, &state);
        history.push(record);
    }
    Ok(FitResult {
        best,
        last: model,
        state,
        history,
    })
}
