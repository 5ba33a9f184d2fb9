//! Span-based grounding network with a cross-modal relevance module and a
//! temporal order discriminator.
//!
//! Layout of a forward pass over a padded batch:
//!
//! * query encoder: word embeddings, stacked bidirectional LSTMs, giving word
//!   features `W` (`B·N x d`) and a sentence vector `s` (`B x d`);
//! * video encoder: frame projection, attention of each frame over `W`,
//!   concatenation and projection, then a bidirectional LSTM over time (`B·T x d`);
//! * relevance module: per-frame MLP on `v_t ‖ s`, sigmoid output `c_t`;
//! * span heads: per-frame MLPs on `c_t · (v_t ‖ s)`;
//! * order discriminator: mean-pooled before/target/after moments, no
//!   positional input.
//!
//! Rows of batched matrices are laid out video-major: row `b * T + t`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{GroundingSample, MomentSpan, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamId, ParamStore, Segment, Var};
use crate::tensor::{softmax, Matrix};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
/// Order classes: index 0 is "original order", 1 is "shuffled".
pub const ORDER_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from token sequences. Ids 0 and 1 are padding and unknown.
    pub fn build<'a>(queries: impl IntoIterator<Item = &'a TokenSequence>) -> Self {
        let mut vocab = Self {
            words: Vec::new(),
            index: BTreeMap::new(),
        };
        vocab.insert(PAD);
        vocab.insert(UNK);
        let mut seen: Vec<&str> = queries
            .into_iter()
            .flat_map(|q| q.tokens().iter().map(String::as_str))
            .collect();
        seen.sort_unstable();
        seen.dedup();
        for w in seen {
            vocab.insert(w);
        }
        vocab
    }

    fn insert(&mut self, w: &str) {
        if !self.index.contains_key(w) {
            self.index.insert(w.to_string(), self.words.len());
            self.words.push(w.to_string());
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(1)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    pub fn encode(&self, tokens: &TokenSequence) -> Vec<usize> {
        tokens.tokens().iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub embed_dim: usize,
    /// Hidden size `d`; each LSTM direction uses `d / 2`.
    pub hidden: usize,
    /// Width of the hidden layer of every per-frame MLP.
    pub mlp_hidden: usize,
    pub query_layers: usize,
}

impl ModelConfig {
    pub fn toy(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            embed_dim: 64,
            hidden: 64,
            mlp_hidden: 64,
            query_layers: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.embed_dim == 0 || self.mlp_hidden == 0 || self.query_layers == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.hidden < 2 || !self.hidden.is_multiple_of(2) {
            return Err(Error::Config(format!("hidden size must be even, got {}", self.hidden)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, output: usize) -> Self {
        let bound = libm::sqrt(6.0 / (input + output) as f64);
        let w = uniform_matrix(rng, input, output, bound);
        Self {
            w: store.add(format!("{name}.w"), w),
            b: store.add(format!("{name}.b"), Matrix::zeros(1, output)),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let xw = g.matmul(x, w);
        g.add_bias(xw, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LstmDirection {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmDirection {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / libm::sqrt(hidden as f64);
        let mut bias = Matrix::zeros(1, 4 * hidden);
        // Forget gate starts open.
        for j in hidden..2 * hidden {
            bias.data[j] = 1.0;
        }
        Self {
            w_input: store.add(format!("{name}.w_ih"), uniform_matrix(rng, input, 4 * hidden, bound)),
            w_hidden: store.add(format!("{name}.w_hh"), uniform_matrix(rng, hidden, 4 * hidden, bound)),
            bias: store.add(format!("{name}.b"), bias),
            hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiLstm {
    pub forward: LstmDirection,
    pub backward: LstmDirection,
}

impl BiLstm {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, input: usize, hidden: usize) -> Self {
        Self {
            forward: LstmDirection::new(store, rng, &format!("{name}.fwd"), input, hidden),
            backward: LstmDirection::new(store, rng, &format!("{name}.bwd"), input, hidden),
        }
    }
}

/// Padded batch of sequences, rows `b * len + t`.
#[derive(Debug, Clone, Copy)]
pub struct SeqShape<'s> {
    pub batch: usize,
    pub len: usize,
    pub lens: &'s [usize],
}

impl SeqShape<'_> {
    fn valid(&self, b: usize, t: usize) -> bool {
        t < self.lens[b]
    }
}

struct RnnOut {
    /// `B·L x 2h`, forward and backward hidden states side by side.
    hidden: Var,
    /// Final forward state (last valid step) and final backward state (step 0), `B x h` each.
    last_forward: Var,
    last_backward: Var,
}

fn run_direction(g: &mut Graph<'_>, dir: &LstmDirection, x: Var, shape: SeqShape<'_>, reverse: bool) -> (Var, Var) {
    let h = dir.hidden;
    let w_ih = g.param(dir.w_input);
    let w_hh = g.param(dir.w_hidden);
    let bias = g.param(dir.bias);
    let xw = g.matmul(x, w_ih);
    let xw = g.add_bias(xw, bias);
    let mut state = g.constant(Matrix::zeros(shape.batch, 2 * h));
    let mut states = vec![state; shape.len];
    let steps: Vec<usize> = if reverse {
        (0..shape.len).rev().collect()
    } else {
        (0..shape.len).collect()
    };
    for &t in &steps {
        let mask: Vec<bool> = (0..shape.batch).map(|b| shape.valid(b, t)).collect();
        if mask.iter().any(|&m| m) {
            let rows: Vec<usize> = (0..shape.batch).map(|b| b * shape.len + t).collect();
            let pre_x = g.gather(xw, &rows);
            let h_prev = g.slice_cols(state, 0, h);
            let rec = g.matmul(h_prev, w_hh);
            let pre = g.add(pre_x, rec);
            let next = g.lstm_cell(pre, state);
            state = if mask.iter().all(|&m| m) {
                next
            } else {
                g.select(mask, next, state)
            };
        }
        states[t] = state;
    }
    let index = (0..shape.batch)
        .flat_map(|b| (0..shape.len).map(move |t| (t, b)))
        .collect();
    let all = g.rows(&states, index);
    let hidden = g.slice_cols(all, 0, h);
    let last = g.slice_cols(state, 0, h);
    (hidden, last)
}

fn run_bilstm(g: &mut Graph<'_>, rnn: &BiLstm, x: Var, shape: SeqShape<'_>) -> RnnOut {
    let (fh, f_last) = run_direction(g, &rnn.forward, x, shape, false);
    let (bh, b_last) = run_direction(g, &rnn.backward, x, shape, true);
    RnnOut {
        hidden: g.concat(&[fh, bh]),
        last_forward: f_last,
        last_backward: b_last,
    }
}

/// Parameter handles of every submodule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub embedding: ParamId,
    pub query_rnn: Vec<BiLstm>,
    pub sentence: Linear,
    pub frame_proj: Linear,
    pub fuse: Linear,
    pub video_rnn: BiLstm,
    pub csmm_hidden: Linear,
    pub csmm_out: Linear,
    pub start_hidden: Linear,
    pub start_out: Linear,
    pub end_hidden: Linear,
    pub end_out: Linear,
    pub order_pair: Linear,
    pub order_out: Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingModel {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub layout: Layout,
}

/// Word-level and sentence-level query encodings (values, not graph nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedQuery {
    pub words: Matrix,
    pub sentence: Vec<f64>,
}

/// Outputs for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutputs {
    pub relevance: Vec<f64>,
    pub relevance_logits: Vec<f64>,
    pub start_scores: Vec<f64>,
    pub end_scores: Vec<f64>,
    pub start_probs: Vec<f64>,
    pub end_probs: Vec<f64>,
    pub order_logits: [f64; ORDER_CLASSES],
}

/// Token ids of a padded query batch.
#[derive(Debug, Clone)]
pub struct QueryBatch {
    pub ids: Vec<usize>,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl QueryBatch {
    pub fn new(vocab: &Vocabulary, queries: &[&TokenSequence]) -> Result<Self> {
        if queries.iter().any(|q| q.is_empty()) {
            return Err(Error::Domain("empty token list".into()));
        }
        let len = queries.iter().map(|q| q.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(len * queries.len());
        let mut lens = Vec::with_capacity(queries.len());
        for q in queries {
            let enc = vocab.encode(q);
            lens.push(enc.len());
            ids.extend_from_slice(&enc);
            ids.extend(core::iter::repeat_n(0, len - enc.len()));
        }
        Ok(Self { ids, len, lens })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    fn shape(&self) -> SeqShape<'_> {
        SeqShape {
            batch: self.batch(),
            len: self.len,
            lens: &self.lens,
        }
    }
}

/// Padded frame features of several videos, each tied to a query of a [`QueryBatch`].
#[derive(Debug, Clone)]
pub struct VideoBatch {
    pub features: Matrix,
    pub len: usize,
    pub lens: Vec<usize>,
    pub query_of: Vec<usize>,
}

impl VideoBatch {
    pub fn new(videos: &[&crate::data::FrameFeatures], query_of: Vec<usize>, feature_dim: usize) -> Result<Self> {
        Self::padded(videos, query_of, feature_dim, 0)
    }

    /// Like [`VideoBatch::new`] but pads to at least `min_len` frames.
    pub fn padded(
        videos: &[&crate::data::FrameFeatures],
        query_of: Vec<usize>,
        feature_dim: usize,
        min_len: usize,
    ) -> Result<Self> {
        assert_eq!(videos.len(), query_of.len());
        let len = videos.iter().map(|v| v.frames()).max().unwrap_or(0).max(min_len);
        let mut features = Matrix::zeros(videos.len() * len, feature_dim);
        let mut lens = Vec::with_capacity(videos.len());
        for (b, v) in videos.iter().enumerate() {
            if v.dim() != feature_dim {
                return Err(Error::Shape(format!(
                    "video has feature dim {}, model expects {feature_dim}",
                    v.dim()
                )));
            }
            for t in 0..v.frames() {
                for (o, &x) in features.row_mut(b * len + t).iter_mut().zip(v.row(t)) {
                    *o = x as f64;
                }
            }
            lens.push(v.frames());
        }
        Ok(Self {
            features,
            len,
            lens,
            query_of,
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    fn shape(&self) -> SeqShape<'_> {
        SeqShape {
            batch: self.batch(),
            len: self.len,
            lens: &self.lens,
        }
    }

    pub fn valid_segment(&self, b: usize) -> Segment {
        Segment {
            start: b * self.len,
            len: self.lens[b],
        }
    }
}

/// Graph nodes of one batched forward pass.
pub struct ForwardVars {
    pub words: Var,
    pub sentence: Var,
    pub video: Var,
    pub relevance_logits: Var,
    pub relevance: Var,
    pub start_scores: Var,
    pub end_scores: Var,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Matrix {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

impl GroundingModel {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let half = d / 2;
        let m = config.mlp_hidden;
        let normal = Normal::new(0.0, 0.3).expect("valid std");
        let emb = Matrix::from_vec(
            vocab.len(),
            config.embed_dim,
            (0..vocab.len() * config.embed_dim).map(|_| normal.sample(&mut rng)).collect(),
        );
        let embedding = store.add("embedding", emb);
        let mut query_rnn = Vec::new();
        for layer in 0..config.query_layers {
            let input = if layer == 0 { config.embed_dim } else { d };
            query_rnn.push(BiLstm::new(&mut store, &mut rng, &format!("query.rnn{layer}"), input, half));
        }
        let layout = Layout {
            embedding,
            query_rnn,
            sentence: Linear::new(&mut store, &mut rng, "query.sentence", d, d),
            frame_proj: Linear::new(&mut store, &mut rng, "video.proj", config.feature_dim, d),
            fuse: Linear::new(&mut store, &mut rng, "video.fuse", 2 * d, d),
            video_rnn: BiLstm::new(&mut store, &mut rng, "video.rnn", d, half),
            csmm_hidden: Linear::new(&mut store, &mut rng, "csmm.hidden", 2 * d, m),
            csmm_out: Linear::new(&mut store, &mut rng, "csmm.out", m, 1),
            start_hidden: Linear::new(&mut store, &mut rng, "start.hidden", 2 * d, m),
            start_out: Linear::new(&mut store, &mut rng, "start.out", m, 1),
            end_hidden: Linear::new(&mut store, &mut rng, "end.hidden", 2 * d, m),
            end_out: Linear::new(&mut store, &mut rng, "end.out", m, 1),
            order_pair: Linear::new(&mut store, &mut rng, "order.pair", 2 * d, m),
            order_out: Linear::new(&mut store, &mut rng, "order.out", d + 2 * m, ORDER_CLASSES),
        };
        Ok(Self {
            config,
            vocab,
            params: store,
            layout,
        })
    }

    /// Overwrites embedding rows of known words. Returns the number of rows replaced.
    pub fn load_embeddings<'w>(&mut self, rows: impl IntoIterator<Item = (&'w str, &'w [f64])>) -> Result<usize> {
        let dim = self.config.embed_dim;
        let mut replaced = 0;
        for (word, vec) in rows {
            if vec.len() != dim {
                return Err(Error::Shape(format!(
                    "embedding for {word:?} has {} values, expected {dim}",
                    vec.len()
                )));
            }
            if let Some(&id) = self.vocab.index.get(word) {
                self.params.get_mut(self.layout.embedding).row_mut(id).copy_from_slice(vec);
                replaced += 1;
            }
        }
        Ok(replaced)
    }

    pub fn graph(&self) -> Graph<'_> {
        Graph::new(&self.params)
    }

    /// Returns word features `B·N x d` and sentence vectors `B x d`.
    pub fn encode_query_batch(&self, g: &mut Graph<'_>, q: &QueryBatch) -> (Var, Var) {
        let table = g.param(self.layout.embedding);
        let mut x = g.gather(table, &q.ids);
        let mut last = None;
        for rnn in &self.layout.query_rnn {
            let out = run_bilstm(g, rnn, x, q.shape());
            x = out.hidden;
            last = Some((out.last_forward, out.last_backward));
        }
        let (f, b) = last.expect("at least one query layer");
        let both = g.concat(&[f, b]);
        let sentence = self.layout.sentence.apply(g, both);
        (x, sentence)
    }

    /// Query-guided video encoding, `B·T x d`.
    pub fn encode_video_batch(&self, g: &mut Graph<'_>, v: &VideoBatch, words: Var, q: &QueryBatch) -> Var {
        let feats = g.constant(v.features.clone());
        let proj = self.layout.frame_proj.apply(g, feats);
        let ranges = (0..v.batch())
            .flat_map(|b| {
                let qi = v.query_of[b];
                let range = (qi * q.len, q.lens[qi]);
                core::iter::repeat_n(range, v.len)
            })
            .collect();
        let ctx = g.attention(proj, words, ranges);
        let joined = g.concat(&[proj, ctx]);
        let fused = self.layout.fuse.apply(g, joined);
        run_bilstm(g, &self.layout.video_rnn, fused, v.shape()).hidden
    }

    /// Frame features joined with the sentence vector of their query.
    pub fn join_sentence(&self, g: &mut Graph<'_>, video: Var, sentence: Var, v: &VideoBatch) -> Var {
        let rows: Vec<usize> = (0..v.batch())
            .flat_map(|b| core::iter::repeat_n(v.query_of[b], v.len))
            .collect();
        let s = g.gather(sentence, &rows);
        g.concat(&[video, s])
    }

    /// Relevance logits `B·T x 1`.
    pub fn csmm(&self, g: &mut Graph<'_>, joined: Var) -> Var {
        let h = self.layout.csmm_hidden.apply(g, joined);
        let h = g.relu(h);
        self.layout.csmm_out.apply(g, h)
    }

    /// Start and end scores from the relevance-gated joined features.
    pub fn predict_boundaries(&self, g: &mut Graph<'_>, joined: Var, relevance: Var) -> (Var, Var) {
        let gated = g.scale_rows(joined, relevance);
        let head = |g: &mut Graph<'_>, hidden: &Linear, out: &Linear| {
            let h = hidden.apply(g, gated);
            let h = g.relu(h);
            out.apply(g, h)
        };
        let s = head(g, &self.layout.start_hidden, &self.layout.start_out);
        let e = head(g, &self.layout.end_hidden, &self.layout.end_out);
        (s, e)
    }

    /// Mean-pooled (before, target, after) moments for each video, `3B x d`
    /// with rows `3b, 3b + 1, 3b + 2`.
    pub fn pool_moments(&self, g: &mut Graph<'_>, video: Var, v: &VideoBatch, spans: &[MomentSpan]) -> Var {
        let segments = (0..v.batch())
            .flat_map(|b| moment_segments(b * v.len, v.lens[b], &spans[b]))
            .collect();
        g.segment_mean(video, segments)
    }

    /// Order logits `B x 2` from pooled moments laid out as by [`Self::pool_moments`].
    pub fn order_logits(&self, g: &mut Graph<'_>, pooled: Var) -> Var {
        let batch = g.shape(pooled).0 / 3;
        let m1 = g.gather(pooled, &(0..batch).map(|b| 3 * b).collect::<Vec<_>>());
        let m2 = g.gather(pooled, &(0..batch).map(|b| 3 * b + 1).collect::<Vec<_>>());
        let m3 = g.gather(pooled, &(0..batch).map(|b| 3 * b + 2).collect::<Vec<_>>());
        let p1 = g.concat(&[m1, m2]);
        let p2 = g.concat(&[m2, m3]);
        let h1 = self.layout.order_pair.apply(g, p1);
        let h1 = g.relu(h1);
        let h2 = self.layout.order_pair.apply(g, p2);
        let h2 = g.relu(h2);
        let joined = g.concat(&[m2, h1, h2]);
        self.layout.order_out.apply(g, joined)
    }

    /// Shared encoders, relevance module and span heads over a batch.
    pub fn forward_vars(&self, g: &mut Graph<'_>, q: &QueryBatch, v: &VideoBatch) -> ForwardVars {
        let (words, sentence) = self.encode_query_batch(g, q);
        let video = self.encode_video_batch(g, v, words, q);
        let joined = self.join_sentence(g, video, sentence, v);
        let relevance_logits = self.csmm(g, joined);
        let relevance = g.sigmoid(relevance_logits);
        let (start_scores, end_scores) = self.predict_boundaries(g, joined, relevance);
        ForwardVars {
            words,
            sentence,
            video,
            relevance_logits,
            relevance,
            start_scores,
            end_scores,
        }
    }

    pub fn encode_query(&self, tokens: &TokenSequence) -> Result<EncodedQuery> {
        let q = QueryBatch::new(&self.vocab, &[tokens])?;
        let mut g = self.graph();
        let (w, s) = self.encode_query_batch(&mut g, &q);
        Ok(EncodedQuery {
            words: g.value(w).clone(),
            sentence: g.value(s).data.clone(),
        })
    }

    /// Evaluation-mode forward pass over several samples, padded into one batch.
    pub fn forward_samples(&self, samples: &[&GroundingSample]) -> Result<Vec<ModelOutputs>> {
        let videos: Vec<_> = samples.iter().map(|s| &*s.features).collect();
        let queries: Vec<_> = samples.iter().map(|s| &s.query).collect();
        let spans: Vec<_> = samples.iter().map(|s| s.span).collect();
        let q = QueryBatch::new(&self.vocab, &queries)?;
        let v = VideoBatch::new(&videos, (0..samples.len()).collect(), self.config.feature_dim)?;
        self.forward_batch(&q, &v, &spans)
    }

    pub fn forward_sample(&self, sample: &GroundingSample) -> Result<ModelOutputs> {
        Ok(self.forward_samples(&[sample])?.remove(0))
    }

    /// Batched evaluation-mode forward; `spans` position the order discriminator.
    pub fn forward_batch(&self, q: &QueryBatch, v: &VideoBatch, spans: &[MomentSpan]) -> Result<Vec<ModelOutputs>> {
        if v.lens.contains(&0) {
            return Err(Error::Domain("video with no valid frames".into()));
        }
        let mut g = self.graph();
        let fv = self.forward_vars(&mut g, q, v);
        let pooled = self.pool_moments(&mut g, fv.video, v, spans);
        let order = self.order_logits(&mut g, pooled);
        Ok(collect_outputs(&g, &fv, order, v))
    }
}

/// Row segments of the before/target/after moments of one video starting at `base`.
pub fn moment_segments(base: usize, frames: usize, span: &MomentSpan) -> [Segment; 3] {
    [
        Segment {
            start: base,
            len: span.start_frame,
        },
        Segment {
            start: base + span.start_frame,
            len: span.frame_len(),
        },
        Segment {
            start: base + span.end_frame + 1,
            len: frames - span.end_frame - 1,
        },
    ]
}

/// Softmax over the valid prefix; padded frames get probability zero.
pub fn masked_softmax(scores: &[f64], valid: usize) -> Vec<f64> {
    let mut p = softmax(&scores[..valid]);
    p.resize(scores.len(), 0.0);
    p
}

pub fn collect_outputs(g: &Graph<'_>, fv: &ForwardVars, order: Var, v: &VideoBatch) -> Vec<ModelOutputs> {
    let rel = g.value(fv.relevance);
    let logits = g.value(fv.relevance_logits);
    let s = g.value(fv.start_scores);
    let e = g.value(fv.end_scores);
    let o = g.value(order);
    (0..v.batch())
        .map(|b| {
            let n = v.lens[b];
            let range = b * v.len..b * v.len + n;
            let start_scores = s.data[range.clone()].to_vec();
            let end_scores = e.data[range.clone()].to_vec();
            ModelOutputs {
                relevance: rel.data[range.clone()].to_vec(),
                relevance_logits: logits.data[range].to_vec(),
                start_probs: masked_softmax(&start_scores, n),
                end_probs: masked_softmax(&end_scores, n),
                start_scores,
                end_scores,
                order_logits: [o.get(b, 0), o.get(b, 1)],
            }
        })
        .collect()
}

/// Overwrites every parameter with uniform noise in `(-scale, scale)`.
pub fn randomize_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, scale: f64) {
    for m in store.values_mut() {
        for v in m.data.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}
