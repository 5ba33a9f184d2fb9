//! The `tgshuffle` command line.

use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use tgshuffle_core::data::split_statistics;
use tgshuffle_core::eval::{
    bias_histogram, distribution_divergence, predict_split, predicted_bias_histogram, randomized_video_test,
    score_predictions, top_words, BiasHistogram, Interval, MetricsReport, SampleResult, SanityCheckResult,
    SpanPredictor, DEFAULT_BINS, DEFAULT_SEGMENT_LEN, DEFAULT_THRESHOLDS,
};
use tgshuffle_core::losses::LossWeights;
use tgshuffle_core::pseudo::{make_triplet, stream_rng};
use tgshuffle_core::synth::{bias_oracle, generate_benchmark, BenchConfig, ContentOracle, OracleModel};
use tgshuffle_core::train::TrainConfig;
use tgshuffle_core::{Dataset, DatasetSplit, GroundingModel, ModelConfig, SplitName, Vocabulary};

use crate::config::{KeyValues, Snapshot};
use crate::error::{Error, Result};
use crate::io::{
    ensure_dir, read_dataset, read_embeddings, read_metadata, read_predictions, require_split, write_dataset,
    write_json, write_json_lines, write_metadata, write_predictions,
};
use crate::run::{train_run, Checkpoint};

#[derive(Debug, Parser)]
#[command(name = "tgshuffle", version, about = "Temporal grounding with shuffled pseudo videos")]
pub struct Cli {
    /// Upper bound on worker threads. Work currently runs on one thread, so
    /// every value gives bit-identical results.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark with a planted position bias.
    GenerateData(GenerateArgs),
    /// Train a grounding model.
    Train(TrainArgs),
    /// Score a checkpoint or a predictions file on one split.
    Evaluate(EvaluateArgs),
    /// Compare metrics on raw and segment-shuffled videos.
    ShuffleTest(ShuffleArgs),
    /// Per-word histograms of normalized moment positions.
    BiasReport(BiasArgs),
    /// Write the pseudo-video triplets a training epoch would use.
    DumpTriplets(DumpArgs),
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_split(s: &str) -> std::result::Result<SplitName, String> {
    s.parse().map_err(|e: tgshuffle_core::Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Grounding loss only (all auxiliary weights zero).
    #[arg(long, conflicts_with_all = ["lambda1", "lambda2", "lambda3", "ablation_row"])]
    pub baseline: bool,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda3: Option<f64>,
    /// Loss-term combination of an ablation row (1 = grounding only, 7 = all terms).
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=7),
          conflicts_with_all = ["lambda1", "lambda2", "lambda3"])]
    pub ablation_row: Option<u8>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub mlp_hidden: Option<usize>,
    #[arg(long)]
    pub selection_metric: Option<String>,
    /// Text word-vector file used to initialize the embedding table.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "predictions"])))]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON-lines predictions `{video_id, query_index, start, end}`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_split)]
    pub split: SplitName,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleKind {
    /// Predicts the memorized training position of the query's word.
    Bias,
    /// Follows the planted signature (needs the benchmark metadata).
    Content,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["checkpoint", "oracle"])))]
pub struct ShuffleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub oracle: Option<OracleKind>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "test-ood")]
    pub split: SplitName,
    #[arg(long, default_value_t = DEFAULT_SEGMENT_LEN, value_parser = positive)]
    pub segment_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("words").required(true).args(["word", "top_k"])))]
pub struct BiasArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub word: Option<String>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BINS, value_parser = positive)]
    pub bins: usize,
    #[arg(long, value_parser = parse_split, default_value = "test-ood")]
    pub split: SplitName,
    /// Predictions for `--split`; adds predicted histograms and divergences.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_parser = parse_split, default_value = "training")]
    pub split: SplitName,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0)]
    pub epoch: u64,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData(a) => generate_data(&a, cli.threads),
        Command::Train(a) => train(&a, cli.threads),
        Command::Evaluate(a) => evaluate_cmd(&a, cli.threads),
        Command::ShuffleTest(a) => shuffle_test(&a, cli.threads),
        Command::BiasReport(a) => bias_report(&a, cli.threads),
        Command::DumpTriplets(a) => dump_triplets(&a, cli.threads),
    }
}

fn print_report(r: &MetricsReport) {
    let cells: Vec<String> = r.recall.iter().map(|x| format!("R@1,IoU={}: {:6.2}", x.iou, x.r1)).collect();
    println!("{:<9} n={:<5} {}  mIoU: {:6.2}", r.split, r.count, cells.join("  "), r.miou);
}

pub fn generate_data(a: &GenerateArgs, threads: u32) -> Result<()> {
    let mut config = BenchConfig::default();
    if let Some(path) = &a.config {
        KeyValues::read(path)?.apply_bench(&mut config)?;
    }
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    let bench = generate_benchmark(&config)?;
    ensure_dir(&a.out)?;
    write_dataset(&a.out, &bench.dataset)?;
    write_metadata(&a.out, &bench.metadata)?;
    Snapshot::new("generate-data").bench(&config).set("threads", threads).write(&a.out)?;
    for s in split_statistics(bench.dataset.splits())? {
        println!(
            "{:<9} videos={:<5} pairs={:<5} mean moment {:.2}s, mean video {:.2}s",
            s.split, s.videos, s.pairs, s.mean_moment_sec, s.mean_video_duration_sec
        );
    }
    Ok(())
}

/// Resolves the training configuration from defaults, the config file and flags.
pub fn train_config(a: &TrainArgs, feature_dim: usize) -> Result<TrainConfig> {
    let mut c = TrainConfig::new(ModelConfig::toy(feature_dim));
    if let Some(path) = &a.config {
        KeyValues::read(path)?.apply_train(&mut c)?;
        if c.model.feature_dim != feature_dim {
            return Err(Error::Usage(format!(
                "config feature_dim {} does not match the data ({feature_dim})",
                c.model.feature_dim
            )));
        }
    }
    if a.baseline {
        c.weights = LossWeights::BASELINE;
    }
    if let Some(row) = a.ablation_row {
        c.weights = LossWeights::ablation_row(row as usize)?;
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut c.weights.intra, a.lambda1);
    set(&mut c.weights.inter, a.lambda2);
    set(&mut c.weights.order, a.lambda3);
    set(&mut c.learning_rate, a.learning_rate);
    c.epochs = a.epochs.unwrap_or(c.epochs);
    c.batch_size = a.batch_size.unwrap_or(c.batch_size);
    c.seed = a.seed.unwrap_or(c.seed);
    c.model.hidden = a.hidden.unwrap_or(c.model.hidden);
    c.model.embed_dim = a.embed_dim.unwrap_or(c.model.embed_dim);
    c.model.mlp_hidden = a.mlp_hidden.unwrap_or(c.model.mlp_hidden);
    if let Some(m) = &a.selection_metric {
        c.selection_metric = m.parse()?;
    }
    c.validate()?;
    Ok(c)
}

fn feature_dim(dataset: &Dataset) -> usize {
    dataset.splits()[0].samples()[0].features.dim()
}

pub fn train(a: &TrainArgs, threads: u32) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let config = train_config(a, feature_dim(&dataset))?;
    let training = require_split(&dataset, SplitName::Training)?;
    let val = require_split(&dataset, SplitName::Val)?;
    ensure_dir(&a.out)?;
    Snapshot::new("train")
        .set("data", a.data.display())
        .train(&config)
        .set_opt("embeddings", a.embeddings.as_ref().map(|p| p.display()))
        .set("threads", threads)
        .write(&a.out)?;
    let vocab = Vocabulary::build(training.samples().iter().map(|s| &s.query));
    let mut model = GroundingModel::new(config.model.clone(), vocab, config.seed)?;
    if let Some(path) = &a.embeddings {
        let rows = read_embeddings(path)?;
        let n = model.load_embeddings(rows.iter().map(|(w, v)| (w.as_str(), v.as_slice())))?;
        log::info!("initialized {n} embedding rows from {}", path.display());
    }
    let (summary, _) = train_run(&a.out, model, training, val, &config)?;
    println!(
        "trained {} epochs ({} steps); best epoch {:?}",
        summary.epochs, summary.steps, summary.best_epoch
    );
    print_report(&summary.val);
    Ok(())
}

/// Per-sample row of the CSV export.
#[derive(Debug, Serialize)]
struct CsvRow<'a> {
    video_id: &'a str,
    query_index: usize,
    predicted_start: f64,
    predicted_end: f64,
    gt_start: f64,
    gt_end: f64,
    iou: f64,
}

fn write_sample_csv(path: &Path, rows: &[SampleResult]) -> Result<()> {
    let err = |e: csv::Error| Error::Io {
        path: path.into(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(CsvRow {
            video_id: &r.video_id,
            query_index: r.query_index,
            predicted_start: r.predicted.start,
            predicted_end: r.predicted.end,
            gt_start: r.ground_truth.start,
            gt_end: r.ground_truth.end,
            iou: r.iou,
        })
        .map_err(err)?;
    }
    w.flush().map_err(Error::io(path))
}

fn load_model(path: &Path, dataset: &Dataset) -> Result<GroundingModel> {
    let model = Checkpoint::load(path)?.model;
    if model.config.feature_dim != feature_dim(dataset) {
        return Err(Error::Usage(format!(
            "checkpoint expects {}-dim features, data has {}",
            model.config.feature_dim,
            feature_dim(dataset)
        )));
    }
    Ok(model)
}

pub fn evaluate_cmd(a: &EvaluateArgs, threads: u32) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let split = require_split(&dataset, a.split)?;
    let predictions = match (&a.checkpoint, &a.predictions) {
        (Some(c), None) => predict_split(&load_model(c, &dataset)?, split)?,
        (None, Some(p)) => read_predictions(p, split)?,
        _ => return Err(Error::Usage("give exactly one of --checkpoint and --predictions".into())),
    };
    let (report, rows) = score_predictions(split, &predictions, &DEFAULT_THRESHOLDS)?;
    ensure_dir(&a.out)?;
    Snapshot::new("evaluate")
        .set("data", a.data.display())
        .set("split", a.split)
        .set_opt("checkpoint", a.checkpoint.as_ref().map(|p| p.display()))
        .set_opt("predictions", a.predictions.as_ref().map(|p| p.display()))
        .set("threads", threads)
        .write(&a.out)?;
    write_json(&a.out.join("report.json"), &report)?;
    write_sample_csv(&a.out.join("per_sample.csv"), &rows)?;
    if a.checkpoint.is_some() {
        write_predictions(&a.out.join("predictions.jsonl"), split, &predictions)?;
    }
    print_report(&report);
    Ok(())
}

fn oracle(kind: OracleKind, data: &Path, dataset: &Dataset) -> Result<OracleModel> {
    Ok(match kind {
        OracleKind::Bias => bias_oracle(dataset)?,
        OracleKind::Content => OracleModel::ContentOnly(ContentOracle::from_metadata(&read_metadata(data)?)),
    })
}

pub fn shuffle_test(a: &ShuffleArgs, threads: u32) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let split = require_split(&dataset, a.split)?;
    let predictor: Box<dyn SpanPredictor> = match (&a.checkpoint, a.oracle) {
        (Some(c), None) => Box::new(load_model(c, &dataset)?),
        (None, Some(k)) => Box::new(oracle(k, &a.data, &dataset)?),
        _ => return Err(Error::Usage("give exactly one of --checkpoint and --oracle".into())),
    };
    let mut rng = stream_rng(a.seed, 0, 0);
    let result: SanityCheckResult =
        randomized_video_test(predictor.as_ref(), split, a.segment_len, &DEFAULT_THRESHOLDS, &mut rng)?;
    ensure_dir(&a.out)?;
    Snapshot::new("shuffle-test")
        .set("data", a.data.display())
        .set("split", a.split)
        .set_opt("checkpoint", a.checkpoint.as_ref().map(|p| p.display()))
        .set_opt("oracle", a.oracle.map(|k| format!("{k:?}").to_lowercase()))
        .set("segment_len", a.segment_len)
        .set("seed", a.seed)
        .set("threads", threads)
        .write(&a.out)?;
    write_json(&a.out.join("sanity_check.json"), &result)?;
    print_report(&result.raw);
    print_report(&result.randomized);
    println!(
        "drop: R@1,IoU=0.5 {:6.2}  mIoU {:6.2}",
        result.drop_at(0.5).unwrap_or(f64::NAN),
        result.drop.miou
    );
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct WordReport {
    pub word: String,
    pub training: BiasHistogram,
    /// `None` when no query of the chosen split contains the word.
    pub split: Option<BiasHistogram>,
    pub divergence_split: Option<f64>,
    pub predicted: Option<BiasHistogram>,
    pub divergence_predicted: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BiasReport {
    pub split: SplitName,
    pub bins: usize,
    pub words: Vec<WordReport>,
}

fn found(r: tgshuffle_core::Result<BiasHistogram>) -> Result<Option<BiasHistogram>> {
    match r {
        Ok(h) => Ok(Some(h)),
        Err(tgshuffle_core::Error::WordNotFound(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

pub fn bias_report(a: &BiasArgs, threads: u32) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let training = require_split(&dataset, SplitName::Training)?;
    let split = require_split(&dataset, a.split)?;
    let top: Vec<String> = top_words(training, a.top_k.unwrap_or(10).max(10))
        .into_iter()
        .map(|(w, _)| w)
        .collect();
    let words: Vec<String> = match (&a.word, a.top_k) {
        (Some(w), None) => vec![w.to_lowercase()],
        (None, Some(k)) => top.iter().take(k).cloned().collect(),
        _ => return Err(Error::Usage("give exactly one of --word and --top-k".into())),
    };
    let predictions: Option<Vec<Interval>> = a.predictions.as_ref().map(|p| read_predictions(p, split)).transpose()?;
    let mut reports = Vec::new();
    for word in words {
        let train_hist = found(bias_histogram(training, &word, a.bins))?.ok_or_else(|| {
            Error::Usage(format!(
                "word {word:?} not found in training queries; frequent words: {}",
                top.join(", ")
            ))
        })?;
        let split_hist = found(bias_histogram(split, &word, a.bins))?;
        let predicted = match &predictions {
            Some(p) => found(predicted_bias_histogram(split, p, &word, a.bins))?,
            None => None,
        };
        let div = |h: &Option<BiasHistogram>| {
            h.as_ref()
                .map(|h| distribution_divergence(&train_hist, h))
                .transpose()
        };
        reports.push(WordReport {
            divergence_split: div(&split_hist)?,
            divergence_predicted: div(&predicted)?,
            word,
            training: train_hist,
            split: split_hist,
            predicted,
        });
    }
    ensure_dir(&a.out)?;
    Snapshot::new("bias-report")
        .set("data", a.data.display())
        .set("split", a.split)
        .set_opt("word", a.word.as_ref())
        .set_opt("top_k", a.top_k)
        .set("bins", a.bins)
        .set_opt("predictions", a.predictions.as_ref().map(|p| p.display()))
        .set("threads", threads)
        .write(&a.out)?;
    let report = BiasReport {
        split: a.split,
        bins: a.bins,
        words: reports,
    };
    write_json(&a.out.join("bias_report.json"), &report)?;
    for w in &report.words {
        let (i, j) = w.training.mode();
        let fmt = |d: Option<f64>| d.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!(
            "{:<12} training n={:<5} mode cell ({i},{j})  JS(train, {}) {}  JS(train, predicted) {}",
            w.word,
            w.training.total(),
            report.split,
            fmt(w.divergence_split),
            fmt(w.divergence_predicted)
        );
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct TripletRecord {
    pub video_id: String,
    pub frames: usize,
    pub original_start_frame: usize,
    pub original_end_frame: usize,
    pub pseudo_start_frame: usize,
    pub pseudo_end_frame: usize,
    pub degenerate: bool,
    /// Original frame index behind each pseudo-video frame.
    pub source_rows: Vec<usize>,
}

/// Triplets of `split` exactly as training would draw them at `epoch`.
pub fn triplet_records(split: &DatasetSplit, seed: u64, epoch: u64, limit: Option<usize>) -> Result<Vec<TripletRecord>> {
    split
        .samples()
        .iter()
        .enumerate()
        .take(limit.unwrap_or(usize::MAX))
        .map(|(i, s)| {
            let t = make_triplet(s, &mut stream_rng(seed, epoch, i as u64))?;
            Ok(TripletRecord {
                video_id: s.video_id.clone(),
                frames: s.frames(),
                original_start_frame: s.span.start_frame,
                original_end_frame: s.span.end_frame,
                pseudo_start_frame: t.pseudo.span.start_frame,
                pseudo_end_frame: t.pseudo.span.end_frame,
                degenerate: t.pseudo.degenerate,
                source_rows: t.pseudo.source_rows,
            })
        })
        .collect()
}

pub fn dump_triplets(a: &DumpArgs, threads: u32) -> Result<()> {
    let dataset = read_dataset(&a.data)?;
    let split = require_split(&dataset, a.split)?;
    let records = triplet_records(split, a.seed, a.epoch, a.limit)?;
    ensure_dir(&a.out)?;
    Snapshot::new("dump-triplets")
        .set("data", a.data.display())
        .set("split", a.split)
        .set("seed", a.seed)
        .set("epoch", a.epoch)
        .set_opt("limit", a.limit)
        .set("threads", threads)
        .write(&a.out)?;
    write_json_lines(&a.out.join("triplets.jsonl"), &records)?;
    println!("wrote {} triplets", records.len());
    Ok(())
}
