//! On-disk formats: JSON-lines annotations and predictions, the `TGF1`
//! feature container, text word embeddings and dataset directories.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use tgshuffle_core::eval::{query_indices, Interval};
use tgshuffle_core::synth::BenchMetadata;
use tgshuffle_core::{Dataset, DatasetSplit, FrameFeatures, GroundingSample, SplitName};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"TGF1";
pub const FEATURES_FILE: &str = "features.tgf";
pub const METADATA_FILE: &str = "metadata.json";

pub fn split_file(name: SplitName) -> String {
    format!("{name}.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub video_id: String,
    pub duration: f64,
    pub query: String,
    pub start: f64,
    pub end: f64,
}

impl From<&GroundingSample> for AnnotationRecord {
    fn from(s: &GroundingSample) -> Self {
        Self {
            video_id: s.video_id.clone(),
            duration: s.duration(),
            query: s.text.clone(),
            start: s.span.start_sec,
            end: s.span.end_sec,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub video_id: String,
    pub query_index: usize,
    pub start: f64,
    pub end: f64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(Error::io(path))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(Error::io(path))
}

/// Parses a JSON-lines file, skipping blank lines. Errors carry 1-based line numbers.
pub fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.into(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_json_lines<T: Serialize>(path: &Path, records: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for r in records {
        serde_json::to_writer(&mut w, &r).map_err(|e| Error::Io {
            path: path.into(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Io {
        path: path.into(),
        source: e.into(),
    })?;
    w.write_all(b"\n").map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Parse {
        path: path.into(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let records: Vec<AnnotationRecord> = read_json_lines(path)?;
    if records.is_empty() {
        return Err(tgshuffle_core::Error::EmptySplit.into());
    }
    Ok(records)
}

/// Frame matrix as stored in a feature container, before a duration is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl RawFeatures {
    pub fn with_duration(&self, duration: f64) -> Result<FrameFeatures> {
        Ok(FrameFeatures::new(self.frames, self.dim, self.data.clone(), duration)?)
    }
}

/// Joins annotation records with their features. Every query of a video
/// shares one feature matrix.
pub fn build_split(
    name: SplitName,
    records: &[AnnotationRecord],
    features: &HashMap<String, RawFeatures>,
) -> Result<DatasetSplit> {
    let mut cache: HashMap<&str, Arc<FrameFeatures>> = HashMap::new();
    let mut samples = Vec::with_capacity(records.len());
    for r in records {
        let f = match cache.get(r.video_id.as_str()) {
            Some(f) => {
                if f.duration() != r.duration {
                    return Err(tgshuffle_core::Error::Validation {
                        video_id: r.video_id.clone(),
                        reason: format!("duration {} disagrees with earlier {}", r.duration, f.duration()),
                    }
                    .into());
                }
                f.clone()
            }
            None => {
                let raw = features
                    .get(&r.video_id)
                    .ok_or_else(|| Error::MissingFeatures(r.video_id.clone()))?;
                let f = Arc::new(raw.with_duration(r.duration).map_err(|e| match e {
                    Error::Core(tgshuffle_core::Error::Validation { reason, .. }) => {
                        tgshuffle_core::Error::Validation {
                            video_id: r.video_id.clone(),
                            reason,
                        }
                        .into()
                    }
                    other => other,
                })?);
                cache.insert(&r.video_id, f.clone());
                f
            }
        };
        samples.push(GroundingSample::new(r.video_id.clone(), f, &r.query, r.start, r.end)?);
    }
    Ok(DatasetSplit::new(name, samples)?)
}

/// Loads one annotation file against a feature container.
pub fn load_annotations(path: &Path, name: SplitName, features: &HashMap<String, RawFeatures>) -> Result<DatasetSplit> {
    build_split(name, &read_annotations(path)?, features)
}

pub fn write_annotations(path: &Path, split: &DatasetSplit) -> Result<()> {
    write_json_lines(path, split.samples().iter().map(AnnotationRecord::from))
}

pub fn write_features<'a>(path: &Path, entries: impl IntoIterator<Item = (&'a str, &'a FrameFeatures)>) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(Error::io(path));
    put(FEATURE_MAGIC)?;
    for (id, f) in entries {
        put(&(id.len() as u32).to_le_bytes())?;
        put(id.as_bytes())?;
        put(&(f.frames() as u32).to_le_bytes())?;
        put(&(f.dim() as u32).to_le_bytes())?;
        for v in f.as_slice() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(Error::io(path))
}

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Integrity {
                path: self.path.into(),
                message: format!("truncated payload: {what} needs {n} bytes at offset {}", self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Reads every entry of a `TGF1` container, in file order.
pub fn read_features(path: &Path) -> Result<Vec<(String, RawFeatures)>> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    let mut c = Cursor {
        path,
        bytes: &bytes,
        pos: 0,
    };
    if c.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::Integrity {
            path: path.into(),
            message: "not a TGF1 feature container".into(),
        });
    }
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    while !c.done() {
        let len = c.u32("id length")?;
        let id = std::str::from_utf8(c.take(len, "video id")?)
            .map_err(|_| Error::Integrity {
                path: path.into(),
                message: format!("video id at offset {} is not UTF-8", c.pos - len),
            })?
            .to_string();
        let frames = c.u32("frame count")?;
        let dim = c.u32("feature dimension")?;
        if frames == 0 || dim == 0 {
            return Err(tgshuffle_core::Error::Validation {
                video_id: id,
                reason: format!("header has T={frames}, D={dim}"),
            }
            .into());
        }
        let payload = c.take(frames * dim * 4, &format!("features of {id:?}"))?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(tgshuffle_core::Error::Validation {
                video_id: id,
                reason: format!("non-finite value at frame {}, dim {}", i / dim, i % dim),
            }
            .into());
        }
        if !seen.insert(id.clone()) {
            return Err(Error::Integrity {
                path: path.into(),
                message: format!("duplicate video id {id:?}"),
            });
        }
        out.push((id, RawFeatures { frames, dim, data }));
    }
    Ok(out)
}

pub fn read_feature_table(path: &Path) -> Result<HashMap<String, RawFeatures>> {
    Ok(read_features(path)?.into_iter().collect())
}

/// Features of one video from a container.
pub fn load_features(path: &Path, video_id: &str) -> Result<RawFeatures> {
    read_features(path)?
        .into_iter()
        .find(|(id, _)| id == video_id)
        .map(|(_, f)| f)
        .ok_or_else(|| Error::MissingFeatures(video_id.into()))
}

/// Word vectors from a text dump: one `token v1 v2 ...` per line. A leading
/// `count dim` header line is skipped.
pub fn read_embeddings(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut out = Vec::new();
    let mut dim = None;
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if i == 0 && fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok()) {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.into(),
            line: i + 1,
            message,
        };
        let values = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().ok().filter(|v| v.is_finite()))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| parse_err(format!("bad vector for {:?}", fields[0])))?;
        match dim {
            None if values.is_empty() => return Err(parse_err("missing vector".into())),
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(parse_err(format!("expected {d} values, found {}", values.len())))
            }
            _ => {}
        }
        out.push((fields[0].to_string(), values));
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, split: &DatasetSplit, predictions: &[Interval]) -> Result<()> {
    let qi = query_indices(split);
    write_json_lines(
        path,
        split.samples().iter().zip(predictions).zip(qi).map(|((s, p), q)| PredictionRecord {
            video_id: s.video_id.clone(),
            query_index: q,
            start: p.start,
            end: p.end,
        }),
    )
}

/// Orders prediction records like the samples of `split`.
pub fn align_predictions(path: &Path, split: &DatasetSplit, records: &[PredictionRecord]) -> Result<Vec<Interval>> {
    let mut by_key: HashMap<(&str, usize), &PredictionRecord> = HashMap::new();
    for r in records {
        if by_key.insert((&r.video_id, r.query_index), r).is_some() {
            return Err(Error::Integrity {
                path: path.into(),
                message: format!("duplicate prediction for {} query {}", r.video_id, r.query_index),
            });
        }
    }
    split
        .samples()
        .iter()
        .zip(query_indices(split))
        .map(|(s, q)| {
            let r = by_key.get(&(s.video_id.as_str(), q)).ok_or_else(|| Error::Integrity {
                path: path.into(),
                message: format!("no prediction for {} query {q}", s.video_id),
            })?;
            if !(r.start.is_finite() && r.end.is_finite() && r.start <= r.end) {
                return Err(Error::Integrity {
                    path: path.into(),
                    message: format!("invalid interval for {} query {q}", s.video_id),
                });
            }
            Ok(Interval::new(r.start, r.end))
        })
        .collect()
}

pub fn read_predictions(path: &Path, split: &DatasetSplit) -> Result<Vec<Interval>> {
    let records: Vec<PredictionRecord> = read_json_lines(path)?;
    align_predictions(path, split, &records)
}

/// Writes the annotation files of every split plus one shared feature container.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for split in dataset.splits() {
        write_annotations(&dir.join(split_file(split.name)), split)?;
        for s in split.samples() {
            if seen.insert(s.video_id.as_str()) {
                entries.push((s.video_id.as_str(), &*s.features));
            }
        }
    }
    write_features(&dir.join(FEATURES_FILE), entries)
}

/// Reads every split file present in `dir`.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let features = read_feature_table(&dir.join(FEATURES_FILE))?;
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let path = dir.join(split_file(name));
        if path.exists() {
            splits.push(load_annotations(&path, name, &features)?);
        }
    }
    if splits.is_empty() {
        return Err(Error::Usage(format!("{} holds no split files", dir.display())));
    }
    Ok(Dataset::new(splits)?)
}

pub fn require_split(dataset: &Dataset, name: SplitName) -> Result<&DatasetSplit> {
    dataset
        .split(name)
        .ok_or_else(|| Error::Usage(format!("dataset has no {name} split")))
}

pub fn write_metadata(dir: &Path, meta: &BenchMetadata) -> Result<()> {
    write_json(&dir.join(METADATA_FILE), meta)
}

pub fn read_metadata(dir: &Path) -> Result<BenchMetadata> {
    read_json(&dir.join(METADATA_FILE))
}

pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    Ok(dir.to_path_buf())
}

/// Sorted map of a dataset's per-split sizes, handy for logs.
pub fn split_sizes(dataset: &Dataset) -> BTreeMap<String, usize> {
    dataset.splits().iter().map(|s| (s.name.to_string(), s.len())).collect()
}
