//! Flat `key = value` configuration files and config snapshots.
//!
//! Blank lines and lines starting with `#` are ignored. Every error names the
//! file, the line and the key.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tgshuffle_core::synth::BenchConfig;
use tgshuffle_core::train::{SelectionMetric, TrainConfig};

use crate::error::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct KeyValues {
    pub path: PathBuf,
    pub entries: Vec<Entry>,
}

impl KeyValues {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut entries: Vec<Entry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    path: path.into(),
                    line: i + 1,
                    key: line.into(),
                    message: "expected `key = value`".into(),
                });
            };
            let (key, value) = (key.trim(), value.trim());
            if let Some(prev) = entries.iter().find(|e| e.key == key) {
                return Err(Error::Config {
                    path: path.into(),
                    line: i + 1,
                    key: key.into(),
                    message: format!("duplicate key, first set on line {}", prev.line),
                });
            }
            entries.push(Entry {
                line: i + 1,
                key: key.into(),
                value: value.into(),
            });
        }
        Ok(Self {
            path: path.into(),
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::parse(path, &text)
    }

    fn error(&self, e: &Entry, message: impl Into<String>) -> Error {
        Error::Config {
            path: self.path.clone(),
            line: e.line,
            key: e.key.clone(),
            message: message.into(),
        }
    }

    fn value<T: FromStr>(&self, e: &Entry) -> Result<T>
    where
        T::Err: Display,
    {
        e.value
            .parse()
            .map_err(|err: T::Err| self.error(e, format!("cannot parse {:?}: {err}", e.value)))
    }

    /// Applies the entries to a training configuration; unknown keys are errors.
    pub fn apply_train(&self, c: &mut TrainConfig) -> Result<()> {
        for e in &self.entries {
            match e.key.as_str() {
                "batch_size" => c.batch_size = self.value(e)?,
                "epochs" => c.epochs = self.value(e)?,
                "learning_rate" => c.learning_rate = self.value(e)?,
                "lambda1" => c.weights.intra = self.value(e)?,
                "lambda2" => c.weights.inter = self.value(e)?,
                "lambda3" => c.weights.order = self.value(e)?,
                "seed" => c.seed = self.value(e)?,
                "clip_norm" => c.clip_norm = self.value(e)?,
                "selection_metric" => c.selection_metric = self.value::<SelectionMetric>(e)?,
                "hidden" => c.model.hidden = self.value(e)?,
                "embed_dim" => c.model.embed_dim = self.value(e)?,
                "mlp_hidden" => c.model.mlp_hidden = self.value(e)?,
                "query_layers" => c.model.query_layers = self.value(e)?,
                "feature_dim" => c.model.feature_dim = self.value(e)?,
                _ => return Err(self.error(e, "unknown training key")),
            }
        }
        Ok(())
    }

    /// Applies the entries to a benchmark configuration; unknown keys are errors.
    pub fn apply_bench(&self, c: &mut BenchConfig) -> Result<()> {
        for e in &self.entries {
            match e.key.as_str() {
                "vocab_size" => c.vocab_size = self.value(e)?,
                "training_videos" => c.videos.training = self.value(e)?,
                "val_videos" => c.videos.val = self.value(e)?,
                "test_iid_videos" => c.videos.test_iid = self.value(e)?,
                "test_ood_videos" => c.videos.test_ood = self.value(e)?,
                "frames_min" => c.frames_min = self.value(e)?,
                "frames_max" => c.frames_max = self.value(e)?,
                "feature_dim" => c.feature_dim = self.value(e)?,
                "moment_min" => c.moment_min = self.value(e)?,
                "moment_max" => c.moment_max = self.value(e)?,
                "frame_rate" => c.frame_rate = self.value(e)?,
                "bias_low" => c.bias.low = self.value(e)?,
                "bias_high" => c.bias.high = self.value(e)?,
                "bias_std" => c.bias.std = self.value(e)?,
                "ood_low" => c.ood.low = self.value(e)?,
                "ood_high" => c.ood.high = self.value(e)?,
                "ood_std" => c.ood.std = self.value(e)?,
                "signature_strength" => c.signature_strength = self.value(e)?,
                "noise" => c.noise = self.value(e)?,
                "seed" => c.seed = self.value(e)?,
                _ => return Err(self.error(e, "unknown benchmark key")),
            }
        }
        Ok(())
    }
}

/// Ordered `key = value` lines written into every output directory.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    command: String,
    lines: Vec<(String, String)>,
}

impl Snapshot {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            lines: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        self.lines.push((key.into(), value.to_string()));
        self
    }

    pub fn set_opt(&mut self, key: &str, value: Option<impl Display>) -> &mut Self {
        if let Some(v) = value {
            self.set(key, v);
        }
        self
    }

    pub fn train(&mut self, c: &TrainConfig) -> &mut Self {
        self.set("batch_size", c.batch_size)
            .set("epochs", c.epochs)
            .set("learning_rate", c.learning_rate)
            .set("lambda1", c.weights.intra)
            .set("lambda2", c.weights.inter)
            .set("lambda3", c.weights.order)
            .set("seed", c.seed)
            .set("clip_norm", c.clip_norm)
            .set("selection_metric", c.selection_metric.name())
            .set("feature_dim", c.model.feature_dim)
            .set("hidden", c.model.hidden)
            .set("embed_dim", c.model.embed_dim)
            .set("mlp_hidden", c.model.mlp_hidden)
            .set("query_layers", c.model.query_layers)
    }

    pub fn bench(&mut self, c: &BenchConfig) -> &mut Self {
        self.set("vocab_size", c.vocab_size)
            .set("training_videos", c.videos.training)
            .set("val_videos", c.videos.val)
            .set("test_iid_videos", c.videos.test_iid)
            .set("test_ood_videos", c.videos.test_ood)
            .set("frames_min", c.frames_min)
            .set("frames_max", c.frames_max)
            .set("feature_dim", c.feature_dim)
            .set("moment_min", c.moment_min)
            .set("moment_max", c.moment_max)
            .set("frame_rate", c.frame_rate)
            .set("bias_low", c.bias.low)
            .set("bias_high", c.bias.high)
            .set("bias_std", c.bias.std)
            .set("ood_low", c.ood.low)
            .set("ood_high", c.ood.high)
            .set("ood_std", c.ood.std)
            .set("signature_strength", c.signature_strength)
            .set("noise", c.noise)
            .set("seed", c.seed)
    }

    pub fn render(&self) -> String {
        let mut out = format!("# tgshuffle {}\n", self.command);
        for (k, v) in &self.lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.render()).map_err(Error::io(path))
    }
}
