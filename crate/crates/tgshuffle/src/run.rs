//! Training run directories: log, history, checkpoints and reports.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tgshuffle_core::eval::{evaluate, MetricsReport, DEFAULT_THRESHOLDS};
use tgshuffle_core::train::{fit, EpochRecord, FitObserver, StepLog, TrainConfig, TrainState};
use tgshuffle_core::{DatasetSplit, GroundingModel};

use crate::error::{Error, Result};
use crate::io::{ensure_dir, read_json, write_json};

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const HISTORY: &str = "history.jsonl";
pub const CHECKPOINTS: &str = "checkpoints";
pub const BEST: &str = "best.json";
pub const LAST: &str = "last.json";
pub const REPORTS: &str = "reports";

const CHECKPOINT_FORMAT: &str = "tgshuffle-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Self-describing model file: config, vocabulary and named parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub epoch: Option<usize>,
    pub train_config: Option<TrainConfig>,
    pub state: Option<TrainState>,
    pub model: GroundingModel,
}

impl Checkpoint {
    pub fn new(model: GroundingModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            epoch: None,
            train_config: None,
            state: None,
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
        }
        let c: Checkpoint = read_json(path)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Integrity {
                path: path.into(),
                message: format!("unsupported checkpoint {} v{}", c.format, c.version),
            });
        }
        Ok(c)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: u64,
    pub l_g: f64,
    pub l_intra: Option<f64>,
    pub l_inter: Option<f64>,
    pub l_d: Option<f64>,
    pub total: f64,
}

impl From<&StepLog> for LogLine {
    fn from(l: &StepLog) -> Self {
        Self {
            step: l.step,
            l_g: l.l_g,
            l_intra: l.l_intra,
            l_inter: l.l_inter,
            l_d: l.l_d,
            total: l.total,
        }
    }
}

struct RunWriter<'a> {
    dir: PathBuf,
    config: &'a TrainConfig,
    log: BufWriter<File>,
    history: BufWriter<File>,
    error: Option<Error>,
}

impl RunWriter<'_> {
    fn line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
        serde_json::to_writer(&mut *w, value).map_err(|e| Error::Io {
            path: path.into(),
            source: e.into(),
        })?;
        w.write_all(b"\n").map_err(Error::io(path))
    }

    fn keep(&mut self, r: Result<()>) {
        if self.error.is_none() {
            self.error = r.err();
        }
    }

    fn checkpoint(&self, name: &str, epoch: Option<usize>, model: &GroundingModel, state: &TrainState) -> Result<()> {
        Checkpoint {
            epoch,
            train_config: Some(self.config.clone()),
            state: Some(state.clone()),
            ..Checkpoint::new(model.clone())
        }
        .save(&self.dir.join(CHECKPOINTS).join(name))
    }
}

impl FitObserver for RunWriter<'_> {
    fn step(&mut self, log: &StepLog) {
        let path = self.dir.join(TRAIN_LOG);
        let r = Self::line(&mut self.log, &path, &LogLine::from(log));
        self.keep(r);
    }

    fn epoch(&mut self, record: &EpochRecord, model: &GroundingModel, state: &TrainState) {
        let path = self.dir.join(HISTORY);
        let r = Self::line(&mut self.history, &path, record)
            .and_then(|_| self.history.flush().map_err(Error::io(&path)))
            .and_then(|_| self.log.flush().map_err(Error::io(self.dir.join(TRAIN_LOG))));
        self.keep(r);
        if record.improved {
            let r = self.checkpoint(BEST, Some(record.epoch), model, state);
            self.keep(r);
        }
        let r = self.checkpoint(LAST, Some(record.epoch), model, state);
        self.keep(r);
        log::info!(
            "epoch {} total {:.4} l_g {:.4} val mIoU {:.2}{}",
            record.epoch,
            record.train.total,
            record.train.l_g,
            record.val.miou,
            if record.improved { " (best)" } else { "" }
        );
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub best_epoch: Option<usize>,
    pub epochs: usize,
    pub steps: u64,
    pub val: MetricsReport,
}

/// Trains `model` and writes the log, history, best/last checkpoints and a
/// final validation report of the best model into `dir`.
pub fn train_run(
    dir: &Path,
    model: GroundingModel,
    train: &DatasetSplit,
    val: &DatasetSplit,
    config: &TrainConfig,
) -> Result<(RunSummary, GroundingModel)> {
    ensure_dir(&dir.join(CHECKPOINTS))?;
    ensure_dir(&dir.join(REPORTS))?;
    let create = |name: &str| {
        let p = dir.join(name);
        File::create(&p).map(BufWriter::new).map_err(Error::io(p))
    };
    let mut writer = RunWriter {
        dir: dir.into(),
        config,
        log: create(TRAIN_LOG)?,
        history: create(HISTORY)?,
        error: None,
    };
    // The initial model stands in for both checkpoints until an epoch finishes.
    let initial = TrainState::new(&model);
    writer.checkpoint(BEST, None, &model, &initial)?;
    writer.checkpoint(LAST, None, &model, &initial)?;
    let result = fit(model, train, val, config, &mut writer);
    writer.log.flush().map_err(Error::io(dir.join(TRAIN_LOG)))?;
    let out = result?;
    if let Some(e) = writer.error {
        return Err(e);
    }
    let val_report = evaluate(&out.best, val, &DEFAULT_THRESHOLDS)?;
    write_json(&dir.join(REPORTS).join("val.json"), &val_report)?;
    let summary = RunSummary {
        best_epoch: out.state.best.as_ref().map(|b| b.epoch),
        epochs: out.state.epoch,
        steps: out.state.step,
        val: val_report,
    };
    write_json(&dir.join(REPORTS).join("summary.json"), &summary)?;
    Ok((summary, out.best))
}
