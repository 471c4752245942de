use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{NashSolution, NashStatus, TaskLosses};

/// Per-epoch summary of the Nash solves.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NashStats {
    pub steps: usize,
    pub converged: usize,
    pub degraded: usize,
    pub fallback: usize,
    pub all_zero: usize,
    pub max_residual: f64,
    pub mean_alpha: Vec<f64>,
}

impl NashStats {
    pub fn add(&mut self, s: &NashSolution) {
        self.steps += 1;
        match s.status {
            NashStatus::Converged => self.converged += 1,
            NashStatus::Degraded => self.degraded += 1,
            NashStatus::Fallback => self.fallback += 1,
            NashStatus::AllZero => self.all_zero += 1,
        }
        if s.status != NashStatus::Fallback {
            self.max_residual = self.max_residual.max(s.residual);
        }
        if self.mean_alpha.len() < s.alpha.len() {
            self.mean_alpha.resize(s.alpha.len(), 0.0);
        }
        let n = self.steps as f64;
        for (m, a) in self.mean_alpha.iter_mut().zip(&s.alpha) {
            *m += (a - *m) / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    /// Adapter group for domain-adapt runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    /// 0 is the evaluation of the incoming model before any update.
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub train: Option<TaskLosses>,
    pub dev: TaskLosses,
    pub dev_ter: Option<f64>,
    /// The early-stopping value (dev loss or dev TER); lower is better.
    pub criterion: f64,
    pub best: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nash: Option<NashStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub stage: String,
    pub checkpoints: Vec<String>,
    pub criterion: String,
    pub best_epoch: Option<usize>,
    pub best_value: Option<f64>,
    pub skipped: bool,
    pub schedule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum LogRecord {
    Epoch(EpochRecord),
    Transition(TransitionRecord),
}

/// Training history, written as one JSON record per line.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn transitions(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Transition(t) => Some(t),
            _ => None,
        })
    }

    pub fn push_epoch(&mut self, e: EpochRecord) {
        self.records.push(LogRecord::Epoch(e));
    }

    pub fn push_transition(&mut self, t: TransitionRecord) {
        self.records.push(LogRecord::Transition(t));
    }

    /// Checks that epochs increase within each (stage, group) run and that
    /// each run's `best` flags track its running minimum.
    pub fn validate(&self) -> Result<()> {
        let mut last: Option<(&str, Option<&str>, usize, f64)> = None;
        for e in self.epochs() {
            let key = (e.stage.as_str(), e.group.as_deref());
            match last {
                Some((s, g, epoch, best)) if (s, g) == key && e.epoch != 0 => {
                    if e.epoch != epoch + 1 {
                        return Err(Error::Data(format!("{}: epoch {} follows {epoch}", e.stage, e.epoch)));
                    }
                    if e.best != (e.criterion < best) {
                        return Err(Error::Data(format!("{}: best flag wrong at epoch {}", e.stage, e.epoch)));
                    }
                    last = Some((s, g, e.epoch, best.min(e.criterion)));
                }
                _ => {
                    if e.epoch != 0 || !e.best {
                        return Err(Error::Data(format!("{}: run must start with a best epoch 0", e.stage)));
                    }
                    last = Some((key.0, key.1, 0, e.criterion));
                }
            }
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<_, _>>()?;
        Ok(TrainLog { records })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        TrainLog::from_jsonl(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn epoch(stage: &str, epoch: usize, criterion: f64, best: bool) -> EpochRecord {
        EpochRecord {
            stage: stage.into(),
            group: None,
            epoch,
            steps: epoch * 3,
            learning_rate: 0.1,
            train: None,
            dev: TaskLosses::default(),
            dev_ter: None,
            criterion,
            best,
            nash: None,
        }
    }

    #[test]
    fn jsonl_round_trip_and_validation() {
        let mut log = TrainLog::default();
        log.push_epoch(epoch("nmt", 0, 5.0, true));
        log.push_epoch(epoch("nmt", 1, 4.0, true));
        log.push_epoch(epoch("nmt", 2, 4.5, false));
        log.push_transition(TransitionRecord {
            stage: "nmt".into(),
            checkpoints: vec!["nmt.ckpt".into()],
            criterion: "dev-loss".into(),
            best_epoch: Some(1),
            best_value: Some(4.0),
            skipped: false,
            schedule: super::super::LR_SCHEDULE.into(),
        });
        log.push_epoch(epoch("synthetic-phase1", 0, 0.4, true));
        log.validate().unwrap();
        let back = TrainLog::from_jsonl(&log.to_jsonl()).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.transitions().count(), 1);

        let mut bad = log.clone();
        bad.push_epoch(epoch("synthetic-phase1", 1, 0.5, true));
        assert!(bad.validate().is_err());
        let mut gap = log;
        gap.push_epoch(epoch("synthetic-phase1", 3, 0.3, true));
        assert!(gap.validate().is_err());
    }
}
