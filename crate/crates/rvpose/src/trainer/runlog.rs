//! Append-only training log, written as newline-delimited JSON.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    /// Config echo at the start of a run.
    Config {
        stage: u8,
        seed: u64,
        data_hash: String,
        echo: BTreeMap<String, String>,
    },
    /// One optimizer step.
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        sigmas: Vec<f64>,
        lr: f64,
        wall_ms: f64,
    },
    /// Per-epoch validation metrics.
    Epoch {
        epoch: usize,
        metrics: BTreeMap<String, f64>,
    },
    /// Sliding-window bookkeeping: which window fed state into this one.
    Window {
        group: usize,
        rank: usize,
        carry_from: Option<usize>,
    },
    Note { text: String },
}

#[derive(Default, Clone)]
pub struct RunLog {
    records: Vec<LogRecord>,
}

impl RunLog {
    pub fn new() -> RunLog {
        RunLog::default()
    }

    pub fn push(&mut self, r: LogRecord) {
        self.records.push(r);
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Per-step loss values in order.
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn epoch_metric(&self, name: &str) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Epoch { epoch, metrics } => {
                    metrics.get(name).map(|&v| (*epoch, v))
                }
                _ => None,
            })
            .collect()
    }

    pub fn write_ndjson(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("serializable record"));
            out.push('\n');
        }
        std::fs::write(path, out)
    }

    pub fn read_ndjson(path: impl AsRef<Path>) -> std::io::Result<RunLog> {
        let text = std::fs::read_to_string(path)?;
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        Ok(RunLog { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndjson_round_trip() {
        let mut log = RunLog::new();
        log.push(LogRecord::Config {
            stage: 1,
            seed: 42,
            data_hash: "abc".into(),
            echo: [("lr".to_string(), "1e-3".to_string())].into_iter().collect(),
        });
        log.push(LogRecord::Step {
            step: 1,
            epoch: 0,
            loss: 3.25,
            sigmas: vec![0.0, 0.1],
            lr: 1e-3,
            wall_ms: 12.0,
        });
        log.push(LogRecord::Window {
            group: 0,
            rank: 1,
            carry_from: Some(0),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ndjson");
        log.write_ndjson(&path).unwrap();
        let back = RunLog::read_ndjson(&path).unwrap();
        assert_eq!(back.records(), log.records());
        assert_eq!(back.losses(), vec![3.25]);
    }
}
