//! Run reports: a JSON record of what ran, on what data, with which result.

use std::collections::BTreeMap;
use std::path::Path;

use diffad::pipeline::{LabeledSeries, WindowSet};
use diffad::synthgen::{AnomalyType, SPLIT_NAMES};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub name: String,
    pub len: usize,
    pub anomalies: usize,
    pub ratio: f64,
}

/// Dataset summary in the shape of a datasets table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub anomaly_type: Option<AnomalyType>,
    pub dims: usize,
    pub splits: Vec<SplitStats>,
}

impl DatasetStats {
    pub fn of(name: &str, anomaly_type: Option<AnomalyType>, splits: &[LabeledSeries; 3]) -> Self {
        Self {
            name: name.to_string(),
            anomaly_type,
            dims: splits[0].dims(),
            splits: splits
                .iter()
                .zip(SPLIT_NAMES)
                .map(|(s, n)| SplitStats {
                    name: n.to_string(),
                    len: s.len(),
                    anomalies: s.labels.iter().filter(|&&l| l).count(),
                    ratio: s.anomaly_ratio(),
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: String,
    pub f1k_auc: f64,
    pub rock_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// Resolved configuration.
    pub config: serde_json::Value,
    pub dataset: Option<DatasetStats>,
    pub seed: Option<u64>,
    pub delta: Option<f64>,
    pub m: Option<usize>,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<MetricRow>,
    /// Tail timesteps per split that did not fill a window.
    pub dropped: BTreeMap<String, usize>,
    /// Files written next to this report.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn new(command: &str, config: &impl Serialize) -> CliResult<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            ..Self::default()
        })
    }

    pub fn record_dropped(&mut self, windows: [&WindowSet; 3]) {
        for (w, n) in windows.iter().zip(SPLIT_NAMES) {
            self.dropped.insert(n.to_string(), w.dropped);
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("report.json"), text + "\n")?;
        Ok(())
    }
}
