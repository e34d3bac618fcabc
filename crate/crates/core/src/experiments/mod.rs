//! Seeded experiment drivers.
//!
//! Every driver takes an [`ExperimentConfig`] and a seed, and returns an
//! [`ExperimentResult`]: long-format rows plus metadata. Rows are identical
//! across re-runs with the same config and seed.

mod commands;
mod config;
mod csv;
mod doa_runs;
mod signal;

pub use commands::{cmd_recover, cmd_train, load_fpc_config, RecoverInput, RecoverOutput, RecoverSolver, TrainOutputs, TrainTask};
pub use config::{DoaSettings, ExperimentConfig, Scale, SignalSettings, TrainSettings};
pub use csv::{format_matrix_csv, parse_matrix_csv, read_matrix_csv, write_matrix_csv};
pub use doa_runs::{run_fig4, run_fig6, train_doa_model, DoaModels};
pub use signal::{run_fig3, run_table1, signal_data, train_signal_model, Fig3Models, SignalData};

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::Result;
use crate::rng::RngSeed;
use crate::unfolded::UnfoldedModel;

/// Method labels used in result rows.
pub mod method {
    pub const FPC: &str = "fpc_l1";
    pub const UNFOLDED: &str = "unfolded";
    pub const UNFOLDED_LAYER_NORM: &str = "unfolded_layer_norm";
    pub const MUSIC: &str = "music_1bit";
}

pub const CSV_HEADER: &str = "panel,sweep_variable,sweep_value,method,metric,value,runs";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub panel: String,
    pub sweep_variable: String,
    pub sweep_value: f64,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub runs: usize,
}

impl ResultRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.panel, self.sweep_variable, self.sweep_value, self.method, self.metric, self.value, self.runs
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metadata {
    pub experiment: String,
    pub scale: Scale,
    pub seed: RngSeed,
    /// SHA-256 of the resolved config, serialized as TOML.
    pub config_hash: String,
    /// Seconds since the Unix epoch when the run finished.
    pub timestamp: u64,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub meta: Metadata,
    /// Models trained during the run, by label.
    pub models: Vec<(String, UnfoldedModel)>,
}

impl ExperimentResult {
    pub(crate) fn new(experiment: &str, config: &ExperimentConfig, seed: RngSeed) -> Self {
        let meta = Metadata {
            experiment: experiment.to_string(),
            scale: config.scale,
            seed,
            config_hash: config.hash(),
            timestamp: 0,
            notes: Vec::new(),
        };
        Self { rows: Vec::new(), meta, models: Vec::new() }
    }

    pub(crate) fn push(&mut self, panel: &str, sweep: (&str, f64), method: &str, metric: &str, value: f64, runs: usize) {
        self.rows.push(ResultRow {
            panel: panel.to_string(),
            sweep_variable: sweep.0.to_string(),
            sweep_value: sweep.1,
            method: method.to_string(),
            metric: metric.to_string(),
            value,
            runs,
        });
    }

    pub(crate) fn finish(mut self) -> Self {
        self.meta.timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        self
    }

    /// Value of the first row matching panel, sweep value, method and metric.
    pub fn value(&self, panel: &str, sweep_value: f64, method: &str, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.panel == panel && r.sweep_value == sweep_value && r.method == method && r.metric == metric)
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{}", r.csv_line());
        }
        out
    }

    /// Writes the CSV to `path` and the metadata to `<path>.meta.json`.
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        std::fs::write(path, self.to_csv())?;
        let meta_path = meta_path(path);
        let mut f = std::fs::File::create(&meta_path)?;
        serde_json::to_writer_pretty(&mut f, &self.meta).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
        Ok(meta_path)
    }
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut s = csv.as_os_str().to_os_string();
    s.push(".meta.json");
    PathBuf::from(s)
}
