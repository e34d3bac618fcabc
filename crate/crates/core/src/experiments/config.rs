//! Experiment settings: built-in presets, TOML files and `key=value` overrides.
//!
//! Resolution order, later wins: the preset for the chosen scale, the config
//! file, then individual overrides.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fpc::FpcConfig;
use crate::rng::RngSeed;
use crate::trainer::{AdamParams, KappaSchedule, TieMode, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Paper,
    #[default]
    Desk,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            other => Err(Error::Config(format!("unknown scale `{other}` (expected paper or desk)"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs_per_stage: usize,
    pub batch_size: usize,
    pub base_step: f64,
    pub step_decay: f64,
    /// κ at epoch 0; doubles every `epochs_per_stage / 2` epochs.
    pub kappa_start: f64,
    pub kappa_max: f64,
}

impl TrainSettings {
    pub fn to_train_config(&self, tie: TieMode, seed: RngSeed) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            base_step: self.base_step,
            step_decay: self.step_decay,
            epochs_per_stage: self.epochs_per_stage,
            kappa_schedule: KappaSchedule::doubling(self.kappa_start, (self.epochs_per_stage / 2).max(1), self.kappa_max),
            adam: AdamParams::default(),
            tie,
            seed,
        }
    }
}

/// Sparse recovery experiments (layer sweep and tying comparison).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSettings {
    /// Measurements.
    pub m: usize,
    /// Signal length.
    pub n: usize,
    /// Nonzeros per signal.
    pub k: usize,
    pub noise_std: f64,
    pub train_pairs: usize,
    pub test_pairs: usize,
    /// Deepest network in the layer sweep.
    pub layers: usize,
    /// Depth of the networks in the tying comparison.
    pub table1_layers: usize,
    /// Step size and λ the networks are initialized from.
    pub init_tau: f64,
    pub init_lambda: f64,
    /// Step size and λ of the truncated FPC baseline.
    pub fpc_tau: f64,
    pub fpc_lambda: f64,
    pub train: TrainSettings,
}

/// Direction-of-arrival experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoaSettings {
    pub sensors: usize,
    /// Points of the uniform grid.
    pub grid_size: usize,
    /// Source directions in degrees.
    pub doas: Vec<f64>,
    /// Monte-Carlo runs per sweep point.
    pub runs: usize,
    pub layers: usize,
    pub init_tau: f64,
    pub init_lambda: f64,
    pub train_pairs: usize,
    pub train_sources_min: usize,
    pub train_sources_max: usize,
    /// SNR values (dB) of the SNR sweeps.
    pub snr_sweep: Vec<f64>,
    /// One SNR sweep per snapshot count listed here.
    pub snr_sweep_snapshots: Vec<usize>,
    /// Snapshot counts of the snapshot sweeps.
    pub snapshot_sweep: Vec<usize>,
    /// One snapshot sweep per SNR listed here.
    pub snapshot_sweep_snr: Vec<f64>,
    /// Grid comparison scenario.
    pub fig6_doas: Vec<f64>,
    pub fig6_snr: f64,
    pub fig6_snapshots: Vec<usize>,
    pub fpc: FpcConfig,
    pub train: TrainSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub signal: SignalSettings,
    pub doa: DoaSettings,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        match scale {
            Scale::Desk => desk(),
            Scale::Paper => paper(),
        }
    }

    /// Preset for `scale` (or the file's `scale`, or desk), then `file`, then
    /// `overrides` of the form `section.key=value` with TOML values.
    pub fn resolve(scale: Option<Scale>, file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(text) => {
                let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
                // Type-check against the schema while line numbers are still available.
                toml::from_str::<PartialConfig>(text).map_err(|e| Error::Config(e.to_string()))?;
                Some(table)
            }
            None => None,
        };
        let file_scale = match file_table.as_ref().and_then(|t| t.get("scale")) {
            Some(v) => Some(v.clone().try_into::<Scale>().map_err(|e| Error::Config(format!("scale: {e}")))?),
            None => None,
        };
        let scale = scale.or(file_scale).unwrap_or_default();

        let mut merged = toml::Table::try_from(Self::preset(scale)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(t) = file_table {
            merge(&mut merged, t);
        }
        for ov in overrides {
            merge(&mut merged, parse_override(ov)?);
        }
        merged.insert("scale".into(), toml::Value::String(scale.to_string()));
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.signal;
        let bad = |msg: String| Err(Error::Config(msg));
        if s.m == 0 || s.n == 0 || s.k == 0 || s.k > s.n {
            return bad(format!("signal dimensions m={}, n={}, k={} are invalid", s.m, s.n, s.k));
        }
        if s.layers == 0 || s.table1_layers == 0 || s.test_pairs == 0 || s.train_pairs < s.train.batch_size {
            return bad("signal layers and test_pairs must be >= 1 and train_pairs >= batch_size".into());
        }
        let d = &self.doa;
        if d.sensors < 2 || d.grid_size < 2 || d.runs == 0 || d.layers == 0 {
            return bad("doa sensors, grid_size >= 2 and runs, layers >= 1 required".into());
        }
        if d.doas.is_empty() || d.fig6_doas.is_empty() {
            return bad("doa source lists must not be empty".into());
        }
        if d.train_sources_min == 0 || d.train_sources_min > d.train_sources_max || d.train_sources_max > d.grid_size {
            return bad(format!(
                "training source range {}..={} must lie within 1..={}",
                d.train_sources_min, d.train_sources_max, d.grid_size
            ));
        }
        if d.snr_sweep_snapshots.iter().chain(&d.snapshot_sweep).chain(&d.fig6_snapshots).any(|&l| l == 0) {
            return bad("snapshot counts must be >= 1".into());
        }
        d.fpc.validate().map_err(|e| Error::Config(format!("doa.fpc: {e}")))?;
        for (name, t) in [("signal.train", &s.train), ("doa.train", &d.train)] {
            t.to_train_config(TieMode::default(), RngSeed(0)).validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the config serialized as TOML.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Mirror of the config schema where every field is optional; used only to
/// report type errors and unknown keys with the file's line numbers.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct PartialConfig {
    scale: Option<Scale>,
    signal: Option<PartialSignal>,
    doa: Option<PartialDoa>,
}

macro_rules! partial {
    ($name:ident { $($field:ident : $ty:ty),* $(,)? }) => {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        #[allow(dead_code)]
        struct $name { $($field: Option<$ty>),* }
    };
}

partial!(PartialTrain {
    epochs_per_stage: usize, batch_size: usize, base_step: f64, step_decay: f64, kappa_start: f64, kappa_max: f64,
});
partial!(PartialFpc { tau: f64, lambda0: f64, continuation_factor: f64, inner_iters: usize, outer_iters: usize });
partial!(PartialSignal {
    m: usize, n: usize, k: usize, noise_std: f64, train_pairs: usize, test_pairs: usize, layers: usize,
    table1_layers: usize, init_tau: f64, init_lambda: f64, fpc_tau: f64, fpc_lambda: f64, train: PartialTrain,
});
partial!(PartialDoa {
    sensors: usize, grid_size: usize, doas: Vec<f64>, runs: usize, layers: usize, init_tau: f64, init_lambda: f64,
    train_pairs: usize, train_sources_min: usize, train_sources_max: usize, snr_sweep: Vec<f64>,
    snr_sweep_snapshots: Vec<usize>, snapshot_sweep: Vec<usize>, snapshot_sweep_snr: Vec<f64>, fig6_doas: Vec<f64>,
    fig6_snr: f64, fig6_snapshots: Vec<usize>, fpc: PartialFpc, train: PartialTrain,
});

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `a.b.c=value` into `{a = {b = {c = value}}}`.
fn parse_override(text: &str) -> Result<toml::Table> {
    let (path, value) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("override `{text}` has an empty key")));
    }
    let value = value.trim();
    let parsed: toml::Table = toml::from_str(&format!("v = {value}"))
        .or_else(|_| toml::from_str(&format!("v = {}", toml::Value::String(value.to_string()))))
        .map_err(|e| Error::Config(format!("override `{text}`: {e}")))?;
    let mut v = parsed["v"].clone();
    for k in keys.iter().rev() {
        let mut t = toml::Table::new();
        t.insert((*k).to_string(), v);
        v = toml::Value::Table(t);
    }
    match v {
        toml::Value::Table(t) => Ok(t),
        _ => unreachable!("at least one key"),
    }
}

fn desk() -> ExperimentConfig {
    let signal_train = TrainSettings {
        epochs_per_stage: 3,
        batch_size: 32,
        base_step: 3e-6,
        step_decay: 0.95,
        kappa_start: 5.0,
        kappa_max: 200.0,
    };
    ExperimentConfig {
        scale: Scale::Desk,
        signal: SignalSettings {
            m: 200,
            n: 100,
            k: 5,
            noise_std: 0.0,
            train_pairs: 10_000,
            test_pairs: 300,
            layers: 8,
            table1_layers: 8,
            init_tau: 0.03,
            init_lambda: 1.0,
            fpc_tau: 0.03,
            fpc_lambda: 1.0,
            train: signal_train.clone(),
        },
        doa: DoaSettings {
            sensors: 16,
            grid_size: 90,
            doas: vec![-4.0, 2.0, 16.0],
            runs: 50,
            layers: 8,
            init_tau: 0.01,
            init_lambda: 1.1,
            train_pairs: 100_000,
            train_sources_min: 2,
            train_sources_max: 4,
            snr_sweep: (-2..=6).map(|i| 5.0 * i as f64).collect(),
            snr_sweep_snapshots: vec![3, 10],
            snapshot_sweep: vec![5, 10, 20],
            snapshot_sweep_snr: vec![5.0, 20.0],
            fig6_doas: vec![-30.0, 0.0, 30.0],
            fig6_snr: 20.0,
            fig6_snapshots: vec![5, 10, 20],
            fpc: FpcConfig::default(),
            // A sharper surrogate overfits the 32-bit snapshots; κ = 20 gave
            // the lowest held-out loss.
            train: TrainSettings { base_step: 1e-5, kappa_max: 20.0, ..signal_train },
        },
    }
}

fn paper() -> ExperimentConfig {
    let train = TrainSettings {
        epochs_per_stage: 40,
        batch_size: 32,
        base_step: 3e-6,
        step_decay: 0.95,
        kappa_start: 5.0,
        kappa_max: 200.0,
    };
    let d = desk().doa;
    ExperimentConfig {
        scale: Scale::Paper,
        signal: SignalSettings {
            m: 1000,
            n: 500,
            k: 25,
            noise_std: 0.0,
            train_pairs: 1000,
            test_pairs: 1000,
            layers: 20,
            table1_layers: 20,
            init_tau: 0.03,
            init_lambda: 1.0,
            fpc_tau: 0.03,
            fpc_lambda: 1.0,
            train: train.clone(),
        },
        doa: DoaSettings {
            sensors: 40,
            grid_size: 180,
            doas: vec![-40.0, -16.7, -4.2, 1.6, 15.7, 60.0],
            runs: 500,
            train_pairs: 10_000,
            train_sources_min: 2,
            train_sources_max: 10,
            snapshot_sweep: vec![3, 5, 10, 20, 50],
            fig6_doas: vec![-40.0, -16.7, -4.2, 1.6, 15.7, 60.0],
            fig6_snapshots: vec![3, 5, 10, 20, 50],
            train,
            ..d
        },
    }
}
