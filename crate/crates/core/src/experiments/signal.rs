//! NMSE versus depth, and the parameter-tying comparison.

use std::time::Instant;

use nalgebra::DVector;

use super::{method, ExperimentConfig, ExperimentResult, SignalSettings};
use crate::error::{Error, Result};
use crate::fpc::{self, FpcConfig};
use crate::rng::RngSeed;
use crate::sensing::{generate_gaussian_matrix, generate_pairs, mean_nmse_db, nmse, MeasurementMatrix, Nmse};
use crate::trainer::{train, TieMode, TrainReport, TrainingDataset};
use crate::unfolded::{Sample, UnfoldedModel};

/// Sensing matrix with noise-free training pairs and test pairs.
#[derive(Clone, Debug)]
pub struct SignalData {
    pub phi: MeasurementMatrix,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn signal_data(s: &SignalSettings, seed: RngSeed) -> Result<SignalData> {
    let phi = generate_gaussian_matrix(s.m, s.n, seed.derive_named("phi", 0))?;
    let train = generate_pairs(&phi, s.train_pairs, s.k, 0.0, seed.derive_named("signal-train", 0))?;
    let test = generate_pairs(&phi, s.test_pairs, s.k, s.noise_std, seed.derive_named("signal-test", 0))?;
    Ok(SignalData { phi, train, test })
}

/// Layer-wise training of a `layers`-deep network initialized from FPC.
pub fn train_signal_model(
    s: &SignalSettings,
    data: &SignalData,
    tie: TieMode,
    layer_norm: bool,
    layers: usize,
    seed: RngSeed,
) -> Result<TrainReport> {
    let mut model = UnfoldedModel::init_from_fpc(&data.phi, s.init_tau, s.init_lambda, s.train.kappa_start, layers)?;
    model.normalize_per_layer = layer_norm;
    let cfg = s.train.to_train_config(tie, seed.derive_named("trainer", 0));
    train(model, &TrainingDataset::new(data.train.clone()), &cfg)
}

/// NMSE of a collapsed output is that of the zero vector.
fn nmse_or_zero(estimate: Result<DVector<f64>>, truth: &DVector<f64>) -> Result<Nmse> {
    match estimate {
        Ok(x) => nmse(&x, truth),
        Err(Error::Degenerate(_)) => nmse(&DVector::zeros(truth.len()), truth),
        Err(e) => Err(e),
    }
}

pub(crate) fn model_nmse_db(model: &UnfoldedModel, test: &[Sample]) -> Result<f64> {
    let v = crate::par::map_indexed(test.len(), |i| nmse_or_zero(model.predict(&test[i].0, None), &test[i].1));
    Ok(mean_nmse_db(&v.into_iter().collect::<Result<Vec<_>>>()?))
}

pub(crate) fn fpc_nmse_db(phi: &MeasurementMatrix, cfg: &FpcConfig, test: &[Sample]) -> Result<f64> {
    let v = crate::par::map_indexed(test.len(), |i| {
        nmse_or_zero(fpc::solve(phi, &test[i].0, cfg, None).map(|s| s.x), &test[i].1)
    });
    Ok(mean_nmse_db(&v.into_iter().collect::<Result<Vec<_>>>()?))
}

/// Pre-trained networks for the layer sweep; missing ones are trained.
#[derive(Clone, Debug, Default)]
pub struct Fig3Models {
    pub final_norm: Option<UnfoldedModel>,
    pub layer_norm: Option<UnfoldedModel>,
}

/// Per-depth networks: the stage snapshots of a fresh run, or truncations of
/// a supplied model.
fn depth_models(
    supplied: Option<&UnfoldedModel>,
    label: &str,
    train_it: impl FnOnce() -> Result<TrainReport>,
    layers: usize,
    out: &mut ExperimentResult,
) -> Result<Vec<UnfoldedModel>> {
    match supplied {
        Some(m) => {
            if m.layers() < layers {
                return Err(Error::MissingModel(format!(
                    "`{label}` model has {} layers; stages {}..={layers} must be trained first",
                    m.layers(),
                    m.layers() + 1
                )));
            }
            (1..=layers).map(|r| m.truncated(r)).collect()
        }
        None => {
            let report = train_it()?;
            if report.degenerate_samples > 0 {
                out.meta.notes.push(format!("{label}: {} collapsed training outputs", report.degenerate_samples));
            }
            out.models.push((label.to_string(), report.model));
            Ok(report.stage_models)
        }
    }
}

/// Mean test NMSE (dB) against depth for truncated FPC and the two
/// normalization variants of the network.
pub fn run_fig3(config: &ExperimentConfig, seed: RngSeed, models: &Fig3Models) -> Result<ExperimentResult> {
    let s = &config.signal;
    let data = signal_data(s, seed)?;
    let mut out = ExperimentResult::new("fig3", config, seed);
    let final_norm = depth_models(
        models.final_norm.as_ref(),
        method::UNFOLDED,
        || train_signal_model(s, &data, TieMode::TiedAbcUntiedNu, false, s.layers, seed),
        s.layers,
        &mut out,
    )?;
    let layer_norm = depth_models(
        models.layer_norm.as_ref(),
        method::UNFOLDED_LAYER_NORM,
        || train_signal_model(s, &data, TieMode::TiedAbcUntiedNu, true, s.layers, seed),
        s.layers,
        &mut out,
    )?;
    for r in 1..=s.layers {
        let sweep = ("layers", r as f64);
        let fpc_cfg = FpcConfig::single_stage(s.fpc_tau, s.fpc_lambda, r);
        out.push("fig3", sweep, method::FPC, "nmse_db", fpc_nmse_db(&data.phi, &fpc_cfg, &data.test)?, data.test.len());
        let v = model_nmse_db(&final_norm[r - 1], &data.test)?;
        out.push("fig3", sweep, method::UNFOLDED, "nmse_db", v, data.test.len());
        let v = model_nmse_db(&layer_norm[r - 1], &data.test)?;
        out.push("fig3", sweep, method::UNFOLDED_LAYER_NORM, "nmse_db", v, data.test.len());
    }
    Ok(out.finish())
}

/// Method label of a tying variant in result rows.
pub(crate) fn tie_method(tie: TieMode) -> String {
    format!("unfolded_{}", tie.label())
}

/// Trains the three tying variants at `table1_layers` and reports test NMSE
/// and training wall-clock.
pub fn run_table1(config: &ExperimentConfig, seed: RngSeed) -> Result<ExperimentResult> {
    let s = &config.signal;
    let data = signal_data(s, seed)?;
    let mut out = ExperimentResult::new("table1", config, seed);
    let sweep = ("layers", s.table1_layers as f64);
    for tie in TieMode::ALL {
        let start = Instant::now();
        let report = train_signal_model(s, &data, tie, false, s.table1_layers, seed)?;
        let seconds = start.elapsed().as_secs_f64();
        let label = tie_method(tie);
        out.push("table1", sweep, &label, "nmse_db", model_nmse_db(&report.model, &data.test)?, data.test.len());
        out.push("table1", sweep, &label, "train_seconds", seconds, 1);
        out.models.push((label, report.model));
    }
    out.meta.notes.push("train_seconds is wall-clock and varies between machines".into());
    Ok(out.finish())
}
