//! `train` and `recover`: model files in, model files and CSV out.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use super::{read_matrix_csv, signal_data, train_doa_model, train_signal_model, write_matrix_csv, ExperimentConfig};
use crate::doa::{
    angular_power, extract_doas, music_1bit, orthogonal_grid, parse_scenario, recover_spectrum, simulate_snapshots,
    steering_matrix, AngularGrid, GridKind, SpectrumSolver, UlaGeometry,
};
use crate::error::{Error, Result};
use crate::fpc::{self, FpcConfig};
use crate::rng::RngSeed;
use crate::sensing::{mean_nmse_db, nmse, BinaryMeasurements, MeasurementMatrix, Nmse};
use crate::trainer::{write_log, TieMode, TrainReport};
use crate::unfolded::{dataset_loss, load_model, save_model, Sample, UnfoldedModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainTask {
    /// Sparse recovery network for the signal settings.
    Signal,
    /// DOA network for the given grid of the DOA settings.
    Doa(GridKind),
}

#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub files: Vec<PathBuf>,
    pub final_loss: f64,
}

fn samples_matrix(samples: &[Sample], pick: impl Fn(&Sample) -> &DVector<f64>) -> DMatrix<f64> {
    let len = pick(&samples[0]).len();
    DMatrix::from_fn(samples.len(), len, |i, j| pick(&samples[i])[j])
}

/// Trains a network and writes `model.dfpc`, `train_log.csv`, `adam.json` and
/// `config.toml` into `out_dir`. Signal tasks also write the sensing matrix and
/// the training set (`phi.csv`, `train_measurements.csv`, `train_signals.csv`);
/// DOA tasks write an example `scenario.toml` for the trained grid.
pub fn cmd_train(config: &ExperimentConfig, task: TrainTask, seed: RngSeed, out_dir: &Path) -> Result<TrainOutputs> {
    std::fs::create_dir_all(out_dir)?;
    let mut files = Vec::new();
    let report: TrainReport = match task {
        TrainTask::Signal => {
            let s = &config.signal;
            let data = signal_data(s, seed)?;
            let report = train_signal_model(s, &data, TieMode::TiedAbcUntiedNu, false, s.layers, seed)?;
            for (name, m) in [
                ("phi.csv", data.phi.as_matrix().clone()),
                ("train_measurements.csv", samples_matrix(&data.train, |s| s.0.as_vector())),
                ("train_signals.csv", samples_matrix(&data.train, |s| &s.1)),
            ] {
                let path = out_dir.join(name);
                write_matrix_csv(&path, &m)?;
                files.push(path);
            }
            report
        }
        TrainTask::Doa(kind) => {
            let d = &config.doa;
            let geometry = UlaGeometry::half_wavelength(d.sensors);
            let grid = match kind {
                GridKind::Uniform => AngularGrid::uniform(d.grid_size)?,
                GridKind::Orthogonal => orthogonal_grid(d.sensors)?,
            };
            let steering = steering_matrix(&geometry, &grid)?;
            let report = train_doa_model(d, &steering, seed)?;
            let path = out_dir.join("scenario.toml");
            std::fs::write(&path, example_scenario(config, kind))?;
            files.push(path);
            report
        }
    };
    let model_path = out_dir.join("model.dfpc");
    save_model(&report.model, &model_path)?;
    let log_path = out_dir.join("train_log.csv");
    write_log(&report.log, BufWriter::new(File::create(&log_path)?))?;
    let adam_path = out_dir.join("adam.json");
    report.state.write_json(BufWriter::new(File::create(&adam_path)?))?;
    let config_path = out_dir.join("config.toml");
    std::fs::write(&config_path, config.to_toml())?;
    files.splice(0..0, [model_path, log_path, adam_path, config_path]);
    Ok(TrainOutputs { files, final_loss: report.final_loss })
}

fn example_scenario(config: &ExperimentConfig, kind: GridKind) -> String {
    let d = &config.doa;
    let (grid, size, doas) = match kind {
        GridKind::Uniform => ("uniform", format!("grid_size = {}\n", d.grid_size), &d.doas),
        GridKind::Orthogonal => ("orthogonal", String::new(), &d.fig6_doas),
    };
    let doas: Vec<String> = doas.iter().map(|v| format!("{v:?}")).collect();
    format!(
        "sensors = {}\ngrid = \"{grid}\"\n{size}doas = [{}]\nsnapshots = 10\nsnr_db = 20.0\nseed = 1\n",
        d.sensors,
        doas.join(", ")
    )
}

#[derive(Clone, Debug)]
pub enum RecoverInput {
    /// Sensing matrix (M×N) and one ±1 measurement vector per row; optional
    /// unit-norm ground truth, one signal per row.
    Signal { matrix: PathBuf, measurements: PathBuf, truth: Option<PathBuf> },
    /// Scenario file; snapshots are simulated from it.
    Scenario(PathBuf),
}

#[derive(Clone, Debug)]
pub enum RecoverSolver {
    Model(PathBuf),
    /// FPC with settings from a TOML file, or the default settings.
    Fpc(Option<PathBuf>),
    /// Scenario input only.
    Music,
}

#[derive(Clone, Debug, Default)]
pub struct RecoverOutput {
    /// `key = value` lines for the caller to print.
    pub summary: Vec<(String, String)>,
}

impl RecoverOutput {
    fn add(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }
}

pub fn load_fpc_config(path: &Path) -> Result<FpcConfig> {
    let text = std::fs::read_to_string(path)?;
    let cfg: FpcConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    cfg.validate().map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

enum Loaded {
    Model(UnfoldedModel),
    Fpc(FpcConfig),
    Music,
}

fn load_solver(solver: &RecoverSolver) -> Result<Loaded> {
    Ok(match solver {
        RecoverSolver::Model(p) => Loaded::Model(load_model(p)?),
        RecoverSolver::Fpc(Some(p)) => Loaded::Fpc(load_fpc_config(p)?),
        RecoverSolver::Fpc(None) => Loaded::Fpc(FpcConfig::default()),
        RecoverSolver::Music => Loaded::Music,
    })
}

fn check_dims(model: &UnfoldedModel, rows: usize, cols: usize) -> Result<()> {
    if model.measurements() != rows || model.signal_len() != cols {
        return Err(Error::invalid(format!(
            "model expects a {}x{} problem, input is {rows}x{cols}",
            model.measurements(),
            model.signal_len()
        )));
    }
    Ok(())
}

/// Recovers signals or a DOA spectrum and writes it as CSV to `out`.
///
/// Signal input writes one recovered vector per row. Scenario input writes
/// `angle,power` rows (the MUSIC pseudospectrum for [`RecoverSolver::Music`]).
pub fn cmd_recover(input: &RecoverInput, solver: &RecoverSolver, out: &Path) -> Result<RecoverOutput> {
    let solver = load_solver(solver)?;
    match input {
        RecoverInput::Signal { matrix, measurements, truth } => recover_signals(matrix, measurements, truth.as_deref(), &solver, out),
        RecoverInput::Scenario(path) => recover_scenario(path, &solver, out),
    }
}

fn recover_signals(matrix: &Path, measurements: &Path, truth: Option<&Path>, solver: &Loaded, out: &Path) -> Result<RecoverOutput> {
    let phi = MeasurementMatrix::new(read_matrix_csv(matrix)?)?;
    let y = read_matrix_csv(measurements)?;
    if y.ncols() != phi.rows() {
        return Err(Error::Parse(format!(
            "{}: rows have {} values, the matrix has {} rows",
            measurements.display(),
            y.ncols(),
            phi.rows()
        )));
    }
    let ys = y
        .row_iter()
        .enumerate()
        .map(|(i, r)| {
            BinaryMeasurements::new(r.transpose())
                .map_err(|_| Error::Parse(format!("{}: data row {} has entries other than ±1", measurements.display(), i + 1)))
        })
        .collect::<Result<Vec<_>>>()?;
    let truths = match truth {
        Some(p) => {
            let t = read_matrix_csv(p)?;
            if t.nrows() != ys.len() || t.ncols() != phi.cols() {
                return Err(Error::Parse(format!(
                    "{}: expected {}x{} values, found {}x{}",
                    p.display(),
                    ys.len(),
                    phi.cols(),
                    t.nrows(),
                    t.ncols()
                )));
            }
            Some(t.row_iter().map(|r| r.transpose()).collect::<Vec<_>>())
        }
        None => None,
    };

    let mut result = RecoverOutput::default();
    let estimates: Vec<Result<DVector<f64>>> = match solver {
        Loaded::Model(model) => {
            check_dims(model, phi.rows(), phi.cols())?;
            crate::par::map_indexed(ys.len(), |i| model.predict(&ys[i], None))
        }
        Loaded::Fpc(cfg) => crate::par::map_indexed(ys.len(), |i| fpc::solve(&phi, &ys[i], cfg, None).map(|s| s.x)),
        Loaded::Music => return Err(Error::invalid("MUSIC needs scenario input")),
    };
    let mut degenerate = 0;
    let mut rows = DMatrix::zeros(ys.len(), phi.cols());
    for (i, e) in estimates.into_iter().enumerate() {
        match e {
            Ok(x) => rows.set_row(i, &x.transpose()),
            Err(Error::Degenerate(_)) => degenerate += 1,
            Err(err) => return Err(err),
        }
    }
    write_matrix_csv(out, &rows)?;
    result.add("samples", ys.len());
    result.add("collapsed_outputs", degenerate);
    if let Some(truths) = truths {
        let samples: Vec<Sample> = ys.into_iter().zip(truths).collect();
        let loss = match solver {
            Loaded::Model(model) => dataset_loss(model, &samples)?,
            _ => {
                let total: f64 = (0..samples.len()).map(|i| (rows.row(i).transpose() - &samples[i].1).norm_squared()).sum();
                total / samples.len() as f64
            }
        };
        let nmses = (0..samples.len())
            .map(|i| nmse(&rows.row(i).transpose(), &samples[i].1))
            .collect::<Result<Vec<Nmse>>>()?;
        result.add("mean_loss", loss);
        result.add("mean_nmse_db", mean_nmse_db(&nmses));
    }
    Ok(result)
}

fn recover_scenario(path: &Path, solver: &Loaded, out: &Path) -> Result<RecoverOutput> {
    let text = std::fs::read_to_string(path)?;
    let scenario = parse_scenario(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    let sim = simulate_snapshots(&scenario)?;
    let k = scenario.true_doas.len();
    let mut result = RecoverOutput::default();
    let (power, doas) = match solver {
        Loaded::Music => {
            let est = music_1bit(&sim.snapshots, &scenario.geometry, &scenario.grid, k)?;
            (est.pseudospectrum, est.doas)
        }
        other => {
            let steering = steering_matrix(&scenario.geometry, &scenario.grid)?;
            let rec = match other {
                Loaded::Model(model) => {
                    check_dims(model, steering.lifted.rows(), steering.lifted.cols())?;
                    recover_spectrum(&sim.snapshots, &steering, SpectrumSolver::Unfolded(model))?
                }
                Loaded::Fpc(cfg) => recover_spectrum(&sim.snapshots, &steering, SpectrumSolver::Fpc(cfg))?,
                Loaded::Music => unreachable!(),
            };
            result.add("failed_snapshots", rec.failed.len());
            (angular_power(&rec.spectrum)?, extract_doas(&rec.spectrum, &scenario.grid, k)?)
        }
    };
    let mut csv = String::from("angle,power\n");
    for (a, p) in scenario.grid.angles.iter().zip(&power) {
        csv.push_str(&format!("{a},{p}\n"));
    }
    std::fs::write(out, csv)?;
    result.add("estimated_doas", format!("{doas:?}"));
    result.add("simulated_doas", format!("{:?}", sim.simulated_doas));
    for s in &sim.snapped {
        result.add("snapped", format!("{} -> {}", s.requested, s.snapped));
    }
    result.add("mae_deg", crate::doa::mae(&[doas], &scenario.true_doas)?);
    Ok(result)
}
