//! DOA error sweeps and the grid comparison.

use super::{method, DoaSettings, ExperimentConfig, ExperimentResult};
use crate::doa::{
    extract_doas, mae, music_1bit, orthogonal_grid, recover_spectrum, simulate_with_steering, steering_matrix,
    training_samples, AngularGrid, DoaScenario, SpectrumSolver, SteeringMatrix, UlaGeometry,
};
use crate::error::{ensure, Error, Result};
use crate::fpc::FpcConfig;
use crate::rng::RngSeed;
use crate::trainer::{train, TieMode, TrainReport, TrainingDataset};
use crate::unfolded::UnfoldedModel;

/// Pre-trained DOA networks; missing ones are trained.
#[derive(Clone, Debug, Default)]
pub struct DoaModels {
    pub uniform: Option<UnfoldedModel>,
    pub orthogonal: Option<UnfoldedModel>,
}

/// Trains a network on noise-free single snapshots for `steering`'s grid.
pub fn train_doa_model(d: &DoaSettings, steering: &SteeringMatrix, seed: RngSeed) -> Result<TrainReport> {
    let samples = training_samples(
        steering,
        d.train_pairs,
        d.train_sources_min..=d.train_sources_max.min(steering.grid_len()),
        seed.derive_named("doa-train", steering.grid_len() as u64),
    )?;
    let model = UnfoldedModel::init_from_fpc(&steering.lifted, d.init_tau, d.init_lambda, d.train.kappa_start, d.layers)?;
    let cfg = d.train.to_train_config(TieMode::TiedAbcUntiedNu, seed.derive_named("doa-trainer", 0));
    train(model, &TrainingDataset::new(samples), &cfg)
}

fn model_for(
    supplied: Option<&UnfoldedModel>,
    d: &DoaSettings,
    steering: &SteeringMatrix,
    seed: RngSeed,
    label: &str,
    out: &mut ExperimentResult,
) -> Result<UnfoldedModel> {
    if let Some(m) = supplied {
        ensure!(
            m.measurements() == steering.lifted.rows() && m.signal_len() == steering.lifted.cols(),
            "`{label}` model is {}x{} but the {} grid needs {}x{}",
            m.measurements(),
            m.signal_len(),
            label,
            steering.lifted.rows(),
            steering.lifted.cols()
        );
        return Ok(m.clone());
    }
    let report = train_doa_model(d, steering, seed)?;
    if report.degenerate_samples > 0 {
        out.meta.notes.push(format!("{label}: {} collapsed training outputs", report.degenerate_samples));
    }
    out.models.push((format!("{}_{label}", method::UNFOLDED), report.model.clone()));
    Ok(report.model)
}

struct Setup<'a> {
    geometry: UlaGeometry,
    grid: &'a AngularGrid,
    steering: &'a SteeringMatrix,
    fpc: &'a FpcConfig,
    model: &'a UnfoldedModel,
    music: bool,
}

#[derive(Debug)]
struct PointResult {
    fpc: f64,
    unfolded: f64,
    music: Option<f64>,
    music_skipped: bool,
    failed_columns: usize,
}

/// Monte-Carlo MAE of every method at one sweep point. All methods see the
/// same snapshots in each run.
fn run_point(setup: &Setup<'_>, doas: &[f64], snapshots: usize, snr_db: f64, runs: usize, seed: RngSeed) -> Result<PointResult> {
    let k = doas.len();
    let music = setup.music && snapshots >= k && k < setup.geometry.sensors;
    let per_run = crate::par::map_indexed(runs, |j| -> Result<_> {
        let scenario = DoaScenario {
            geometry: setup.geometry,
            grid: setup.grid.clone(),
            true_doas: doas.to_vec(),
            snapshots,
            snr_db: Some(snr_db),
            seed: seed.derive(j as u64),
        };
        let sim = simulate_with_steering(&scenario, setup.steering)?;
        let f = recover_spectrum(&sim.snapshots, setup.steering, SpectrumSolver::Fpc(setup.fpc))?;
        let u = recover_spectrum(&sim.snapshots, setup.steering, SpectrumSolver::Unfolded(setup.model))?;
        let m = if music { Some(music_1bit(&sim.snapshots, &setup.geometry, setup.grid, k)?.doas) } else { None };
        Ok((
            extract_doas(&f.spectrum, setup.grid, k)?,
            extract_doas(&u.spectrum, setup.grid, k)?,
            m,
            f.failed.len() + u.failed.len(),
        ))
    });
    let (mut ef, mut eu, mut em, mut failed) = (Vec::new(), Vec::new(), Vec::new(), 0);
    for r in per_run {
        let (f, u, m, n) = r?;
        ef.push(f);
        eu.push(u);
        if let Some(m) = m {
            em.push(m);
        }
        failed += n;
    }
    Ok(PointResult {
        fpc: mae(&ef, doas)?,
        unfolded: mae(&eu, doas)?,
        music: if music { Some(mae(&em, doas)?) } else { None },
        music_skipped: setup.music && !music,
        failed_columns: failed,
    })
}

/// Mean distance from each requested DOA to its grid point: the smallest
/// MAE any on-grid estimator can reach.
fn snapping_floor(grid: &AngularGrid, doas: &[f64]) -> f64 {
    doas.iter().map(|&d| (grid.angles[grid.nearest(d)] - d).abs()).sum::<f64>() / doas.len() as f64
}

fn record(out: &mut ExperimentResult, panel: &str, sweep: (&str, f64), p: &PointResult, runs: usize) {
    out.push(panel, sweep, method::FPC, "mae_deg", p.fpc, runs);
    out.push(panel, sweep, method::UNFOLDED, "mae_deg", p.unfolded, runs);
    if let Some(v) = p.music {
        out.push(panel, sweep, method::MUSIC, "mae_deg", v, runs);
    }
    if p.music_skipped {
        out.meta.notes.push(format!("{panel} {}={}: MUSIC skipped (needs at least as many snapshots as sources)", sweep.0, sweep.1));
    }
    if p.failed_columns > 0 {
        out.meta.notes.push(format!("{panel} {}={}: {} snapshot solves failed", sweep.0, sweep.1, p.failed_columns));
    }
}

fn validate_doas(grid: &AngularGrid, doas: &[f64]) -> Result<()> {
    let mut idx: Vec<usize> = doas.iter().map(|&d| grid.nearest(d)).collect();
    idx.sort_unstable();
    idx.dedup();
    if idx.len() != doas.len() {
        return Err(Error::Config(format!("DOAs {doas:?} do not map to distinct grid points")));
    }
    Ok(())
}

/// MAE against SNR at fixed snapshot counts and against snapshot count at
/// fixed SNRs, on the uniform grid, for FPC, the network and MUSIC.
pub fn run_fig4(config: &ExperimentConfig, seed: RngSeed, model: Option<&UnfoldedModel>) -> Result<ExperimentResult> {
    let d = &config.doa;
    let geometry = UlaGeometry::half_wavelength(d.sensors);
    let grid = AngularGrid::uniform(d.grid_size)?;
    validate_doas(&grid, &d.doas)?;
    let steering = steering_matrix(&geometry, &grid)?;
    let mut out = ExperimentResult::new("fig4", config, seed);
    let model = model_for(model, d, &steering, seed, "uniform", &mut out)?;
    let setup = Setup { geometry, grid: &grid, steering: &steering, fpc: &d.fpc, model: &model, music: true };
    let floor = snapping_floor(&grid, &d.doas);

    for &l in &d.snr_sweep_snapshots {
        let panel = format!("mae_vs_snr_L{l}");
        for &snr in &d.snr_sweep {
            let p = run_point(&setup, &d.doas, l, snr, d.runs, seed.derive_named(&format!("fig4-L{l}-snr{snr}"), 0))?;
            record(&mut out, &panel, ("snr_db", snr), &p, d.runs);
        }
        out.push(&panel, ("none", 0.0), "grid", "mae_floor_deg", floor, d.runs);
    }
    for &snr in &d.snapshot_sweep_snr {
        let panel = format!("mae_vs_snapshots_snr{snr}");
        for &l in &d.snapshot_sweep {
            let p = run_point(&setup, &d.doas, l, snr, d.runs, seed.derive_named(&format!("fig4-L{l}-snr{snr}"), 0))?;
            record(&mut out, &panel, ("snapshots", l as f64), &p, d.runs);
        }
        out.push(&panel, ("none", 0.0), "grid", "mae_floor_deg", floor, d.runs);
    }
    Ok(out.finish())
}

/// MAE against snapshot count for FPC and the network under the uniform
/// grid and the orthogonal grid.
pub fn run_fig6(config: &ExperimentConfig, seed: RngSeed, models: &DoaModels) -> Result<ExperimentResult> {
    let d = &config.doa;
    let geometry = UlaGeometry::half_wavelength(d.sensors);
    let mut out = ExperimentResult::new("fig6", config, seed);
    let grids = [
        ("uniform", AngularGrid::uniform(d.grid_size)?, models.uniform.as_ref()),
        ("orthogonal", orthogonal_grid(d.sensors)?, models.orthogonal.as_ref()),
    ];
    for (panel, grid, supplied) in &grids {
        validate_doas(grid, &d.fig6_doas)?;
        let steering = steering_matrix(&geometry, grid)?;
        let model = model_for(*supplied, d, &steering, seed, panel, &mut out)?;
        let setup = Setup { geometry, grid, steering: &steering, fpc: &d.fpc, model: &model, music: false };
        for &l in &d.fig6_snapshots {
            let p = run_point(&setup, &d.fig6_doas, l, d.fig6_snr, d.runs, seed.derive_named(&format!("fig6-L{l}"), 0))?;
            record(&mut out, panel, ("snapshots", l as f64), &p, d.runs);
        }
        let floor = snapping_floor(grid, &d.fig6_doas);
        out.push(panel, ("none", 0.0), "grid", "mae_floor_deg", floor, d.runs);
    }
    Ok(out.finish())
}
