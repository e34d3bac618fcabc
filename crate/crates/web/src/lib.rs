//! wasm-bindgen bindings for the static demo page in `www/`.
//!
//! Each exported operation has a native twin (`*_native`) returning the core
//! error type, so the logic is testable without a JS host.

use wasm_bindgen::prelude::*;

use onebit::doa::{
    angular_power, extract_doas, music_1bit, recover_spectrum, simulate_with_steering, steering_matrix, AngularGrid,
    DoaScenario, SpectrumSolver, UlaGeometry,
};
use onebit::fpc::{self, FpcConfig};
use onebit::sensing::{nmse, SensingProblem};
use onebit::{Error, RngSeed};

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Truth, estimate and the NMSE after every FPC iteration.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct SignalView {
    truth: Vec<f64>,
    estimate: Vec<f64>,
    curve_db: Vec<f64>,
}

#[wasm_bindgen]
impl SignalView {
    #[wasm_bindgen(getter)]
    pub fn truth(&self) -> Vec<f64> {
        self.truth.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn estimate(&self) -> Vec<f64> {
        self.estimate.clone()
    }

    /// NMSE in dB after iteration 1, 2, ...
    #[wasm_bindgen(getter, js_name = curveDb)]
    pub fn curve_db(&self) -> Vec<f64> {
        self.curve_db.clone()
    }

    #[wasm_bindgen(getter, js_name = finalDb)]
    pub fn final_db(&self) -> f64 {
        self.curve_db.last().copied().unwrap_or(f64::NAN)
    }
}

/// Runs single-stage FPC on one seeded instance, recording NMSE per iteration.
pub fn recover_signal_native(
    m: usize,
    n: usize,
    k: usize,
    noise_std: f64,
    tau: f64,
    lambda: f64,
    iters: usize,
    seed: u64,
) -> Result<SignalView, Error> {
    let problem = SensingProblem::generate(m, n, k, noise_std, RngSeed(seed))?;
    let truth = problem.signal.values();
    let step = FpcConfig::single_stage(tau, lambda, 1);
    let mut x = fpc::default_initial(&problem.phi, &problem.measurements)?;
    let mut curve_db = Vec::with_capacity(iters);
    for _ in 0..iters {
        x = fpc::solve(&problem.phi, &problem.measurements, &step, Some(&x))?.x;
        curve_db.push(nmse(&x, truth)?.db());
    }
    Ok(SignalView { truth: truth.as_slice().to_vec(), estimate: x.as_slice().to_vec(), curve_db })
}

#[wasm_bindgen(js_name = recoverSignal)]
#[allow(clippy::too_many_arguments)]
pub fn recover_signal(
    m: usize,
    n: usize,
    k: usize,
    noise_std: f64,
    tau: f64,
    lambda: f64,
    iters: usize,
    seed: u64,
) -> Result<SignalView, JsError> {
    recover_signal_native(m, n, k, noise_std, tau, lambda, iters, seed).map_err(js)
}

/// Mean NMSE in dB of FPC for each measurement count in `ms`.
pub fn nmse_vs_measurements_native(ms: &[usize], n: usize, k: usize, iters: usize, trials: usize, seed: u64) -> Result<Vec<f64>, Error> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    let cfg = FpcConfig::single_stage(0.03, 1.0, iters);
    ms.iter()
        .map(|&m| {
            let mut total = 0.0;
            for t in 0..trials {
                let p = SensingProblem::generate(m, n, k, 0.0, RngSeed(seed).derive_named("trial", t as u64))?;
                let x = fpc::solve(&p.phi, &p.measurements, &cfg, None)?.x;
                total += nmse(&x, p.signal.values())?.linear;
            }
            Ok(10.0 * (total / trials as f64).log10())
        })
        .collect()
}

#[wasm_bindgen(js_name = nmseVsMeasurements)]
pub fn nmse_vs_measurements(ms: Vec<usize>, n: usize, k: usize, iters: usize, trials: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    nmse_vs_measurements_native(&ms, n, k, iters, trials, seed).map_err(js)
}

/// FPC angular power and the 1-bit MUSIC pseudospectrum over a uniform grid.
#[wasm_bindgen]
#[derive(Clone, Debug)]
pub struct DoaView {
    angles: Vec<f64>,
    fpc_power: Vec<f64>,
    music: Vec<f64>,
    fpc_doas: Vec<f64>,
    music_doas: Vec<f64>,
}

#[wasm_bindgen]
impl DoaView {
    #[wasm_bindgen(getter)]
    pub fn angles(&self) -> Vec<f64> {
        self.angles.clone()
    }

    #[wasm_bindgen(getter, js_name = fpcPower)]
    pub fn fpc_power(&self) -> Vec<f64> {
        self.fpc_power.clone()
    }

    /// Empty when MUSIC cannot run (fewer snapshots than sources).
    #[wasm_bindgen(getter)]
    pub fn music(&self) -> Vec<f64> {
        self.music.clone()
    }

    #[wasm_bindgen(getter, js_name = fpcDoas)]
    pub fn fpc_doas(&self) -> Vec<f64> {
        self.fpc_doas.clone()
    }

    #[wasm_bindgen(getter, js_name = musicDoas)]
    pub fn music_doas(&self) -> Vec<f64> {
        self.music_doas.clone()
    }
}

pub fn doa_spectra_native(
    sensors: usize,
    grid_size: usize,
    doas: &[f64],
    snapshots: usize,
    snr_db: f64,
    seed: u64,
) -> Result<DoaView, Error> {
    let geometry = UlaGeometry::half_wavelength(sensors);
    let grid = AngularGrid::uniform(grid_size)?;
    let scenario = DoaScenario {
        geometry,
        grid: grid.clone(),
        true_doas: doas.to_vec(),
        snapshots,
        snr_db: Some(snr_db),
        seed: RngSeed(seed),
    };
    scenario.validate()?;
    let steering = steering_matrix(&geometry, &grid)?;
    let sim = simulate_with_steering(&scenario, &steering)?;
    let rec = recover_spectrum(&sim.snapshots, &steering, SpectrumSolver::Fpc(&FpcConfig::default()))?;
    let k = doas.len();
    let (music, music_doas) = if snapshots >= k && k < sensors {
        let est = music_1bit(&sim.snapshots, &geometry, &grid, k)?;
        (est.pseudospectrum, est.doas)
    } else {
        (Vec::new(), Vec::new())
    };
    Ok(DoaView {
        angles: grid.angles.clone(),
        fpc_power: angular_power(&rec.spectrum)?,
        music,
        fpc_doas: extract_doas(&rec.spectrum, &grid, k)?,
        music_doas,
    })
}

#[wasm_bindgen(js_name = doaSpectra)]
pub fn doa_spectra(sensors: usize, grid_size: usize, doas: Vec<f64>, snapshots: usize, snr_db: f64, seed: u64) -> Result<DoaView, JsError> {
    doa_spectra_native(sensors, grid_size, &doas, snapshots, snr_db, seed).map_err(js)
}
