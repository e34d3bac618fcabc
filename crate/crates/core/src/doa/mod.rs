//! Direction-of-arrival estimation from 1-bit array snapshots.
//!
//! A uniform linear array observes `z(t) = Q(Λ s(t) + n(t))` where `Q`
//! takes the sign of the real and imaginary parts separately. Stacking real
//! and imaginary parts turns each snapshot into a real 1-bit sensing problem
//! with the block matrix
//!
//! ```text
//! Λ̃ = [ Re Λ  −Im Λ ]
//!     [ Im Λ   Re Λ ]
//! ```
//!
//! so the FPC solver and the unfolded network apply per snapshot. The
//! multi-snapshot objective separates over snapshots, so columns are solved
//! independently.

mod music;
mod scenario_file;

pub use music::{hermitian_eigen, music_1bit, HermitianEigen, MusicEstimate};
pub use scenario_file::{parse_scenario, ScenarioFile};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fpc::{self, FpcConfig};
use crate::rng::RngSeed;
use crate::sensing::{sign, BinaryMeasurements, MeasurementMatrix};
use crate::unfolded::UnfoldedModel;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UlaGeometry {
    pub sensors: usize,
    /// Element spacing in wavelengths.
    pub element_spacing: f64,
}

impl UlaGeometry {
    pub fn half_wavelength(sensors: usize) -> Self {
        Self { sensors, element_spacing: 0.5 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.sensors >= 2, "array needs at least 2 sensors, got {}", self.sensors);
        ensure!(self.element_spacing > 0.0, "element spacing must be positive");
        Ok(())
    }

    /// Array response `a(θ)`, entry m = exp(−j·2π·d·m·sin θ).
    pub fn response(&self, theta_deg: f64) -> DVector<Complex64> {
        let k = -2.0 * std::f64::consts::PI * self.element_spacing * theta_deg.to_radians().sin();
        DVector::from_iterator(self.sensors, (0..self.sensors).map(|m| Complex64::from_polar(1.0, k * m as f64)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Uniform,
    /// `sin θᵢ = 2i/M − 1`; the steering columns are mutually orthogonal.
    Orthogonal,
}

/// Candidate directions in degrees, strictly increasing within [−90, 90).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularGrid {
    pub angles: Vec<f64>,
    pub kind: GridKind,
}

impl AngularGrid {
    /// `n` points spaced 180/n degrees apart starting at −90°.
    pub fn uniform(n: usize) -> Result<Self> {
        ensure!(n >= 2, "grid needs at least 2 points");
        let step = 180.0 / n as f64;
        Ok(Self { angles: (0..n).map(|i| -90.0 + step * i as f64).collect(), kind: GridKind::Uniform })
    }

    pub fn len(&self) -> usize {
        self.angles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.angles.is_empty()
    }

    /// Index of the grid angle closest to `theta_deg`.
    pub fn nearest(&self, theta_deg: f64) -> usize {
        let mut best = 0;
        for (i, a) in self.angles.iter().enumerate() {
            if (a - theta_deg).abs() < (self.angles[best] - theta_deg).abs() {
                best = i;
            }
        }
        best
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.angles.is_empty(), "grid is empty");
        ensure!(self.angles.windows(2).all(|w| w[1] > w[0]), "grid angles must be strictly increasing");
        ensure!(
            self.angles.iter().all(|a| (-90.0..90.0).contains(a)),
            "grid angles must lie in [-90, 90)"
        );
        if self.kind == GridKind::Uniform && self.angles.len() > 2 {
            let d0 = self.angles[1] - self.angles[0];
            ensure!(
                self.angles.windows(2).all(|w| ((w[1] - w[0]) - d0).abs() < 1e-9),
                "uniform grid must have constant spacing"
            );
        }
        Ok(())
    }
}

/// Grid whose steering columns are orthogonal for a half-wavelength ULA with
/// `m_sensors` elements: `sin θᵢ = 2i/M − 1`, `i = 0..M−1`.
pub fn orthogonal_grid(m_sensors: usize) -> Result<AngularGrid> {
    ensure!(m_sensors >= 2, "array needs at least 2 sensors, got {m_sensors}");
    let m = m_sensors as f64;
    let angles = (0..m_sensors).map(|i| (2.0 * i as f64 / m - 1.0).asin().to_degrees()).collect();
    Ok(AngularGrid { angles, kind: GridKind::Orthogonal })
}

/// Complex steering matrix Λ (M×N) and its real lifting Λ̃ (2M×2N).
#[derive(Clone, Debug, PartialEq)]
pub struct SteeringMatrix {
    pub complex: DMatrix<Complex64>,
    pub lifted: MeasurementMatrix,
}

impl SteeringMatrix {
    pub fn sensors(&self) -> usize {
        self.complex.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.complex.ncols()
    }
}

pub fn steering_matrix(geometry: &UlaGeometry, grid: &AngularGrid) -> Result<SteeringMatrix> {
    geometry.validate()?;
    grid.validate()?;
    let mut complex = DMatrix::zeros(geometry.sensors, grid.len());
    for (n, theta) in grid.angles.iter().enumerate() {
        complex.set_column(n, &geometry.response(*theta));
    }
    let lifted = MeasurementMatrix::new(lift_matrix(&complex))?;
    Ok(SteeringMatrix { complex, lifted })
}

/// `[[Re, −Im], [Im, Re]]`.
pub fn lift_matrix(m: &DMatrix<Complex64>) -> DMatrix<f64> {
    let (r, c) = m.shape();
    DMatrix::from_fn(2 * r, 2 * c, |i, j| {
        let v = m[(i % r, j % c)];
        match (i < r, j < c) {
            (true, true) | (false, false) => v.re,
            (true, false) => -v.im,
            (false, true) => v.im,
        }
    })
}

/// `[Re v; Im v]`.
pub fn lift_vector(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

pub fn unlift_vector(v: &DVector<f64>) -> Result<DVector<Complex64>> {
    ensure!(v.len() % 2 == 0, "lifted vector must have even length, got {}", v.len());
    let n = v.len() / 2;
    Ok(DVector::from_fn(n, |i, _| Complex64::new(v[i], v[n + i])))
}

/// Complex sign quantizer `Q(ς) = sign(Re ς) + j·sign(Im ς)`.
pub fn quantize_complex(v: Complex64) -> Complex64 {
    Complex64::new(sign(v.re), sign(v.im))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoaScenario {
    pub geometry: UlaGeometry,
    pub grid: AngularGrid,
    /// Source directions in degrees.
    pub true_doas: Vec<f64>,
    pub snapshots: usize,
    /// `None` for noise-free snapshots.
    pub snr_db: Option<f64>,
    pub seed: RngSeed,
}

impl DoaScenario {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.grid.validate()?;
        ensure!(!self.true_doas.is_empty(), "scenario needs at least one source");
        ensure!(self.snapshots >= 1, "scenario needs at least one snapshot");
        let lo = self.grid.angles[0];
        let hi = *self.grid.angles.last().expect("non-empty");
        let half_cell = if self.grid.len() > 1 { 0.5 * (hi - lo) / (self.grid.len() - 1) as f64 } else { 0.0 };
        for d in &self.true_doas {
            ensure!(
                *d >= lo - half_cell - 1e-9 && *d <= hi + half_cell + 1e-9,
                "DOA {d} lies outside the grid range [{lo}, {hi}]"
            );
        }
        if let Some(snr) = self.snr_db {
            ensure!(snr.is_finite(), "SNR must be finite");
        }
        Ok(())
    }
}

/// One source moved onto the grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SnapRecord {
    pub requested: f64,
    pub snapped: f64,
}

/// Quantized snapshots, complex and lifted.
#[derive(Clone, Debug, PartialEq)]
pub struct SnapshotSet {
    /// M×L matrix with entries in {±1 ± j}.
    pub quantized: DMatrix<Complex64>,
    /// `z̃(t) = [Re z(t); Im z(t)]` for each snapshot.
    pub lifted_columns: Vec<BinaryMeasurements>,
}

impl SnapshotSet {
    pub fn from_quantized(quantized: DMatrix<Complex64>) -> Result<Self> {
        ensure!(
            quantized.iter().all(|v| v.re.abs() == 1.0 && v.im.abs() == 1.0),
            "quantized snapshots must have entries ±1±j"
        );
        let lifted_columns = quantized
            .column_iter()
            .map(|c| BinaryMeasurements::new(lift_vector(&c.into_owned())))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { quantized, lifted_columns })
    }

    /// Rebuilds a set from lifted ±1 columns.
    pub fn from_lifted(columns: Vec<BinaryMeasurements>) -> Result<Self> {
        ensure!(!columns.is_empty(), "no snapshots");
        let len = columns[0].len();
        ensure!(len % 2 == 0 && columns.iter().all(|c| c.len() == len), "lifted columns must share an even length");
        let mut quantized = DMatrix::zeros(len / 2, columns.len());
        for (t, c) in columns.iter().enumerate() {
            quantized.set_column(t, &unlift_vector(c.as_vector())?);
        }
        Ok(Self { quantized, lifted_columns: columns })
    }

    pub fn len(&self) -> usize {
        self.lifted_columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lifted_columns.is_empty()
    }

    /// The lifted columns as a 2M×L real matrix.
    pub fn lifted_matrix(&self) -> DMatrix<f64> {
        let cols: Vec<_> = self.lifted_columns.iter().map(|c| c.as_vector().clone()).collect();
        DMatrix::from_columns(&cols)
    }

    /// Same snapshots with columns reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let quantized = DMatrix::from_columns(&perm.iter().map(|&t| self.quantized.column(t).into_owned()).collect::<Vec<_>>());
        Self { quantized, lifted_columns: perm.iter().map(|&t| self.lifted_columns[t].clone()).collect() }
    }
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub snapshots: SnapshotSet,
    /// Lifted source matrix S̃ (2N×L).
    pub truth: DMatrix<f64>,
    /// Grid indices of the sources, in the order of `true_doas`.
    pub support: Vec<usize>,
    /// Grid angles actually simulated, in the order of `true_doas`.
    pub simulated_doas: Vec<f64>,
    /// Sources that were moved onto the grid.
    pub snapped: Vec<SnapRecord>,
    /// K×L source amplitudes.
    pub amplitudes: DMatrix<Complex64>,
    /// M×L additive noise (zero when noise-free).
    pub noise: DMatrix<Complex64>,
}

/// Draws unit-variance circular complex Gaussian source amplitudes and noise at
/// the configured SNR, then quantizes.
pub fn simulate_snapshots(scenario: &DoaScenario) -> Result<Simulation> {
    scenario.validate()?;
    let steering = steering_matrix(&scenario.geometry, &scenario.grid)?;
    simulate_with_steering(scenario, &steering)
}

/// [`simulate_snapshots`] with a precomputed steering matrix for the
/// scenario's geometry and grid.
pub fn simulate_with_steering(scenario: &DoaScenario, steering: &SteeringMatrix) -> Result<Simulation> {
    ensure!(
        steering.sensors() == scenario.geometry.sensors && steering.grid_len() == scenario.grid.len(),
        "steering matrix does not match the scenario"
    );
    let (m, n, l, k) = (scenario.geometry.sensors, scenario.grid.len(), scenario.snapshots, scenario.true_doas.len());
    let mut support = Vec::with_capacity(k);
    let mut snapped = Vec::new();
    for &d in &scenario.true_doas {
        let idx = scenario.grid.nearest(d);
        let g = scenario.grid.angles[idx];
        if (g - d).abs() > 1e-9 {
            snapped.push(SnapRecord { requested: d, snapped: g });
        }
        if support.contains(&idx) {
            return Err(Error::invalid(format!("two sources snap to the same grid angle {g}")));
        }
        support.push(idx);
    }

    let unit = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("finite std");
    let mut rng = scenario.seed.derive_named("sources", 0).rng();
    let amplitudes = DMatrix::from_fn(k, l, |_, _| Complex64::new(unit.sample(&mut rng), unit.sample(&mut rng)));

    let mut noise = DMatrix::zeros(m, l);
    if let Some(snr) = scenario.snr_db {
        let std = (10f64.powf(-snr / 10.0) / 2.0).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let mut rng = scenario.seed.derive_named("noise", 0).rng();
        noise = DMatrix::from_fn(m, l, |_, _| Complex64::new(dist.sample(&mut rng), dist.sample(&mut rng)));
    }

    let mut truth = DMatrix::zeros(2 * n, l);
    let mut clean = DMatrix::<Complex64>::zeros(m, l);
    for (s, &idx) in support.iter().enumerate() {
        let col = steering.complex.column(idx);
        for t in 0..l {
            let a = amplitudes[(s, t)];
            truth[(idx, t)] = a.re;
            truth[(n + idx, t)] = a.im;
            for i in 0..m {
                clean[(i, t)] += col[i] * a;
            }
        }
    }
    let quantized = (clean + &noise).map(quantize_complex);
    let simulated_doas = support.iter().map(|&i| scenario.grid.angles[i]).collect();
    Ok(Simulation { snapshots: SnapshotSet::from_quantized(quantized)?, truth, support, simulated_doas, snapped, amplitudes, noise })
}

/// Noise-free single-snapshot training pairs `(z̃, s̃/‖s̃‖)`. Each sample
/// draws its source count uniformly from `sources`, places the sources on
/// distinct grid points chosen uniformly at random and draws unit-variance
/// circular complex Gaussian amplitudes.
pub fn training_samples(
    steering: &SteeringMatrix,
    count: usize,
    sources: std::ops::RangeInclusive<usize>,
    seed: RngSeed,
) -> Result<Vec<crate::unfolded::Sample>> {
    let n = steering.grid_len();
    ensure!(
        !sources.is_empty() && *sources.start() >= 1 && *sources.end() <= n,
        "source count range {sources:?} must lie within 1..={n}"
    );
    let unit = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("finite std");
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = seed.derive_named("doa-train", i as u64).rng();
        let k = rng.random_range(sources.clone());
        let support = rand::seq::index::sample(&mut rng, n, k);
        let mut s = DVector::<Complex64>::zeros(n);
        for idx in support.iter() {
            s[idx] = Complex64::new(unit.sample(&mut rng), unit.sample(&mut rng));
        }
        let z = (&steering.complex * &s).map(quantize_complex);
        out.push((BinaryMeasurements::new(lift_vector(&z))?, crate::sensing::unit_normalize(&lift_vector(&s))?));
    }
    Ok(out)
}

/// Per-snapshot sparse solver.
#[derive(Clone, Copy, Debug)]
pub enum SpectrumSolver<'a> {
    Fpc(&'a FpcConfig),
    Unfolded(&'a UnfoldedModel),
}

/// Recovers one lifted snapshot.
pub fn recover_column(column: &BinaryMeasurements, steering: &SteeringMatrix, solver: SpectrumSolver<'_>) -> Result<DVector<f64>> {
    match solver {
        SpectrumSolver::Fpc(cfg) => Ok(fpc::solve(&steering.lifted, column, cfg, None)?.x),
        SpectrumSolver::Unfolded(model) => {
            ensure!(
                model.measurements() == steering.lifted.rows() && model.signal_len() == steering.lifted.cols(),
                "model is {}x{}, lifted steering matrix is {}x{}",
                model.measurements(),
                model.signal_len(),
                steering.lifted.rows(),
                steering.lifted.cols()
            );
            model.predict(column, None)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumRecovery {
    /// 2N×L; column t is the solver output for snapshot t (zero if it failed).
    pub spectrum: DMatrix<f64>,
    /// Snapshots whose solve failed, with the reason.
    pub failed: Vec<(usize, String)>,
}

/// Solves every snapshot independently (in parallel when enabled).
pub fn recover_spectrum(snapshots: &SnapshotSet, steering: &SteeringMatrix, solver: SpectrumSolver<'_>) -> Result<SpectrumRecovery> {
    ensure!(!snapshots.is_empty(), "no snapshots");
    let cols = crate::par::map_indexed(snapshots.len(), |t| recover_column(&snapshots.lifted_columns[t], steering, solver));
    let mut spectrum = DMatrix::zeros(steering.lifted.cols(), snapshots.len());
    let mut failed = Vec::new();
    for (t, c) in cols.into_iter().enumerate() {
        match c {
            Ok(x) => spectrum.set_column(t, &x),
            Err(e @ Error::InvalidArgument(_)) => return Err(e),
            Err(e) => failed.push((t, e.to_string())),
        }
    }
    Ok(SpectrumRecovery { spectrum, failed })
}

/// `‖S̃‖₁,₁ + λ‖max(−(Z̃ ⊙ Λ̃S̃), 0)‖₁,₁`.
pub fn multi_snapshot_objective(s: &DMatrix<f64>, lifted: &DMatrix<f64>, z: &DMatrix<f64>, lambda: f64) -> Result<f64> {
    ensure!(
        lifted.ncols() == s.nrows() && lifted.nrows() == z.nrows() && s.ncols() == z.ncols(),
        "shape mismatch: Λ̃ {:?}, S̃ {:?}, Z̃ {:?}",
        lifted.shape(),
        s.shape(),
        z.shape()
    );
    let prod = lifted * s;
    let penalty: f64 = prod.iter().zip(z.iter()).map(|(p, zi)| (-(zi * p)).max(0.0)).sum();
    Ok(s.iter().map(|v| v.abs()).sum::<f64>() + lambda * penalty)
}

/// Per-angle power `pₙ = Σ_t S̃ₙₜ² + S̃₍N+n₎ₜ²`.
pub fn angular_power(spectrum: &DMatrix<f64>) -> Result<Vec<f64>> {
    ensure!(spectrum.nrows() % 2 == 0, "spectrum must have 2N rows");
    let n = spectrum.nrows() / 2;
    Ok((0..n).map(|i| spectrum.row(i).norm_squared() + spectrum.row(n + i).norm_squared()).collect())
}

/// Indices of the `k` strongest local maxima of `power`, topped up with the
/// largest remaining entries when there are fewer than `k` maxima. Sorted
/// ascending.
pub fn peak_indices(power: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(k >= 1 && k <= power.len(), "need 1 <= k <= {}, got {k}", power.len());
    let n = power.len();
    let is_peak = |i: usize| {
        let left = i == 0 || power[i] > power[i - 1];
        let right = i + 1 == n || power[i] > power[i + 1];
        left && right
    };
    let by_power = |a: &usize, b: &usize| power[*b].total_cmp(&power[*a]).then(a.cmp(b));
    let mut peaks: Vec<usize> = (0..n).filter(|&i| is_peak(i)).collect();
    peaks.sort_by(by_power);
    peaks.truncate(k);
    if peaks.len() < k {
        let mut rest: Vec<usize> = (0..n).filter(|i| !peaks.contains(i)).collect();
        rest.sort_by(by_power);
        peaks.extend(rest.into_iter().take(k - peaks.len()));
    }
    peaks.sort_unstable();
    Ok(peaks)
}

/// Angles of the `k` strongest spectral peaks, ascending.
pub fn extract_doas(spectrum: &DMatrix<f64>, grid: &AngularGrid, k: usize) -> Result<Vec<f64>> {
    let power = angular_power(spectrum)?;
    ensure!(power.len() == grid.len(), "spectrum has {} angles, grid has {}", power.len(), grid.len());
    ensure!(k <= grid.len(), "cannot extract {k} DOAs from a grid of {}", grid.len());
    Ok(peak_indices(&power, k)?.into_iter().map(|i| grid.angles[i]).collect())
}

/// Mean absolute error over runs and sources. Each run's estimates and the
/// truth are sorted and paired positionally.
pub fn mae(estimates: &[Vec<f64>], truth: &[f64]) -> Result<f64> {
    ensure!(!estimates.is_empty() && !truth.is_empty(), "mae needs at least one run and one source");
    let mut sorted_truth = truth.to_vec();
    sorted_truth.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for (j, row) in estimates.iter().enumerate() {
        ensure!(row.len() == truth.len(), "run {j} has {} estimates, expected {}", row.len(), truth.len());
        let mut row = row.clone();
        row.sort_by(f64::total_cmp);
        total += row.iter().zip(&sorted_truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    Ok(total / (estimates.len() * truth.len()) as f64)
}

#[cfg(test)]
mod tests;
