//! Real-valued 1-bit sensing model `y = sign(Φx + ε)`, problem generation and
//! recovery metrics.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{ensure, Error, Result};
use crate::rng::RngSeed;

/// Sign with the convention `sign(0) = -1`.
#[inline]
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// A K-sparse vector together with its support.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSignal {
    values: DVector<f64>,
    support: Vec<usize>,
}

impl SparseSignal {
    /// Builds a signal from dense values; the support is read off the nonzeros.
    pub fn from_dense(values: DVector<f64>) -> Self {
        let support = values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, _)| i)
            .collect();
        Self { values, support }
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    /// Sorted indices of the nonzero entries.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sparsity(&self) -> usize {
        self.support.len()
    }

    pub fn into_values(self) -> DVector<f64> {
        self.values
    }
}

/// Sensing matrix Φ (M×N). M may exceed N.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementMatrix(DMatrix<f64>);

impl MeasurementMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        ensure!(
            entries.nrows() > 0 && entries.ncols() > 0,
            "measurement matrix must be non-empty, got {}x{}",
            entries.nrows(),
            entries.ncols()
        );
        Ok(Self(entries))
    }

    pub fn rows(&self) -> usize {
        self.0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }
}

/// Vector of ±1 measurements, stored as reals so it can enter matrix products.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMeasurements(DVector<f64>);

impl BinaryMeasurements {
    pub fn new(bits: DVector<f64>) -> Result<Self> {
        if let Some((i, v)) = bits.iter().enumerate().find(|(_, v)| **v != 1.0 && **v != -1.0) {
            return Err(Error::invalid(format!("measurement {i} is {v}, expected +1 or -1")));
        }
        Ok(Self(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<f64> {
        self.0
    }
}

/// Draws a K-sparse signal: uniform random support, i.i.d. standard normal
/// values on it.
pub fn generate_sparse_signal(n: usize, k: usize, seed: RngSeed) -> Result<SparseSignal> {
    ensure!(k > 0 && k <= n, "sparsity must satisfy 0 < k <= n, got k={k}, n={n}");
    let mut rng = seed.rng();
    let mut support = index::sample(&mut rng, n, k).into_vec();
    support.sort_unstable();
    let mut values = DVector::zeros(n);
    for &i in &support {
        // A standard normal draw is exactly zero with probability zero, but
        // the support invariant must hold unconditionally.
        let mut v: f64 = StandardNormal.sample(&mut rng);
        while v == 0.0 {
            v = StandardNormal.sample(&mut rng);
        }
        values[i] = v;
    }
    Ok(SparseSignal { values, support })
}

/// M×N matrix with i.i.d. N(0, 1/M) entries.
pub fn generate_gaussian_matrix(m: usize, n: usize, seed: RngSeed) -> Result<MeasurementMatrix> {
    ensure!(m > 0 && n > 0, "matrix dimensions must be positive, got {m}x{n}");
    let dist = Normal::new(0.0, (1.0 / m as f64).sqrt()).expect("finite std");
    let mut rng = seed.rng();
    // Fill row-major so the draw order does not depend on storage layout.
    let entries = DMatrix::from_row_iterator(m, n, (0..m * n).map(|_| dist.sample(&mut rng)));
    MeasurementMatrix::new(entries)
}

/// Element-wise sign with `sign(0) = -1`.
pub fn quantize(v: &DVector<f64>) -> BinaryMeasurements {
    BinaryMeasurements(v.map(sign))
}

/// `quantize(Φx + ε)` with `ε ~ N(0, noise_std²)` i.i.d.
pub fn measure(
    phi: &MeasurementMatrix,
    x: &DVector<f64>,
    noise_std: f64,
    seed: RngSeed,
) -> Result<BinaryMeasurements> {
    ensure!(
        phi.cols() == x.len(),
        "signal length {} does not match matrix columns {}",
        x.len(),
        phi.cols()
    );
    ensure!(noise_std >= 0.0 && noise_std.is_finite(), "noise_std must be finite and >= 0");
    let mut z = phi.as_matrix() * x;
    if noise_std > 0.0 {
        let dist = Normal::new(0.0, noise_std).expect("finite std");
        let mut rng = seed.rng();
        for zi in z.iter_mut() {
            *zi += dist.sample(&mut rng);
        }
    }
    Ok(quantize(&z))
}

/// Normalized mean square error of an estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Nmse {
    pub linear: f64,
}

impl Nmse {
    pub fn db(self) -> f64 {
        10.0 * self.linear.log10()
    }
}

/// `‖estimate − truth‖² / ‖truth‖²`.
pub fn nmse(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<Nmse> {
    ensure!(
        estimate.len() == truth.len(),
        "length mismatch: estimate {} vs truth {}",
        estimate.len(),
        truth.len()
    );
    let denom = truth.norm_squared();
    ensure!(denom > 0.0, "truth has zero norm");
    Ok(Nmse { linear: (estimate - truth).norm_squared() / denom })
}

/// Mean of linear NMSE values, returned in dB.
pub fn mean_nmse_db(values: &[Nmse]) -> f64 {
    let mean = values.iter().map(|v| v.linear).sum::<f64>() / values.len() as f64;
    10.0 * mean.log10()
}

/// Scales `v` to unit l2 norm. The zero vector is rejected.
pub fn unit_normalize(v: &DVector<f64>) -> Result<DVector<f64>> {
    let norm = v.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::Degenerate("input"));
    }
    Ok(v / norm)
}

/// A seeded noise-free recovery instance: Φ, unit-norm x and y = sign(Φx).
#[derive(Clone, Debug)]
pub struct SensingProblem {
    pub phi: MeasurementMatrix,
    pub signal: SparseSignal,
    pub measurements: BinaryMeasurements,
}

impl SensingProblem {
    pub fn generate(m: usize, n: usize, k: usize, noise_std: f64, seed: RngSeed) -> Result<Self> {
        let phi = generate_gaussian_matrix(m, n, seed.derive_named("phi", 0))?;
        let signal = generate_sparse_signal(n, k, seed.derive_named("signal", 0))?;
        let measurements = measure(&phi, signal.values(), noise_std, seed.derive_named("noise", 0))?;
        Ok(Self { phi, signal, measurements })
    }
}

/// Draws `count` (y, x) pairs against a fixed Φ. Targets are scaled to unit
/// norm, since the sign measurements carry no amplitude information.
pub fn generate_pairs(
    phi: &MeasurementMatrix,
    count: usize,
    k: usize,
    noise_std: f64,
    seed: RngSeed,
) -> Result<Vec<(BinaryMeasurements, DVector<f64>)>> {
    (0..count)
        .map(|d| {
            let s = generate_sparse_signal(phi.cols(), k, seed.derive_named("pair-signal", d as u64))?;
            let y = measure(phi, s.values(), noise_std, seed.derive_named("pair-noise", d as u64))?;
            Ok((y, unit_normalize(s.values())?))
        })
        .collect()
}
