//! Subspace baseline run directly on the quantized snapshots.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use super::{peak_indices, AngularGrid, SnapshotSet, UlaGeometry};
use crate::error::{ensure, Error, Result};

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Column i pairs with `values[i]`.
    pub vectors: DMatrix<Complex64>,
}

/// Largest accepted `‖RV − VΛ‖_F / max(1, ‖R‖_F)`.
const EIGEN_RESIDUAL_TOL: f64 = 1e-10;

pub fn hermitian_eigen(r: &DMatrix<Complex64>) -> Result<HermitianEigen> {
    ensure!(r.is_square() && !r.is_empty(), "covariance must be square and non-empty");
    let scale = r.norm().max(1.0);
    ensure!((r - r.adjoint()).norm() <= 1e-12 * scale, "covariance is not Hermitian");
    let eig = SymmetricEigen::new(r.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());

    let lambda = DMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|&v| Complex64::new(v, 0.0))));
    let residual = (r * &vectors - &vectors * lambda).norm() / scale;
    if !(residual <= EIGEN_RESIDUAL_TOL) {
        return Err(Error::Numeric(format!("eigen-decomposition residual {residual:e} exceeds {EIGEN_RESIDUAL_TOL:e}")));
    }
    Ok(HermitianEigen { values, vectors })
}

#[derive(Clone, Debug)]
pub struct MusicEstimate {
    /// Ascending.
    pub doas: Vec<f64>,
    /// `1/‖Eₙᴴ a(θ)‖²` on the grid.
    pub pseudospectrum: Vec<f64>,
}

/// MUSIC on the sample covariance `(1/L) Z Zᴴ` of the quantized snapshots.
pub fn music_1bit(snapshots: &SnapshotSet, geometry: &UlaGeometry, grid: &AngularGrid, k: usize) -> Result<MusicEstimate> {
    geometry.validate()?;
    grid.validate()?;
    let z = &snapshots.quantized;
    let (m, l) = z.shape();
    ensure!(m == geometry.sensors, "snapshots have {m} sensors, geometry has {}", geometry.sensors);
    ensure!(k >= 1, "MUSIC needs at least one source");
    ensure!(k < m, "MUSIC needs fewer sources than sensors (k={k}, M={m})");
    if l < k {
        return Err(Error::InsufficientSnapshots { needed: k, got: l });
    }
    let cov = (z * z.adjoint()).unscale(l as f64);
    // Enforce exact Hermitian symmetry lost to rounding.
    let cov = (&cov + cov.adjoint()).unscale(2.0);
    let eig = hermitian_eigen(&cov)?;
    let noise = eig.vectors.columns(0, m - k);

    let pseudospectrum: Vec<f64> = grid
        .angles
        .iter()
        .map(|&theta| {
            let a = geometry.response(theta);
            let proj = noise.adjoint() * a;
            1.0 / proj.norm_squared().max(f64::MIN_POSITIVE)
        })
        .collect();
    let doas = peak_indices(&pseudospectrum, k)?.into_iter().map(|i| grid.angles[i]).collect();
    Ok(MusicEstimate { doas, pseudospectrum })
}
