//! Fixed-point continuation with the one-sided l1 consistency penalty.
//!
//! Each step takes a gradient step on `Σ max(0, −[YΦx]ᵢ)`, shrinks with the
//! soft-threshold `S_ν`, and projects back onto the unit sphere. An outer loop
//! grows λ geometrically, which lowers the threshold `ν = τ/λ`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::sensing::{sign, unit_normalize, BinaryMeasurements, MeasurementMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FpcConfig {
    /// Gradient step size τ.
    pub tau: f64,
    /// λ of the first continuation stage.
    pub lambda0: f64,
    /// λ multiplier between stages.
    pub continuation_factor: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
}

impl Default for FpcConfig {
    fn default() -> Self {
        Self { tau: 0.01, lambda0: 1.1, continuation_factor: 1.1, inner_iters: 200, outer_iters: 20 }
    }
}

impl FpcConfig {
    /// One stage of `iters` steps at fixed λ.
    pub fn single_stage(tau: f64, lambda: f64, iters: usize) -> Self {
        Self { tau, lambda0: lambda, continuation_factor: 1.0, inner_iters: iters, outer_iters: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.tau > 0.0 && self.tau.is_finite(), "tau must be positive, got {}", self.tau);
        ensure!(self.lambda0 > 0.0 && self.lambda0.is_finite(), "lambda0 must be positive, got {}", self.lambda0);
        ensure!(
            self.continuation_factor >= 1.0 && self.continuation_factor.is_finite(),
            "continuation_factor must be >= 1, got {}",
            self.continuation_factor
        );
        ensure!(self.inner_iters >= 1 && self.outer_iters >= 1, "iteration counts must be >= 1");
        Ok(())
    }

    /// λ used in outer stage `stage` (zero-based).
    pub fn lambda_at(&self, stage: usize) -> f64 {
        self.lambda0 * self.continuation_factor.powi(stage as i32)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpcState {
    pub x: DVector<f64>,
    pub iteration: usize,
    pub lambda: f64,
}

/// Consistency penalty `h` applied to each `[YΦx]ᵢ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Penalty {
    /// `max(0, −z)`
    OneSidedL1,
    /// `max(0, −z)²`; evaluation only.
    OneSidedL2,
}

impl Penalty {
    #[inline]
    pub fn eval(self, z: f64) -> f64 {
        let h = (-z).max(0.0);
        match self {
            Penalty::OneSidedL1 => h,
            Penalty::OneSidedL2 => h * h,
        }
    }
}

#[inline]
pub(crate) fn shrink(v: f64, nu: f64) -> f64 {
    let m = v.abs() - nu;
    if m > 0.0 {
        m.copysign(v)
    } else {
        0.0
    }
}

/// `S_ν(v) = sign(v) ⊙ max(|v| − ν, 0)`.
pub fn soft_threshold(v: &DVector<f64>, nu: f64) -> Result<DVector<f64>> {
    ensure!(nu >= 0.0, "threshold must be non-negative, got {nu}");
    Ok(v.map(|x| shrink(x, nu)))
}

fn check_dims(phi: &MeasurementMatrix, x: &DVector<f64>, y: &BinaryMeasurements) -> Result<()> {
    ensure!(
        phi.cols() == x.len() && phi.rows() == y.len(),
        "dimension mismatch: Φ is {}x{}, x has {}, y has {}",
        phi.rows(),
        phi.cols(),
        x.len(),
        y.len()
    );
    Ok(())
}

/// Gradient of the one-sided l1 penalty: `Φᵀ(sign(Φx) − y)`.
pub fn one_sided_gradient(phi: &MeasurementMatrix, x: &DVector<f64>, y: &BinaryMeasurements) -> Result<DVector<f64>> {
    check_dims(phi, x, y)?;
    let mut r = phi.as_matrix() * x;
    r.zip_apply(y.as_vector(), |ri, yi| *ri = sign(*ri) - yi);
    Ok(phi.as_matrix().tr_mul(&r))
}

/// `‖x‖₁ + λ Σᵢ h([diag(y)Φx]ᵢ)`.
pub fn objective(
    phi: &MeasurementMatrix,
    x: &DVector<f64>,
    y: &BinaryMeasurements,
    lambda: f64,
    penalty: Penalty,
) -> Result<f64> {
    check_dims(phi, x, y)?;
    let z = phi.as_matrix() * x;
    let consistency: f64 = z.iter().zip(y.as_vector().iter()).map(|(zi, yi)| penalty.eval(yi * zi)).sum();
    Ok(x.lp_norm(1) + lambda * consistency)
}

/// One FPC update: `u = S_ν(x − τ g(x))`, then `x ← u/‖u‖₂`.
///
/// Fails with [`Error::Degenerate`] when the shrinkage zeroes all of `u`.
pub fn fpc_step(
    state: &FpcState,
    phi: &MeasurementMatrix,
    y: &BinaryMeasurements,
    tau: f64,
    nu: f64,
) -> Result<FpcState> {
    check_dims(phi, &state.x, y)?;
    ensure!(nu >= 0.0, "threshold must be non-negative, got {nu}");
    let mut residual = DVector::zeros(phi.rows());
    let mut u = DVector::zeros(phi.cols());
    step_into(phi, y, &state.x, tau, nu, &mut residual, &mut u)?;
    Ok(FpcState { x: u, iteration: state.iteration + 1, lambda: state.lambda })
}

/// Writes the normalized update of `x` into `u`.
fn step_into(
    phi: &MeasurementMatrix,
    y: &BinaryMeasurements,
    x: &DVector<f64>,
    tau: f64,
    nu: f64,
    residual: &mut DVector<f64>,
    u: &mut DVector<f64>,
) -> Result<()> {
    let a = phi.as_matrix();
    residual.gemv(1.0, a, x, 0.0);
    residual.zip_apply(y.as_vector(), |ri, yi| *ri = sign(*ri) - yi);
    u.copy_from(x);
    u.gemv_tr(-tau, a, residual, 1.0);
    u.apply(|v| *v = shrink(*v, nu));
    let norm = u.norm();
    if norm == 0.0 {
        return Err(Error::Degenerate("iterate"));
    }
    u.unscale_mut(norm);
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct FpcSolution {
    /// Unit-norm estimate.
    pub x: DVector<f64>,
    /// Steps where shrinkage annihilated the update even at ν/2; the iterate
    /// was left unchanged there.
    pub degenerate_steps: usize,
}

/// Default warm start: `Φᵀy / ‖Φᵀy‖₂`.
pub fn default_initial(phi: &MeasurementMatrix, y: &BinaryMeasurements) -> Result<DVector<f64>> {
    let back = phi.as_matrix().tr_mul(y.as_vector());
    unit_normalize(&back).map_err(|_| Error::Degenerate("initial iterate"))
}

/// Runs `outer_iters` continuation stages of `inner_iters` steps.
pub fn solve(
    phi: &MeasurementMatrix,
    y: &BinaryMeasurements,
    config: &FpcConfig,
    x0: Option<&DVector<f64>>,
) -> Result<FpcSolution> {
    config.validate()?;
    ensure!(phi.rows() == y.len(), "measurement length {} does not match Φ rows {}", y.len(), phi.rows());
    let mut x = match x0 {
        Some(x0) => {
            ensure!(x0.len() == phi.cols(), "x0 length {} does not match Φ columns {}", x0.len(), phi.cols());
            unit_normalize(x0).map_err(|_| Error::Degenerate("initial iterate"))?
        }
        None => default_initial(phi, y)?,
    };
    let mut residual = DVector::zeros(phi.rows());
    let mut u = DVector::zeros(phi.cols());
    let mut degenerate_steps = 0;
    for stage in 0..config.outer_iters {
        let nu = config.tau / config.lambda_at(stage);
        for _ in 0..config.inner_iters {
            let ok = step_into(phi, y, &x, config.tau, nu, &mut residual, &mut u).is_ok()
                || step_into(phi, y, &x, config.tau, 0.5 * nu, &mut residual, &mut u).is_ok();
            if ok {
                std::mem::swap(&mut x, &mut u);
            } else {
                degenerate_steps += 1;
            }
        }
    }
    Ok(FpcSolution { x, degenerate_steps })
}
