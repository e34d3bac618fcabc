//! FPC iterations unrolled into a trainable network.
//!
//! Layer `r` computes
//!
//! ```text
//! x_r = S_{ν_r}( x_{r-1} + C·tanh(κ·B·x_{r-1}) + A·y )
//! ```
//!
//! and the network output is `x_R / ‖x_R‖₂`. Initialised with `A = τΦᵀ`,
//! `B = Φ`, `C = −τΦᵀ` and `ν_r = τ/λ`, a layer is one FPC step with `sign`
//! replaced by `tanh(κ·)`. The shortcut `x_{r-1} →` pre-activation makes each
//! layer a residual block.
//!
//! Gradients are computed by hand: [`UnfoldedModel::forward`] records a
//! [`ForwardTape`] and [`backward`] walks it in reverse.

mod format;

pub use format::{load_model, read_model, save_model, write_model, FORMAT_VERSION_PER_LAYER, FORMAT_VERSION_SHARED, MAGIC};

use nalgebra::{DMatrix, DVector};

use crate::error::{ensure, Error, Result};
use crate::fpc::shrink;
use crate::sensing::{BinaryMeasurements, MeasurementMatrix};

/// Weight matrices of one layer: `A` (N×M), `B` (M×N), `C` (N×M).
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
}

impl LayerWeights {
    pub fn zeros(m: usize, n: usize) -> Self {
        Self { a: DMatrix::zeros(n, m), b: DMatrix::zeros(m, n), c: DMatrix::zeros(n, m) }
    }

    fn same_shape(&self, other: &LayerWeights) -> bool {
        self.a.shape() == other.a.shape() && self.b.shape() == other.b.shape() && self.c.shape() == other.c.shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedModel {
    /// One entry when A, B, C are shared by all layers, otherwise one per layer.
    pub weights: Vec<LayerWeights>,
    /// Per-layer soft thresholds ν_1..ν_R.
    pub nu: Vec<f64>,
    /// Sharpness of the tanh surrogate for sign.
    pub kappa: f64,
    /// Normalize after every layer instead of only after the last.
    pub normalize_per_layer: bool,
}

impl UnfoldedModel {
    /// Network equivalent to `layers` FPC steps at step `tau` and weight `lambda`.
    pub fn init_from_fpc(phi: &MeasurementMatrix, tau: f64, lambda: f64, kappa: f64, layers: usize) -> Result<Self> {
        ensure!(tau > 0.0 && lambda > 0.0 && kappa > 0.0, "tau, lambda and kappa must be positive");
        ensure!(layers >= 1, "need at least one layer");
        let at = phi.as_matrix().transpose() * tau;
        let weights = LayerWeights { c: -&at, a: at, b: phi.as_matrix().clone() };
        Ok(Self { weights: vec![weights], nu: vec![tau / lambda; layers], kappa, normalize_per_layer: false })
    }

    /// Number of measurements M.
    pub fn measurements(&self) -> usize {
        self.weights[0].b.nrows()
    }

    /// Signal length N.
    pub fn signal_len(&self) -> usize {
        self.weights[0].b.ncols()
    }

    pub fn layers(&self) -> usize {
        self.nu.len()
    }

    pub fn is_per_layer(&self) -> bool {
        self.weights.len() > 1
    }

    #[inline]
    pub fn weights_for(&self, layer: usize) -> &LayerWeights {
        if self.weights.len() == 1 {
            &self.weights[0]
        } else {
            &self.weights[layer]
        }
    }

    /// Gives every layer its own copy of the shared weights.
    pub fn untie_weights(&mut self) {
        if self.weights.len() == 1 && self.layers() > 1 {
            self.weights = vec![self.weights[0].clone(); self.layers()];
        }
    }

    /// The first `layers` layers as a standalone model.
    pub fn truncated(&self, layers: usize) -> Result<Self> {
        ensure!(layers >= 1 && layers <= self.layers(), "cannot truncate {} layers to {layers}", self.layers());
        let weights = if self.is_per_layer() { self.weights[..layers].to_vec() } else { self.weights.clone() };
        Ok(Self { weights, nu: self.nu[..layers].to_vec(), kappa: self.kappa, normalize_per_layer: self.normalize_per_layer })
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.nu.is_empty(), "model needs at least one layer");
        ensure!(self.kappa > 0.0 && self.kappa.is_finite(), "kappa must be positive, got {}", self.kappa);
        ensure!(self.nu.iter().all(|v| *v >= 0.0 && v.is_finite()), "thresholds must be finite and >= 0");
        ensure!(
            self.weights.len() == 1 || self.weights.len() == self.layers(),
            "expected 1 or {} weight sets, got {}",
            self.layers(),
            self.weights.len()
        );
        let (m, n) = (self.measurements(), self.signal_len());
        for w in &self.weights {
            ensure!(
                w.a.shape() == (n, m) && w.b.shape() == (m, n) && w.c.shape() == (n, m),
                "inconsistent weight shapes for M={m}, N={n}"
            );
        }
        Ok(())
    }

    fn check_inputs(&self, y: &BinaryMeasurements, x0: Option<&DVector<f64>>) -> Result<()> {
        ensure!(y.len() == self.measurements(), "measurement length {} != model M {}", y.len(), self.measurements());
        if let Some(x0) = x0 {
            ensure!(x0.len() == self.signal_len(), "x0 length {} != model N {}", x0.len(), self.signal_len());
        }
        Ok(())
    }

    /// Runs all layers and records the intermediate values needed by
    /// [`backward`]. `x0` defaults to the zero vector.
    pub fn forward(&self, y: &BinaryMeasurements, x0: Option<&DVector<f64>>) -> Result<(DVector<f64>, ForwardTape)> {
        self.check_inputs(y, x0)?;
        let (m, n) = (self.measurements(), self.signal_len());
        let r_total = self.layers();
        let mut tape = ForwardTape {
            inputs: Vec::with_capacity(r_total),
            activations: Vec::with_capacity(r_total),
            pre: Vec::with_capacity(r_total),
            shrunk_norms: Vec::with_capacity(r_total),
            last: DVector::zeros(n),
            output: DVector::zeros(n),
        };
        let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
        let mut bias = DVector::zeros(n);
        for r in 0..r_total {
            let w = self.weights_for(r);
            if r == 0 || self.is_per_layer() {
                bias.gemv(1.0, &w.a, y.as_vector(), 0.0);
            }
            let mut t = DVector::zeros(m);
            t.gemv(self.kappa, &w.b, &x, 0.0);
            t.apply(|v| *v = v.tanh());
            let mut p = &x + &bias;
            p.gemv(1.0, &w.c, &t, 1.0);
            let mut s = p.map(|v| shrink(v, self.nu[r]));
            let norm = s.norm();
            if self.normalize_per_layer {
                if norm == 0.0 {
                    return Err(Error::Degenerate("output"));
                }
                s.unscale_mut(norm);
            }
            tape.inputs.push(std::mem::replace(&mut x, s));
            tape.activations.push(t);
            tape.pre.push(p);
            tape.shrunk_norms.push(norm);
        }
        let out = if self.normalize_per_layer {
            x.clone()
        } else {
            let norm = x.norm();
            if norm == 0.0 {
                return Err(Error::Degenerate("output"));
            }
            x.unscale(norm)
        };
        tape.last = x;
        tape.output = out.clone();
        Ok((out, tape))
    }

    /// Forward pass without recording.
    pub fn predict(&self, y: &BinaryMeasurements, x0: Option<&DVector<f64>>) -> Result<DVector<f64>> {
        self.forward(y, x0).map(|(out, _)| out)
    }
}

/// Values cached by the forward pass, one entry per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTape {
    /// Layer inputs `x_{r-1}`.
    pub inputs: Vec<DVector<f64>>,
    /// `tanh(κ·B·x_{r-1})`.
    pub activations: Vec<DVector<f64>>,
    /// Soft-threshold arguments.
    pub pre: Vec<DVector<f64>>,
    /// `‖S_ν(pre)‖₂` before any per-layer normalization.
    pub shrunk_norms: Vec<f64>,
    /// `x_R` before the final normalization.
    pub last: DVector<f64>,
    pub output: DVector<f64>,
}

impl ForwardTape {
    pub fn layers(&self) -> usize {
        self.inputs.len()
    }
}

/// Gradients mirroring [`UnfoldedModel`]'s trainable fields.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGradients {
    pub weights: Vec<LayerWeights>,
    pub nu: Vec<f64>,
}

impl ParameterGradients {
    pub fn zeros_like(model: &UnfoldedModel) -> Self {
        let (m, n) = (model.measurements(), model.signal_len());
        Self { weights: vec![LayerWeights::zeros(m, n); model.weights.len()], nu: vec![0.0; model.layers()] }
    }

    fn same_shape(&self, other: &ParameterGradients) -> bool {
        self.nu.len() == other.nu.len()
            && self.weights.len() == other.weights.len()
            && self.weights.iter().zip(&other.weights).all(|(a, b)| a.same_shape(b))
    }

    fn add_scaled(&mut self, other: &ParameterGradients, scale: f64) {
        for (w, o) in self.weights.iter_mut().zip(&other.weights) {
            w.a += scale * &o.a;
            w.b += scale * &o.b;
            w.c += scale * &o.c;
        }
        for (v, o) in self.nu.iter_mut().zip(&other.nu) {
            *v += scale * o;
        }
    }

    pub fn max_abs(&self) -> f64 {
        let w = self.weights.iter().map(|w| w.a.amax().max(w.b.amax()).max(w.c.amax())).fold(0.0, f64::max);
        self.nu.iter().fold(w, |acc, v| acc.max(v.abs()))
    }
}

/// Mean squared l2 error over a batch.
pub fn loss(outputs: &[DVector<f64>], truths: &[DVector<f64>]) -> Result<f64> {
    ensure!(!outputs.is_empty(), "empty batch");
    ensure!(outputs.len() == truths.len(), "batch sizes differ: {} vs {}", outputs.len(), truths.len());
    let mut total = 0.0;
    for (o, t) in outputs.iter().zip(truths) {
        ensure!(o.len() == t.len(), "vector lengths differ: {} vs {}", o.len(), t.len());
        total += (o - t).norm_squared();
    }
    Ok(total / outputs.len() as f64)
}

/// Which parameters a backward pass must produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GradientScope {
    /// Compute dA, dB, dC. When false they are left untouched.
    pub weights: bool,
    /// Layers below this index need no gradient; propagation stops there.
    pub lowest_layer: usize,
}

impl GradientScope {
    pub const ALL: GradientScope = GradientScope { weights: true, lowest_layer: 0 };

    /// Only `ν` of layers `>= layer`.
    pub fn thresholds_from(layer: usize) -> Self {
        GradientScope { weights: false, lowest_layer: layer }
    }
}

/// Gradient of `‖output − truth‖²` for one sample.
pub fn backward(
    model: &UnfoldedModel,
    tape: &ForwardTape,
    y: &BinaryMeasurements,
    truth: &DVector<f64>,
) -> Result<ParameterGradients> {
    let mut grads = ParameterGradients::zeros_like(model);
    backward_accumulate(model, tape, y, truth, GradientScope::ALL, 1.0, &mut grads)?;
    Ok(grads)
}

/// Adds `scale` times the single-sample gradient into `acc`.
pub fn backward_accumulate(
    model: &UnfoldedModel,
    tape: &ForwardTape,
    y: &BinaryMeasurements,
    truth: &DVector<f64>,
    scope: GradientScope,
    scale: f64,
    acc: &mut ParameterGradients,
) -> Result<()> {
    let (m, n) = (model.measurements(), model.signal_len());
    let r_total = model.layers();
    ensure!(tape.layers() == r_total, "tape has {} layers, model has {r_total}", tape.layers());
    ensure!(
        tape.inputs.iter().all(|x| x.len() == n) && tape.activations.iter().all(|t| t.len() == m),
        "tape shapes do not match the model"
    );
    ensure!(y.len() == m && truth.len() == n, "sample dimensions do not match the model");
    ensure!(
        acc.nu.len() == r_total && acc.weights.len() == model.weights.len(),
        "gradient accumulator does not match the model"
    );

    // d/d output of ‖out − truth‖²
    let g_out = (&tape.output - truth) * 2.0;
    let mut g_x = if model.normalize_per_layer {
        g_out
    } else {
        normalization_vjp(&tape.last, &tape.output, &g_out)?
    };

    let mut bias_grad = DVector::<f64>::zeros(n);
    let mut g_t = DVector::<f64>::zeros(m);
    for r in (scope.lowest_layer..r_total).rev() {
        let w = model.weights_for(r);
        let nu = model.nu[r];
        let g_s = if model.normalize_per_layer {
            let norm = tape.shrunk_norms[r];
            let x_hat = if r + 1 < r_total { &tape.inputs[r + 1] } else { &tape.output };
            normalization_vjp_with_norm(norm, x_hat, &g_x)?
        } else {
            g_x
        };

        // Through the soft threshold: pass-through off the dead zone, and
        // ∂S/∂ν = −sign(p) there. The kink itself gets 0.
        let pre = &tape.pre[r];
        let mut g_p = g_s;
        let mut d_nu = 0.0;
        for (gi, pi) in g_p.iter_mut().zip(pre.iter()) {
            if pi.abs() > nu {
                d_nu -= pi.signum() * *gi;
            } else {
                *gi = 0.0;
            }
        }
        acc.nu[r] += scale * d_nu;

        if r == scope.lowest_layer && !scope.weights {
            break;
        }

        let t = &tape.activations[r];
        g_t.gemv_tr(1.0, &w.c, &g_p, 0.0);
        // tanh'(κq)·κ
        g_t.zip_apply(t, |g, ti| *g *= model.kappa * (1.0 - ti * ti));

        let widx = if model.is_per_layer() { r } else { 0 };
        if scope.weights {
            let dw = &mut acc.weights[widx];
            dw.c.ger(scale, &g_p, t, 1.0);
            dw.b.ger(scale, &g_t, &tape.inputs[r], 1.0);
            if model.is_per_layer() {
                dw.a.ger(scale, &g_p, y.as_vector(), 1.0);
            } else {
                bias_grad += &g_p;
            }
        }

        // Residual path plus the path through B.
        let mut g_prev = g_p;
        g_prev.gemv_tr(1.0, &w.b, &g_t, 1.0);
        g_x = g_prev;
    }
    if scope.weights && !model.is_per_layer() {
        acc.weights[0].a.ger(scale, &bias_grad, y.as_vector(), 1.0);
    }
    Ok(())
}

/// Vector-Jacobian product of `x ↦ x/‖x‖`: `(I − x̂x̂ᵀ)g / ‖x‖`.
fn normalization_vjp(x: &DVector<f64>, x_hat: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    normalization_vjp_with_norm(x.norm(), x_hat, g)
}

fn normalization_vjp_with_norm(norm: f64, x_hat: &DVector<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    if norm < 1e-12 {
        return Err(Error::Degenerate("output"));
    }
    let proj = x_hat.dot(g);
    Ok((g - x_hat * proj) / norm)
}

/// Entry-wise mean of per-sample gradients, summed in index order.
pub fn accumulate(batch: &[ParameterGradients]) -> Result<ParameterGradients> {
    let first = batch.first().ok_or_else(|| Error::invalid("empty gradient batch"))?;
    ensure!(batch.iter().all(|g| g.same_shape(first)), "gradient shapes differ within the batch");
    let mut out = first.clone();
    for g in &batch[1..] {
        out.add_scaled(g, 1.0);
    }
    let inv = 1.0 / batch.len() as f64;
    for w in &mut out.weights {
        w.a *= inv;
        w.b *= inv;
        w.c *= inv;
    }
    out.nu.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// One training sample: measurements and unit-norm target.
pub type Sample = (BinaryMeasurements, DVector<f64>);

/// Number of samples whose gradients are summed together before partial sums
/// are combined. Fixed so results do not depend on the thread count.
const CHUNK: usize = 8;

/// Gradient and loss of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub grads: ParameterGradients,
    pub mean_loss: f64,
    /// Samples whose output collapsed to zero. They count with loss `‖x‖²`
    /// and contribute no gradient.
    pub degenerate: usize,
}

/// Mean loss and mean gradient over `samples`, with `x0 = 0`.
pub fn batch_gradients(model: &UnfoldedModel, samples: &[&Sample], scope: GradientScope) -> Result<BatchGradients> {
    ensure!(!samples.is_empty(), "empty batch");
    let chunks = samples.len().div_ceil(CHUNK);
    let partials = crate::par::map_indexed(chunks, |c| -> Result<(ParameterGradients, f64, usize)> {
        let mut acc = ParameterGradients::zeros_like(model);
        let mut loss = 0.0;
        let mut degenerate = 0;
        for (y, truth) in samples[c * CHUNK..((c + 1) * CHUNK).min(samples.len())].iter().copied() {
            let step = model
                .forward(y, None)
                .and_then(|(out, tape)| backward_accumulate(model, &tape, y, truth, scope, 1.0, &mut acc).map(|_| out));
            match step {
                Ok(out) => loss += (&out - truth).norm_squared(),
                Err(Error::Degenerate(_)) => {
                    loss += truth.norm_squared();
                    degenerate += 1;
                }
                Err(e) => return Err(e),
            }
        }
        Ok((acc, loss, degenerate))
    });
    let mut iter = partials.into_iter();
    let (mut total, mut loss, mut degenerate) = iter.next().expect("non-empty")?;
    for part in iter {
        let (g, l, d) = part?;
        total.add_scaled(&g, 1.0);
        loss += l;
        degenerate += d;
    }
    let inv = 1.0 / samples.len() as f64;
    if scope.weights {
        for w in &mut total.weights {
            w.a *= inv;
            w.b *= inv;
            w.c *= inv;
        }
    }
    total.nu.iter_mut().for_each(|v| *v *= inv);
    Ok(BatchGradients { grads: total, mean_loss: loss * inv, degenerate })
}

/// Squared error of one sample; a collapsed output counts as the zero vector.
pub fn sample_loss(model: &UnfoldedModel, sample: &Sample) -> Result<f64> {
    let (y, truth) = sample;
    match model.predict(y, None) {
        Ok(out) => Ok((&out - truth).norm_squared()),
        Err(Error::Degenerate(_)) => Ok(truth.norm_squared()),
        Err(e) => Err(e),
    }
}

/// Mean loss of the model over `samples` with `x0 = 0`.
pub fn dataset_loss(model: &UnfoldedModel, samples: &[Sample]) -> Result<f64> {
    ensure!(!samples.is_empty(), "empty dataset");
    let losses = crate::par::map_indexed(samples.len(), |i| sample_loss(model, &samples[i]));
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests;
