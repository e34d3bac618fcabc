//! Training for [`UnfoldedModel`].
//!
//! Layers are grown one at a time. Entering stage `r`, `ν_r` starts from the
//! learned `ν_{r-1}`; a layer-wise phase trains `ν_r` alone, then a global
//! phase trains every parameter of the first `r` layers. The tanh sharpness κ
//! follows a schedule keyed to the global epoch so the surrogate starts smooth
//! and approaches `sign` late in training.

use std::fmt;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::RngSeed;
use crate::unfolded::{batch_gradients, BatchGradients, dataset_loss, GradientScope, ParameterGradients, Sample, UnfoldedModel};

/// Piecewise-constant κ keyed by global epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct KappaSchedule(pub Vec<(usize, f64)>);

impl KappaSchedule {
    /// `start` at epoch 0, doubling every `every` epochs until `cap`.
    pub fn doubling(start: f64, every: usize, cap: f64) -> Self {
        let every = every.max(1);
        let mut points = vec![(0, start.min(cap))];
        let mut kappa = start;
        let mut epoch = 0;
        while kappa < cap {
            kappa = (kappa * 2.0).min(cap);
            epoch += every;
            points.push((epoch, kappa));
        }
        Self(points)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(!self.0.is_empty(), "kappa schedule is empty");
        ensure!(self.0[0].0 == 0, "kappa schedule must start at epoch 0");
        ensure!(self.0.iter().all(|(_, k)| *k > 0.0 && k.is_finite()), "kappa values must be positive");
        ensure!(
            self.0.windows(2).all(|w| w[1].0 > w[0].0 && w[1].1 >= w[0].1),
            "kappa schedule must be strictly increasing in epoch and non-decreasing in kappa"
        );
        Ok(())
    }

    pub fn kappa_at(&self, epoch: usize) -> f64 {
        self.0.iter().take_while(|(e, _)| *e <= epoch).last().map_or(self.0[0].1, |p| p.1)
    }

    pub fn last(&self) -> f64 {
        self.0.last().map_or(1.0, |p| p.1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// How parameters are shared across layers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieMode {
    /// One A, B, C for all layers; a threshold per layer.
    #[default]
    TiedAbcUntiedNu,
    /// Every layer owns its A, B, C and threshold.
    UntiedAll,
    /// One A, B, C and a single threshold shared by all layers.
    TiedAll,
}

impl TieMode {
    pub const ALL: [TieMode; 3] = [TieMode::TiedAbcUntiedNu, TieMode::UntiedAll, TieMode::TiedAll];

    pub fn label(self) -> &'static str {
        match self {
            TieMode::TiedAbcUntiedNu => "tied_abc_untied_nu",
            TieMode::UntiedAll => "untied_all",
            TieMode::TiedAll => "tied_all",
        }
    }
}

impl fmt::Display for TieMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Sharing rules the optimizer enforces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TieConstraint {
    pub mode: TieMode,
}

impl TieConstraint {
    pub fn shares_weights(&self) -> bool {
        self.mode != TieMode::UntiedAll
    }

    pub fn shares_threshold(&self) -> bool {
        self.mode == TieMode::TiedAll
    }
}

/// Prepares `model` for training under `mode`: per-layer weight copies for
/// [`TieMode::UntiedAll`], a common threshold for [`TieMode::TiedAll`].
pub fn tie_variant(mut model: UnfoldedModel, mode: TieMode) -> (UnfoldedModel, TieConstraint) {
    match mode {
        TieMode::UntiedAll => model.untie_weights(),
        TieMode::TiedAll => {
            let first = model.nu[0];
            model.nu.iter_mut().for_each(|v| *v = first);
        }
        TieMode::TiedAbcUntiedNu => {}
    }
    (model, TieConstraint { mode })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_step: f64,
    /// Per-epoch step multiplier, restarted at every phase.
    pub step_decay: f64,
    pub epochs_per_stage: usize,
    pub kappa_schedule: KappaSchedule,
    pub adam: AdamParams,
    pub tie: TieMode,
    pub seed: RngSeed,
}

impl TrainConfig {
    /// Defaults for a given stage length: κ from 5, doubling every half stage,
    /// capped at 200.
    pub fn with_epochs(epochs_per_stage: usize) -> Self {
        Self {
            batch_size: 32,
            base_step: 1e-3,
            step_decay: 0.95,
            epochs_per_stage,
            kappa_schedule: KappaSchedule::doubling(5.0, epochs_per_stage / 2, 200.0),
            adam: AdamParams::default(),
            tie: TieMode::default(),
            seed: RngSeed(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure!(self.base_step > 0.0, "base_step must be positive");
        ensure!(self.step_decay > 0.0 && self.step_decay <= 1.0, "step_decay must lie in (0, 1]");
        ensure!(self.epochs_per_stage >= 1, "epochs_per_stage must be >= 1");
        let a = &self.adam;
        ensure!(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0, "ADAM betas must lie in (0, 1)");
        ensure!(a.epsilon > 0.0, "ADAM epsilon must be positive");
        self.kappa_schedule.validate()
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_epochs(40)
    }
}

/// (y, unit-norm x) pairs.
#[derive(Clone, Debug, Default)]
pub struct TrainingDataset {
    pub samples: Vec<Sample>,
}

impl TrainingDataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check(&self, model: &UnfoldedModel, batch_size: usize) -> Result<()> {
        ensure!(
            self.len() >= batch_size,
            "dataset has {} samples, fewer than the batch size {batch_size}",
            self.len()
        );
        ensure!(
            self.samples.iter().all(|(y, x)| y.len() == model.measurements() && x.len() == model.signal_len()),
            "dataset dimensions do not match the model (M={}, N={})",
            model.measurements(),
            model.signal_len()
        );
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub t: u64,
}

impl Moments {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { m: DMatrix::zeros(rows, cols), v: DMatrix::zeros(rows, cols), t: 0 }
    }

    /// One bias-corrected ADAM step of `param` along `grad`.
    fn step(&mut self, param: &mut DMatrix<f64>, grad: &DMatrix<f64>, step: f64, p: &AdamParams) {
        self.t += 1;
        let c1 = 1.0 - p.beta1.powi(self.t as i32);
        let c2 = 1.0 - p.beta2.powi(self.t as i32);
        for ((w, g), (m, v)) in param.iter_mut().zip(grad.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = p.beta1 * *m + (1.0 - p.beta1) * g;
            *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
            *w -= step * (*m / c1) / ((*v / c2).sqrt() + p.epsilon);
        }
    }
}

/// First/second moments per parameter block. Each block keeps its own step
/// count, so a threshold that joins late gets a fresh bias correction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub weights: Vec<[Moments; 3]>,
    pub nu: Vec<Moments>,
}

impl AdamState {
    pub fn new(model: &UnfoldedModel) -> Self {
        let (m, n) = (model.measurements(), model.signal_len());
        let set = || [Moments::zeros(n, m), Moments::zeros(m, n), Moments::zeros(n, m)];
        Self { weights: (0..model.weights.len()).map(|_| set()).collect(), nu: (0..model.layers()).map(|_| Moments::zeros(1, 1)).collect() }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer(w, self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Which parameters an update may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub weights: bool,
    /// Thresholds of layers `nu_from..nu_to`.
    pub nu_from: usize,
    pub nu_to: usize,
}

/// ADAM step on the trainable parameters of `model`; thresholds are clamped
/// at zero afterwards. Under a shared threshold the per-layer gradients are
/// summed and one value is written back to every layer.
pub fn adam_update(
    model: &mut UnfoldedModel,
    grads: &ParameterGradients,
    state: &mut AdamState,
    step: f64,
    params: &AdamParams,
    trainable: Trainable,
    tie: TieConstraint,
) -> Result<()> {
    ensure!(
        grads.nu.len() == model.layers() && grads.weights.len() == model.weights.len(),
        "gradient shapes do not match the model"
    );
    ensure!(
        state.nu.len() >= model.layers() && state.weights.len() >= model.weights.len(),
        "optimizer state is smaller than the model"
    );
    ensure!(trainable.nu_from <= trainable.nu_to && trainable.nu_to <= model.layers(), "bad threshold range");

    if trainable.weights {
        for ((w, g), mom) in model.weights.iter_mut().zip(&grads.weights).zip(state.weights.iter_mut()) {
            ensure!(g.a.shape() == w.a.shape() && g.b.shape() == w.b.shape(), "gradient shapes do not match the model");
            mom[0].step(&mut w.a, &g.a, step, params);
            mom[1].step(&mut w.b, &g.b, step, params);
            mom[2].step(&mut w.c, &g.c, step, params);
        }
    }

    if trainable.nu_from < trainable.nu_to {
        if tie.shares_threshold() {
            let g: f64 = grads.nu.iter().sum();
            let mut value = DMatrix::from_element(1, 1, model.nu[0]);
            state.nu[0].step(&mut value, &DMatrix::from_element(1, 1, g), step, params);
            let v = value[(0, 0)].max(0.0);
            model.nu.iter_mut().for_each(|n| *n = v);
        } else {
            for r in trainable.nu_from..trainable.nu_to {
                let mut value = DMatrix::from_element(1, 1, model.nu[r]);
                state.nu[r].step(&mut value, &DMatrix::from_element(1, 1, grads.nu[r]), step, params);
                model.nu[r] = value[(0, 0)].max(0.0);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Only the newest threshold trains.
    LayerWise,
    /// Every parameter of the active layers trains.
    Global,
    /// Full-dataset loss of the finished model.
    Final,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::LayerWise => "layerwise",
            Phase::Global => "global",
            Phase::Final => "final",
        }
    }
}

/// One training-log row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: usize,
    pub phase: Phase,
    pub kappa: f64,
    pub step: f64,
    pub mean_loss: f64,
}

pub const LOG_HEADER: &str = "epoch,stage,phase,kappa,step,mean_loss";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{},{}", self.epoch, self.stage, self.phase.label(), self.kappa, self.step, self.mean_loss)
    }
}

pub fn write_log<W: Write>(records: &[EpochRecord], mut w: W) -> Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Full-dataset loss around a global phase, both measured at the κ in force
/// when the phase ends.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageCheck {
    pub stage: usize,
    pub kappa: f64,
    pub loss_before_global: f64,
    pub loss_after_global: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub model: UnfoldedModel,
    pub state: AdamState,
    pub log: Vec<EpochRecord>,
    /// The r-layer model after stage r, for r = 1..R.
    pub stage_models: Vec<UnfoldedModel>,
    pub stage_checks: Vec<StageCheck>,
    /// Loss of the untrained model at the final κ.
    pub initial_loss: f64,
    /// Loss of the trained model at the final κ.
    pub final_loss: f64,
    /// Training samples whose output collapsed to zero, summed over all batches.
    pub degenerate_samples: usize,
}

/// Mutable training context shared by the stages of one run.
pub struct Trainer<'a> {
    pub config: &'a TrainConfig,
    pub dataset: &'a TrainingDataset,
    pub tie: TieConstraint,
    pub state: AdamState,
    pub epoch: usize,
    pub log: Vec<EpochRecord>,
    pub degenerate_samples: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &UnfoldedModel, dataset: &'a TrainingDataset, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        dataset.check(model, config.batch_size)?;
        Ok(Self { config, dataset, tie: TieConstraint { mode: config.tie }, state: AdamState::new(model), epoch: 0, log: Vec::new(), degenerate_samples: 0 })
    }

    fn run_phase(&mut self, active: &mut UnfoldedModel, stage: usize, phase: Phase) -> Result<()> {
        let r = active.layers();
        let (scope, trainable) = match phase {
            Phase::LayerWise => {
                let from = if self.tie.shares_threshold() { 0 } else { r - 1 };
                (GradientScope::thresholds_from(from), Trainable { weights: false, nu_from: from, nu_to: r })
            }
            _ => (GradientScope::ALL, Trainable { weights: true, nu_from: 0, nu_to: r }),
        };
        let n = self.dataset.len();
        let mut order: Vec<usize> = (0..n).collect();
        for local in 0..self.config.epochs_per_stage {
            active.kappa = self.config.kappa_schedule.kappa_at(self.epoch);
            let step = self.config.base_step * self.config.step_decay.powi(local as i32);
            let mut rng = self.config.seed.derive_named("shuffle", self.epoch as u64).rng();
            order.shuffle(&mut rng);
            let mut loss_sum = 0.0;
            for chunk in order.chunks(self.config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &self.dataset.samples[i]).collect();
                let BatchGradients { grads, mean_loss: loss, degenerate } = batch_gradients(active, &batch, scope)?;
                self.degenerate_samples += degenerate;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss at epoch {}", self.epoch)));
                }
                loss_sum += loss * batch.len() as f64;
                adam_update(active, &grads, &mut self.state, step, &self.config.adam, trainable, self.tie)?;
            }
            self.log.push(EpochRecord {
                epoch: self.epoch,
                stage,
                phase,
                kappa: active.kappa,
                step,
                mean_loss: loss_sum / n as f64,
            });
            self.epoch += 1;
        }
        Ok(())
    }

    /// Trains stage `stage` (1-based) of `model` in place: the layer-wise phase
    /// on ν_stage, then the global phase on everything in layers 1..=stage.
    pub fn train_stage(&mut self, model: &mut UnfoldedModel, stage: usize) -> Result<StageCheck> {
        ensure!(stage >= 1 && stage <= model.layers(), "stage {stage} outside 1..={}", model.layers());
        if stage > 1 && !self.tie.shares_threshold() {
            model.nu[stage - 1] = model.nu[stage - 2];
        }
        let mut active = model.truncated(stage)?;
        self.run_phase(&mut active, stage, Phase::LayerWise)?;

        let kappa_end = self.config.kappa_schedule.kappa_at(self.epoch + self.config.epochs_per_stage - 1);
        let before = with_kappa(&active, kappa_end);
        let loss_before_global = dataset_loss(&before, &self.dataset.samples)?;
        self.run_phase(&mut active, stage, Phase::Global)?;
        let loss_after_global = dataset_loss(&with_kappa(&active, kappa_end), &self.dataset.samples)?;

        if model.is_per_layer() {
            model.weights[..stage].clone_from_slice(&active.weights);
        } else {
            model.weights[0] = active.weights[0].clone();
        }
        if self.tie.shares_threshold() {
            let v = active.nu[0];
            model.nu.iter_mut().for_each(|n| *n = v);
        } else {
            model.nu[..stage].copy_from_slice(&active.nu);
        }
        model.kappa = active.kappa;
        Ok(StageCheck { stage, kappa: kappa_end, loss_before_global, loss_after_global })
    }
}

fn with_kappa(model: &UnfoldedModel, kappa: f64) -> UnfoldedModel {
    let mut m = model.clone();
    m.kappa = kappa;
    m
}

/// Layer-wise progressive training of all layers of `model`.
pub fn train(model: UnfoldedModel, dataset: &TrainingDataset, config: &TrainConfig) -> Result<TrainReport> {
    let (mut model, _) = tie_variant(model, config.tie);
    let final_kappa = config.kappa_schedule.last();
    let initial_loss = dataset_loss(&with_kappa(&model, final_kappa), &dataset.samples)?;
    let mut trainer = Trainer::new(&model, dataset, config)?;
    let mut stage_models = Vec::with_capacity(model.layers());
    let mut stage_checks = Vec::with_capacity(model.layers());
    for stage in 1..=model.layers() {
        stage_checks.push(trainer.train_stage(&mut model, stage)?);
        let mut snapshot = model.truncated(stage)?;
        snapshot.kappa = final_kappa;
        stage_models.push(snapshot);
    }
    model.kappa = final_kappa;
    let final_loss = dataset_loss(&model, &dataset.samples)?;
    let degenerate_samples = trainer.degenerate_samples;
    let mut log = trainer.log;
    log.push(EpochRecord {
        epoch: trainer.epoch,
        stage: model.layers(),
        phase: Phase::Final,
        kappa: final_kappa,
        step: 0.0,
        mean_loss: final_loss,
    });
    Ok(TrainReport { model, state: trainer.state, log, stage_models, stage_checks, initial_loss, final_loss, degenerate_samples })
}
