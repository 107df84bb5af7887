//! Losses, the Adam optimizer, learning-rate scheduling, early stopping,
//! epoch day-sampling, and the end-to-end training driver.
//!
//! Training follows a fixed recipe: every epoch samples a fraction of
//! the training days, walks their configured target slots one full-frame
//! example at a time (one optimizer step per example), evaluates the
//! validation MSE over all validation examples, decays the learning rate
//! by a fixed factor once validation stops improving for more than
//! `plateau_patience` epochs, and stops early when validation has not
//! improved for more than `early_stop_patience` epochs. The returned
//! parameters are the ones from the best validation epoch, not the last.

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{make_example, MovieDataset, TrainingExample};
use crate::error::Error;
use crate::models::{
    displacement_input, frames_to_channels, init_masked, init_trb, occupancy_mask,
    target_occupancy_channels, BiasCombo, GridShape, MaskedParams, ModelParams, TrConfig,
    TrbParams,
};
use crate::tape::{Tape, BCE_EPS};
use crate::tensor::Tensor;
use crate::Result;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

// ── Losses (value level) ───────────────────────────────────────────────

/// Mean over all elements of squared differences.
pub fn mse_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mse_loss",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Mean squared difference over mask-1 elements; 0 when the mask is
/// empty.
pub fn masked_mse(pred: &Tensor, target: &Tensor, mask: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() || pred.shape() != mask.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_mse",
            expected: pred.shape().to_vec(),
            got: if pred.shape() != target.shape() {
                target.shape().to_vec()
            } else {
                mask.shape().to_vec()
            },
        });
    }
    let count: f64 = mask.data().iter().sum();
    if count == 0.0 {
        return Ok(0.0);
    }
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .zip(mask.data())
        .map(|((p, t), m)| m * (p - t) * (p - t))
        .sum::<f64>()
        / count)
}

/// Mean binary cross-entropy; predictions clamped to `[1e-7, 1 - 1e-7]`.
pub fn mask_cross_entropy(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::ShapeMismatch {
            op: "mask_cross_entropy",
            expected: pred.shape().to_vec(),
            got: target.shape().to_vec(),
        });
    }
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let pc = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            -(t * libm::log(pc) + (1.0 - t) * libm::log(1.0 - pc))
        })
        .sum::<f64>()
        / n)
}

// ── Adam ───────────────────────────────────────────────────────────────

/// First/second moment estimates per parameter tensor plus the step
/// counter. Constants are beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.m[i], &self.v[i])
    }
}

/// One bias-corrected Adam update, in place. `lr = 0` leaves parameters
/// untouched while still advancing the moment state.
pub fn adam_step(
    params: &mut [&mut Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if lr < 0.0 {
        return Err(Error::config("learning rate must be >= 0"));
    }
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::LengthMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let c1 = 1.0 - libm::pow(ADAM_BETA1, state.step as f64);
    let c2 = 1.0 - libm::pow(ADAM_BETA2, state.step as f64);

    for (i, param) in params.iter_mut().enumerate() {
        if param.shape() != grads[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: param.shape().to_vec(),
                got: grads[i].shape().to_vec(),
            });
        }
        if !grads[i].all_finite() {
            return Err(Error::NonFiniteGradient {
                param: names.get(i).cloned().unwrap_or_else(|| String::from("?")),
            });
        }
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = param.data_mut();
        for j in 0..p.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            if lr > 0.0 {
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= lr * m_hat / (libm::sqrt(v_hat) + ADAM_EPSILON);
            }
        }
    }
    Ok(())
}

// ── Schedules ──────────────────────────────────────────────────────────

/// Multiplies the learning rate by `factor` once the best validation
/// loss has gone unimproved for more than `patience` consecutive epochs
/// (strict improvement, zero tolerance). The no-improvement counter
/// resets after each decay.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    patience: usize,
    factor: f64,
    best: f64,
    streak: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr,
            patience,
            factor,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch's validation loss; returns the learning rate to
    /// use from the next epoch on.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best {
            self.best = val_loss;
            self.streak = 0;
        } else {
            self.streak += 1;
            if self.streak > self.patience {
                self.lr *= self.factor;
                self.streak = 0;
            }
        }
        self.lr
    }
}

/// Folds a whole validation history through [`PlateauScheduler`] and
/// returns the final learning rate.
pub fn plateau_schedule(val_history: &[f64], patience: usize, factor: f64, lr: f64) -> f64 {
    let mut sched = PlateauScheduler::new(lr, patience, factor);
    for &v in val_history {
        sched.observe(v);
    }
    sched.lr()
}

/// Stops training once validation has gone unimproved for more than
/// `patience` epochs (strict improvement).
#[derive(Clone, Debug)]
pub struct EarlyStop {
    patience: usize,
    best: f64,
    streak: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop {
            patience,
            best: f64::INFINITY,
            streak: 0,
        }
    }

    /// Feeds one epoch's validation loss; true means stop after this
    /// epoch.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.streak = 0;
            false
        } else {
            self.streak += 1;
            self.streak > self.patience
        }
    }
}

/// Uniform sample of `max(1, round(fraction * N))` days without
/// replacement.
pub fn sample_epoch_days(
    all_days: &[usize],
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if all_days.is_empty() {
        return Err(Error::config("cannot sample from an empty day list"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config("day fraction must lie in (0, 1]"));
    }
    let k = (libm::round(fraction * all_days.len() as f64) as usize).max(1);
    let mut days = all_days.to_vec();
    days.shuffle(rng);
    days.truncate(k);
    Ok(days)
}

// ── Training driver ────────────────────────────────────────────────────

/// Hyperparameters of one training run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Fraction of training days sampled per epoch, in (0, 1].
    pub epoch_day_fraction: f64,
    pub plateau_patience: usize,
    /// Multiplier applied on decay, in (0, 1).
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-3,
            epoch_day_fraction: 0.2,
            plateau_patience: 2,
            plateau_factor: 0.2,
            early_stop_patience: 5,
            max_epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::config("learning_rate must be > 0"));
        }
        if !(self.epoch_day_fraction > 0.0 && self.epoch_day_fraction <= 1.0) {
            return Err(Error::config("epoch_day_fraction must lie in (0, 1]"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("patience values must be >= 1"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor must lie in (0, 1)"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

/// Which model to train.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelInit {
    /// Temporal regression, optionally with bias tables.
    Trb { config: TrConfig, combo: BiasCombo },
    /// Displacement-masked variant.
    Masked { config: TrConfig, combo: BiasCombo },
}

impl ModelInit {
    pub fn config(&self) -> &TrConfig {
        match self {
            ModelInit::Trb { config, .. } | ModelInit::Masked { config, .. } => config,
        }
    }

    pub fn build(&self, grid: GridShape, n_hour_bins: usize, seed: u64) -> Result<ModelParams> {
        match *self {
            ModelInit::Trb { config, combo } => Ok(ModelParams::Trb(init_trb(
                config,
                grid,
                n_hour_bins,
                combo,
                seed,
            )?)),
            ModelInit::Masked { config, combo } => Ok(ModelParams::Masked(init_masked(
                config,
                grid,
                n_hour_bins,
                combo,
                seed,
            )?)),
        }
    }
}

/// One epoch's log entry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Learning rate used for this epoch's updates.
    pub lr: f64,
    pub is_best: bool,
}

/// Per-epoch training history.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs
            .get(self.best_epoch)
            .map(|e| e.val_mse)
            .unwrap_or(f64::INFINITY)
    }

    /// `epoch,train_mse,val_mse,lr,is_best` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,lr,is_best\n");
        for e in &self.epochs {
            out.push_str(&alloc::format!(
                "{},{:.10e},{:.10e},{:.10e},{}\n",
                e.epoch,
                e.train_mse,
                e.val_mse,
                e.lr,
                e.is_best
            ));
        }
        out
    }
}

fn validate_slots(dataset: &MovieDataset, slots: &[usize], history: usize) -> Result<()> {
    if slots.is_empty() {
        return Err(Error::config("no target slots configured"));
    }
    let fpd = dataset.frames_per_day();
    for &s in slots {
        if s < history || s + crate::data::TARGET_FRAMES > fpd {
            return Err(Error::config(alloc::format!(
                "target slot {s} cannot host history {history} plus 3 targets in a {fpd}-frame day"
            )));
        }
    }
    Ok(())
}

/// Trains a model on `(train_days, val_days)` of `dataset`, predicting
/// at `target_slots`, and returns the parameters of the best validation
/// epoch together with the full log.
pub fn train(
    init: ModelInit,
    dataset: &MovieDataset,
    train_days: &[usize],
    val_days: &[usize],
    target_slots: &[usize],
    n_hour_bins: usize,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train_days.is_empty() || val_days.is_empty() {
        return Err(Error::config("train and validation splits must be non-empty"));
    }
    let history = init.config().history;
    validate_slots(dataset, target_slots, history)?;
    let n_days = dataset.n_days();
    if let Some(&bad) = train_days.iter().chain(val_days).find(|&&d| d >= n_days) {
        return Err(Error::config(alloc::format!(
            "day {bad} outside dataset with {n_days} days"
        )));
    }

    let grid = GridShape::of(dataset);
    let mut params = init.build(grid, n_hour_bins, cfg.seed)?;
    let mut adam = AdamState::new(&params.param_tensors());
    let names = params.param_names();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed_da75));

    let mut plateau =
        PlateauScheduler::new(cfg.learning_rate, cfg.plateau_patience, cfg.plateau_factor);
    let mut early = EarlyStop::new(cfg.early_stop_patience);

    let mut log = TrainLog::default();
    let mut best_val = f64::INFINITY;
    let mut best_params = params.clone();

    for epoch in 0..cfg.max_epochs {
        let lr = plateau.lr();
        let days = sample_epoch_days(train_days, cfg.epoch_day_fraction, &mut rng)?;

        let mut train_sum = 0.0;
        let mut steps = 0usize;
        for &day in &days {
            for &slot in target_slots {
                let example = make_example(dataset, day, slot, history, n_hour_bins)?;
                let loss = training_step(&mut params, &example, &names, &mut adam, lr)
                    .map_err(|e| diverged(e, epoch))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                train_sum += loss;
                steps += 1;
            }
        }
        let train_mse = train_sum / steps.max(1) as f64;

        let mut val_sum = 0.0;
        let mut val_count = 0usize;
        for &day in val_days {
            for &slot in target_slots {
                let example = make_example(dataset, day, slot, history, n_hour_bins)?;
                let pred = params.predict(&example)?;
                val_sum += mse_loss(&pred, &example.targets)?;
                val_count += 1;
            }
        }
        let val_mse = val_sum / val_count.max(1) as f64;
        if !val_mse.is_finite() {
            return Err(Error::Diverged { epoch });
        }

        let is_best = val_mse < best_val;
        if is_best {
            best_val = val_mse;
            best_params = params.clone();
            log.best_epoch = epoch;
        }
        log.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            lr,
            is_best,
        });

        plateau.observe(val_mse);
        if early.observe(val_mse) {
            break;
        }
    }

    Ok((best_params, log))
}

fn diverged(e: Error, epoch: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch },
        other => other,
    }
}

/// Builds the full training objective of one example on a fresh tape.
/// Returns the tape, the loss node, and the parameter leaves in
/// declaration order (`None` for inactive tables).
fn build_loss_tape(
    params: &ModelParams,
    example: &TrainingExample,
) -> Result<(Tape, crate::tape::Var, Vec<Option<crate::tape::Var>>)> {
    let target_ch = frames_to_channels(&example.targets)?;
    let mut tape = Tape::new();
    match params {
        ModelParams::Trb(p) => {
            let vars = p.register(&mut tape);
            let input = tape.leaf(frames_to_channels(&example.history)?);
            let out = p.forward(&mut tape, &vars, input, example.clock)?;
            let loss = tape.mse(out, &target_ch)?;
            Ok((tape, loss, TrbParams::ordered_vars(&vars)))
        }
        ModelParams::Masked(p) => {
            let vars = p.register(&mut tape);
            let value_input = tape.leaf(frames_to_channels(&example.history)?);
            let disp_input = tape.leaf(displacement_input(&example.history)?);
            let source = occupancy_mask(
                &example.history,
                example.history.shape()[0] - 1,
                p.volume_channel,
            )?;
            let fwd =
                p.forward(&mut tape, &vars, value_input, disp_input, &source, example.clock)?;

            // Three losses with unit weights: MSE on the modulated
            // prediction, cross-entropy on the warped mask against the
            // first target frame's occupancy, masked MSE on the raw
            // values where the targets carry volume.
            let final_loss = tape.mse(fwd.y_final, &target_ch)?;
            let true_mask = occupancy_mask(&example.targets, 0, p.volume_channel)?;
            let mask_loss = tape.binary_cross_entropy(fwd.mask_warped, &true_mask)?;
            let volume_mask = target_occupancy_channels(&example.targets, p.volume_channel)?;
            let value_loss = tape.masked_mse(fwd.y_value, &target_ch, &volume_mask)?;
            let partial = tape.add(final_loss, mask_loss)?;
            let loss = tape.add(partial, value_loss)?;
            Ok((tape, loss, MaskedParams::ordered_vars(&vars)))
        }
    }
}

/// The training objective of one example at fixed parameters.
pub fn example_loss(params: &ModelParams, example: &TrainingExample) -> Result<f64> {
    let (tape, loss, _) = build_loss_tape(params, example)?;
    Ok(tape.value(loss).item())
}

/// Training objective plus its gradients, ordered like
/// `params.param_tensors()` (zeros for inactive tables).
pub fn example_loss_gradients(
    params: &ModelParams,
    example: &TrainingExample,
) -> Result<(f64, Vec<Tensor>)> {
    let (tape, loss, vars) = build_loss_tape(params, example)?;
    let grads = tape.reverse_gradients(loss)?;
    let ordered = vars
        .iter()
        .zip(params.param_tensors())
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    Ok((tape.value(loss).item(), ordered))
}

/// One forward/backward/update step; returns the training loss.
fn training_step(
    params: &mut ModelParams,
    example: &TrainingExample,
    names: &[String],
    adam: &mut AdamState,
    lr: f64,
) -> Result<f64> {
    let (loss_value, grads) = example_loss_gradients(params, example)?;
    adam_step(&mut params.param_tensors_mut(), names, &grads, adam, lr)?;
    Ok(loss_value)
}
