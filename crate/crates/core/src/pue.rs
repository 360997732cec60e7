//! Crafting class-wise unlearnable noise under random weight perturbations.
//!
//! The defender alternates between fitting a surrogate on the perturbed data
//! and moving the class-wise noise `delta` to lower that surrogate's loss
//! (a min-min problem). In the PUE modes the surrogate's weights are jittered
//! with Gaussian noise whose standard deviation ramps through
//! `s, 2s, ..., S`, so the noise suppresses accuracy across a whole weight
//! neighbourhood rather than at a single point.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{apply_perturbation, ClasswisePerturbation, LabeledDataset};
use crate::error::{ensure_len, Error, Result};
use crate::nn::{self, add_assign, init_params, BatchSampler, MomentumState, ModelSpec, ParamVector, TrainConfig, Want};
use crate::{par, rng, smoothing};

/// Which loops see weight noise.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CraftMode {
    /// Classic error-minimizing noise, no weight noise anywhere.
    Emn,
    /// Weight noise during surrogate updates only.
    PueB,
    /// Weight noise during surrogate and noise updates.
    Pue,
}

impl CraftMode {
    /// Display name, e.g. `PUE-10` for `Pue` with ten draws per noise update.
    pub fn label(self, u_perturb: usize) -> String {
        match self {
            CraftMode::Emn => "EMN".into(),
            CraftMode::PueB => "PUE-B".into(),
            CraftMode::Pue => format!("PUE-{u_perturb}"),
        }
    }

    fn noisy_surrogate(self) -> bool {
        self != CraftMode::Emn
    }

    fn noisy_delta(self) -> bool {
        self == CraftMode::Pue
    }
}

impl fmt::Display for CraftMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CraftMode::Emn => "emn",
            CraftMode::PueB => "pue-b",
            CraftMode::Pue => "pue",
        })
    }
}

impl FromStr for CraftMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "emn" => Ok(CraftMode::Emn),
            "pue-b" | "pue_b" | "pueb" => Ok(CraftMode::PueB),
            "pue" => Ok(CraftMode::Pue),
            other => Err(Error::config(format!("unknown craft mode {other:?} (expected emn, pue-b or pue)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CraftConfig {
    pub mode: CraftMode,
    /// Weight-noise draws averaged per surrogate update.
    pub u_train: usize,
    /// Weight-noise draws averaged per noise update.
    pub u_perturb: usize,
    /// Cap `S` of the weight-noise ramp.
    pub sigma_max: f64,
    /// Ramp step `s`.
    pub sigma_step: f64,
    /// Surrogate steps `M` per round.
    pub surrogate_steps: usize,
    /// Stop once the perturbed-validation error is at most this.
    pub stop_error: f64,
    /// Weight noise switches on once the perturbed-validation error drops
    /// below this.
    pub warmup_error: f64,
    /// Sign-step size `r_p`.
    pub step_size: f64,
    /// l-inf budget `xi`.
    pub budget: f64,
    pub max_rounds: usize,
    /// Share of `D_s` held out for the stop criterion.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for CraftConfig {
    fn default() -> Self {
        let budget = 8.0 / 255.0;
        Self {
            mode: CraftMode::Pue,
            u_train: 5,
            u_perturb: 10,
            sigma_max: 0.25,
            sigma_step: 0.05,
            surrogate_steps: 10,
            stop_error: 0.1,
            warmup_error: 0.5,
            step_size: budget / 10.0,
            budget,
            max_rounds: 200,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

impl CraftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.u_train == 0 || self.u_perturb == 0 {
            return Err(Error::config("u_train and u_perturb must be positive"));
        }
        // EMN never samples weight noise, so its ramp may be degenerate.
        if self.mode != CraftMode::Emn && !(self.sigma_step > 0.0 && self.sigma_step <= self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::config("weight-noise ramp needs 0 < s <= S"));
        }
        if !(self.stop_error > 0.0 && self.stop_error < 1.0) {
            return Err(Error::config("stop error must lie in (0, 1)"));
        }
        if !(self.warmup_error > 0.0 && self.warmup_error <= 1.0) {
            return Err(Error::config("warm-up error must lie in (0, 1]"));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("step size r_p must be positive"));
        }
        if !(self.budget > 0.0 && self.budget.is_finite()) {
            return Err(Error::config("budget xi must be positive"));
        }
        if self.surrogate_steps == 0 || self.max_rounds == 0 {
            return Err(Error::config("surrogate steps and max rounds must be positive"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("validation fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        self.mode.label(self.u_perturb)
    }
}

/// Inclusive ramp `s, 2s, ..., S`.
pub fn sigma_levels(step: f64, cap: f64) -> Vec<f64> {
    if !(step > 0.0) || cap < step {
        return vec![0.0];
    }
    let count = (cap / step + 1e-9).floor() as usize;
    (1..=count).map(|j| j as f64 * step).collect()
}

/// One crafting round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Weight-noise levels used by the surrogate updates of this round.
    pub surrogate_sigmas: Vec<f64>,
    /// Weight-noise levels used by the noise updates of this round.
    pub delta_sigmas: Vec<f64>,
    /// Surrogate error on the perturbed training part, after the round.
    pub train_error: f64,
    /// Surrogate error on the perturbed validation slice, after the round.
    pub validation_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CraftHistory {
    pub mode: CraftMode,
    pub label: String,
    pub config: CraftConfig,
    pub rounds: Vec<RoundRecord>,
    pub converged: bool,
    pub final_validation_error: f64,
}

impl CraftHistory {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("history serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CraftResult {
    pub delta: ClasswisePerturbation,
    pub theta: ParamVector,
    pub history: CraftHistory,
}

/// `sign(v)` with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Class-wise signed step: every class row with a gradient entry moves by
/// `-step_size * sign(g)` and is clipped back into the budget.
/// `class_grad` is `K x I`; rows that are entirely zero stay put.
pub fn sign_step(delta: &ClasswisePerturbation, class_grad: &[f64], step_size: f64) -> Result<ClasswisePerturbation> {
    ensure_len("class gradient", delta.classes() * delta.dim(), class_grad.len())?;
    if class_grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("noise gradient"));
    }
    let mut out = delta.clone();
    let dim = delta.dim();
    for class in 0..delta.classes() {
        let g = &class_grad[class * dim..(class + 1) * dim];
        out.step_row(class, |i| -step_size * sign(g[i]));
    }
    Ok(out)
}

/// Mean loss of the batch with the class-wise noise applied, and its gradient
/// w.r.t. every entry of `delta` (`K x I`). Only members of class `i`
/// contribute to row `i`; coordinates where `[0, 1]` clipping is active
/// contribute nothing.
pub fn delta_loss_and_grad(
    theta: &ParamVector,
    spec: &ModelSpec,
    delta: &ClasswisePerturbation,
    x: &[f64],
    y: &[usize],
) -> Result<(f64, Vec<f64>)> {
    ensure_len("class count", spec.num_classes(), delta.classes())?;
    ensure_len("sample width", spec.input_dim(), delta.dim())?;
    let xp = delta.apply_to_batch(x, y);
    let bp = nn::backprop(theta, spec, &xp, y, Want::INPUTS)?;
    let dim = delta.dim();
    let mut grad = vec![0.0; delta.classes() * dim];
    for (j, &label) in y.iter().enumerate() {
        let row = &mut grad[label * dim..(label + 1) * dim];
        for i in 0..dim {
            let raw = x[j * dim + i] + delta.row(label)[i];
            if (0.0..=1.0).contains(&raw) {
                row[i] += bp.input_grad[j * dim + i];
            }
        }
    }
    Ok((bp.loss, grad))
}

const SURROGATE_PHASE: u64 = 1;
const DELTA_PHASE: u64 = 2;
const OFFLINE_PHASE: u64 = 3;

/// Averages `f(theta + eps_u)` over `draws` weight-noise draws at `sigma`;
/// draw `u` uses stream `stream_id(tag ++ [u])` of `seed`. With `sigma = 0` a
/// single noiseless evaluation is made.
fn average_over_draws<F>(theta: &ParamVector, sigma: f64, draws: usize, seed: u64, tag: &[u64], f: F) -> Result<(f64, Vec<f64>)>
where
    F: Fn(&ParamVector) -> Result<(f64, Vec<f64>)> + Sync + Send,
{
    let draws = if sigma == 0.0 { 1 } else { draws };
    let parts = par::map_indexed(draws, |u| {
        let mut id = tag.to_vec();
        id.push(u as u64);
        let noisy = smoothing::perturb_params(theta, sigma, rng::stream_id(&id), seed);
        f(&noisy)
    });
    let mut loss = 0.0;
    let mut acc: Vec<f64> = Vec::new();
    for part in parts {
        let (l, g) = part?;
        loss += l;
        if acc.is_empty() {
            acc = g;
        } else {
            add_assign(&mut acc, &g);
        }
    }
    let scale = 1.0 / draws as f64;
    acc.iter_mut().for_each(|g| *g *= scale);
    Ok((loss * scale, acc))
}

/// Mean loss and parameter gradient over weight-noise draws, the gradient
/// taken at the jittered weights and applied to the clean ones.
#[allow(clippy::too_many_arguments)]
pub fn noisy_param_grad(
    theta: &ParamVector,
    spec: &ModelSpec,
    x: &[f64],
    y: &[usize],
    sigma: f64,
    draws: usize,
    seed: u64,
    tag: &[u64],
) -> Result<(f64, Vec<f64>)> {
    average_over_draws(theta, sigma, draws, seed, tag, |t| {
        let bp = nn::backprop(t, spec, x, y, Want::PARAMS)?;
        Ok((bp.loss, bp.param_grad))
    })
}

/// One noise update for a batch: averages the class-wise noise gradient over
/// `draws` weight-noise draws per level in `sigmas`, taking one signed step
/// per level.
#[allow(clippy::too_many_arguments)]
pub fn opt_step(
    delta: &ClasswisePerturbation,
    x: &[f64],
    y: &[usize],
    theta: &ParamVector,
    spec: &ModelSpec,
    sigmas: &[f64],
    draws: usize,
    step_size: f64,
    seed: u64,
    tag: &[u64],
) -> Result<ClasswisePerturbation> {
    if y.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut delta = delta.clone();
    for (level, &sigma) in sigmas.iter().enumerate() {
        let mut id = tag.to_vec();
        id.push(level as u64);
        let current = &delta;
        let (_, grad) = average_over_draws(theta, sigma, draws, seed, &id, |t| delta_loss_and_grad(t, spec, current, x, y))?;
        delta = sign_step(&delta, &grad, step_size)?;
    }
    Ok(delta)
}

fn error_rate(theta: &ParamVector, spec: &ModelSpec, data: &LabeledDataset) -> Result<f64> {
    Ok(1.0 - nn::accuracy(theta, spec, data)?)
}

/// Runs the alternating optimisation to completion or `max_rounds`, always
/// returning the result; check `history.converged`.
pub fn craft_run(data: &LabeledDataset, spec: &ModelSpec, cfg: &CraftConfig, train_cfg: &TrainConfig) -> Result<CraftResult> {
    cfg.validate()?;
    ensure_len("sample width", spec.input_dim(), data.dim())?;
    ensure_len("class count", spec.num_classes(), data.classes())?;
    let (validation, train) = data.split(cfg.validation_fraction, rng::derive_seed(cfg.seed, "craft-split"))?;
    train_cfg.validate(train.len())?;

    let mut theta = init_params(spec, rng::derive_seed(cfg.seed, "craft-init"));
    let mut momentum = MomentumState::new(theta.len());
    let mut delta = ClasswisePerturbation::zeros(data.classes(), data.dim(), cfg.budget)?;
    let mut surrogate_batches = BatchSampler::new(train.len(), train_cfg.batch_size, rng::derive_seed(cfg.seed, "craft-surrogate"));
    let mut delta_batches = BatchSampler::new(train.len(), train_cfg.batch_size, rng::derive_seed(cfg.seed, "craft-delta"));
    let passes = train.len() / train_cfg.batch_size.min(train.len());
    let ramp = sigma_levels(cfg.sigma_step, cfg.sigma_max);

    let mut rounds = Vec::new();
    let mut noise_on = false;
    let mut converged = false;
    let mut last_error = 1.0;
    for round in 0..cfg.max_rounds {
        let surrogate_sigmas = if noise_on && cfg.mode.noisy_surrogate() { ramp.clone() } else { vec![0.0] };
        let delta_sigmas = if noise_on && cfg.mode.noisy_delta() { ramp.clone() } else { vec![0.0] };

        for step in 0..cfg.surrogate_steps {
            let (x, y) = train.gather(surrogate_batches.next_batch());
            let xp = delta.apply_to_batch(&x, &y);
            for (level, &sigma) in surrogate_sigmas.iter().enumerate() {
                let tag = [SURROGATE_PHASE, round as u64, step as u64, level as u64];
                let (loss, grad) = noisy_param_grad(&theta, spec, &xp, &y, sigma, cfg.u_train, cfg.seed, &tag)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step: round * cfg.surrogate_steps + step, loss });
                }
                nn::sgd_step_in_place(&mut theta, &grad, train_cfg, &mut momentum)?;
            }
        }

        for b in 0..passes {
            let (x, y) = train.gather(delta_batches.next_batch());
            let tag = [DELTA_PHASE, round as u64, b as u64];
            delta = opt_step(&delta, &x, &y, &theta, spec, &delta_sigmas, cfg.u_perturb, cfg.step_size, cfg.seed, &tag)?;
        }

        let train_error = error_rate(&theta, spec, &apply_perturbation(&train, &delta)?)?;
        let validation_error = error_rate(&theta, spec, &apply_perturbation(&validation, &delta)?)?;
        last_error = validation_error;
        let noisy_round = surrogate_sigmas.iter().any(|&s| s > 0.0);
        rounds.push(RoundRecord {
            round,
            surrogate_sigmas,
            delta_sigmas,
            train_error,
            validation_error,
        });
        // PUE modes only stop after the surrogate has seen weight noise.
        if validation_error <= cfg.stop_error && (noisy_round || !cfg.mode.noisy_surrogate()) {
            converged = true;
            break;
        }
        if validation_error < cfg.warmup_error {
            noise_on = true;
        }
    }
    Ok(CraftResult {
        delta,
        theta,
        history: CraftHistory {
            mode: cfg.mode,
            label: cfg.label(),
            config: cfg.clone(),
            rounds,
            converged,
            final_validation_error: last_error,
        },
    })
}

/// As [`craft_run`], turning non-convergence into an error.
pub fn craft(data: &LabeledDataset, spec: &ModelSpec, cfg: &CraftConfig, train_cfg: &TrainConfig) -> Result<CraftResult> {
    let result = craft_run(data, spec, cfg, train_cfg)?;
    if !result.history.converged {
        return Err(Error::NotConverged {
            rounds: result.history.rounds.len(),
            last_error: result.history.final_validation_error,
        });
    }
    Ok(result)
}

/// Surrogate fitting on an already perturbed dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub sigma_max: f64,
    pub sigma_step: f64,
    pub u_train: usize,
    /// Stop once the training error falls below this.
    pub target_error: f64,
    /// Weight-noise draws at `sigma_max` whose mean training error must
    /// also fall below `target_error`; 0 checks the clean weights only.
    pub noise_draws: usize,
    pub max_epochs: usize,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            sigma_max: 0.25,
            sigma_step: 0.05,
            u_train: 5,
            target_error: 0.1,
            noise_draws: 128,
            max_epochs: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineSurrogate {
    pub theta: ParamVector,
    /// Optimiser steps taken.
    pub steps: usize,
    pub epochs: u64,
    /// Clean-weight training error at the stop.
    pub train_error: f64,
    /// Mean training error over the noise draws at `sigma_max`.
    pub noisy_train_error: Option<f64>,
}

/// Trains a surrogate with the weight-noise ramp as augmentation until the
/// training error is below `target_error` and at least one full epoch has
/// passed. The error is checked on the clean weights and, when
/// `noise_draws > 0` and `sigma_max > 0`, averaged over noisy copies at
/// `sigma_max` too, so the surrogate holds up under smoothing at that
/// scale. With `sigma_max = 0` this is plain SGD.
pub fn train_offline_surrogate(
    data: &LabeledDataset,
    spec: &ModelSpec,
    cfg: &OfflineConfig,
    train_cfg: &TrainConfig,
) -> Result<OfflineSurrogate> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ensure_len("sample width", spec.input_dim(), data.dim())?;
    train_cfg.validate(data.len())?;
    if cfg.u_train == 0 || cfg.max_epochs == 0 {
        return Err(Error::config("u_train and max_epochs must be positive"));
    }
    if !(cfg.target_error > 0.0 && cfg.target_error <= 1.0) {
        return Err(Error::config("target error must lie in (0, 1]"));
    }
    if !(cfg.sigma_max >= 0.0 && cfg.sigma_step >= 0.0) {
        return Err(Error::config("weight-noise ramp must be nonnegative"));
    }
    let ramp = sigma_levels(cfg.sigma_step, cfg.sigma_max);
    let mut theta = init_params(spec, train_cfg.seed);
    let mut momentum = MomentumState::new(theta.len());
    let mut sampler = BatchSampler::new(data.len(), train_cfg.batch_size, train_cfg.seed);
    let batches_per_epoch = data.len() / train_cfg.batch_size;
    let mut steps = 0usize;
    let mut checked_epoch = 0;
    let check_noise = cfg.noise_draws > 0 && cfg.sigma_max > 0.0;
    let (train_error, noisy_train_error) = loop {
        let (x, y) = data.gather(sampler.next_batch());
        for (level, &sigma) in ramp.iter().enumerate() {
            let tag = [OFFLINE_PHASE, steps as u64, level as u64];
            let (loss, grad) = noisy_param_grad(&theta, spec, &x, &y, sigma, cfg.u_train, train_cfg.seed, &tag)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step: steps, loss });
            }
            nn::sgd_step_in_place(&mut theta, &grad, train_cfg, &mut momentum).map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { step: steps, loss },
                other => other,
            })?;
            steps += 1;
        }
        let done_epochs = ((steps / ramp.len()) / batches_per_epoch) as u64;
        if done_epochs > checked_epoch {
            checked_epoch = done_epochs;
            let train_error = error_rate(&theta, spec, data)?;
            let noisy = if check_noise {
                let smooth = smoothing::SmoothingConfig {
                    sigma: cfg.sigma_max,
                    n: cfg.noise_draws,
                    seed: rng::derive_seed(train_cfg.seed, "offline-check") ^ done_epochs,
                };
                Some(1.0 - smoothing::sample_accuracies(&theta, spec, data, &smooth)?.mean())
            } else {
                None
            };
            let worst = noisy.map_or(train_error, |e| e.max(train_error));
            if worst < cfg.target_error {
                break (train_error, noisy);
            }
            if done_epochs >= cfg.max_epochs as u64 {
                return Err(Error::NotConverged {
                    rounds: done_epochs as usize,
                    last_error: worst,
                });
            }
        }
    };
    Ok(OfflineSurrogate {
        theta,
        steps,
        epochs: checked_epoch,
        train_error,
        noisy_train_error,
    })
}
