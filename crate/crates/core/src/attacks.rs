//! Adversaries: projected-SGD recovery inside an l2 weight ball, and an
//! empirical check of certificates under worst-case mean shifts.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::certify::Certificate;
use crate::data::LabeledDataset;
use crate::error::{ensure_len, Error, Result};
use crate::nn::{self, BatchSampler, ModelSpec, ParamVector, Want};
use crate::{par, rng};

/// Euclidean projection of `theta` onto the ball of radius `eta` around
/// `center`. The result never lies outside the ball, even by rounding.
pub fn project_l2(theta: &ParamVector, center: &ParamVector, eta: f64) -> Result<ParamVector> {
    ensure_len("parameter vector", center.len(), theta.len())?;
    if !(eta >= 0.0) {
        return Err(Error::config("projection radius must be nonnegative"));
    }
    let dist = theta.distance(center);
    if dist <= eta {
        return Ok(theta.clone());
    }
    let diff: Vec<f64> = theta.as_slice().iter().zip(center.as_slice()).map(|(a, b)| a - b).collect();
    let mut radius = eta;
    loop {
        let out: Vec<f64> = center.as_slice().iter().zip(&diff).map(|(c, d)| c + d * radius / dist).collect();
        let out = ParamVector::from_vec(out)?;
        if out.distance(center) <= eta {
            return Ok(out);
        }
        radius *= 1.0 - 4.0 * f64::EPSILON;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMode {
    /// Fine-tune on a share of the clean training data.
    Generalized,
    /// Fine-tune directly on the evaluation set.
    BestCase,
}

impl RecoveryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RecoveryMode::Generalized => "generalized",
            RecoveryMode::BestCase => "best_case",
        }
    }
}

impl FromStr for RecoveryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "generalized" => Ok(RecoveryMode::Generalized),
            "best_case" | "best-case" => Ok(RecoveryMode::BestCase),
            other => Err(Error::config(format!("unknown recovery mode {other:?}"))),
        }
    }
}

/// Projected plain SGD (no momentum, no weight decay).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryConfig {
    pub eta_budget: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Share of the clean training data available to the attacker.
    pub clean_fraction: f64,
    pub seed: u64,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            eta_budget: 1.0,
            learning_rate: 0.01,
            steps: 1500,
            batch_size: 128,
            clean_fraction: 1.0,
            seed: 0,
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta_budget >= 0.0 && self.eta_budget.is_finite()) {
            return Err(Error::config("eta budget must be a nonnegative number"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::config("steps and batch size must be positive"));
        }
        if !(self.clean_fraction > 0.0 && self.clean_fraction <= 1.0) {
            return Err(Error::config("clean fraction must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recovery {
    pub theta: ParamVector,
    /// Accuracy of `theta` on the held-out evaluation set.
    pub accuracy: f64,
    /// Largest distance from the start seen after any step.
    pub max_distance: f64,
}

/// Fine-tunes on `train` with projected SGD, keeping every iterate within
/// `eta_budget` of `theta_hat`, and scores the result on `test`.
pub fn projected_finetune(
    theta_hat: &ParamVector,
    spec: &ModelSpec,
    train: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &RecoveryConfig,
) -> Result<Recovery> {
    cfg.validate()?;
    ensure_len("parameter vector", spec.param_count(), theta_hat.len())?;
    ensure_len("sample width", spec.input_dim(), train.dim())?;
    if cfg.eta_budget == 0.0 {
        return Ok(Recovery {
            theta: theta_hat.clone(),
            accuracy: nn::accuracy(theta_hat, spec, test)?,
            max_distance: 0.0,
        });
    }
    let mut theta = theta_hat.clone();
    let mut sampler = BatchSampler::new(train.len(), cfg.batch_size, cfg.seed);
    let mut max_distance: f64 = 0.0;
    for step in 0..cfg.steps {
        let (x, y) = train.gather(sampler.next_batch());
        let bp = nn::backprop(&theta, spec, &x, &y, Want::PARAMS)?;
        if !bp.loss.is_finite() || bp.param_grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { step, loss: bp.loss });
        }
        let moved: Vec<f64> = theta
            .as_slice()
            .iter()
            .zip(&bp.param_grad)
            .map(|(t, g)| t - cfg.learning_rate * g)
            .collect();
        let moved = ParamVector::from_vec(moved).map_err(|_| Error::Diverged { step, loss: bp.loss })?;
        theta = project_l2(&moved, theta_hat, cfg.eta_budget)?;
        max_distance = max_distance.max(theta.distance(theta_hat));
    }
    Ok(Recovery {
        accuracy: nn::accuracy(&theta, spec, test)?,
        theta,
        max_distance,
    })
}

/// Generalized recovery: the attacker holds `clean_fraction` of the clean
/// training data and is scored on the test set.
pub fn recovery_attack(
    theta_hat: &ParamVector,
    spec: &ModelSpec,
    clean: &LabeledDataset,
    test: &LabeledDataset,
    cfg: &RecoveryConfig,
) -> Result<Recovery> {
    cfg.validate()?;
    if cfg.clean_fraction < 1.0 {
        let (subset, _) = clean.split(cfg.clean_fraction, rng::derive_seed(cfg.seed, "attacker-subset"))?;
        projected_finetune(theta_hat, spec, &subset, test, cfg)
    } else {
        projected_finetune(theta_hat, spec, clean, test, cfg)
    }
}

/// Best-case recovery on the evaluation set itself: an empirical stand-in
/// for the best accuracy reachable within the ball.
pub fn estimate_true_learnability(
    theta_hat: &ParamVector,
    spec: &ModelSpec,
    test: &LabeledDataset,
    eta: f64,
    cfg: &RecoveryConfig,
) -> Result<f64> {
    let cfg = RecoveryConfig {
        eta_budget: eta,
        clean_fraction: 1.0,
        ..cfg.clone()
    };
    Ok(projected_finetune(theta_hat, spec, test, test, &cfg)?.accuracy)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryCurve {
    pub mode: RecoveryMode,
    pub seed: u64,
    /// `(eta, accuracy)` with strictly increasing `eta`.
    pub points: Vec<(f64, f64)>,
}

impl RecoveryCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("eta,accuracy,mode,seed\n");
        for &(eta, acc) in &self.points {
            let _ = writeln!(out, "{eta},{acc},{},{}", self.mode.as_str(), self.seed);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        if lines.next() != Some("eta,accuracy,mode,seed") {
            return Err(Error::CorruptFile("recovery curve header".into()));
        }
        let mut points = Vec::new();
        let mut meta = None;
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(Error::CorruptFile(format!("recovery curve row {line:?}")));
            }
            let bad = |_| Error::CorruptFile(format!("recovery curve row {line:?}"));
            let eta: f64 = f[0].parse().map_err(bad)?;
            let acc: f64 = f[1].parse().map_err(bad)?;
            let mode: RecoveryMode = f[2].parse()?;
            let seed: u64 = f[3].parse().map_err(|_| Error::CorruptFile(format!("recovery curve row {line:?}")))?;
            if *meta.get_or_insert((mode, seed)) != (mode, seed) {
                return Err(Error::CorruptFile("recovery curve mixes modes or seeds".into()));
            }
            points.push((eta, acc));
        }
        let (mode, seed) = meta.ok_or_else(|| Error::CorruptFile("empty recovery curve".into()))?;
        Ok(Self { mode, seed, points })
    }
}

/// Recovered accuracy across a sweep of radii.
pub fn recovery_curve(
    theta_hat: &ParamVector,
    spec: &ModelSpec,
    clean: &LabeledDataset,
    test: &LabeledDataset,
    etas: &[f64],
    mode: RecoveryMode,
    cfg: &RecoveryConfig,
) -> Result<RecoveryCurve> {
    if etas.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::config("recovery radii must be strictly increasing"));
    }
    let mut points = Vec::with_capacity(etas.len());
    for &eta in etas {
        let c = RecoveryConfig {
            eta_budget: eta,
            ..cfg.clone()
        };
        let acc = match mode {
            RecoveryMode::Generalized => recovery_attack(theta_hat, spec, clean, test, &c)?.accuracy,
            RecoveryMode::BestCase => estimate_true_learnability(theta_hat, spec, test, eta, &c)?,
        };
        points.push((eta, acc));
    }
    Ok(RecoveryCurve {
        mode,
        seed: cfg.seed,
        points,
    })
}

/// Where the mean shift is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftPlacement {
    /// `||upsilon|| = eta` exactly.
    Boundary,
    /// Uniform in the ball.
    Interior,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub m_trials: usize,
    pub violation_rate: f64,
    pub bound: f64,
    pub q: f64,
    pub eta: f64,
    pub sigma: f64,
    pub placement: ShiftPlacement,
    pub seed: u64,
}

impl ValidationReport {
    /// Largest violation rate consistent with the guarantee at three
    /// standard errors.
    pub fn tolerance(&self) -> f64 {
        (1.0 - self.q) + 3.0 * (self.q * (1.0 - self.q) / self.m_trials as f64).sqrt()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Accuracies of `theta_hat + upsilon + eps` over `m` trials, with
/// `upsilon` on (or inside) the `eta`-sphere and `eps ~ N(0, sigma^2 I)`.
#[allow(clippy::too_many_arguments)]
pub fn shifted_accuracies(
    theta_hat: &ParamVector,
    spec: &ModelSpec,
    test: &LabeledDataset,
    eta: f64,
    sigma: f64,
    m: usize,
    seed: u64,
    placement: ShiftPlacement,
) -> Result<Vec<f64>> {
    let d = theta_hat.len();
    par::map_indexed(m, |j| {
        let mut dir_rng = rng::substream(seed, rng::stream_id(&[j as u64, 0]));
        let mut radius = eta;
        let u = rng::unit_direction(&mut dir_rng, d);
        if placement == ShiftPlacement::Interior {
            radius *= dir_rng.random::<f64>().powf(1.0 / d as f64);
        }
        let mut theta = vec![0.0; d];
        rng::fill_gaussian(&mut rng::substream(seed, rng::stream_id(&[j as u64, 1])), &mut theta, sigma);
        for ((t, base), ui) in theta.iter_mut().zip(theta_hat.as_slice()).zip(&u) {
            *t += base + radius * ui;
        }
        nn::accuracy(&ParamVector::from_vec(theta)?, spec, test)
    })
    .into_iter()
    .collect()
}

/// Share of trials whose accuracy exceeds the certified bound.
pub fn validate_certificate(
    theta_hat: &ParamVector,
    spec: &ModelSpec,
    test: &LabeledDataset,
    cert: &Certificate,
    m_trials: usize,
    seed: u64,
    placement: ShiftPlacement,
) -> Result<ValidationReport> {
    let bound = cert.bound_or_abstain()?;
    if m_trials == 0 {
        return Err(Error::config("validation needs at least one trial"));
    }
    let acc = shifted_accuracies(theta_hat, spec, test, cert.eta, cert.sigma, m_trials, seed, placement)?;
    let violations = acc.iter().filter(|&&a| a > bound).count();
    Ok(ValidationReport {
        m_trials,
        violation_rate: violations as f64 / m_trials as f64,
        bound,
        q: cert.q,
        eta: cert.eta,
        sigma: cert.sigma,
        placement,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec};
    use crate::nn::{init_params, Activation, TrainConfig};
    use proptest::prelude::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_vec(v.to_vec()).unwrap()
    }

    #[test]
    fn projection_cases() {
        let z = pv(&[0.0, 0.0]);
        assert_eq!(project_l2(&pv(&[3.0, 4.0]), &z, 1.0).unwrap(), pv(&[0.6, 0.8]));
        assert_eq!(project_l2(&pv(&[0.3, 0.4]), &z, 1.0).unwrap(), pv(&[0.3, 0.4]));
        assert!(project_l2(&pv(&[1.0]), &z, 1.0).is_err());
        assert_eq!(project_l2(&pv(&[3.0, 4.0]), &z, 0.0).unwrap(), z);
    }

    proptest! {
        #[test]
        fn projection_lands_on_sphere_and_is_idempotent(
            v in prop::collection::vec(-50.0f64..50.0, 1..40),
            c in -5.0f64..5.0,
            eta in 0.01f64..10.0,
        ) {
            let theta = pv(&v);
            let center = pv(&vec![c; v.len()]);
            let p = project_l2(&theta, &center, eta).unwrap();
            let dist = p.distance(&center);
            prop_assert!(dist <= eta);
            if theta.distance(&center) > eta {
                prop_assert!((dist - eta).abs() <= 1e-12 * eta.max(1.0));
            }
            prop_assert_eq!(project_l2(&p, &center, eta).unwrap(), p);
        }
    }

    fn toy() -> (ModelSpec, LabeledDataset, LabeledDataset, ParamVector) {
        let (train, test) = make_blobs(&BlobSpec {
            classes: 3,
            dim: 6,
            train_per_class: 40,
            test_per_class: 30,
            spread: 0.05,
            center_spread: 0.2,
            seed: 5,
        })
        .unwrap();
        let spec = ModelSpec::mlp(6, &[8], 3, Activation::Tanh).unwrap();
        let theta = init_params(&spec, 2);
        (spec, train, test, theta)
    }

    #[test]
    fn zero_radius_returns_start() {
        let (spec, train, test, theta) = toy();
        let cfg = RecoveryConfig { eta_budget: 0.0, ..RecoveryConfig::default() };
        let r = recovery_attack(&theta, &spec, &train, &test, &cfg).unwrap();
        assert_eq!(r.theta, theta);
        assert_eq!(r.accuracy, nn::accuracy(&theta, &spec, &test).unwrap());
        assert_eq!(estimate_true_learnability(&theta, &spec, &test, 0.0, &cfg).unwrap(), r.accuracy);
    }

    #[test]
    fn iterates_stay_in_ball() {
        let (spec, train, test, theta) = toy();
        for eta in [0.05, 0.3, 2.0] {
            let cfg = RecoveryConfig { eta_budget: eta, learning_rate: 0.5, steps: 50, batch_size: 32, ..RecoveryConfig::default() };
            let r = recovery_attack(&theta, &spec, &train, &test, &cfg).unwrap();
            assert!(r.max_distance <= eta);
            assert!(r.theta.distance(&theta) <= eta);
        }
    }

    #[test]
    fn curve_csv_round_trip_and_ordering() {
        let (spec, train, test, theta) = toy();
        let cfg = RecoveryConfig { steps: 20, batch_size: 32, ..RecoveryConfig::default() };
        let c = recovery_curve(&theta, &spec, &train, &test, &[0.0, 0.5, 1.0], RecoveryMode::Generalized, &cfg).unwrap();
        assert_eq!(RecoveryCurve::from_csv(&c.to_csv()).unwrap(), c);
        assert!(recovery_curve(&theta, &spec, &train, &test, &[0.5, 0.5], RecoveryMode::Generalized, &cfg).is_err());
    }

    fn cert_for(bound: f64, eta: f64, sigma: f64) -> Certificate {
        Certificate {
            q: 0.9,
            eta,
            sigma,
            n: 1,
            alpha: 0.5,
            q_bar: 0.9,
            k: Some(1),
            bound: Some(bound),
            abstain: None,
            generalization_addend: None,
            generalization_addend_full_n: None,
            seed: 0,
            surrogate_digest: String::new(),
            dataset_id: String::new(),
            offset: None,
        }
    }

    #[test]
    fn degenerate_and_forced_validation() {
        let (spec, train, test, _) = toy();
        let theta = nn::train(&spec, &train, &TrainConfig { batch_size: 32, steps: 200, ..TrainConfig::default() }).unwrap();
        let acc = nn::accuracy(&theta, &spec, &test).unwrap();
        let exact = validate_certificate(&theta, &spec, &test, &cert_for(acc, 0.0, 0.0), 20, 1, ShiftPlacement::Boundary).unwrap();
        assert_eq!(exact.violation_rate, 0.0);
        let low = validate_certificate(&theta, &spec, &test, &cert_for(-0.01, 0.1, 0.1), 20, 1, ShiftPlacement::Boundary).unwrap();
        assert_eq!(low.violation_rate, 1.0);
        let mut abst = cert_for(0.5, 0.1, 0.1);
        abst.bound = None;
        abst.abstain = Some(true);
        assert!(validate_certificate(&theta, &spec, &test, &abst, 20, 1, ShiftPlacement::Boundary).is_err());
    }

    #[test]
    fn validation_is_deterministic_and_interior_is_available() {
        let (spec, _, test, theta) = toy();
        let c = cert_for(0.5, 0.3, 0.1);
        let a = shifted_accuracies(&theta, &spec, &test, c.eta, c.sigma, 16, 9, ShiftPlacement::Boundary).unwrap();
        let b = shifted_accuracies(&theta, &spec, &test, c.eta, c.sigma, 16, 9, ShiftPlacement::Boundary).unwrap();
        assert_eq!(a, b);
        let i = shifted_accuracies(&theta, &spec, &test, c.eta, c.sigma, 16, 9, ShiftPlacement::Interior).unwrap();
        assert_eq!(i.len(), 16);
    }
}
