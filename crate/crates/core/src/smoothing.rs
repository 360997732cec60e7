//! Gaussian smoothing in weight space.
//!
//! Draw `j` of a smoothing run adds `N(0, sigma^2 I)` noise taken from RNG
//! stream `j` of the run seed, so the sorted accuracies are identical under
//! any parallel schedule.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::nn::{self, hex_string, ModelSpec, ParamVector};
use crate::{par, rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub n: usize,
    pub seed: u64,
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("smoothing sigma must be positive"));
        }
        if self.n == 0 {
            return Err(Error::config("smoothing needs at least one draw"));
        }
        Ok(())
    }
}

/// Sorted accuracies of weight-perturbed copies of a surrogate.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracySamples {
    values: Vec<f64>,
    config: SmoothingConfig,
    surrogate_digest: String,
    dataset_id: String,
}

impl AccuracySamples {
    /// Sorts `values`; fails if any lies outside `[0, 1]` or the count
    /// disagrees with `config.n`.
    pub fn new(
        mut values: Vec<f64>,
        config: SmoothingConfig,
        surrogate_digest: impl Into<String>,
        dataset_id: impl Into<String>,
    ) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("accuracy samples must be nonempty"));
        }
        if values.len() != config.n {
            return Err(Error::DimensionMismatch {
                what: "accuracy sample count",
                expected: config.n,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::config("accuracies must lie in [0, 1]"));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self {
            values,
            config,
            surrogate_digest: surrogate_digest.into(),
            dataset_id: dataset_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn config(&self) -> &SmoothingConfig {
        &self.config
    }

    pub fn surrogate_digest(&self) -> &str {
        &self.surrogate_digest
    }

    pub fn dataset_id(&self) -> &str {
        &self.dataset_id
    }

    /// 1-based order statistic `a_k`.
    pub fn order_statistic(&self, k: usize) -> Option<f64> {
        k.checked_sub(1).and_then(|i| self.values.get(i)).copied()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// Line-oriented text form: `key = value` header lines, then one value
    /// per line with 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "# accuracy samples").unwrap();
        writeln!(s, "sigma = {:.16e}", self.config.sigma).unwrap();
        writeln!(s, "n = {}", self.config.n).unwrap();
        writeln!(s, "seed = {}", self.config.seed).unwrap();
        writeln!(s, "surrogate_digest = {}", self.surrogate_digest).unwrap();
        writeln!(s, "dataset_id = {}", self.dataset_id).unwrap();
        writeln!(s, "values:").unwrap();
        for v in &self.values {
            writeln!(s, "{v:.16e}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::CorruptFile(format!("accuracy samples: {msg}"));
        let mut lines = text.lines();
        let (mut sigma, mut n, mut seed, mut digest, mut dataset) = (None, None, None, None, None);
        for line in lines.by_ref() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "values:" {
                break;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| bad("expected key = value"))?;
            let value = value.trim();
            match key.trim() {
                "sigma" => sigma = Some(value.parse::<f64>().map_err(|_| bad("bad sigma"))?),
                "n" => n = Some(value.parse::<usize>().map_err(|_| bad("bad n"))?),
                "seed" => seed = Some(value.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "surrogate_digest" => digest = Some(value.to_string()),
                "dataset_id" => dataset = Some(value.to_string()),
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        let values = lines
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.parse::<f64>().map_err(|_| bad("bad value")))
            .collect::<Result<Vec<_>>>()?;
        let config = SmoothingConfig {
            sigma: sigma.ok_or_else(|| bad("missing sigma"))?,
            n: n.ok_or_else(|| bad("missing n"))?,
            seed: seed.ok_or_else(|| bad("missing seed"))?,
        };
        let samples = Self::new(
            values,
            config,
            digest.ok_or_else(|| bad("missing surrogate_digest"))?,
            dataset.ok_or_else(|| bad("missing dataset_id"))?,
        )?;
        if samples.values.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("values not sorted"));
        }
        Ok(samples)
    }
}

/// Digest binding a surrogate to its architecture.
pub fn surrogate_digest(theta: &ParamVector, spec: &ModelSpec) -> String {
    let mut h = Sha256::new();
    h.update(spec.canonical().as_bytes());
    for v in theta.as_slice() {
        h.update(v.to_le_bytes());
    }
    hex_string(&h.finalize())
}

/// Short identifier for an evaluation set: its domain plus a content digest.
pub fn dataset_id(data: &LabeledDataset) -> String {
    format!("{}@{}", data.domain_id(), &data.digest_hex()[..16])
}

/// `theta + eps`, `eps ~ N(0, sigma^2 I)` from stream `draw_index` of `seed`.
pub fn perturb_params(theta: &ParamVector, sigma: f64, draw_index: u64, seed: u64) -> ParamVector {
    if sigma == 0.0 {
        return theta.clone();
    }
    let mut noise = vec![0.0; theta.len()];
    rng::fill_gaussian(&mut rng::substream(seed, draw_index), &mut noise, sigma);
    noise.iter_mut().zip(theta.as_slice()).for_each(|(e, t)| *e += t);
    ParamVector::from_vec_unchecked(noise)
}

/// Accuracy of `n` weight-perturbed classifiers, sorted ascending.
pub fn sample_accuracies(
    theta: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &SmoothingConfig,
) -> Result<AccuracySamples> {
    cfg.validate()?;
    sample_accuracies_unchecked(theta, spec, data, cfg)
}

/// As [`sample_accuracies`] but allows `sigma = 0`.
pub fn sample_accuracies_unchecked(
    theta: &ParamVector,
    spec: &ModelSpec,
    data: &LabeledDataset,
    cfg: &SmoothingConfig,
) -> Result<AccuracySamples> {
    if cfg.n == 0 {
        return Err(Error::config("smoothing needs at least one draw"));
    }
    let values = par::map_indexed(cfg.n, |j| {
        let noisy = perturb_params(theta, cfg.sigma, j as u64, cfg.seed);
        nn::accuracy(&noisy, spec, data)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    AccuracySamples::new(values, cfg.clone(), surrogate_digest(theta, spec), dataset_id(data))
}

/// 1-based index `ceil(n q)`, treating products within rounding noise of an
/// integer as that integer.
pub fn quantile_index(n: usize, q: f64) -> usize {
    let x = n as f64 * q;
    let r = x.round();
    let k = if (x - r).abs() <= 1e-9 * x.abs().max(1.0) { r } else { x.ceil() };
    (k as usize).clamp(1, n.max(1))
}

/// Empirical `q`-quantile: the smallest order statistic whose empirical CDF
/// reaches `q`.
pub fn empirical_qps(samples: &AccuracySamples, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("quantile {q} outside (0, 1)")));
    }
    let k = quantile_index(samples.len(), q);
    Ok(samples.values[k - 1])
}
