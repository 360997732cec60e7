//! (q, eta)-learnability certificates.
//!
//! Shifting the smoothing mean by any `upsilon` with `||upsilon|| <= eta`
//! moves the `q`-quantile of the smoothed accuracy to at most the
//! `q_bar = Phi(Phi^{-1}(q) + eta / sigma)` quantile at the original mean.
//! A certificate is a `1 - alpha` upper confidence bound on that `q_bar`
//! quantile, read off the sorted Monte Carlo accuracies.

pub mod binomial;
pub mod normal;
mod table;

use serde::{Deserialize, Serialize};

pub use binomial::Prob;
pub use table::{accuracy_offset, parse_csv, CertTable, Column, ParsedTable};

use crate::error::{Error, Result};
use crate::smoothing::AccuracySamples;

fn check_q(q: f64) -> Result<()> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::config(format!("q = {q} must lie strictly inside (0, 1)")));
    }
    Ok(())
}

fn check_eta_sigma(eta: f64, sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::config("sigma must be positive"));
    }
    if !(eta >= 0.0 && eta.is_finite()) {
        return Err(Error::config("eta must be nonnegative"));
    }
    Ok(())
}

/// `q_bar` together with its complement `1 - q_bar` (accurate deep in the
/// tail).
pub fn q_bar_prob(q: f64, eta: f64, sigma: f64) -> Result<Prob> {
    check_q(q)?;
    check_eta_sigma(eta, sigma)?;
    if eta == 0.0 {
        return Ok(Prob::new(q));
    }
    Ok(binomial::normal_prob(normal::quantile(q) + eta / sigma))
}

/// `Phi(Phi^{-1}(q) + eta / sigma)`.
pub fn q_bar(q: f64, eta: f64, sigma: f64) -> Result<f64> {
    Ok(q_bar_prob(q, eta, sigma)?.p)
}

/// Result of the order-statistic search.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantileBound {
    /// 1-based order-statistic index.
    Index(usize),
    Abstain,
}

impl QuantileBound {
    pub fn index(self) -> Option<usize> {
        match self {
            QuantileBound::Index(k) => Some(k),
            QuantileBound::Abstain => None,
        }
    }
}

/// Smallest `k >= ceil(n q_bar)` whose order statistic upper-bounds the
/// `q_bar`-quantile with confidence `1 - alpha`.
pub fn quantile_upper_bound(n: usize, alpha: f64, sigma: f64, eta: f64, q: f64) -> Result<QuantileBound> {
    if n == 0 {
        return Err(Error::config("need at least one draw"));
    }
    check_alpha(alpha)?;
    let qb = q_bar_prob(q, eta, sigma)?;
    Ok(match binomial::order_statistic_upper_index(n, qb, alpha) {
        Some(k) => QuantileBound::Index(k),
        None => QuantileBound::Abstain,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!("alpha = {alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Largest `eta` that does not abstain: `sigma (Phi^{-1}(alpha^{1/n}) -
/// Phi^{-1}(q))`. Negative when even `eta = 0` abstains.
pub fn max_certifiable_eta(q: f64, sigma: f64, n: usize, alpha: f64) -> Result<f64> {
    check_q(q)?;
    check_eta_sigma(0.0, sigma)?;
    check_alpha(alpha)?;
    if n == 0 {
        return Err(Error::config("need at least one draw"));
    }
    // 1 - alpha^{1/n}, kept exact for large n
    let tail = -(alpha.ln() / n as f64).exp_m1();
    Ok(sigma * (normal::upper_quantile(tail) - normal::quantile(q)))
}

/// Which Hoeffding addend to use for generalization to the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoeffdingVariant {
    /// `sqrt(ln(2n/beta) / (2N))`.
    HalfN,
    /// `sqrt(ln(2n/beta) / N)`.
    FullN,
}

/// Hoeffding addend with a union bound over the `n` smoothing draws.
pub fn hoeffding_addend(test_n: usize, n: usize, beta: f64, variant: HoeffdingVariant) -> Result<f64> {
    if test_n == 0 || n == 0 {
        return Err(Error::config("Hoeffding addend needs N >= 1 and n >= 1"));
    }
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::config("beta must lie in (0, 1)"));
    }
    let denom = match variant {
        HoeffdingVariant::HalfN => 2.0 * test_n as f64,
        HoeffdingVariant::FullN => test_n as f64,
    };
    Ok(((2.0 * n as f64 / beta).ln() / denom).sqrt())
}

/// Generalization (q, eta)-learnability: `t` plus the Hoeffding addend.
pub fn hoeffding_generalization(t: f64, test_n: usize, n: usize, beta: f64) -> Result<f64> {
    Ok(t + hoeffding_addend(test_n, n, beta, HoeffdingVariant::HalfN)?)
}

/// PAC-Bayes penalty `sqrt((||theta||^2 / sigma^2 + ln(N / alpha)) / (2 (N - 1)))`.
pub fn pac_bayes_penalty(theta_norm: f64, sigma: f64, test_n: usize, alpha: f64) -> Result<f64> {
    if test_n < 2 {
        return Err(Error::config("PAC-Bayes bound needs N >= 2"));
    }
    check_alpha(alpha)?;
    check_eta_sigma(0.0, sigma)?;
    let n = test_n as f64;
    Ok(((theta_norm * theta_norm / (sigma * sigma) + (n / alpha).ln()) / (2.0 * (n - 1.0))).sqrt())
}

/// Lower bound on expected domain accuracy under smoothing noise.
pub fn pac_bayes_lower_bound(mean_acc: f64, theta_norm: f64, sigma: f64, test_n: usize, alpha: f64) -> Result<f64> {
    Ok(mean_acc - pac_bayes_penalty(theta_norm, sigma, test_n, alpha)?)
}

/// A certification query against a set of accuracy samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertRequest {
    pub q: f64,
    pub eta: f64,
    pub alpha: f64,
}

impl CertRequest {
    pub fn validate(&self) -> Result<()> {
        check_q(self.q)?;
        check_alpha(self.alpha)?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::config("eta must be nonnegative"));
        }
        Ok(())
    }
}

/// Certified (q, eta)-learnability, or an abstention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Certificate {
    pub q: f64,
    pub eta: f64,
    pub sigma: f64,
    pub n: usize,
    pub alpha: f64,
    pub q_bar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstain: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generalization_addend: Option<f64>,
    /// The `sqrt(ln(2n/beta) / N)` variant, reported alongside.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generalization_addend_full_n: Option<f64>,
    pub seed: u64,
    pub surrogate_digest: String,
    pub dataset_id: String,
    /// Post-hoc accuracy offset; never folded into `bound`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
}

impl Certificate {
    pub fn is_abstained(&self) -> bool {
        self.bound.is_none()
    }

    pub fn bound_or_abstain(&self) -> Result<f64> {
        self.bound.ok_or(Error::Abstained)
    }

    /// Bound plus the Hoeffding addend, when both exist.
    pub fn generalization_bound(&self) -> Option<f64> {
        Some(self.bound? + self.generalization_addend?)
    }

    pub fn offset_bound(&self) -> Option<f64> {
        Some(self.bound? + self.offset.unwrap_or(0.0))
    }

    /// Attaches both Hoeffding addends for a domain sample of `test_n`.
    pub fn with_generalization(mut self, test_n: usize, beta: f64) -> Result<Self> {
        self.generalization_addend = Some(hoeffding_addend(test_n, self.n, beta, HoeffdingVariant::HalfN)?);
        self.generalization_addend_full_n = Some(hoeffding_addend(test_n, self.n, beta, HoeffdingVariant::FullN)?);
        Ok(self)
    }

    pub fn with_offset(mut self, offset: f64) -> Self {
        self.offset = Some(offset);
        self
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("certificate serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let cert: Certificate = serde_json::from_str(s)?;
        if cert.bound.is_some() == (cert.abstain == Some(true)) {
            return Err(Error::CorruptFile("certificate must carry either a bound or abstain".into()));
        }
        Ok(cert)
    }
}

/// Reads `t = a_k` off the sorted samples for the request.
pub fn certify_learnability(samples: &AccuracySamples, req: &CertRequest) -> Result<Certificate> {
    req.validate()?;
    let cfg = samples.config();
    let qb = q_bar_prob(req.q, req.eta, cfg.sigma)?;
    let k = binomial::order_statistic_upper_index(samples.len(), qb, req.alpha);
    let bound = k.map(|k| samples.order_statistic(k).expect("index within sample count"));
    Ok(Certificate {
        q: req.q,
        eta: req.eta,
        sigma: cfg.sigma,
        n: samples.len(),
        alpha: req.alpha,
        q_bar: qb.p,
        k,
        bound,
        abstain: bound.is_none().then_some(true),
        generalization_addend: None,
        generalization_addend_full_n: None,
        seed: cfg.seed,
        surrogate_digest: samples.surrogate_digest().to_string(),
        dataset_id: samples.dataset_id().to_string(),
        offset: None,
    })
}

/// Difference between an empirical learnability estimate and a certified
/// bound.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TightnessGap {
    pub gap: f64,
    /// The estimate fell below the bound, so it under-estimates the true
    /// learnability.
    pub underestimate: bool,
}

pub fn tightness_gap(estimate: f64, cert: &Certificate) -> Result<TightnessGap> {
    let t = cert.bound_or_abstain()?;
    let gap = estimate - t;
    Ok(TightnessGap {
        gap,
        underestimate: gap < 0.0,
    })
}
