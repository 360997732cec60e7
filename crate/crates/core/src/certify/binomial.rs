//! One-sided order-statistic confidence bound for a quantile.
//!
//! With `n` i.i.d. draws from a continuous distribution, the number of draws
//! falling below its `p`-quantile is `X ~ Binomial(n, p)`. The `k`-th order
//! statistic `a_(k)` sits at or above the quantile exactly when `X <= k - 1`,
//! so `a_(k)` is a `1 - alpha` upper bound once `Pr[X >= k] <= alpha`.
//! All probabilities are evaluated in log space.

use super::normal;

/// `ln(n!)`: exact sums for small `n`, Stirling's series otherwise.
pub fn ln_factorial(n: u64) -> f64 {
    if n < 32 {
        return (2..=n).map(|i| (i as f64).ln()).sum();
    }
    let x = n as f64;
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    x * x.ln() - x + 0.5 * (2.0 * std::f64::consts::PI * x).ln()
        + inv * (1.0 / 12.0 - inv2 * (1.0 / 360.0 - inv2 * (1.0 / 1260.0 - inv2 / 1680.0)))
}

pub fn ln_choose(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Success probability held together with its complement, so that
/// probabilities near one keep their precision.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prob {
    pub p: f64,
    pub complement: f64,
}

impl Prob {
    pub fn new(p: f64) -> Self {
        Self { p, complement: 1.0 - p }
    }

    fn ln_p(self) -> f64 {
        if self.p > 0.5 {
            (-self.complement).ln_1p()
        } else {
            self.p.ln()
        }
    }

    fn ln_complement(self) -> f64 {
        if self.complement > 0.5 {
            (-self.p).ln_1p()
        } else {
            self.complement.ln()
        }
    }
}

/// `ln Pr[X = i]` for `X ~ Binomial(n, p)`.
pub fn ln_pmf(n: u64, i: u64, p: Prob) -> f64 {
    let mut out = ln_choose(n, i);
    if i > 0 {
        out += i as f64 * p.ln_p();
    }
    if n > i {
        out += (n - i) as f64 * p.ln_complement();
    }
    out
}

/// `Pr[X >= k]`.
pub fn upper_tail(n: u64, k: u64, p: Prob) -> f64 {
    (k..=n).rev().fold(f64::NEG_INFINITY, |acc, i| log_add(acc, ln_pmf(n, i, p))).exp()
}

/// Coverage of `a_(k)` as an upper bound on the `p`-quantile:
/// `Pr[X <= k - 1]`.
pub fn coverage(n: u64, k: u64, p: Prob) -> f64 {
    if k == 0 {
        return 0.0;
    }
    (0..k).fold(f64::NEG_INFINITY, |acc, i| log_add(acc, ln_pmf(n, i, p))).exp().min(1.0)
}

/// Smallest `k` in `[ceil(n p), n]` with `Pr[X >= k] <= alpha`, or `None`
/// when even `k = n` fails (that is, when `p^n > alpha`).
pub fn order_statistic_upper_index(n: usize, p: Prob, alpha: f64) -> Option<usize> {
    if n == 0 {
        return None;
    }
    let n64 = n as u64;
    let lower = crate::smoothing::quantile_index(n, p.p) as u64;
    let ln_alpha = alpha.ln();
    let mut tail = f64::NEG_INFINITY;
    let mut best = None;
    for k in (lower..=n64).rev() {
        tail = log_add(tail, ln_pmf(n64, k, p));
        if tail > ln_alpha {
            break;
        }
        best = Some(k as usize);
    }
    best
}

/// `p^n > alpha`, the abstention condition, in log space.
pub fn abstains(n: usize, p: Prob, alpha: f64) -> bool {
    n as f64 * p.ln_p() > alpha.ln()
}

/// `Prob` for `Phi(z)` with the complement taken from the upper tail.
pub fn normal_prob(z: f64) -> Prob {
    Prob {
        p: normal::cdf(z),
        complement: normal::sf(z),
    }
}
