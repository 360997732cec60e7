//! Certification invariants against statrs oracles and random inputs.

use approx::assert_relative_eq;
use learncert::certify::binomial::{order_statistic_upper_index, upper_tail, Prob};
use learncert::certify::normal::{cdf, quantile};
use learncert::certify::{certify_learnability, q_bar, CertRequest};
use learncert::smoothing::{AccuracySamples, SmoothingConfig};
use proptest::prelude::*;
use statrs::distribution::{Binomial, ContinuousCDF, DiscreteCDF, Normal};

fn samples(values: Vec<f64>, sigma: f64) -> AccuracySamples {
    let n = values.len();
    AccuracySamples::new(values, SmoothingConfig { sigma, n, seed: 0 }, "s", "d").unwrap()
}

#[test]
fn normal_matches_statrs() {
    let oracle = Normal::new(0.0, 1.0).unwrap();
    // statrs' own erfc is good to about 1e-10 in the lower tail; the
    // tighter 50-digit references live with the unit tests.
    for i in -80..=80 {
        let z = i as f64 * 0.1;
        assert_relative_eq!(cdf(z), oracle.cdf(z), max_relative = 1e-9);
    }
    for p in [1e-10, 1e-6, 0.001, 0.01, 0.1, 0.3, 0.5, 0.7, 0.9, 0.99, 0.999] {
        assert_relative_eq!(quantile(p), oracle.inverse_cdf(p), max_relative = 1e-8, epsilon = 1e-12);
    }
}

#[test]
fn binomial_tail_matches_statrs() {
    for (n, p) in [(20u64, 0.5), (20, 0.8), (1000, 0.9), (1000, 0.9887), (137, 0.31)] {
        let oracle = Binomial::new(p, n).unwrap();
        for k in [1, n / 3, n / 2, (n as f64 * p) as u64, n - 1, n] {
            // Pr[X >= k] = 1 - Pr[X <= k - 1]
            let want = oracle.sf(k - 1);
            assert_relative_eq!(upper_tail(n, k, Prob::new(p)), want, max_relative = 1e-9, epsilon = 1e-300);
        }
    }
}

#[test]
fn returned_index_is_the_smallest_passing_one() {
    for &(n, qb, alpha) in &[(1000usize, 0.9, 0.01), (20, 0.5, 0.05), (20, 0.8, 0.05), (500, 0.97, 0.001)] {
        let oracle = Binomial::new(qb, n as u64).unwrap();
        let first = ((n as f64 * qb).ceil() as u64..=n as u64).find(|&k| oracle.sf(k - 1) <= alpha);
        assert_eq!(order_statistic_upper_index(n, Prob::new(qb), alpha).map(|k| k as u64), first, "n={n} q_bar={qb}");
    }
}

proptest! {
    #[test]
    fn q_bar_monotone_in_eta_and_q(q in 0.01f64..0.99, dq in 0.0f64..0.009, eta in 0.0f64..2.0, d in 0.0f64..0.5, sigma in 0.05f64..2.0) {
        let base = q_bar(q, eta, sigma).unwrap();
        prop_assert!(q_bar(q, eta + d, sigma).unwrap() >= base);
        prop_assert!(q_bar(q + dq, eta, sigma).unwrap() >= base);
        prop_assert_eq!(q_bar(q, 0.0, sigma).unwrap(), q);
    }

    #[test]
    fn abstain_iff_power_exceeds_alpha(n in 1usize..3000, qb in 0.5f64..0.99999, alpha in 0.001f64..0.2) {
        let k = order_statistic_upper_index(n, Prob::new(qb), alpha);
        prop_assert_eq!(k.is_none(), n as f64 * qb.ln() > alpha.ln());
    }

    #[test]
    fn bound_monotone_in_eta_and_q_until_abstain(values in prop::collection::vec(0.0f64..1.0, 200), q in 0.3f64..0.9) {
        let s = samples(values, 0.25);
        let mut last = f64::NEG_INFINITY;
        let mut abstained = false;
        for i in 0..40 {
            let c = certify_learnability(&s, &CertRequest { q, eta: i as f64 * 0.02, alpha: 0.01 }).unwrap();
            match c.bound {
                Some(t) => { prop_assert!(!abstained); prop_assert!(t >= last); last = t; }
                None => abstained = true,
            }
        }
        let lo = certify_learnability(&s, &CertRequest { q, eta: 0.05, alpha: 0.01 }).unwrap();
        let hi = certify_learnability(&s, &CertRequest { q: q + 0.05, eta: 0.05, alpha: 0.01 }).unwrap();
        if let (Some(a), Some(b)) = (lo.bound, hi.bound) {
            prop_assert!(b >= a);
        }
    }
}
