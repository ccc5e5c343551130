//! Discretized logistic over `K` bins with tail-absorbing edge bins.
//!
//! Locations and scales are in bin units: bin `k` spans
//! `[k − K/2 − ½, k − K/2 + ½)`, except that bin 0 extends to −∞ and bin
//! `K − 1` to +∞.

use crate::entropy::bins::K;
use crate::error::{Error, Result};

pub const SIGMA_FLOOR: f64 = 1e-3;

pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

/// `ln(1 − eᵈ)` for `d ≤ 0`.
pub fn log1m_exp(d: f64) -> f64 {
    if d > -std::f64::consts::LN_2 {
        (-d.exp_m1()).ln()
    } else {
        (-d.exp()).ln_1p()
    }
}

/// Log of the logistic density `S(z)(1 − S(z))`.
fn log_dsigmoid(z: f64) -> f64 {
    log_sigmoid(z) + log_sigmoid(-z)
}

/// Lower and upper edge of bin `k` in bin units (infinite for edge bins).
pub fn bin_edges(k: usize) -> (f64, f64) {
    let c = k as f64 - (K / 2) as f64;
    let lo = if k == 0 { f64::NEG_INFINITY } else { c - 0.5 };
    let hi = if k == K - 1 { f64::INFINITY } else { c + 0.5 };
    (lo, hi)
}

/// `ln PMF(k)` with its partial derivatives in μ and σ.
#[derive(Clone, Copy, Debug)]
pub struct LogPmf {
    pub logp: f64,
    pub d_mu: f64,
    pub d_sigma: f64,
}

/// Stable evaluation via log-sigmoids; no floor check.
pub fn log_pmf_unchecked(k: usize, mu: f64, sigma: f64) -> LogPmf {
    let (lo, hi) = bin_edges(k);
    let za = (lo - mu) / sigma;
    let zb = (hi - mu) / sigma;
    let logp = if k == 0 {
        log_sigmoid(zb)
    } else if k == K - 1 {
        log_sigmoid(-za)
    } else if za + zb > 0.0 {
        // S(zb) − S(za) = S(−za) − S(−zb); keeps both arguments non-positive-ish.
        let (a, b) = (log_sigmoid(-zb), log_sigmoid(-za));
        b + log1m_exp(a - b)
    } else {
        let (a, b) = (log_sigmoid(za), log_sigmoid(zb));
        b + log1m_exp(a - b)
    };
    let gb = if zb.is_finite() {
        (log_dsigmoid(zb) - logp).exp()
    } else {
        0.0
    };
    let ga = if za.is_finite() {
        -(log_dsigmoid(za) - logp).exp()
    } else {
        0.0
    };
    let mut d_sigma = 0.0;
    if zb.is_finite() {
        d_sigma -= gb * zb / sigma;
    }
    if za.is_finite() {
        d_sigma -= ga * za / sigma;
    }
    LogPmf {
        logp,
        d_mu: -(ga + gb) / sigma,
        d_sigma,
    }
}

pub fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= SIGMA_FLOOR) || !sigma.is_finite() {
        return Err(Error::pre(format!(
            "sigma {sigma} below floor {SIGMA_FLOOR}"
        )));
    }
    Ok(())
}

pub fn log_pmf(k: usize, mu: f64, sigma: f64) -> Result<LogPmf> {
    check_sigma(sigma)?;
    if k >= K {
        return Err(Error::pre(format!("bin {k} outside 0..{K}")));
    }
    Ok(log_pmf_unchecked(k, mu, sigma))
}

pub fn logistic_pmf(k: usize, mu: f64, sigma: f64) -> Result<f64> {
    Ok(log_pmf(k, mu, sigma)?.logp.exp())
}

/// `(ln S(z), ln S(−z))` from a single exp/log1p pair.
fn log_sigmoid_pair(z: f64) -> (f64, f64) {
    if z >= 0.0 {
        let l = (-z).exp().ln_1p();
        (-l, -z - l)
    } else {
        let l = z.exp().ln_1p();
        (z - l, -l)
    }
}

/// `log_pmf_unchecked` for every bin at once, sharing the sigmoid work
/// between neighbouring bins. Bit-identical to the per-bin function.
pub fn log_pmf_row(mu: f64, sigma: f64) -> [LogPmf; K] {
    // Interior edge j sits between bins j and j + 1.
    let mut z = [0.0; K - 1];
    let mut pos = [0.0; K - 1];
    let mut neg = [0.0; K - 1];
    for j in 0..K - 1 {
        let e = j as f64 - (K / 2) as f64 + 0.5;
        z[j] = (e - mu) / sigma;
        (pos[j], neg[j]) = log_sigmoid_pair(z[j]);
    }
    let mut out = [LogPmf {
        logp: 0.0,
        d_mu: 0.0,
        d_sigma: 0.0,
    }; K];
    for (k, o) in out.iter_mut().enumerate() {
        let a = k.checked_sub(1);
        let b = (k < K - 1).then_some(k);
        let logp = match (a, b) {
            (None, Some(b)) => pos[b],
            (Some(a), None) => neg[a],
            (Some(a), Some(b)) if z[a] + z[b] > 0.0 => neg[a] + log1m_exp(neg[b] - neg[a]),
            (Some(a), Some(b)) => pos[b] + log1m_exp(pos[a] - pos[b]),
            (None, None) => unreachable!("K > 1"),
        };
        let (mut ga, mut gb, mut d_sigma) = (0.0, 0.0, 0.0);
        if let Some(b) = b {
            gb = (pos[b] + neg[b] - logp).exp();
            d_sigma -= gb * z[b] / sigma;
        }
        if let Some(a) = a {
            ga = -(pos[a] + neg[a] - logp).exp();
            d_sigma -= ga * z[a] / sigma;
        }
        *o = LogPmf {
            logp,
            d_mu: -(ga + gb) / sigma,
            d_sigma,
        };
    }
    out
}

/// All `K` log-probabilities for one pixel.
pub fn log_pmf_all(mu: f64, sigma: f64) -> [f64; K] {
    log_pmf_row(mu, sigma).map(|l| l.logp)
}

pub fn pmf_all(mu: f64, sigma: f64) -> [f64; K] {
    log_pmf_all(mu, sigma).map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn sig(z: f64) -> f64 {
        1.0 / (1.0 + (-z).exp())
    }

    #[test]
    fn row_matches_per_bin() {
        let mut rng = RngStream::new(11);
        for _ in 0..500 {
            let mu = rng.uniform_range(-45.0, 45.0);
            let sigma = SIGMA_FLOOR + rng.uniform().powi(3) * 60.0;
            let row = log_pmf_row(mu, sigma);
            for (k, r) in row.iter().enumerate() {
                let p = log_pmf_unchecked(k, mu, sigma);
                assert_eq!(r.logp.to_bits(), p.logp.to_bits());
                assert_eq!(r.d_mu.to_bits(), p.d_mu.to_bits());
                assert_eq!(r.d_sigma.to_bits(), p.d_sigma.to_bits());
            }
        }
    }

    #[test]
    fn normalization_on_random_parameters() {
        let mut rng = RngStream::new(1);
        for _ in 0..1000 {
            let mu = rng.uniform_range(-40.0, 40.0);
            let sigma =
                SIGMA_FLOOR + rng.uniform_range(0.0, 3.0).exp2() - 1.0 + rng.uniform() * 20.0;
            let total: f64 = pmf_all(mu, sigma).iter().sum();
            assert!(
                (total - 1.0).abs() < 1e-12,
                "mu {mu} sigma {sigma}: {total}"
            );
        }
    }

    #[test]
    fn symmetric_around_bin_32_centre() {
        for k in 0..K {
            let direct = if k == 0 {
                sig(-31.5)
            } else if k == K - 1 {
                1.0 - sig(31.5 - 1.0)
            } else {
                let c = k as f64 - 32.0;
                sig(c + 0.5) - sig(c - 0.5)
            };
            let p = logistic_pmf(k, 0.0, 1.0).unwrap();
            assert!((p - direct).abs() < 1e-15, "k={k}");
        }
        let p31 = logistic_pmf(31, 0.0, 1.0).unwrap();
        let p33 = logistic_pmf(33, 0.0, 1.0).unwrap();
        assert!((p31 - p33).abs() < 1e-16);
        // σ = 1: mass of the centre bin is S(½) − S(−½) = tanh(¼).
        assert!((logistic_pmf(32, 0.0, 1.0).unwrap() - 0.25f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn concentration_limit() {
        for k in [0, 5, 32, 63] {
            let mu = k as f64 - 32.0;
            assert!(logistic_pmf(k, mu, SIGMA_FLOOR).unwrap() > 1.0 - 1e-12);
        }
    }

    #[test]
    fn far_tails_stay_finite() {
        let lp = log_pmf(0, 30.0, SIGMA_FLOOR).unwrap();
        assert!(lp.logp.is_finite() && lp.logp < -1e4);
        assert!(lp.d_mu.is_finite() && lp.d_sigma.is_finite());
        let lp = log_pmf(40, -31.0, 0.01).unwrap();
        assert!(lp.logp.is_finite() && lp.d_mu.is_finite());
    }

    #[test]
    fn floor_is_enforced() {
        assert!(log_pmf(3, 0.0, 1e-4).is_err());
        assert!(log_pmf(3, 0.0, f64::NAN).is_err());
        assert!(log_pmf(64, 0.0, 1.0).is_err());
    }

    #[test]
    fn analytic_derivatives_match_differences() {
        let mut rng = RngStream::new(7);
        let h = 1e-6;
        for _ in 0..500 {
            let k = rng.below(K as u64) as usize;
            let mu = rng.uniform_range(-34.0, 34.0);
            let sigma = rng.uniform_range(0.05, 12.0);
            let lp = log_pmf_unchecked(k, mu, sigma);
            let dmu = (log_pmf_unchecked(k, mu + h, sigma).logp
                - log_pmf_unchecked(k, mu - h, sigma).logp)
                / (2.0 * h);
            let ds = (log_pmf_unchecked(k, mu, sigma + h).logp
                - log_pmf_unchecked(k, mu, sigma - h).logp)
                / (2.0 * h);
            let tol = |a: f64, b: f64| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()).max(1.0);
            assert!(
                tol(lp.d_mu, dmu),
                "k {k} mu {mu} s {sigma}: {} vs {dmu}",
                lp.d_mu
            );
            assert!(
                tol(lp.d_sigma, ds),
                "k {k} mu {mu} s {sigma}: {} vs {ds}",
                lp.d_sigma
            );
        }
    }
}
