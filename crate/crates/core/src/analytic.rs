//! Black-Scholes formulas (zero rates) and the delta-hedging benchmark.

use crate::claims::{Claim, HedgeResult};
use crate::market_models::PathSet;
use crate::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF through `erfc`, accurate to a few ulp in both tails.
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn d1(s: f64, strike: f64, sigma: f64, tau: f64) -> f64 {
    let vol = sigma * tau.sqrt();
    ((s / strike).ln() + 0.5 * vol * vol) / vol
}

/// Call price `s N(d1) - K N(d2)`; intrinsic value at `tau = 0`.
pub fn bs_price(s: f64, strike: f64, sigma: f64, tau: f64) -> f64 {
    if tau <= 0.0 || sigma <= 0.0 {
        return (s - strike).max(0.0);
    }
    let d1 = d1(s, strike, sigma, tau);
    let d2 = d1 - sigma * tau.sqrt();
    s * norm_cdf(d1) - strike * norm_cdf(d2)
}

/// Call delta `N(d1)`. At expiry this is the step function (1/2 at the strike).
pub fn bs_delta(s: f64, strike: f64, sigma: f64, tau: f64) -> f64 {
    if tau <= 0.0 || sigma <= 0.0 {
        return match s.partial_cmp(&strike) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        };
    }
    norm_cdf(d1(s, strike, sigma, tau))
}

/// Delta-hedge `claim` on every path with volatility `sigma_hedge + vol_shift`.
///
/// The hedge offsets the claim: a short call is hedged with `+N(d1)` units
/// of the underlying, a long call with `-N(d1)`.
pub fn bs_hedge_pnl(paths: &PathSet, claim: &Claim, sigma_hedge: f64, vol_shift: f64) -> Result<HedgeResult> {
    let sigma = sigma_hedge + vol_shift;
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("hedge volatility must be positive, got {sigma}")));
    }
    let grid = paths.grid;
    let n = grid.n_steps();
    let sign = -claim.position.sign();
    let mut deltas = Vec::with_capacity(paths.n_paths() * n);
    for path in paths.paths() {
        for (k, &s) in path[..n].iter().enumerate() {
            deltas.push(sign * bs_delta(s, claim.strike, sigma, grid.time_to_maturity(k)));
        }
    }
    HedgeResult::from_deltas(claim, paths, deltas)
}

/// Annualized volatility of all one-step log returns in the set, pooled over
/// paths and steps, mean removed, population normalization.
pub fn realized_vol(paths: &PathSet) -> Result<f64> {
    let n_obs = paths.n_paths() * paths.n_steps();
    if n_obs < 2 {
        return Err(Error::InvalidArgument("realized volatility needs at least two returns".into()));
    }
    let returns = || paths.paths().flat_map(|p| p.windows(2).map(|w| (w[1] / w[0]).ln()));
    let mean = returns().sum::<f64>() / n_obs as f64;
    let var = returns().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n_obs as f64;
    Ok((var / paths.grid.dt()).sqrt())
}
