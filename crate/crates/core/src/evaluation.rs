//! Statistics over hedging results: pooled and per-task PnL moments,
//! variance aggregates, histograms, delta slices, implied vols and
//! embedding export.

use serde::Serialize;

use crate::analytic::{bs_delta, bs_price};
use crate::claims::HedgeResult;
use crate::market_models::ModelSpec;
use crate::neural::{FeatureRow, NetworkParams};
use crate::{Error, Result};

pub fn sample_mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = sample_mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Empirical quantile of sorted data, linear interpolation between order
/// statistics at position `q (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskStats {
    pub task_id: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PnLStats {
    /// Smallest per-task sample count.
    pub simulations_per_task: usize,
    pub mean: f64,
    pub std: f64,
    pub std_min: f64,
    pub std_max: f64,
    pub quantile_1pct: f64,
    pub quantile_10pct: f64,
    pub per_task: Vec<TaskStats>,
}

fn task_stats(results: &[HedgeResult]) -> Result<Vec<TaskStats>> {
    if results.is_empty() {
        return Err(Error::Empty("no hedge results".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    results
        .iter()
        .map(|r| {
            if r.pnl.len() < 2 {
                return Err(Error::InvalidArgument(format!("task {} has fewer than two PnL samples", r.task_id)));
            }
            if !seen.insert(r.task_id) {
                return Err(Error::InvalidArgument(format!("task {} listed twice", r.task_id)));
            }
            let variance = sample_variance(&r.pnl);
            Ok(TaskStats { task_id: r.task_id, n: r.pnl.len(), mean: sample_mean(&r.pnl), std: variance.sqrt(), variance })
        })
        .collect()
}

/// Pooled moments and quantiles over all tasks' PnLs together with the
/// per-task standard deviation extremes.
pub fn pnl_stats(results: &[HedgeResult]) -> Result<PnLStats> {
    let per_task = task_stats(results)?;
    let mut pooled: Vec<f64> = results.iter().flat_map(|r| r.pnl.iter().copied()).collect();
    if pooled.iter().any(|x| !x.is_finite()) {
        return Err(Error::Domain("non-finite PnL".into()));
    }
    let variance = sample_variance(&pooled);
    let mean = sample_mean(&pooled);
    pooled.sort_by(f64::total_cmp);
    let stds = per_task.iter().map(|t| t.std);
    Ok(PnLStats {
        simulations_per_task: per_task.iter().map(|t| t.n).min().unwrap_or(0),
        mean,
        std: variance.sqrt(),
        std_min: stds.clone().fold(f64::INFINITY, f64::min),
        std_max: stds.fold(0.0, f64::max),
        quantile_1pct: quantile_sorted(&pooled, 0.01),
        quantile_10pct: quantile_sorted(&pooled, 0.10),
        per_task,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarianceAggregate {
    pub mean_variance: f64,
    pub median_variance: f64,
    pub max_variance: f64,
}

pub fn variance_aggregate(results: &[HedgeResult]) -> Result<VarianceAggregate> {
    let mut v: Vec<f64> = task_stats(results)?.into_iter().map(|t| t.variance).collect();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) };
    Ok(VarianceAggregate { mean_variance: sample_mean(&v), median_variance: median, max_variance: v[v.len() - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `n_bins + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Fixed-width bins over `[lo, hi]`; samples outside fall into the end bins.
pub fn histogram(samples: &[f64], n_bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    if !(lo < hi && lo.is_finite() && hi.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid histogram range [{lo}, {hi}]")));
    }
    let width = (hi - lo) / n_bins as f64;
    let edges = (0..=n_bins).map(|i| if i == n_bins { hi } else { lo + i as f64 * width }).collect();
    let mut counts = vec![0; n_bins];
    for &x in samples {
        let bin = ((x - lo) / width).floor();
        let bin = if bin.is_nan() { 0 } else { bin.clamp(0.0, (n_bins - 1) as f64) as usize };
        counts[bin] += 1;
    }
    Ok(Histogram { edges, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaPoint {
    pub spot: f64,
    pub network: f64,
    pub black_scholes: f64,
}

/// Network hedge ratio of `task_id` across `spots` at a fixed time to
/// maturity, next to the Black-Scholes delta at `sigma`. Both are given for
/// the short position, i.e. as units of the underlying held.
pub fn delta_slice(
    params: &NetworkParams,
    task_id: usize,
    strike: f64,
    tau: f64,
    sigma: f64,
    spots: &[f64],
) -> Result<Vec<DeltaPoint>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    spots
        .iter()
        .map(|&s| {
            Ok(DeltaPoint {
                spot: s,
                network: params.forward_delta(task_id, FeatureRow::new(s, strike, tau))?,
                black_scholes: bs_delta(s, strike, sigma, tau),
            })
        })
        .collect()
}

/// Black-Scholes implied volatility of a call price by bisection.
pub fn implied_vol(price: f64, s: f64, strike: f64, tau: f64) -> Result<f64> {
    if !(s > 0.0 && strike > 0.0 && tau > 0.0) {
        return Err(Error::InvalidArgument("implied vol needs positive spot, strike and maturity".into()));
    }
    let intrinsic = (s - strike).max(0.0);
    if !(price > intrinsic && price < s) {
        return Err(Error::Domain(format!("price {price} outside the no-arbitrage range ({intrinsic}, {s})")));
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while bs_price(s, strike, hi, tau) < price {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(Error::Domain(format!("no volatility below 1000 reproduces price {price}")));
        }
    }
    while hi - lo >= 1e-10 {
        let mid = 0.5 * (lo + hi);
        if bs_price(s, strike, mid, tau) < price {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmbeddingRow {
    pub task_id: usize,
    pub model: ModelSpec,
    pub embedding: Vec<f64>,
    pub atm_price: f64,
}

/// One row per task with its model, learned embedding and ATM price.
pub fn export_embeddings(params: &NetworkParams, models: &[ModelSpec], atm_prices: &[f64]) -> Result<Vec<EmbeddingRow>> {
    if models.len() != params.n_tasks() || atm_prices.len() != models.len() {
        return Err(Error::DimensionMismatch { expected: params.n_tasks(), actual: models.len().min(atm_prices.len()) });
    }
    models
        .iter()
        .zip(atm_prices)
        .enumerate()
        .map(|(i, (m, &p))| Ok(EmbeddingRow { task_id: i, model: *m, embedding: params.embed(i)?.to_vec(), atm_price: p }))
        .collect()
}

fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        idx[i..=j].iter().for_each(|&k| r[k] = avg);
        i = j + 1;
    }
    r
}

/// Spearman rank correlation, ties given their average rank.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), actual: y.len() });
    }
    if x.len() < 2 {
        return Err(Error::Empty("rank correlation needs two points".into()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, my) = (sample_mean(&rx), sample_mean(&ry));
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::Domain("rank correlation of a constant series".into()));
    }
    Ok(cov / (vx * vy).sqrt())
}
