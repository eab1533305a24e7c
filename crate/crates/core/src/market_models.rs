//! Monte Carlo path generation for the four model families.
//!
//! All models are simulated under zero rates with the discounted spot a
//! martingale:
//!
//! - GBM: exact log-Euler step.
//! - Heston and Heston with lognormal jumps: full-truncation Euler on the
//!   variance, log-spot step with the truncated left-endpoint variance, jump
//!   compensator `exp(-lambda_j * mu_j * dt)`.
//! - BNS: exact OU recursion for the variance with jumps placed inside the
//!   interval, log-price diffusion frozen at the left-endpoint variance.
//!
//! Draw order within one path stream is fixed: `n_steps` normals for the
//! spot, then `n_steps` normals for the variance (stochastic-vol models
//! only), then the jump draws step by step. Models that share a prefix of
//! that order therefore see identical noise, which is what makes the
//! degenerate reductions (Heston with zero vol-of-vol against GBM, jump model
//! with zero intensity against Heston) bit-comparable.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{aux_stream, path_stream, Purpose};
use crate::{Error, Result};

/// Equally spaced trading dates `t_k = k * T / n`, `k = 0..=n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawGrid", into = "RawGrid")]
pub struct TimeGrid {
    maturity: f64,
    n_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGrid {
    maturity: f64,
    n_steps: usize,
}

impl TryFrom<RawGrid> for TimeGrid {
    type Error = Error;

    fn try_from(raw: RawGrid) -> Result<Self> {
        TimeGrid::new(raw.maturity, raw.n_steps)
    }
}

impl From<TimeGrid> for RawGrid {
    fn from(grid: TimeGrid) -> Self {
        RawGrid { maturity: grid.maturity, n_steps: grid.n_steps }
    }
}

impl TimeGrid {
    pub fn new(maturity: f64, n_steps: usize) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidGrid("n_steps must be at least 1".into()));
        }
        if !(maturity.is_finite() && maturity > 0.0) {
            return Err(Error::InvalidGrid(format!("maturity must be positive, got {maturity}")));
        }
        Ok(Self { maturity, n_steps })
    }

    /// Daily grid: `n_days` steps of one calendar day each.
    pub fn daily(n_days: usize) -> Result<Self> {
        Self::new(n_days as f64 / 365.0, n_days)
    }

    pub fn maturity(&self) -> f64 {
        self.maturity
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.maturity / self.n_steps as f64
    }

    /// `t_k`; the last date is exactly the maturity.
    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.maturity
        } else {
            k as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }

    pub fn time_to_maturity(&self, k: usize) -> f64 {
        self.maturity - self.time(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    #[serde(default)]
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonParams {
    /// Initial variance; the long-run variance `eta` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<f64>,
    pub kappa: f64,
    pub eta: f64,
    pub theta: f64,
    pub rho: f64,
}

impl HestonParams {
    pub fn initial_variance(&self) -> f64 {
        self.v0.unwrap_or(self.eta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonJumpParams {
    #[serde(flatten)]
    pub heston: HestonParams,
    /// Poisson jump intensity per year.
    pub lambda_j: f64,
    /// Mean relative jump size, `E[J]`.
    pub mu_j: f64,
    /// Standard deviation of `log(1 + J)`.
    pub sigma_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BnsParams {
    pub sigma0_sq: f64,
    pub lambda: f64,
    /// Intensity of the compound Poisson subordinator.
    pub a: f64,
    /// Inverse mean of the exponential jump marks.
    pub b: f64,
    /// Leverage, non-positive.
    pub rho: f64,
}

impl BnsParams {
    /// Drift correction `-lambda * k(-rho)` that keeps the spot a martingale.
    pub fn compensator(&self) -> Result<f64> {
        Ok(-self.lambda * bns_cumulant(-self.rho, self.a, self.b)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Gbm(GbmParams),
    Heston(HestonParams),
    HestonJump(HestonJumpParams),
    Bns(BnsParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Gbm,
    Heston,
    HestonJump,
    Bns,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Gbm => "gbm",
            ModelKind::Heston => "heston",
            ModelKind::HestonJump => "heston_jump",
            ModelKind::Bns => "bns",
        }
    }

    pub fn code(&self) -> u32 {
        match self {
            ModelKind::Gbm => 0,
            ModelKind::Heston => 1,
            ModelKind::HestonJump => 2,
            ModelKind::Bns => 3,
        }
    }
}

fn check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidModel(what()))
    }
}

fn validate_heston(p: &HestonParams) -> Result<()> {
    if let Some(v0) = p.v0 {
        check(v0.is_finite() && v0 >= 0.0, || format!("v0 must be >= 0, got {v0}"))?;
    }
    check(p.kappa.is_finite() && p.kappa > 0.0, || format!("kappa must be > 0, got {}", p.kappa))?;
    check(p.eta.is_finite() && p.eta > 0.0, || format!("eta must be > 0, got {}", p.eta))?;
    // theta = 0 is allowed: it is the constant-variance limit.
    check(p.theta.is_finite() && p.theta >= 0.0, || format!("theta must be >= 0, got {}", p.theta))?;
    check((-1.0..=1.0).contains(&p.rho), || format!("rho must lie in [-1, 1], got {}", p.rho))
}

impl ModelSpec {
    pub fn gbm(mu: f64, sigma: f64) -> Result<Self> {
        let spec = ModelSpec::Gbm(GbmParams { mu, sigma });
        spec.validate()?;
        Ok(spec)
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelSpec::Gbm(_) => ModelKind::Gbm,
            ModelSpec::Heston(_) => ModelKind::Heston,
            ModelSpec::HestonJump(_) => ModelKind::HestonJump,
            ModelSpec::Bns(_) => ModelKind::Bns,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Gbm(p) => {
                check(p.mu.is_finite(), || format!("mu must be finite, got {}", p.mu))?;
                check(p.sigma.is_finite() && p.sigma >= 0.0, || {
                    format!("sigma must be >= 0, got {}", p.sigma)
                })
            }
            ModelSpec::Heston(p) => validate_heston(p),
            ModelSpec::HestonJump(p) => {
                validate_heston(&p.heston)?;
                check(p.lambda_j.is_finite() && p.lambda_j >= 0.0, || {
                    format!("lambda_j must be >= 0, got {}", p.lambda_j)
                })?;
                check(p.mu_j.is_finite() && p.mu_j > -1.0, || format!("mu_j must be > -1, got {}", p.mu_j))?;
                check(p.sigma_j.is_finite() && p.sigma_j >= 0.0, || {
                    format!("sigma_j must be >= 0, got {}", p.sigma_j)
                })
            }
            ModelSpec::Bns(p) => {
                check(p.sigma0_sq.is_finite() && p.sigma0_sq >= 0.0, || {
                    format!("sigma0_sq must be >= 0, got {}", p.sigma0_sq)
                })?;
                check(p.lambda.is_finite() && p.lambda > 0.0, || format!("lambda must be > 0, got {}", p.lambda))?;
                check(p.a.is_finite() && p.a > 0.0, || format!("a must be > 0, got {}", p.a))?;
                check(p.b.is_finite() && p.b > 0.0, || format!("b must be > 0, got {}", p.b))?;
                check(p.rho.is_finite() && p.rho <= 0.0, || format!("rho must be <= 0, got {}", p.rho))?;
                check(p.b - p.rho > 0.0, || format!("b - rho must be > 0, got {}", p.b - p.rho))
            }
        }
    }

    /// Named parameters in a fixed order. Heston `v0` is reported resolved.
    pub fn named_params(&self) -> Vec<(&'static str, f64)> {
        fn heston(p: &HestonParams) -> Vec<(&'static str, f64)> {
            vec![
                ("v0", p.initial_variance()),
                ("kappa", p.kappa),
                ("eta", p.eta),
                ("theta", p.theta),
                ("rho", p.rho),
            ]
        }
        match self {
            ModelSpec::Gbm(p) => vec![("mu", p.mu), ("sigma", p.sigma)],
            ModelSpec::Heston(p) => heston(p),
            ModelSpec::HestonJump(p) => {
                let mut out = heston(&p.heston);
                out.extend([("lambda_j", p.lambda_j), ("mu_j", p.mu_j), ("sigma_j", p.sigma_j)]);
                out
            }
            ModelSpec::Bns(p) => vec![
                ("sigma0_sq", p.sigma0_sq),
                ("lambda", p.lambda),
                ("a", p.a),
                ("b", p.b),
                ("rho", p.rho),
            ],
        }
    }

    /// Flat parameter vector for binary descriptors. An unset Heston `v0`
    /// is encoded as NaN so that decoding restores `None`.
    pub fn to_descriptor(&self) -> (u32, Vec<f64>) {
        let heston = |p: &HestonParams| vec![p.v0.unwrap_or(f64::NAN), p.kappa, p.eta, p.theta, p.rho];
        let values = match self {
            ModelSpec::Gbm(p) => vec![p.mu, p.sigma],
            ModelSpec::Heston(p) => heston(p),
            ModelSpec::HestonJump(p) => {
                let mut v = heston(&p.heston);
                v.extend([p.lambda_j, p.mu_j, p.sigma_j]);
                v
            }
            ModelSpec::Bns(p) => vec![p.sigma0_sq, p.lambda, p.a, p.b, p.rho],
        };
        (self.kind().code(), values)
    }

    pub fn from_descriptor(code: u32, values: &[f64]) -> Result<Self> {
        let expect = |n: usize| {
            if values.len() == n {
                Ok(())
            } else {
                Err(Error::DimensionMismatch { expected: n, actual: values.len() })
            }
        };
        let heston = |v: &[f64]| HestonParams {
            v0: if v[0].is_nan() { None } else { Some(v[0]) },
            kappa: v[1],
            eta: v[2],
            theta: v[3],
            rho: v[4],
        };
        let spec = match code {
            0 => {
                expect(2)?;
                ModelSpec::Gbm(GbmParams { mu: values[0], sigma: values[1] })
            }
            1 => {
                expect(5)?;
                ModelSpec::Heston(heston(values))
            }
            2 => {
                expect(8)?;
                ModelSpec::HestonJump(HestonJumpParams {
                    heston: heston(values),
                    lambda_j: values[5],
                    mu_j: values[6],
                    sigma_j: values[7],
                })
            }
            3 => {
                expect(5)?;
                ModelSpec::Bns(BnsParams {
                    sigma0_sq: values[0],
                    lambda: values[1],
                    a: values[2],
                    b: values[3],
                    rho: values[4],
                })
            }
            other => return Err(Error::InvalidModel(format!("unknown model code {other}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Simulated trajectories of one task on a fixed grid.
///
/// `spot` (and `variance`, when the model has one) are row-major
/// `n_paths x (n_steps + 1)` matrices. For Heston-type models the variance
/// column holds the scheme state, which full truncation may leave slightly
/// negative; the dynamics only ever use its positive part.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSet {
    pub task_id: usize,
    pub seed: u64,
    pub grid: TimeGrid,
    pub model: ModelSpec,
    n_paths: usize,
    spot: Vec<f64>,
    variance: Option<Vec<f64>>,
}

impl PathSet {
    pub fn from_parts(
        task_id: usize,
        seed: u64,
        grid: TimeGrid,
        model: ModelSpec,
        spot: Vec<f64>,
        variance: Option<Vec<f64>>,
    ) -> Result<Self> {
        let width = grid.n_steps() + 1;
        if spot.is_empty() || !spot.len().is_multiple_of(width) {
            return Err(Error::DimensionMismatch { expected: width, actual: spot.len() });
        }
        if let Some(v) = &variance {
            if v.len() != spot.len() {
                return Err(Error::DimensionMismatch { expected: spot.len(), actual: v.len() });
            }
        }
        if let Some(bad) = spot.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::InvalidArgument(format!("spot prices must be positive, found {bad}")));
        }
        Ok(Self { task_id, seed, grid, model, n_paths: spot.len() / width, spot, variance })
    }

    pub fn with_task_id(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        self
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn s0(&self) -> f64 {
        self.spot[0]
    }

    pub fn path(&self, p: usize) -> &[f64] {
        let w = self.grid.n_steps() + 1;
        &self.spot[p * w..(p + 1) * w]
    }

    pub fn terminal(&self, p: usize) -> f64 {
        self.path(p)[self.grid.n_steps()]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[f64]> {
        self.spot.chunks_exact(self.grid.n_steps() + 1)
    }

    pub fn spot_matrix(&self) -> &[f64] {
        &self.spot
    }

    pub fn variance_matrix(&self) -> Option<&[f64]> {
        self.variance.as_deref()
    }

    pub fn variance_path(&self, p: usize) -> Option<&[f64]> {
        let w = self.grid.n_steps() + 1;
        self.variance.as_ref().map(|v| &v[p * w..(p + 1) * w])
    }

    /// Paths `range.start..range.end` as a new set with the same identity.
    pub fn select(&self, range: std::ops::Range<usize>) -> Result<PathSet> {
        if range.start >= range.end || range.end > self.n_paths {
            return Err(Error::InvalidArgument(format!(
                "path range {range:?} invalid for {} paths",
                self.n_paths
            )));
        }
        let w = self.grid.n_steps() + 1;
        let cut = |m: &Vec<f64>| m[range.start * w..range.end * w].to_vec();
        Ok(PathSet {
            task_id: self.task_id,
            seed: self.seed,
            grid: self.grid,
            model: self.model,
            n_paths: range.len(),
            spot: cut(&self.spot),
            variance: self.variance.as_ref().map(cut),
        })
    }

    /// Leading `1 - eval_fraction` of the paths for training, the rest held out.
    pub fn split(&self, eval_fraction: f64) -> Result<(PathSet, Option<PathSet>)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::InvalidArgument(format!("eval fraction {eval_fraction} not in [0, 1)")));
        }
        let n_train = ((self.n_paths as f64) * (1.0 - eval_fraction)).round() as usize;
        let n_train = n_train.clamp(1, self.n_paths);
        if n_train == self.n_paths {
            return Ok((self.clone(), None));
        }
        Ok((self.select(0..n_train)?, Some(self.select(n_train..self.n_paths)?)))
    }
}

/// Exact log-Euler step of `dS = mu S dt + sigma S dW`.
#[inline]
pub fn gbm_step(s: f64, z: f64, dt: f64, mu: f64, sigma: f64) -> f64 {
    s * ((mu - 0.5 * sigma * sigma) * dt + sigma * dt.sqrt() * z).exp()
}

/// Full-truncation Euler step of the Heston dynamics under zero rates.
/// `z1` drives the spot; the variance noise is `rho z1 + sqrt(1 - rho^2) z2`.
#[inline]
pub fn heston_step(s: f64, v: f64, z1: f64, z2: f64, dt: f64, p: &HestonParams) -> (f64, f64) {
    let v_pos = v.max(0.0);
    let vol_dt = (v_pos * dt).sqrt();
    let w = p.rho * z1 + (1.0 - p.rho * p.rho).sqrt() * z2;
    let v_next = v + p.kappa * (p.eta - v_pos) * dt + p.theta * vol_dt * w;
    let s_next = s * (-0.5 * v_pos * dt + vol_dt * z1).exp();
    (s_next, v_next)
}

/// Multiplicative size `1 + J` of one jump, `log(1 + J) ~ N(log(1 + mu_j) - sigma_j^2 / 2, sigma_j^2)`.
#[inline]
pub fn jump_factor(xi: f64, mu_j: f64, sigma_j: f64) -> f64 {
    (1.0 + mu_j) * (sigma_j * xi - 0.5 * sigma_j * sigma_j).exp()
}

/// Heston step plus compensated lognormal jumps, one normal per jump.
#[inline]
pub fn heston_jump_step(
    s: f64,
    v: f64,
    z1: f64,
    z2: f64,
    jump_normals: &[f64],
    dt: f64,
    p: &HestonJumpParams,
) -> (f64, f64) {
    let (mut s_next, v_next) = heston_step(s, v, z1, z2, dt, &p.heston);
    s_next *= (-p.lambda_j * p.mu_j * dt).exp();
    for &xi in jump_normals {
        s_next *= jump_factor(xi, p.mu_j, p.sigma_j);
    }
    (s_next, v_next)
}

/// Cumulant function `k(u) = log E[exp(-u z_1)] = -a u / (b + u)` of the
/// BNS subordinator.
pub fn bns_cumulant(u: f64, a: f64, b: f64) -> Result<f64> {
    if !(b + u > 0.0) {
        return Err(Error::Domain(format!("cumulant needs b + u > 0, got b = {b}, u = {u}")));
    }
    Ok(-a * u / (b + u))
}

/// One arrival of the time-changed subordinator inside a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnsJump {
    /// Arrival time measured from the start of the step, in `(0, dt]`.
    pub offset: f64,
    /// Exponential mark with mean `1 / b`.
    pub size: f64,
}

/// BNS step in log price. `compensator` is [`BnsParams::compensator`].
#[inline]
pub fn bns_step(
    log_s: f64,
    v: f64,
    z: f64,
    dt: f64,
    jumps: &[BnsJump],
    p: &BnsParams,
    compensator: f64,
) -> (f64, f64) {
    let mut v_next = (-p.lambda * dt).exp() * v;
    let mut jump_sum = 0.0;
    for j in jumps {
        v_next += (-p.lambda * (dt - j.offset)).exp() * j.size;
        jump_sum += j.size;
    }
    let log_next = log_s + (compensator - 0.5 * v) * dt + (v * dt).sqrt() * z + p.rho * jump_sum;
    (log_next, v_next)
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    let dist = Poisson::new(mean).expect("positive finite Poisson mean");
    let n: f64 = dist.sample(rng);
    n as usize
}

/// Fill one path. `spot` and `variance` have length `n_steps + 1`.
/// The model must already be validated.
fn fill_path(
    model: &ModelSpec,
    grid: &TimeGrid,
    s0: f64,
    rng: &mut ChaCha8Rng,
    spot: &mut [f64],
    variance: Option<&mut [f64]>,
) {
    let n = grid.n_steps();
    let dt = grid.dt();
    let z1: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    spot[0] = s0;
    match model {
        ModelSpec::Gbm(p) => {
            for k in 0..n {
                spot[k + 1] = gbm_step(spot[k], z1[k], dt, p.mu, p.sigma);
            }
        }
        ModelSpec::Heston(p) => {
            let z2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let var = variance.expect("variance buffer");
            var[0] = p.initial_variance();
            for k in 0..n {
                (spot[k + 1], var[k + 1]) = heston_step(spot[k], var[k], z1[k], z2[k], dt, p);
            }
        }
        ModelSpec::HestonJump(p) => {
            let z2: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            let var = variance.expect("variance buffer");
            var[0] = p.heston.initial_variance();
            let mut normals = Vec::new();
            for k in 0..n {
                let count = poisson_count(rng, p.lambda_j * dt);
                normals.clear();
                normals.extend((0..count).map(|_| rng.sample::<f64, _>(StandardNormal)));
                (spot[k + 1], var[k + 1]) = heston_jump_step(spot[k], var[k], z1[k], z2[k], &normals, dt, p);
            }
        }
        ModelSpec::Bns(p) => {
            let compensator = p.compensator().expect("validated BNS parameters");
            let var = variance.expect("variance buffer");
            var[0] = p.sigma0_sq;
            let mut log_s = s0.ln();
            let mut jumps = Vec::new();
            for k in 0..n {
                let count = poisson_count(rng, p.a * p.lambda * dt);
                jumps.clear();
                for _ in 0..count {
                    let u: f64 = rng.random();
                    let e: f64 = rng.sample(Exp1);
                    jumps.push(BnsJump { offset: (1.0 - u) * dt, size: e / p.b });
                }
                (log_s, var[k + 1]) = bns_step(log_s, var[k], z1[k], dt, &jumps, p, compensator);
                spot[k + 1] = log_s.exp();
            }
        }
    }
}

fn has_variance(model: &ModelSpec) -> bool {
    !matches!(model, ModelSpec::Gbm(_))
}

/// One path, generated from the stream `(seed, path_index)`. It equals row
/// `path_index` of any [`simulate`] call with the same arguments.
pub fn simulate_path(
    model: &ModelSpec,
    grid: &TimeGrid,
    s0: f64,
    seed: u64,
    path_index: usize,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    model.validate()?;
    check_spot(s0)?;
    let w = grid.n_steps() + 1;
    let mut spot = vec![0.0; w];
    let mut var = has_variance(model).then(|| vec![0.0; w]);
    let mut rng = path_stream(seed, path_index as u64);
    fill_path(model, grid, s0, &mut rng, &mut spot, var.as_deref_mut());
    Ok((spot, var))
}

fn check_spot(s0: f64) -> Result<()> {
    if s0.is_finite() && s0 > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("initial spot must be positive, got {s0}")))
    }
}

/// Simulate `n_paths` paths. The result is a pure function of the arguments
/// and does not depend on the rayon thread count.
pub fn simulate(model: &ModelSpec, grid: &TimeGrid, n_paths: usize, s0: f64, seed: u64) -> Result<PathSet> {
    model.validate()?;
    check_spot(s0)?;
    if n_paths == 0 {
        return Err(Error::InvalidArgument("n_paths must be at least 1".into()));
    }
    let w = grid.n_steps() + 1;
    let mut spot = vec![0.0; n_paths * w];
    let mut variance = has_variance(model).then(|| vec![0.0; n_paths * w]);
    match variance.as_mut() {
        Some(var) => spot
            .par_chunks_mut(w)
            .zip(var.par_chunks_mut(w))
            .enumerate()
            .for_each(|(p, (s_row, v_row))| {
                let mut rng = path_stream(seed, p as u64);
                fill_path(model, grid, s0, &mut rng, s_row, Some(v_row));
            }),
        None => spot.par_chunks_mut(w).enumerate().for_each(|(p, s_row)| {
            let mut rng = path_stream(seed, p as u64);
            fill_path(model, grid, s0, &mut rng, s_row, None);
        }),
    }
    PathSet::from_parts(0, seed, *grid, *model, spot, variance)
}

/// Closed interval used for parameter sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub min: f64,
    pub max: f64,
}

impl Interval {
    pub const fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    pub fn point(x: f64) -> Self {
        Self { min: x, max: x }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.min.is_finite() && self.max.is_finite() && self.min <= self.max {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("range for {name} is invalid: [{}, {}]", self.min, self.max)))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let u: f64 = rng.random();
        if self.min == self.max {
            self.min
        } else {
            self.min + u * (self.max - self.min)
        }
    }
}

/// Parameter ranges for the synthetic stochastic-volatility family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvRanges {
    /// Heston initial variance; when absent each model starts at its `eta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v0: Option<Interval>,
    pub kappa: Interval,
    pub eta: Interval,
    pub theta: Interval,
    pub rho: Interval,
    pub lambda_j: Interval,
    pub mu_j: Interval,
    pub sigma_j: Interval,
    pub sigma0_sq: Interval,
    pub bns_lambda: Interval,
    pub bns_a: Interval,
    pub bns_b: Interval,
    pub bns_rho: Interval,
}

impl Default for SvRanges {
    /// Ranges that put 30-day ATM implied vols roughly between 0.1 and 0.8.
    fn default() -> Self {
        Self {
            v0: None,
            kappa: Interval::new(1.0, 4.0),
            eta: Interval::new(0.01, 0.4),
            theta: Interval::new(0.2, 0.8),
            rho: Interval::new(-0.9, -0.3),
            lambda_j: Interval::new(0.5, 3.0),
            mu_j: Interval::new(-0.15, 0.0),
            sigma_j: Interval::new(0.05, 0.25),
            sigma0_sq: Interval::new(0.01, 0.4),
            bns_lambda: Interval::new(0.5, 3.0),
            bns_a: Interval::new(0.5, 2.0),
            bns_b: Interval::new(5.0, 30.0),
            bns_rho: Interval::new(-1.0, -0.1),
        }
    }
}

impl SvRanges {
    fn validate(&self) -> Result<()> {
        if let Some(v0) = &self.v0 {
            v0.validate("v0")?;
        }
        for (name, r) in [
            ("kappa", &self.kappa),
            ("eta", &self.eta),
            ("theta", &self.theta),
            ("rho", &self.rho),
            ("lambda_j", &self.lambda_j),
            ("mu_j", &self.mu_j),
            ("sigma_j", &self.sigma_j),
            ("sigma0_sq", &self.sigma0_sq),
            ("bns_lambda", &self.bns_lambda),
            ("bns_a", &self.bns_a),
            ("bns_b", &self.bns_b),
            ("bns_rho", &self.bns_rho),
        ] {
            r.validate(name)?;
        }
        Ok(())
    }
}

/// Sample `n_models` specs cycling Heston, Heston with jumps, BNS.
pub fn sample_sv_family(n_models: usize, ranges: &SvRanges, seed: u64) -> Result<Vec<ModelSpec>> {
    if n_models == 0 {
        return Err(Error::Empty("n_models must be at least 1".into()));
    }
    ranges.validate()?;
    let mut rng = aux_stream(seed, Purpose::ModelSampling);
    let mut out = Vec::with_capacity(n_models);
    for i in 0..n_models {
        let heston = |rng: &mut ChaCha8Rng| HestonParams {
            v0: ranges.v0.map(|r| r.sample(rng)),
            kappa: ranges.kappa.sample(rng),
            eta: ranges.eta.sample(rng),
            theta: ranges.theta.sample(rng),
            rho: ranges.rho.sample(rng),
        };
        let spec = match i % 3 {
            0 => ModelSpec::Heston(heston(&mut rng)),
            1 => ModelSpec::HestonJump(HestonJumpParams {
                heston: heston(&mut rng),
                lambda_j: ranges.lambda_j.sample(&mut rng),
                mu_j: ranges.mu_j.sample(&mut rng),
                sigma_j: ranges.sigma_j.sample(&mut rng),
            }),
            _ => ModelSpec::Bns(BnsParams {
                sigma0_sq: ranges.sigma0_sq.sample(&mut rng),
                lambda: ranges.bns_lambda.sample(&mut rng),
                a: ranges.bns_a.sample(&mut rng),
                b: ranges.bns_b.sample(&mut rng),
                rho: ranges.bns_rho.sample(&mut rng),
            }),
        };
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

/// GBM family with volatilities drawn uniformly from `sigma`.
pub fn sample_gbm_family(n_models: usize, sigma: Interval, mu: f64, seed: u64) -> Result<Vec<ModelSpec>> {
    if n_models == 0 {
        return Err(Error::Empty("n_models must be at least 1".into()));
    }
    sigma.validate("sigma")?;
    let mut rng = aux_stream(seed, Purpose::ModelSampling);
    (0..n_models).map(|_| ModelSpec::gbm(mu, sigma.sample(&mut rng))).collect()
}

/// Uniform volatilities drawn one per equal-width stratum, so task `i` gets a
/// uniform draw from the `i`-th of `n_models` sub-intervals. The family mean
/// then tracks the interval midpoint far more tightly than independent draws.
pub fn sample_gbm_family_stratified(n_models: usize, sigma: Interval, mu: f64, seed: u64) -> Result<Vec<ModelSpec>> {
    if n_models == 0 {
        return Err(Error::Empty("n_models must be at least 1".into()));
    }
    sigma.validate("sigma")?;
    let mut rng = aux_stream(seed, Purpose::ModelSampling);
    let width = (sigma.max - sigma.min) / n_models as f64;
    (0..n_models)
        .map(|i| {
            let u: f64 = rng.random();
            ModelSpec::gbm(mu, sigma.min + (i as f64 + u) * width)
        })
        .collect()
}
