//! Quadratic hedging loss and its minimization.
//!
//! The loss of a batch of paths is `mean_p (Z_p + sum_k delta_pk dS_pk)^2`
//! with the premium left out. Its gradient with respect to the network
//! output at `(p, k)` is `2 PnL_p dS_pk / B`, which is fed into the
//! network's backward pass.
//!
//! Two fitting modes share one loop: a full multi-task fit of all
//! parameters, and recalibration where a new task gets one extra embedding
//! row (initialized at the mean of the existing rows) and only that row is
//! trained.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::claims::{mc_premium, Claim, HedgeResult};
use crate::market_models::{PathSet, TimeGrid};
use crate::neural::{FeatureRow, GradScope, NetworkArch, NetworkParams, Tape};
use crate::rng::{aux_stream, Purpose};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    EmbeddingOnly { new_task_id: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub mode: TrainMode,
    /// Share of each task's paths held out for the evaluation loss.
    pub eval_fraction: f64,
    /// Add each task's Monte Carlo premium (over its training paths) to the
    /// payoff inside the loss. Off by default. The population minimizer is
    /// the same either way because hedging gains have zero mean. On small
    /// samples, though, the uncentred loss rewards strategies that bet on the
    /// sample drift to offset the premium.
    #[serde(default)]
    pub include_premium: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            epochs: 1000,
            lr_initial: 5e-4,
            lr_final: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            mode: TrainMode::Full,
            eval_fraction: 0.2,
            include_premium: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_initial && self.lr_initial.is_finite()) {
            return bad(format!("need 0 < lr_final <= lr_initial, got {} and {}", self.lr_final, self.lr_initial));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return bad(format!("eval_fraction must lie in [0, 1), got {}", self.eval_fraction));
        }
        Ok(())
    }
}

/// Exponential decay from `lr_initial` at step 0 to `lr_final` at `total_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, lr_initial: f64, lr_final: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total {total_steps}")));
    }
    Ok(match step {
        0 => lr_initial,
        s if s == total_steps => lr_final,
        s => lr_initial * (lr_final / lr_initial).powf(s as f64 / total_steps as f64),
    })
}

/// Adam moments, congruent with the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl OptimizerState {
    pub fn new(n_params: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { m: vec![0.0; n_params], v: vec![0.0; n_params], step: 0, beta1, beta2, eps }
    }

    pub fn for_config(n_params: usize, config: &TrainConfig) -> Self {
        Self::new(n_params, config.beta1, config.beta2, config.eps)
    }
}

/// One bias-corrected Adam update restricted to `range` of the buffer.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    range: std::ops::Range<usize>,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), actual: grads.len().min(state.m.len()) });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for i in range {
        let g = grads[i];
        let m = b1 * state.m[i] + (1.0 - b1) * g;
        let v = b2 * state.v[i] + (1.0 - b2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        params[i] -= lr * (m / c1) / ((v / c2).sqrt() + eps);
    }
    Ok(())
}

/// Paths of one task turned into network inputs and price increments.
#[derive(Debug, Clone)]
struct Prepared {
    task_id: usize,
    n_steps: usize,
    features: Vec<FeatureRow>,
    increments: Vec<f64>,
    payoff: Vec<f64>,
}

impl Prepared {
    fn new(paths: &PathSet, task_id: usize, claim: &Claim, premium: f64) -> Self {
        let n = paths.n_steps();
        let grid = paths.grid;
        let mut features = Vec::with_capacity(paths.n_paths() * n);
        let mut increments = Vec::with_capacity(paths.n_paths() * n);
        let mut payoff = Vec::with_capacity(paths.n_paths());
        for path in paths.paths() {
            for k in 0..n {
                features.push(FeatureRow::new(path[k], claim.strike, grid.time_to_maturity(k)));
                increments.push(path[k + 1] - path[k]);
            }
            payoff.push(claim.payoff(path[n]) + premium);
        }
        Self { task_id, n_steps: n, features, increments, payoff }
    }

    fn n_paths(&self) -> usize {
        self.payoff.len()
    }
}

/// Row buffers for one batch of paths.
#[derive(Default)]
struct Batch {
    tasks: Vec<usize>,
    features: Vec<FeatureRow>,
    increments: Vec<f64>,
    payoff: Vec<f64>,
    pnl: Vec<f64>,
    upstream: Vec<f64>,
}

impl Batch {
    fn clear(&mut self) {
        self.tasks.clear();
        self.features.clear();
        self.increments.clear();
        self.payoff.clear();
    }

    fn push(&mut self, data: &Prepared, path: usize) {
        let n = data.n_steps;
        let rows = path * n..(path + 1) * n;
        self.tasks.extend(std::iter::repeat_n(data.task_id, n));
        self.features.extend_from_slice(&data.features[rows.clone()]);
        self.increments.extend_from_slice(&data.increments[rows]);
        self.payoff.push(data.payoff[path]);
    }

    /// Forward pass; fills `pnl` and returns the mean squared PnL.
    fn loss(&mut self, params: &NetworkParams, tape: &mut Tape) -> Result<f64> {
        params.forward(&self.tasks, &self.features, tape)?;
        let n = self.tasks.len() / self.payoff.len();
        self.pnl.clear();
        for (p, z) in self.payoff.iter().enumerate() {
            let rows = p * n..(p + 1) * n;
            let g: f64 = tape.output()[rows.clone()].iter().zip(&self.increments[rows]).map(|(d, ds)| d * ds).sum();
            self.pnl.push(z + g);
        }
        Ok(self.pnl.iter().map(|x| x * x).sum::<f64>() / self.pnl.len() as f64)
    }

    /// `d loss / d delta_pk` for the batch recorded by the last `loss` call.
    fn fill_upstream(&mut self) {
        let n = self.tasks.len() / self.payoff.len();
        let scale = 2.0 / self.payoff.len() as f64;
        self.upstream.clear();
        for (p, pnl) in self.pnl.iter().enumerate() {
            self.upstream.extend(self.increments[p * n..(p + 1) * n].iter().map(|ds| scale * pnl * ds));
        }
    }
}

fn check_path(path: &[f64], grid: &TimeGrid) -> Result<()> {
    if path.len() != grid.n_steps() + 1 {
        return Err(Error::DimensionMismatch { expected: grid.n_steps() + 1, actual: path.len() });
    }
    Ok(())
}

fn batch_from_paths(claim: &Claim, grid: &TimeGrid, batch: &[(usize, &[f64])]) -> Result<Batch> {
    if batch.is_empty() {
        return Err(Error::Empty("loss needs at least one path".into()));
    }
    let mut b = Batch::default();
    for &(task, path) in batch {
        check_path(path, grid)?;
        let n = grid.n_steps();
        for k in 0..n {
            b.tasks.push(task);
            b.features.push(FeatureRow::new(path[k], claim.strike, grid.time_to_maturity(k)));
            b.increments.push(path[k + 1] - path[k]);
        }
        b.payoff.push(claim.payoff(path[n]));
    }
    Ok(b)
}

/// Mean over `batch` of `(Z + (delta . S)_T)^2`, premium excluded.
pub fn hedging_loss(params: &NetworkParams, claim: &Claim, grid: &TimeGrid, batch: &[(usize, &[f64])]) -> Result<f64> {
    let mut b = batch_from_paths(claim, grid, batch)?;
    b.loss(params, &mut Tape::default())
}

/// Loss and full gradient of [`hedging_loss`].
pub fn hedging_loss_grad(
    params: &NetworkParams,
    claim: &Claim,
    grid: &TimeGrid,
    batch: &[(usize, &[f64])],
) -> Result<(f64, crate::neural::Gradients)> {
    let mut b = batch_from_paths(claim, grid, batch)?;
    let mut tape = Tape::default();
    let loss = b.loss(params, &mut tape)?;
    b.fill_upstream();
    let mut grads = params.zero_grads();
    params.backward(&tape, &b.upstream, &mut grads, GradScope::All)?;
    Ok((loss, grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub eval_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    /// Losses of the starting parameters; absent when no epoch ran.
    pub initial: Option<EpochRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Relative change of the training loss, averaged over the last `window`
    /// epochs against the `window` before them.
    pub fn recent_relative_change(&self, window: usize) -> Option<f64> {
        if window == 0 || self.epochs.len() < 2 * window {
            return None;
        }
        let n = self.epochs.len();
        let mean = |r: &[EpochRecord]| r.iter().map(|e| e.train_loss).sum::<f64>() / r.len() as f64;
        let late = mean(&self.epochs[n - window..]);
        let early = mean(&self.epochs[n - 2 * window..n - window]);
        Some((early - late) / early)
    }

    /// Delimited text: `epoch,learning_rate,train_loss,eval_loss`. The
    /// pre-training losses appear as epoch 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,learning_rate,train_loss,eval_loss\n");
        for r in self.initial.iter().chain(&self.epochs) {
            let eval = r.eval_loss.map(|x| format!("{x:e}")).unwrap_or_default();
            out.push_str(&format!("{},{:e},{:e},{}\n", r.epoch, r.learning_rate, r.train_loss, eval));
        }
        out
    }
}

fn mean_loss(params: &NetworkParams, data: &[Prepared], batch_size: usize, tape: &mut Tape) -> Result<f64> {
    let mut batch = Batch::default();
    let mut total = 0.0;
    let mut count = 0usize;
    for d in data {
        for start in (0..d.n_paths()).step_by(batch_size) {
            batch.clear();
            let end = (start + batch_size).min(d.n_paths());
            (start..end).for_each(|p| batch.push(d, p));
            total += batch.loss(params, tape)? * (end - start) as f64;
            count += end - start;
        }
    }
    Ok(total / count as f64)
}

fn check_datasets(datasets: &[PathSet]) -> Result<TimeGrid> {
    let first = datasets.first().ok_or_else(|| Error::Empty("no training datasets".into()))?;
    if let Some(other) = datasets.iter().find(|d| d.grid != first.grid) {
        return Err(Error::InvalidArgument(format!(
            "task {} uses a different time grid than task {}",
            other.task_id, first.task_id
        )));
    }
    Ok(first.grid)
}

fn prepare(datasets: &[(usize, &PathSet)], claim: &Claim, config: &TrainConfig) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for &(task, set) in datasets {
        let (t, e) = set.split(config.eval_fraction)?;
        let premium = if config.include_premium { mc_premium(claim, &t) } else { 0.0 };
        train.push(Prepared::new(&t, task, claim, premium));
        if let Some(e) = e {
            eval.push(Prepared::new(&e, task, claim, premium));
        }
    }
    Ok((train, eval))
}

fn fit(
    params: &mut NetworkParams,
    train: &[Prepared],
    eval: &[Prepared],
    config: &TrainConfig,
    scope: GradScope,
) -> Result<TrainLog> {
    let mut log = TrainLog::default();
    if config.epochs == 0 {
        return Ok(log);
    }
    let mut tape = Tape::default();
    let eval_loss = |p: &NetworkParams, tape: &mut Tape| -> Result<Option<f64>> {
        if eval.is_empty() {
            Ok(None)
        } else {
            mean_loss(p, eval, config.batch_size, tape).map(Some)
        }
    };
    log.initial = Some(EpochRecord {
        epoch: 0,
        learning_rate: config.lr_initial,
        train_loss: mean_loss(params, train, config.batch_size, &mut tape)?,
        eval_loss: eval_loss(params, &mut tape)?,
    });

    let mut order: Vec<(u32, u32)> = train
        .iter()
        .enumerate()
        .flat_map(|(i, d)| (0..d.n_paths() as u32).map(move |p| (i as u32, p)))
        .collect();
    let per_epoch = order.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * per_epoch;
    let update = match (scope, config.mode) {
        (GradScope::EmbeddingOnly, TrainMode::EmbeddingOnly { new_task_id }) => params.embedding_row_range(new_task_id)?,
        _ => 0..params.as_slice().len(),
    };
    let mut state = OptimizerState::for_config(params.as_slice().len(), config);
    let mut grads = params.zero_grads();
    let mut rng = aux_stream(config.seed, Purpose::Shuffling);
    let mut batch = Batch::default();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = lr_schedule(step, total_steps, config.lr_initial, config.lr_final)?;
        let mut sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            for &(i, p) in chunk {
                batch.push(&train[i as usize], p as usize);
            }
            let loss = batch.loss(params, &mut tape)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            sum += loss * chunk.len() as f64;
            batch.fill_upstream();
            grads.fill_zero();
            params.backward(&tape, &batch.upstream, &mut grads, scope)?;
            let lr = lr_schedule(step, total_steps, config.lr_initial, config.lr_final)?;
            adam_step(params.as_mut_slice(), &grads.data, &mut state, lr, update.clone())?;
            step += 1;
        }
        let record = EpochRecord {
            epoch,
            learning_rate: epoch_lr,
            train_loss: sum / order.len() as f64,
            eval_loss: eval_loss(params, &mut tape)?,
        };
        if !record.eval_loss.unwrap_or(0.0).is_finite() || params.as_slice().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        log.epochs.push(record);
    }
    Ok(log)
}

/// Fit a freshly initialized network on all tasks. Dataset `i` must carry
/// task id `i`.
pub fn train(datasets: &[PathSet], arch: &NetworkArch, claim: &Claim, config: &TrainConfig) -> Result<(NetworkParams, TrainLog)> {
    let params = NetworkParams::init(arch, config.seed)?;
    train_from(params, datasets, claim, config)
}

/// Continue fitting existing parameters on all tasks.
pub fn train_from(
    mut params: NetworkParams,
    datasets: &[PathSet],
    claim: &Claim,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainLog)> {
    config.validate()?;
    claim.validate()?;
    if config.mode != TrainMode::Full {
        return Err(Error::InvalidArgument("train expects TrainMode::Full".into()));
    }
    check_datasets(datasets)?;
    if datasets.len() != params.n_tasks() {
        return Err(Error::DimensionMismatch { expected: params.n_tasks(), actual: datasets.len() });
    }
    for (i, d) in datasets.iter().enumerate() {
        if d.task_id != i {
            return Err(Error::InvalidArgument(format!("dataset {i} carries task id {}", d.task_id)));
        }
    }
    let tagged: Vec<(usize, &PathSet)> = datasets.iter().map(|d| (d.task_id, d)).collect();
    let (train, eval) = prepare(&tagged, claim, config)?;
    let log = fit(&mut params, &train, &eval, config, GradScope::All)?;
    Ok((params, log))
}

/// Add a task for `new_task_paths` and fit only its embedding row. The new
/// row starts at the mean of the existing rows; every other parameter is
/// returned bit-identical.
pub fn recalibrate(
    params: &NetworkParams,
    new_task_paths: &PathSet,
    claim: &Claim,
    config: &TrainConfig,
) -> Result<(NetworkParams, TrainLog)> {
    config.validate()?;
    claim.validate()?;
    let new_task_id = match config.mode {
        TrainMode::EmbeddingOnly { new_task_id } => new_task_id,
        TrainMode::Full => return Err(Error::InvalidArgument("recalibrate expects TrainMode::EmbeddingOnly".into())),
    };
    if new_task_id != params.n_tasks() {
        return Err(Error::InvalidArgument(format!(
            "new task id must be {} for a network with {} tasks, got {new_task_id}",
            params.n_tasks(),
            params.n_tasks()
        )));
    }
    let mut grown = params.with_new_task();
    let (train, eval) = prepare(&[(new_task_id, new_task_paths)], claim, config)?;
    let log = fit(&mut grown, &train, &eval, config, GradScope::EmbeddingOnly)?;
    Ok((grown, log))
}

/// Hedge every path of `paths` with the network's deltas for `task_id`.
pub fn network_hedge(params: &NetworkParams, claim: &Claim, paths: &PathSet, task_id: usize) -> Result<HedgeResult> {
    params.embed(task_id)?;
    let data = Prepared::new(paths, task_id, claim, 0.0);
    let mut tape = Tape::default();
    let mut deltas = Vec::with_capacity(data.features.len());
    let tasks = vec![task_id; 1024 * data.n_steps];
    for chunk in data.features.chunks(1024 * data.n_steps) {
        params.forward(&tasks[..chunk.len()], chunk, &mut tape)?;
        deltas.extend_from_slice(tape.output());
    }
    let mut result = HedgeResult::from_deltas(claim, paths, deltas)?;
    result.task_id = task_id;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_models::{simulate, ModelSpec};

    fn claim() -> Claim {
        Claim::short_call(1.0).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        assert_eq!(lr_schedule(0, 100, 5e-4, 1e-4).unwrap(), 5e-4);
        assert_eq!(lr_schedule(100, 100, 5e-4, 1e-4).unwrap(), 1e-4);
        let mid = lr_schedule(50, 100, 5e-4, 1e-4).unwrap();
        assert!((mid - (5e-4f64 * 1e-4).sqrt()).abs() < 1e-18);
        assert!((mid - 2.2360679775e-4).abs() < 1e-13);
        assert!(lr_schedule(0, 0, 5e-4, 1e-4).is_err());
        assert!(lr_schedule(3, 2, 5e-4, 1e-4).is_err());
    }

    #[test]
    fn adam_basics() {
        let mut p = vec![0.5, -1.0];
        let mut s = OptimizerState::new(2, 0.9, 0.999, 1e-8);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3, 0..2).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);

        let mut q = vec![0.0];
        let mut s = OptimizerState::new(1, 0.9, 0.999, 1e-8);
        adam_step(&mut q, &[1.0], &mut s, 1e-3, 0..1).unwrap();
        // bias-corrected moments are exactly g and g^2 after one step
        assert!((q[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);

        let mut r = vec![0.3, 0.2];
        let mut s = OptimizerState::new(2, 0.9, 0.999, 1e-8);
        adam_step(&mut r, &[0.7, -0.1], &mut s, 0.0, 0..2).unwrap();
        adam_step(&mut r, &[0.7, -0.1], &mut s, 0.0, 0..2).unwrap();
        assert_eq!(r, vec![0.3, 0.2]);

        let mut masked = vec![1.0, 1.0];
        let mut s = OptimizerState::new(2, 0.9, 0.999, 1e-8);
        adam_step(&mut masked, &[1.0, 1.0], &mut s, 0.1, 1..2).unwrap();
        assert_eq!(masked[0], 1.0);
        assert!(masked[1] < 1.0);
    }

    #[test]
    fn loss_reductions() {
        let arch = NetworkArch::new(2, 1, vec![4]).unwrap();
        let zero = NetworkParams::zeros(&arch).unwrap();
        let grid = TimeGrid::daily(3).unwrap();
        let a = [1.0, 1.1, 1.3, 1.2];
        let b = [1.0, 0.9, 0.95, 1.05];
        let loss = hedging_loss(&zero, &claim(), &grid, &[(0, &a), (1, &b)]).unwrap();
        assert!((loss - (0.2f64.powi(2) + 0.05f64.powi(2)) / 2.0).abs() < 1e-15);

        let flat = [1.2; 4];
        let p = NetworkParams::init(&arch, 3).unwrap();
        let loss = hedging_loss(&p, &claim(), &grid, &[(1, &flat)]).unwrap();
        assert!((loss - 0.04).abs() < 1e-15);
        assert!(hedging_loss(&p, &claim(), &grid, &[]).is_err());
    }

    #[test]
    fn one_step_perfect_hedge() {
        let arch = NetworkArch::new(1, 1, vec![3]).unwrap();
        let mut p = NetworkParams::zeros(&arch).unwrap();
        let head = p.n_layers() - 1;
        p.layer_bias_mut(head)[0] = 1.0;
        let grid = TimeGrid::daily(1).unwrap();
        let loss = hedging_loss(&p, &claim(), &grid, &[(0, &[1.0, 1.1])]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let arch = NetworkArch::new(2, 2, vec![4, 3]).unwrap();
        let p = NetworkParams::init(&arch, 17).unwrap();
        let grid = TimeGrid::daily(3).unwrap();
        let paths = [[1.0, 1.04, 0.97, 1.02], [1.0, 0.95, 0.93, 0.99]];
        let batch: Vec<(usize, &[f64])> = vec![(0, &paths[0]), (1, &paths[1])];
        let (_, g) = hedging_loss_grad(&p, &claim(), &grid, &batch).unwrap();
        let h = 1e-5;
        for i in 0..p.as_slice().len() {
            let mut up = p.clone();
            up.as_mut_slice()[i] += h;
            let mut dn = p.clone();
            dn.as_mut_slice()[i] -= h;
            let fd = (hedging_loss(&up, &claim(), &grid, &batch).unwrap()
                - hedging_loss(&dn, &claim(), &grid, &batch).unwrap())
                / (2.0 * h);
            assert!((fd - g.data[i]).abs() <= 1e-6 * (g.data[i].abs() + 1e-6), "param {i}: {fd} vs {}", g.data[i]);
        }
    }

    fn gbm_sets(sigmas: &[f64], n: usize) -> Vec<PathSet> {
        let grid = TimeGrid::daily(10).unwrap();
        sigmas
            .iter()
            .enumerate()
            .map(|(i, &s)| simulate(&ModelSpec::gbm(0.0, s).unwrap(), &grid, n, 1.0, 100 + i as u64).unwrap().with_task_id(i))
            .collect()
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: 64, epochs, lr_initial: 5e-3, lr_final: 1e-3, seed: 5, ..TrainConfig::default() }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let arch = NetworkArch::new(2, 1, vec![8]).unwrap();
        let sets = gbm_sets(&[0.2, 0.5], 20);
        let (p, log) = train(&sets, &arch, &claim(), &quick_config(0)).unwrap();
        assert_eq!(p, NetworkParams::init(&arch, 5).unwrap());
        assert!(log.epochs.is_empty() && log.initial.is_none());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let arch = NetworkArch::new(2, 1, vec![8, 8]).unwrap();
        let sets = gbm_sets(&[0.2, 0.5], 200);
        let (p1, log1) = train(&sets, &arch, &claim(), &quick_config(15)).unwrap();
        let (p2, log2) = train(&sets, &arch, &claim(), &quick_config(15)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        let initial = log1.initial.unwrap();
        let last = log1.final_record().unwrap();
        assert!(last.train_loss < initial.train_loss);
        assert!(last.eval_loss.unwrap() < initial.eval_loss.unwrap());
        assert_eq!(log1.epochs.len(), 15);
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let arch = NetworkArch::new(2, 1, vec![4]).unwrap();
        let sets = gbm_sets(&[0.2, 0.5], 10);
        assert!(train(&[], &arch, &claim(), &quick_config(1)).is_err());
        assert!(train(&sets[..1], &arch, &claim(), &quick_config(1)).is_err());
        let mut other = sets.clone();
        other[1] = simulate(&ModelSpec::gbm(0.0, 0.3).unwrap(), &TimeGrid::daily(5).unwrap(), 10, 1.0, 0)
            .unwrap()
            .with_task_id(1);
        assert!(train(&other, &arch, &claim(), &quick_config(1)).is_err());
        let bad = TrainConfig { lr_final: 1.0, ..quick_config(1) };
        assert!(train(&sets, &arch, &claim(), &bad).is_err());
    }

    #[test]
    fn recalibration_freezes_everything_but_the_new_row() {
        let arch = NetworkArch::new(2, 2, vec![8]).unwrap();
        let sets = gbm_sets(&[0.2, 0.5], 100);
        let (base, _) = train(&sets, &arch, &claim(), &quick_config(3)).unwrap();
        let new_paths = gbm_sets(&[0.35], 50).remove(0);
        let cfg = TrainConfig { mode: TrainMode::EmbeddingOnly { new_task_id: 2 }, ..quick_config(10) };
        let (recal, log) = recalibrate(&base, &new_paths, &claim(), &cfg).unwrap();
        assert_eq!(recal.n_tasks(), 3);
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(recal.shared_weights()), bits(base.shared_weights()));
        assert_eq!(bits(&recal.embedding()[..4]), bits(base.embedding()));
        assert_ne!(recal.embed(2).unwrap(), base.mean_embedding().as_slice());
        assert!(log.final_record().unwrap().train_loss <= log.initial.unwrap().train_loss);

        let zero = TrainConfig { epochs: 0, ..cfg };
        let (fresh, _) = recalibrate(&base, &new_paths, &claim(), &zero).unwrap();
        assert_eq!(fresh.embed(2).unwrap(), base.mean_embedding().as_slice());

        let wrong = TrainConfig { mode: TrainMode::EmbeddingOnly { new_task_id: 5 }, ..quick_config(1) };
        assert!(recalibrate(&base, &new_paths, &claim(), &wrong).is_err());
    }

    #[test]
    fn two_point_market_learns_replicating_delta() {
        // S_1 in {1.1, 0.9} with equal weight; the call is replicated by delta 0.5
        let grid = TimeGrid::daily(1).unwrap();
        let spot: Vec<f64> = (0..64).flat_map(|i| [1.0, if i % 2 == 0 { 1.1 } else { 0.9 }]).collect();
        let set = PathSet::from_parts(0, 0, grid, ModelSpec::gbm(0.0, 0.1).unwrap(), spot, None).unwrap();
        let arch = NetworkArch::new(1, 1, vec![4]).unwrap();
        let cfg = TrainConfig {
            batch_size: 64,
            epochs: 3000,
            lr_initial: 1e-2,
            lr_final: 1e-3,
            eval_fraction: 0.0,
            ..TrainConfig::default()
        };
        let (p, _) = train(&[set], &arch, &claim(), &cfg).unwrap();
        let delta = p.forward_delta(0, FeatureRow::new(1.0, 1.0, grid.maturity())).unwrap();
        assert!((delta - 0.5).abs() < 1e-3, "delta {delta}");
    }

    #[test]
    fn network_hedge_shapes() {
        let arch = NetworkArch::new(1, 1, vec![4]).unwrap();
        let p = NetworkParams::zeros(&arch).unwrap();
        let set = gbm_sets(&[0.3], 2500).remove(0);
        let r = network_hedge(&p, &claim(), &set, 0).unwrap();
        assert_eq!(r.pnl.len(), 2500);
        assert_eq!(r.deltas.len(), 2500 * 10);
        for (p, pnl) in r.pnl.iter().enumerate() {
            assert_eq!(*pnl, claim().payoff(set.terminal(p)));
        }
        assert!(network_hedge(&p, &claim(), &set, 1).is_err());
    }
}
