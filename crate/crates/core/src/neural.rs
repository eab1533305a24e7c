//! Task-embedded hedging network.
//!
//! Input row: `[scaled log-moneyness, scaled time to maturity, embedding of
//! the task]`, followed by SELU hidden layers and a linear scalar head that
//! returns the hedge ratio. One network serves every trading date.
//!
//! All parameters live in one flat `f64` buffer in declaration order:
//! the `n_tasks x embed_dim` embedding table, then for each layer its
//! `fan_in x fan_out` weight matrix (row-major) followed by its bias. The
//! optimizer and the checkpoint format both work on that buffer directly.
//!
//! Gradients are derived by hand for this fixed architecture. The backward
//! pass recovers the SELU derivative from the stored activations
//! (`lambda` where the activation is positive, `a + lambda * alpha`
//! otherwise), so the tape only keeps one matrix per hidden layer.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::{aux_stream, Purpose};
use crate::{Error, Result};

pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_LAMBDA_ALPHA: f64 = SELU_LAMBDA * SELU_ALPHA;

/// Standard deviation of the initial embedding entries.
pub const EMBEDDING_INIT_STD: f64 = 0.1;

#[inline]
pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA_ALPHA * (x.exp() - 1.0)
    }
}

/// SELU derivative at `x` (left derivative at 0).
#[inline]
pub fn selu_grad(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA
    } else {
        SELU_LAMBDA_ALPHA * x.exp()
    }
}

/// Same derivative expressed through the activation value `a = selu(x)`.
#[inline]
fn selu_grad_from_output(a: f64) -> f64 {
    if a > 0.0 {
        SELU_LAMBDA
    } else {
        a + SELU_LAMBDA_ALPHA
    }
}

/// Market state seen by the network at one trading date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureRow {
    /// `log(S_t / K)`.
    pub log_moneyness: f64,
    /// `T - t` in years.
    pub time_to_maturity: f64,
}

impl FeatureRow {
    pub const LEN: usize = 2;

    pub fn new(spot: f64, strike: f64, time_to_maturity: f64) -> Self {
        Self { log_moneyness: (spot / strike).ln(), time_to_maturity }
    }
}

fn default_input_scale() -> [f64; 2] {
    [10.0, 12.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkArch {
    pub n_tasks: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Fixed multipliers applied to (log-moneyness, time to maturity) before
    /// the first layer, bringing both to order one on a 30-day horizon.
    #[serde(default = "default_input_scale")]
    pub input_scale: [f64; 2],
}

impl NetworkArch {
    pub fn new(n_tasks: usize, embed_dim: usize, hidden: Vec<usize>) -> Result<Self> {
        let arch = Self { n_tasks, embed_dim, hidden, input_scale: default_input_scale() };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 {
            return Err(Error::InvalidArgument("network needs at least one task".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::InvalidArgument("hidden widths must be positive".into()));
        }
        if self.input_scale.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument("input scales must be finite".into()));
        }
        Ok(())
    }

    pub fn n_features(&self) -> usize {
        FeatureRow::LEN
    }

    pub fn input_dim(&self) -> usize {
        self.n_features() + self.embed_dim
    }

    /// Layer widths from input to output, output width 1.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim()];
        w.extend(&self.hidden);
        w.push(1);
        w
    }

    pub fn n_params(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    weights: Range<usize>,
    bias: Range<usize>,
    fan_in: usize,
    fan_out: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    embedding: Range<usize>,
    layers: Vec<LayerLayout>,
    total: usize,
}

impl Layout {
    fn new(arch: &NetworkArch) -> Self {
        let embedding = 0..arch.n_tasks * arch.embed_dim;
        let mut offset = embedding.end;
        let widths = arch.widths();
        let layers = widths
            .windows(2)
            .map(|w| {
                let weights = offset..offset + w[0] * w[1];
                let bias = weights.end..weights.end + w[1];
                offset = bias.end;
                LayerLayout { weights, bias, fan_in: w[0], fan_out: w[1] }
            })
            .collect();
        Self { embedding, layers, total: offset }
    }
}

/// Read-only view of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a> {
    pub weights: &'a [f64],
    pub bias: &'a [f64],
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Embedding table and MLP weights.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    arch: NetworkArch,
    layout: Layout,
    data: Vec<f64>,
}

/// Gradient buffer congruent with a [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layout: Layout,
    embed_dim: usize,
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn embedding(&self) -> &[f64] {
        &self.data[self.layout.embedding.clone()]
    }

    pub fn embedding_row(&self, task_id: usize) -> &[f64] {
        let l = self.embed_dim;
        &self.data[task_id * l..(task_id + 1) * l]
    }

    pub fn layer_weights(&self, i: usize) -> &[f64] {
        &self.data[self.layout.layers[i].weights.clone()]
    }

    pub fn layer_bias(&self, i: usize) -> &[f64] {
        &self.data[self.layout.layers[i].bias.clone()]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_congruent(&self, params: &NetworkParams) -> bool {
        self.layout == params.layout
    }
}

/// Which gradients the backward pass has to produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradScope {
    All,
    /// Embedding rows only; weight gradients are skipped.
    EmbeddingOnly,
}

impl NetworkParams {
    /// LeCun-normal weights, zero biases, `N(0, 0.1^2)` embedding entries.
    pub fn init(arch: &NetworkArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(arch);
        let mut data = vec![0.0; layout.total];
        let mut rng = aux_stream(seed, Purpose::Initialization);
        for x in &mut data[layout.embedding.clone()] {
            *x = EMBEDDING_INIT_STD * rng.sample::<f64, _>(StandardNormal);
        }
        for layer in &layout.layers {
            let std = (1.0 / layer.fan_in as f64).sqrt();
            for w in &mut data[layer.weights.clone()] {
                *w = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(Self { arch: arch.clone(), layout, data })
    }

    /// All parameters zero.
    pub fn zeros(arch: &NetworkArch) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(arch);
        Ok(Self { arch: arch.clone(), data: vec![0.0; layout.total], layout })
    }

    pub fn from_flat(arch: &NetworkArch, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(arch);
        if data.len() != layout.total {
            return Err(Error::DimensionMismatch { expected: layout.total, actual: data.len() });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("network parameters must be finite".into()));
        }
        Ok(Self { arch: arch.clone(), layout, data })
    }

    pub fn arch(&self) -> &NetworkArch {
        &self.arch
    }

    pub fn n_tasks(&self) -> usize {
        self.arch.n_tasks
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients { layout: self.layout.clone(), embed_dim: self.arch.embed_dim, data: vec![0.0; self.layout.total] }
    }

    pub fn n_layers(&self) -> usize {
        self.layout.layers.len()
    }

    pub fn layer(&self, i: usize) -> LayerView<'_> {
        let l = &self.layout.layers[i];
        LayerView {
            weights: &self.data[l.weights.clone()],
            bias: &self.data[l.bias.clone()],
            fan_in: l.fan_in,
            fan_out: l.fan_out,
        }
    }

    pub fn layer_bias_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.layout.layers[i].bias.clone();
        &mut self.data[r]
    }

    pub fn embedding(&self) -> &[f64] {
        &self.data[self.layout.embedding.clone()]
    }

    /// Parameters shared by all tasks (everything except the embedding).
    pub fn shared_weights(&self) -> &[f64] {
        &self.data[self.layout.embedding.end..]
    }

    pub fn embedding_row_range(&self, task_id: usize) -> Result<Range<usize>> {
        self.check_task(task_id)?;
        let l = self.arch.embed_dim;
        Ok(task_id * l..(task_id + 1) * l)
    }

    /// Embedding vector of `task_id`.
    pub fn embed(&self, task_id: usize) -> Result<&[f64]> {
        let r = self.embedding_row_range(task_id)?;
        Ok(&self.data[r])
    }

    pub fn set_embedding_row(&mut self, task_id: usize, row: &[f64]) -> Result<()> {
        let r = self.embedding_row_range(task_id)?;
        if row.len() != r.len() {
            return Err(Error::DimensionMismatch { expected: r.len(), actual: row.len() });
        }
        self.data[r].copy_from_slice(row);
        Ok(())
    }

    fn check_task(&self, task_id: usize) -> Result<()> {
        if task_id < self.arch.n_tasks {
            Ok(())
        } else {
            Err(Error::TaskOutOfRange { task_id, n_tasks: self.arch.n_tasks })
        }
    }

    /// Component-wise mean of all embedding rows.
    pub fn mean_embedding(&self) -> Vec<f64> {
        let l = self.arch.embed_dim;
        let mut mean = vec![0.0; l];
        for row in self.embedding().chunks_exact(l) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= self.arch.n_tasks as f64);
        mean
    }

    /// Copy with one more task whose embedding row starts at the mean of the
    /// existing rows. Shared weights are copied bit for bit.
    pub fn with_new_task(&self) -> NetworkParams {
        let mut arch = self.arch.clone();
        arch.n_tasks += 1;
        let layout = Layout::new(&arch);
        let mut data = Vec::with_capacity(layout.total);
        data.extend_from_slice(self.embedding());
        data.extend(self.mean_embedding());
        data.extend_from_slice(self.shared_weights());
        NetworkParams { arch, layout, data }
    }

    /// Hedge ratio for one task and one market state.
    pub fn forward_delta(&self, task_id: usize, feature: FeatureRow) -> Result<f64> {
        let mut tape = Tape::default();
        self.forward(&[task_id], &[feature], &mut tape)?;
        Ok(tape.output()[0])
    }

    /// Batched forward pass; row `r` uses `tasks[r]` and `features[r]`.
    pub fn forward(&self, tasks: &[usize], features: &[FeatureRow], tape: &mut Tape) -> Result<()> {
        if tasks.len() != features.len() {
            return Err(Error::DimensionMismatch { expected: tasks.len(), actual: features.len() });
        }
        if let Some(&bad) = tasks.iter().find(|&&t| t >= self.arch.n_tasks) {
            return Err(Error::TaskOutOfRange { task_id: bad, n_tasks: self.arch.n_tasks });
        }
        let rows = tasks.len();
        let d0 = self.arch.input_dim();
        let l = self.arch.embed_dim;
        let [scale_m, scale_t] = self.arch.input_scale;
        tape.rows = rows;
        tape.tasks.clear();
        tape.tasks.extend_from_slice(tasks);
        tape.input.resize(rows * d0, 0.0);
        for (r, (row, (&task, f))) in tape.input.chunks_exact_mut(d0).zip(tasks.iter().zip(features)).enumerate() {
            debug_assert!(r < rows);
            row[0] = scale_m * f.log_moneyness;
            row[1] = scale_t * f.time_to_maturity;
            row[2..].copy_from_slice(&self.data[task * l..(task + 1) * l]);
        }
        let n_hidden = self.arch.hidden.len();
        tape.acts.resize_with(n_hidden, Vec::new);
        for i in 0..n_hidden {
            let layer = self.layer(i);
            let (done, rest) = tape.acts.split_at_mut(i);
            let prev: &[f64] = if i == 0 { &tape.input } else { &done[i - 1] };
            let out = &mut rest[0];
            dense_forward(prev, rows, &layer, out);
            out.iter_mut().for_each(|x| *x = selu(*x));
        }
        let head = self.layer(n_hidden);
        let last: &[f64] = if n_hidden == 0 { &tape.input } else { &tape.acts[n_hidden - 1] };
        dense_forward(last, rows, &head, &mut tape.out);
        Ok(())
    }

    /// Accumulate into `grads` the gradient of `sum_r upstream[r] * out[r]`
    /// for the batch recorded in `tape`.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grads: &mut Gradients, scope: GradScope) -> Result<()> {
        if upstream.len() != tape.rows {
            return Err(Error::DimensionMismatch { expected: tape.rows, actual: upstream.len() });
        }
        if !grads.is_congruent(self) {
            return Err(Error::DimensionMismatch { expected: self.layout.total, actual: grads.data.len() });
        }
        let rows = tape.rows;
        let n_hidden = self.arch.hidden.len();
        let want_weights = scope == GradScope::All;

        // upstream is dL/d(out), the head has fan_out 1
        let mut delta = upstream.to_vec();
        let mut scratch = Vec::new();
        for i in (0..=n_hidden).rev() {
            let layer = self.layer(i);
            let l = &self.layout.layers[i];
            let input: &[f64] = if i == 0 { &tape.input } else { &tape.acts[i - 1] };
            if want_weights {
                // dW += input^T delta, db += column sums of delta
                gemm(
                    layer.fan_in,
                    rows,
                    layer.fan_out,
                    input,
                    Trans::Yes,
                    &delta,
                    Trans::No,
                    &mut grads.data[l.weights.clone()],
                    1.0,
                );
                let db = &mut grads.data[l.bias.clone()];
                for row in delta.chunks_exact(layer.fan_out) {
                    db.iter_mut().zip(row).for_each(|(g, d)| *g += d);
                }
            }
            // d(input) = delta W^T
            scratch.resize(rows * layer.fan_in, 0.0);
            gemm(rows, layer.fan_out, layer.fan_in, &delta, Trans::No, layer.weights, Trans::Yes, &mut scratch, 0.0);
            if i > 0 {
                for (d, a) in scratch.iter_mut().zip(input) {
                    *d *= selu_grad_from_output(*a);
                }
            }
            std::mem::swap(&mut delta, &mut scratch);
        }
        // delta now holds d(input rows); scatter the embedding columns
        let d0 = self.arch.input_dim();
        let nf = self.arch.n_features();
        let el = self.arch.embed_dim;
        for (row, &task) in delta.chunks_exact(d0).zip(&tape.tasks) {
            let g = &mut grads.data[task * el..(task + 1) * el];
            g.iter_mut().zip(&row[nf..]).for_each(|(g, d)| *g += d);
        }
        Ok(())
    }
}

/// Forward activations kept for the backward pass. Reusing one tape across
/// batches avoids reallocating the buffers.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    rows: usize,
    tasks: Vec<usize>,
    input: Vec<f64>,
    acts: Vec<Vec<f64>>,
    out: Vec<f64>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        &self.out[..self.rows]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Post-activation values of hidden layer `i`, row-major.
    pub fn hidden_activations(&self, i: usize) -> &[f64] {
        &self.acts[i]
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Trans {
    No,
    Yes,
}

/// `c = a * b + beta * c` with `a` logically `m x k` and `b` logically
/// `k x n`; `Trans::Yes` means the slice stores the transpose row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: Trans, b: &[f64], tb: Trans, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: the slices cover the strided extents asserted above and `c`
    // does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn dense_forward(input: &[f64], rows: usize, layer: &LayerView<'_>, out: &mut Vec<f64>) {
    out.resize(rows * layer.fan_out, 0.0);
    for row in out.chunks_exact_mut(layer.fan_out) {
        row.copy_from_slice(layer.bias);
    }
    gemm(rows, layer.fan_in, layer.fan_out, input, Trans::No, layer.weights, Trans::No, out, 1.0);
}
