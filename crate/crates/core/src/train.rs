//! Mini-batch SGD with momentum, L2 weight decay, stepwise learning-rate
//! decay, and validation-loss early stopping.
//!
//! Batches are assembled by a fixed-seed shuffle of the sample pool each
//! epoch. A batch's gradient may be computed in parallel, but samples are
//! partitioned into a fixed number of contiguous chunks that are reduced in
//! chunk order, so the accumulated gradient is identical for every thread
//! schedule. The optimizer update itself is exclusive.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use std::path::Path;

use crate::augment::{AugmentPool, BackgroundPool, PatchSample};
use crate::error::{Error, Result};
use crate::network::{Network, NetworkParams};
use crate::ops::Mode;
use crate::rng::{derive_rng, stream};
use crate::tensor::{Scalar, Tensor};

/// Fixed number of gradient-accumulation chunks per batch. Chunk boundaries
/// depend only on the batch size, so the reduction order is reproducible.
const ACCUM_CHUNKS: usize = 8;

/// A deterministic, randomly addressable source of training samples.
/// `get(i)` must be a pure function of `i` so pools can be consumed lazily
/// and in parallel.
pub trait PatchSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<PatchSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PatchSource for AugmentPool {
    fn len(&self) -> usize {
        AugmentPool::len(self)
    }
    fn get(&self, index: usize) -> Result<PatchSample> {
        self.materialize(index)
    }
}

impl PatchSource for BackgroundPool {
    fn len(&self) -> usize {
        BackgroundPool::len(self)
    }
    fn get(&self, index: usize) -> Result<PatchSample> {
        self.materialize(index)
    }
}

/// An eagerly materialized sample pool.
#[derive(Debug, Clone)]
pub struct MemPool(pub Vec<PatchSample>);

impl PatchSource for MemPool {
    fn len(&self) -> usize {
        self.0.len()
    }
    fn get(&self, index: usize) -> Result<PatchSample> {
        self.0
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Data(format!("sample index {index} out of range")))
    }
}

/// Two sources concatenated into one index space (first `a`, then `b`).
pub struct ConcatSource<'a> {
    pub a: &'a dyn PatchSource,
    pub b: &'a dyn PatchSource,
}

impl PatchSource for ConcatSource<'_> {
    fn len(&self) -> usize {
        self.a.len() + self.b.len()
    }
    fn get(&self, index: usize) -> Result<PatchSample> {
        if index < self.a.len() {
            self.a.get(index)
        } else {
            self.b.get(index - self.a.len())
        }
    }
}

/// Optimizer and early-stopping configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub base_lr: f64,
    pub lr_step: usize,
    pub lr_factor: f64,
    pub weight_decay: f64,
    pub max_iterations: usize,
    pub patience_evals: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(max_iterations: usize, seed: u64) -> Self {
        TrainConfig {
            batch_size: 256,
            momentum: 0.9,
            base_lr: 0.01,
            lr_step: 2000,
            lr_factor: 0.9,
            weight_decay: 0.001,
            max_iterations,
            patience_evals: 10,
            eval_interval: 500,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_step == 0 || self.eval_interval == 0 {
            return Err(Error::Config(
                "batch size, lr step, and eval interval must be positive".into(),
            ));
        }
        if self.patience_evals == 0 {
            return Err(Error::Config(
                "patience must be at least one evaluation".into(),
            ));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base lr {} must be positive",
                self.base_lr
            )));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr factor {} must be in (0, 1)",
                self.lr_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must be in [0, 1)",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Learning rate at a given iteration: piecewise constant, decaying by
/// `lr_factor` every `lr_step` iterations.
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> f64 {
    config.base_lr * config.lr_factor.powi((iteration / config.lr_step) as i32)
}

/// Mutable optimizer state: iteration counter, per-tensor momentum buffers,
/// best validation loss, patience counter, and the evaluation history.
#[derive(Debug, Clone)]
pub struct TrainState<T: Scalar> {
    pub iteration: usize,
    velocity: Vec<Tensor<T>>,
    pub best_val_loss: f64,
    pub evals_since_improvement: usize,
    pub history: Vec<HistoryRow>,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state with zero velocity matching the parameter shapes.
    pub fn new(params: &NetworkParams<T>) -> Self {
        TrainState {
            iteration: 0,
            velocity: params
                .entries()
                .iter()
                .map(|p| Tensor::zeros(p.values.shape()))
                .collect(),
            best_val_loss: f64::INFINITY,
            evals_since_improvement: 0,
            history: Vec::new(),
        }
    }
}

/// One evaluation record: the training loss of the batch processed at
/// `iteration` (before its update) and the mean validation cross-entropy of
/// the parameters at that point.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// One SGD-with-momentum update:
/// `v ← momentum·v − lr·(g + weight_decay·w)` then `w ← w + v`, applied per
/// parameter tensor; weight decay applies to weights and biases uniformly.
/// The learning rate comes from the schedule at `state.iteration`, which is
/// then advanced.
pub fn sgd_step<T: Scalar>(
    params: &mut NetworkParams<T>,
    gradients: &[Tensor<T>],
    state: &mut TrainState<T>,
    config: &TrainConfig,
) -> Result<()> {
    if gradients.len() != params.entries().len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameters",
            gradients.len(),
            params.entries().len()
        )));
    }
    let lr = T::from_f64(lr_schedule(state.iteration, config));
    let momentum = T::from_f64(config.momentum);
    let decay = T::from_f64(config.weight_decay);
    for ((param, grad), vel) in params
        .entries_mut()
        .iter_mut()
        .zip(gradients)
        .zip(&mut state.velocity)
    {
        if grad.shape() != param.values.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} != {:?} for {}",
                grad.shape(),
                param.values.shape(),
                param.name
            )));
        }
        if !grad.as_slice().iter().all(|g| g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in {}",
                param.name
            )));
        }
        let w = param.values.as_mut_slice();
        let v = vel.as_mut_slice();
        for ((w, &g), v) in w.iter_mut().zip(grad.as_slice()).zip(v.iter_mut()) {
            *v = momentum * *v - lr * (g + decay * *w);
            *w += *v;
        }
    }
    state.iteration += 1;
    Ok(())
}

/// Mean gradient and mean loss of one batch. Samples are processed in a
/// fixed chunked order (see module docs); per-sample dropout streams derive
/// from `(seed, DROPOUT, iteration, batch position)`.
fn batch_gradient<T: Scalar>(
    network: &Network,
    params: &NetworkParams<T>,
    source: &dyn PatchSource,
    indices: &[usize],
    iteration: usize,
    seed: u64,
) -> Result<(Vec<Tensor<T>>, f64)> {
    let chunk_len = indices.len().div_ceil(ACCUM_CHUNKS);
    let partials: Vec<Result<(Vec<Tensor<T>>, f64)>> = indices
        .par_chunks(chunk_len)
        .enumerate()
        .map(|(chunk, chunk_indices)| {
            let mut grads: Option<Vec<Tensor<T>>> = None;
            let mut loss_sum = 0.0f64;
            for (offset, &idx) in chunk_indices.iter().enumerate() {
                let position = (chunk * chunk_len + offset) as u64;
                let mut rng = derive_rng(seed, &[stream::DROPOUT, iteration as u64, position]);
                let sample = source.get(idx)?;
                let patch = sample.pixels.cast::<T>();
                let cache = network.forward_train(params, &patch, sample.label, &mut rng)?;
                loss_sum += cache.loss;
                let sample_grads = network.backward(params, &cache)?;
                match grads.as_mut() {
                    None => grads = Some(sample_grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&sample_grads) {
                            for (a, &g) in a.as_mut_slice().iter_mut().zip(g.as_slice()) {
                                *a += g;
                            }
                        }
                    }
                }
            }
            Ok((grads.unwrap_or_default(), loss_sum))
        })
        .collect();

    let mut total: Option<Vec<Tensor<T>>> = None;
    let mut loss_sum = 0.0f64;
    for partial in partials {
        let (grads, loss) = partial?;
        loss_sum += loss;
        match total.as_mut() {
            None => total = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    for (a, &g) in a.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *a += g;
                    }
                }
            }
        }
    }
    let mut total = total.ok_or_else(|| Error::Data("empty batch".into()))?;
    let scale = T::from_f64(1.0 / indices.len() as f64);
    for t in &mut total {
        for v in t.as_mut_slice() {
            *v = *v * scale;
        }
    }
    Ok((total, loss_sum / indices.len() as f64))
}

/// Mean cross-entropy of a source under the given params, in inference mode.
/// Losses accumulate in f64, reduced in fixed chunk order.
pub fn evaluate_mean_loss<T: Scalar>(
    network: &Network,
    params: &NetworkParams<T>,
    source: &dyn PatchSource,
) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::Data("cannot evaluate an empty sample set".into()));
    }
    let indices: Vec<usize> = (0..source.len()).collect();
    let chunk_len = indices.len().div_ceil(ACCUM_CHUNKS);
    let partials: Vec<Result<f64>> = indices
        .par_chunks(chunk_len)
        .map(|chunk| {
            let mut rng = derive_rng(0, &[stream::VALIDATION]);
            let mut sum = 0.0f64;
            for &idx in chunk {
                let sample = source.get(idx)?;
                let patch = sample.pixels.cast::<T>();
                sum += network.loss(params, &patch, sample.label, Mode::Inference, &mut rng)?;
            }
            Ok(sum)
        })
        .collect();
    let mut sum = 0.0f64;
    for partial in partials {
        sum += partial?;
    }
    Ok(sum / source.len() as f64)
}

/// Result of a training run: the best-validation parameters (never the last
/// iterate when they differ), the evaluation history, and where the best
/// snapshot came from.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T: Scalar> {
    pub params: NetworkParams<T>,
    pub history: Vec<HistoryRow>,
    pub best_iteration: usize,
    pub best_val_loss: f64,
    pub iterations_run: usize,
}

/// Epoch-shuffled batch cursor. Epoch `e` visits every pool index exactly
/// once in the order of a fixed-seed shuffle derived from `(seed, SHUFFLE,
/// e)`; the final short batch of an epoch is used as-is.
struct BatchCursor {
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchCursor {
    fn new(seed: u64, len: usize) -> Self {
        let mut c = BatchCursor {
            seed,
            epoch: 0,
            perm: (0..len).collect(),
            cursor: 0,
        };
        c.shuffle();
        c
    }

    fn shuffle(&mut self) {
        let mut rng = derive_rng(self.seed, &[stream::SHUFFLE, self.epoch]);
        self.perm.shuffle(&mut rng);
    }

    fn next_batch(&mut self, batch_size: usize) -> &[usize] {
        if self.cursor >= self.perm.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.shuffle();
        }
        let end = (self.cursor + batch_size).min(self.perm.len());
        let batch = &self.perm[self.cursor..end];
        self.cursor = end;
        batch
    }
}

/// Trains `network` from `init`, evaluating on `validation` every
/// `eval_interval` iterations (and once before the first update, plus once
/// after the last). Returns the parameters that achieved the best validation
/// loss. Stops at `max_iterations` or after `patience_evals` evaluations
/// without improvement. `on_eval` observes each history row as it is
/// recorded.
pub fn train_loop<T: Scalar, F: FnMut(&HistoryRow)>(
    network: &Network,
    init: NetworkParams<T>,
    train: &dyn PatchSource,
    validation: &dyn PatchSource,
    config: &TrainConfig,
    mut on_eval: F,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    network.validate_params(&init)?;
    if validation.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }
    if config.max_iterations == 0 {
        return Ok(TrainOutcome {
            params: init,
            history: Vec::new(),
            best_iteration: 0,
            best_val_loss: f64::NAN,
            iterations_run: 0,
        });
    }
    if train.is_empty() {
        return Err(Error::Data("training pool is empty".into()));
    }

    let mut params = init;
    let mut state = TrainState::new(&params);
    let mut cursor = BatchCursor::new(config.seed, train.len());
    let mut best = params.clone();
    let mut best_iteration = 0usize;
    let mut last_train_loss = f64::NAN;
    let mut stopped_early = false;

    while state.iteration < config.max_iterations {
        let it = state.iteration;
        let batch: Vec<usize> = cursor.next_batch(config.batch_size).to_vec();
        let (grads, train_loss) = batch_gradient(network, &params, train, &batch, it, config.seed)?;
        if !train_loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss at iteration {it}"
            )));
        }
        last_train_loss = train_loss;

        if it.is_multiple_of(config.eval_interval) {
            let val_loss = evaluate_mean_loss(network, &params, validation)?;
            let row = HistoryRow {
                iteration: it,
                lr: lr_schedule(it, config),
                train_loss,
                val_loss,
            };
            on_eval(&row);
            state.history.push(row);
            if val_loss < state.best_val_loss {
                state.best_val_loss = val_loss;
                state.evals_since_improvement = 0;
                best = params.clone();
                best_iteration = it;
            } else {
                state.evals_since_improvement += 1;
                if state.evals_since_improvement >= config.patience_evals {
                    stopped_early = true;
                    break;
                }
            }
        }

        sgd_step(&mut params, &grads, &mut state, config)?;
    }

    // Evaluate the final iterate unless the loop already evaluated it (or
    // patience fired, in which case the last iterate was just scored).
    if !stopped_early {
        let it = state.iteration;
        let val_loss = evaluate_mean_loss(network, &params, validation)?;
        let row = HistoryRow {
            iteration: it,
            lr: lr_schedule(it, config),
            train_loss: last_train_loss,
            val_loss,
        };
        on_eval(&row);
        state.history.push(row);
        if val_loss < state.best_val_loss {
            state.best_val_loss = val_loss;
            best = params.clone();
            best_iteration = it;
        }
    }

    Ok(TrainOutcome {
        params: best,
        history: state.history,
        best_iteration,
        best_val_loss: state.best_val_loss,
        iterations_run: state.iteration,
    })
}

/// Writes the evaluation history as CSV (`iteration,lr,train_loss,val_loss`).
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_error)?;
    writer
        .write_record(["iteration", "lr", "train_loss", "val_loss"])
        .map_err(csv_error)?;
    for row in history {
        writer
            .write_record([
                row.iteration.to_string(),
                format!("{}", row.lr),
                format!("{}", row.train_loss),
                format!("{}", row.val_loss),
            ])
            .map_err(csv_error)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads an evaluation history CSV back.
pub fn read_history_csv(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != 4 {
            return Err(Error::Data(format!(
                "history row has {} fields, expected 4",
                record.len()
            )));
        }
        let field = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|e| Error::Data(format!("bad history field {:?}: {e}", &record[i])))
        };
        rows.push(HistoryRow {
            iteration: field(0)? as usize,
            lr: field(1)?,
            train_loss: field(2)?,
            val_loss: field(3)?,
        });
    }
    Ok(rows)
}

fn csv_error(e: csv::Error) -> Error {
    Error::Data(format!("csv: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ArchitectureConfig;

    /// A bare single-tensor parameter set for optimizer-rule oracles.
    fn scalar_params<T: Scalar>(w: f64) -> NetworkParams<T> {
        NetworkParams::from_entries(vec![crate::network::Param {
            name: "w".into(),
            values: Tensor::from_vec(&[1], vec![T::from_f64(w)]).unwrap(),
        }])
    }

    fn scalar_grad<T: Scalar>(g: f64) -> Vec<Tensor<T>> {
        vec![Tensor::from_vec(&[1], vec![T::from_f64(g)]).unwrap()]
    }

    fn plain_config(lr: f64, momentum: f64, decay: f64) -> TrainConfig {
        let mut config = TrainConfig::new(usize::MAX, 0);
        config.base_lr = lr;
        config.momentum = momentum;
        config.weight_decay = decay;
        config.lr_step = usize::MAX;
        config
    }

    #[test]
    fn lr_schedule_matches_hand_values() {
        let config = TrainConfig::new(10_000, 0);
        assert!((lr_schedule(0, &config) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(1999, &config) - 0.01).abs() < 1e-15);
        assert!((lr_schedule(2000, &config) - 0.009).abs() < 1e-15);
        assert!((lr_schedule(5000, &config) - 0.0081).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_piecewise_constant_non_increasing() {
        let config = TrainConfig::new(10_000, 0);
        let mut prev = f64::INFINITY;
        for it in 0..10_000 {
            let lr = lr_schedule(it, &config);
            assert!(lr <= prev + 1e-18);
            let k = it / config.lr_step;
            assert!((lr - config.base_lr * config.lr_factor.powi(k as i32)).abs() < 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn sgd_step_hand_iteration() {
        // w=1, g=1, lr=0.1, momentum=0.9, decay=0:
        // v=−0.1, w=0.9; then v=−0.19, w=0.71.
        let mut params = scalar_params::<f64>(1.0);
        let mut state = TrainState::new(&params);
        let config = plain_config(0.1, 0.9, 0.0);
        sgd_step(&mut params, &scalar_grad(1.0), &mut state, &config).unwrap();
        assert!((params.entries()[0].values.as_slice()[0] - 0.9).abs() < 1e-15);
        assert!((state.velocity[0].as_slice()[0] + 0.1).abs() < 1e-15);
        sgd_step(&mut params, &scalar_grad(1.0), &mut state, &config).unwrap();
        assert!((params.entries()[0].values.as_slice()[0] - 0.71).abs() < 1e-15);
        assert!((state.velocity[0].as_slice()[0] + 0.19).abs() < 1e-15);
        assert_eq!(state.iteration, 2);
    }

    #[test]
    fn sgd_step_decay_only() {
        let mut params = scalar_params::<f64>(1.0);
        let mut state = TrainState::new(&params);
        let config = plain_config(0.1, 0.0, 0.001);
        sgd_step(&mut params, &scalar_grad(0.0), &mut state, &config).unwrap();
        assert!((params.entries()[0].values.as_slice()[0] - 0.9999).abs() < 1e-15);
    }

    #[test]
    fn sgd_step_all_zero_is_identity() {
        let mut params = scalar_params::<f64>(1.25);
        let mut state = TrainState::new(&params);
        let config = plain_config(0.1, 0.0, 0.0);
        sgd_step(&mut params, &scalar_grad(0.0), &mut state, &config).unwrap();
        assert_eq!(params.entries()[0].values.as_slice()[0], 1.25);
    }

    #[test]
    fn sgd_step_momentum_free_is_vanilla_descent() {
        // Bit-comparable to w − lr·g in f32.
        let network = Network::new(ArchitectureConfig::micro()).unwrap();
        let mut rng = derive_rng(3, &[stream::INIT]);
        let mut params: NetworkParams<f32> = network.init_params(&mut rng);
        let reference = params.clone();
        let grads: Vec<Tensor<f32>> = reference
            .entries()
            .iter()
            .map(|p| {
                let data = p
                    .values
                    .as_slice()
                    .iter()
                    .map(|&w| w * 0.5 + 0.01)
                    .collect();
                Tensor::from_vec(p.values.shape(), data).unwrap()
            })
            .collect();
        let mut state = TrainState::new(&params);
        let config = plain_config(0.05, 0.0, 0.0);
        sgd_step(&mut params, &grads, &mut state, &config).unwrap();
        let lr = 0.05f32;
        for (updated, (orig, grad)) in params
            .entries()
            .iter()
            .zip(reference.entries().iter().zip(&grads))
        {
            for ((&w2, &w), &g) in updated
                .values
                .as_slice()
                .iter()
                .zip(orig.values.as_slice())
                .zip(grad.as_slice())
            {
                assert_eq!(w2, w - lr * g);
            }
        }
    }

    #[test]
    fn sgd_step_rejects_non_finite_gradient() {
        let mut params = scalar_params::<f64>(1.0);
        let mut state = TrainState::new(&params);
        let config = plain_config(0.1, 0.9, 0.0);
        let err = sgd_step(&mut params, &scalar_grad(f64::NAN), &mut state, &config).unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
    }

    #[test]
    fn quadratic_toy_converges_monotonically() {
        // f(w) = (w − 3)²/2, gradient w − 3; lr below the stability bound.
        let mut params = scalar_params::<f64>(0.0);
        let mut state = TrainState::new(&params);
        let config = plain_config(0.5, 0.0, 0.0);
        let mut prev = 3.0f64;
        for _ in 0..30 {
            let w = params.entries()[0].values.as_slice()[0];
            sgd_step(&mut params, &scalar_grad(w - 3.0), &mut state, &config).unwrap();
            let dist = (params.entries()[0].values.as_slice()[0] - 3.0).abs();
            assert!(dist < prev);
            prev = dist;
        }
        assert!(prev < 1e-4);
    }

    /// Linearly separable toy pool: class 0 is dark, class 1 is bright, with
    /// small deterministic per-sample variation.
    fn toy_pool(n: usize, patch_px: usize) -> MemPool {
        let samples = (0..n)
            .map(|i| {
                let class = i % 2;
                let base = if class == 0 { 0.2 } else { 0.8 };
                let wiggle = 0.02 * ((i / 2) % 5) as f32;
                PatchSample {
                    pixels: Tensor::filled(&[3, patch_px, patch_px], base + wiggle),
                    label: class,
                    area_um2: None,
                }
            })
            .collect();
        MemPool(samples)
    }

    fn toy_network() -> Network {
        Network::new(ArchitectureConfig::micro()).unwrap()
    }

    #[test]
    fn train_loop_zero_iterations_returns_init() {
        let network = toy_network();
        let mut rng = derive_rng(1, &[stream::INIT]);
        let init: NetworkParams<f32> = network.init_params(&mut rng);
        let pool = toy_pool(8, network.config().patch_px);
        let config = TrainConfig::new(0, 5);
        let out = train_loop(&network, init.clone(), &pool, &pool, &config, |_| {}).unwrap();
        assert_eq!(out.params, init);
        assert!(out.history.is_empty());
        assert_eq!(out.iterations_run, 0);
    }

    #[test]
    fn train_loop_rejects_empty_validation() {
        let network = toy_network();
        let mut rng = derive_rng(1, &[stream::INIT]);
        let init: NetworkParams<f32> = network.init_params(&mut rng);
        let pool = toy_pool(8, network.config().patch_px);
        let empty = MemPool(Vec::new());
        let config = TrainConfig::new(10, 5);
        assert!(train_loop(&network, init, &pool, &empty, &config, |_| {}).is_err());
    }

    #[test]
    fn train_loop_descends_on_separable_toy() {
        let network = toy_network();
        let mut rng = derive_rng(2, &[stream::INIT]);
        let init: NetworkParams<f32> = network.init_params(&mut rng);
        let pool = toy_pool(32, network.config().patch_px);
        let mut config = TrainConfig::new(500, 7);
        config.batch_size = 16;
        config.eval_interval = 500;
        let out = train_loop(&network, init, &pool, &pool, &config, |_| {}).unwrap();
        let first = &out.history[0];
        let last = out.history.last().unwrap();
        assert_eq!(first.iteration, 0);
        assert_eq!(last.iteration, 500);
        assert!(
            last.train_loss < first.train_loss,
            "train loss {} !< {}",
            last.train_loss,
            first.train_loss
        );
        assert!(last.val_loss < first.val_loss);
        // The returned snapshot is the best one on record.
        let min_val = out
            .history
            .iter()
            .map(|r| r.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min_val);
    }

    #[test]
    fn train_loop_patience_stops_early() {
        // A vanishing learning rate freezes the parameters, so validation
        // never improves after the baseline and patience fires.
        let network = toy_network();
        let mut rng = derive_rng(3, &[stream::INIT]);
        let init: NetworkParams<f32> = network.init_params(&mut rng);
        let pool = toy_pool(8, network.config().patch_px);
        let mut config = TrainConfig::new(1000, 11);
        config.batch_size = 4;
        config.base_lr = 1e-30;
        config.eval_interval = 10;
        config.patience_evals = 2;
        let out = train_loop(&network, init.clone(), &pool, &pool, &config, |_| {}).unwrap();
        // Evals at 0 (baseline best), 10, 20 → stop.
        assert_eq!(out.iterations_run, 20);
        assert_eq!(out.history.len(), 3);
        assert_eq!(out.best_iteration, 0);
        assert_eq!(out.params, init);
    }

    #[test]
    fn train_loop_is_deterministic() {
        let network = toy_network();
        let mut rng = derive_rng(4, &[stream::INIT]);
        let init: NetworkParams<f32> = network.init_params(&mut rng);
        let pool = toy_pool(16, network.config().patch_px);
        let mut config = TrainConfig::new(60, 13);
        config.batch_size = 8;
        config.eval_interval = 20;
        let a = train_loop(&network, init.clone(), &pool, &pool, &config, |_| {}).unwrap();
        let b = train_loop(&network, init, &pool, &pool, &config, |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn history_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let rows = vec![
            HistoryRow {
                iteration: 0,
                lr: 0.01,
                train_loss: 3.0,
                val_loss: 2.99,
            },
            HistoryRow {
                iteration: 500,
                lr: 0.01,
                train_loss: 1.25,
                val_loss: 1.5,
            },
        ];
        write_history_csv(&path, &rows).unwrap();
        assert_eq!(read_history_csv(&path).unwrap(), rows);
    }
}
