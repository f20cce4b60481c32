//! Synchronous decoupled training: the per-batch module loop, the sequential
//! greedy baseline, and a worker-per-module pipelined runner whose per-module
//! arithmetic is identical to the synchronous loop (same inputs in the same
//! order), so trajectories match bit for bit in 64-bit runs.

use crate::data::Dataset;
use crate::diagnostics::{estimate_drift, DriftCfg};
use crate::error::{Error, Result};
use crate::loss::{correct_count, cross_entropy};
use crate::metrics::{MetricRecord, MetricsTrace};
use crate::net::{GreedyModule, Partition};
use crate::optim::{LrSchedule, Sgd};
use crate::tensor::{Scalar, Tensor};
use std::sync::mpsc;

/// Optimizer settings shared by every module (each module still steps from
/// its own update counter).
#[derive(Clone, Copy, Debug)]
pub struct OptimSettings {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_factor: f64,
    pub decay_period: u32,
}

impl OptimSettings {
    pub fn sgd(&self) -> Result<Sgd> {
        Ok(Sgd::new(
            LrSchedule::new(self.lr, self.decay_factor, self.decay_period)?,
            self.momentum,
            self.weight_decay,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TrainState<T: Scalar> {
    pub partition: Partition<T>,
    pub optimizers: Vec<Sgd>,
    /// Per-module update counters t_j.
    pub update_counts: Vec<u64>,
    /// Per-module epoch budget: a module stops updating after
    /// `epochs * batches_per_epoch` of its own updates.
    pub epochs: u32,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(
        partition: Partition<T>,
        optim: &OptimSettings,
        epochs: u32,
        batches_per_epoch: usize,
        batch_size: usize,
    ) -> Result<Self> {
        let modules = partition.len();
        let sgd = optim.sgd()?;
        Ok(TrainState {
            partition,
            optimizers: vec![sgd; modules],
            update_counts: vec![0; modules],
            epochs,
            batches_per_epoch,
            batch_size,
        })
    }

    pub fn modules(&self) -> usize {
        self.partition.len()
    }

    pub fn budget_updates(&self) -> u64 {
        u64::from(self.epochs) * self.batches_per_epoch as u64
    }

    /// A module's epoch equivalent: its own updates over batches per epoch.
    pub fn epoch_of(&self, j: usize) -> u32 {
        (self.update_counts[j - 1] / self.batches_per_epoch as u64) as u32
    }

    /// One training update on module j with input x: zero grads, local loss,
    /// backward, SGD step at the module's own schedule position. Returns
    /// (loss, correct, grad_norm, output).
    pub fn update_module(
        &mut self,
        j: usize,
        x: &Tensor<T>,
        labels: &[usize],
    ) -> Result<(f64, usize, f64, Tensor<T>)> {
        let epoch = self.epoch_of(j);
        self.partition.modules[j - 1].zero_grad();
        let out = self.partition.local_loss(j, x, labels, true)?;
        let grad_norm = self.partition.modules[j - 1].grad_sq_norm().sqrt();
        let lr = self.optimizers[j - 1].schedule.rate(epoch);
        let mut params = self.partition.modules[j - 1].params_mut();
        self.optimizers[j - 1].step_with_lr(&mut params, lr)?;
        self.update_counts[j - 1] += 1;
        Ok((out.loss.as_f64(), out.correct, grad_norm, out.output))
    }
}

#[derive(Clone, Debug)]
pub struct TrainOpts {
    /// Metric evaluations per epoch-equivalent (at least 1).
    pub eval_per_epoch: u32,
    /// Snapshot all parameters every this many per-module updates
    /// (trajectory-equality checks); None disables.
    pub snapshot_every: Option<u64>,
    /// Bounded-channel capacity between pipelined workers, in batches.
    pub channel_capacity: usize,
    /// Optional per-module artificial delay per batch (pipelined only).
    pub sleep_ms: Vec<u64>,
    /// Probe batch size for the drift estimator.
    pub probe_n: usize,
}

impl Default for TrainOpts {
    fn default() -> Self {
        TrainOpts {
            eval_per_epoch: 2,
            snapshot_every: None,
            channel_capacity: 2,
            sleep_ms: Vec::new(),
            probe_n: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub module: usize,
    pub update_count: u64,
    pub params: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub trace: MetricsTrace,
    pub snapshots: Vec<ParamSnapshot>,
}

/// Per-module accumulators between evaluation points.
#[derive(Clone, Debug, Default)]
pub(crate) struct Window {
    pub loss_sum: f64,
    pub correct: usize,
    pub samples: usize,
    pub grad_norm_sum: f64,
    pub updates: u64,
}

impl Window {
    pub fn add(&mut self, loss: f64, correct: usize, samples: usize, grad_norm: f64) {
        self.loss_sum += loss;
        self.correct += correct;
        self.samples += samples;
        self.grad_norm_sum += grad_norm;
        self.updates += 1;
    }

    pub fn mean_loss(&self) -> f64 {
        if self.updates == 0 {
            f64::NAN
        } else {
            self.loss_sum / self.updates as f64
        }
    }

    pub fn train_acc(&self) -> f64 {
        if self.samples == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.samples as f64
        }
    }

    pub fn mean_grad_norm(&self) -> f64 {
        if self.updates == 0 {
            f64::NAN
        } else {
            self.grad_norm_sum / self.updates as f64
        }
    }
}

/// Shared evaluation plumbing: test accuracy through the current partition
/// and the windowed drift proxy on a fixed probe batch.
pub(crate) struct Evaluator<T: Scalar> {
    test: Vec<(Tensor<T>, Vec<usize>)>,
    probe: Tensor<T>,
    prev_features: Vec<Option<Tensor<T>>>,
    drift_seed: u64,
}

impl<T: Scalar> Evaluator<T> {
    pub fn new(dataset: &Dataset<T>, modules: usize, probe_n: usize, seed: u64) -> Self {
        Evaluator {
            test: dataset.test_batches(256),
            probe: dataset.probe_batch(probe_n.max(1)).0,
            prev_features: vec![None; modules],
            drift_seed: seed,
        }
    }

    pub fn test_accuracy(&self, partition: &mut Partition<T>, j: usize) -> Result<f64> {
        let mut correct = 0;
        let mut total = 0;
        for (x, y) in &self.test {
            correct += partition.evaluate_through(j, x, y)?;
            total += y.len();
        }
        Ok(if total == 0 {
            f64::NAN
        } else {
            correct as f64 / total as f64
        })
    }

    /// Drift of module j's input features since the previous evaluation
    /// window, measured on the fixed probe batch. Module 1 always reports 0.
    pub fn drift(&mut self, partition: &mut Partition<T>, j: usize) -> Result<f64> {
        let features = partition.features_into(j, &self.probe)?;
        let value = match &self.prev_features[j - 1] {
            Some(prev) => {
                estimate_drift(
                    prev,
                    &features,
                    &DriftCfg {
                        seed: self.drift_seed,
                        ..Default::default()
                    },
                )?
                .value
            }
            None => 0.0,
        };
        self.prev_features[j - 1] = Some(features);
        Ok(value)
    }
}

pub(crate) fn eval_every(batches_per_epoch: usize, eval_per_epoch: u32) -> u64 {
    (batches_per_epoch as u64 / u64::from(eval_per_epoch.max(1))).max(1)
}

/// Runs the synchronous loop: per batch, modules update in index order, each
/// from its own local loss; after T batches every module has made exactly T
/// updates.
pub fn train_sync<T: Scalar>(
    dataset: &Dataset<T>,
    state: &mut TrainState<T>,
    opts: &TrainOpts,
    master_seed: u64,
) -> Result<TrainOutcome> {
    let modules = state.modules();
    let mut outcome = TrainOutcome::default();
    let mut evaluator = Evaluator::new(dataset, modules, opts.probe_n, master_seed);
    let mut windows = vec![Window::default(); modules];
    let every = eval_every(state.batches_per_epoch, opts.eval_per_epoch);
    let mut step = 0u64;
    for epoch in 0..u64::from(state.epochs) {
        for (x0, labels) in dataset.epoch_batches(master_seed, epoch, state.batch_size) {
            step += 1;
            let mut x = x0;
            for j in 1..=modules {
                let (loss, correct, grad_norm, out) = state.update_module(j, &x, &labels)?;
                windows[j - 1].add(loss, correct, labels.len(), grad_norm);
                x = out;
                maybe_snapshot(state, j, opts.snapshot_every, &mut outcome.snapshots);
                if state.update_counts[j - 1] % every == 0 {
                    emit_record(state, j, step, &mut windows[j - 1], &mut evaluator, &mut outcome.trace)?;
                }
            }
        }
    }
    Ok(outcome)
}

/// Sequential greedy baseline: module j trains for the full epoch budget with
/// modules < j frozen, so each solver sees a stationary input distribution.
/// Per-module update counts match `train_sync` exactly.
pub fn train_sequential<T: Scalar>(
    dataset: &Dataset<T>,
    state: &mut TrainState<T>,
    opts: &TrainOpts,
    master_seed: u64,
) -> Result<TrainOutcome> {
    let modules = state.modules();
    let mut outcome = TrainOutcome::default();
    let mut evaluator = Evaluator::new(dataset, modules, opts.probe_n, master_seed);
    let every = eval_every(state.batches_per_epoch, opts.eval_per_epoch);
    let mut step = 0u64;
    for j in 1..=modules {
        let mut window = Window::default();
        for epoch in 0..u64::from(state.epochs) {
            for (x0, labels) in dataset.epoch_batches(master_seed, epoch, state.batch_size) {
                step += 1;
                // Frozen predecessors in evaluation mode: stationary inputs.
                let x = state.partition.features_into(j, &x0)?;
                let (loss, correct, grad_norm, _) = state.update_module(j, &x, &labels)?;
                window.add(loss, correct, labels.len(), grad_norm);
                maybe_snapshot(state, j, opts.snapshot_every, &mut outcome.snapshots);
                if state.update_counts[j - 1] % every == 0 {
                    emit_record(state, j, step, &mut window, &mut evaluator, &mut outcome.trace)?;
                }
            }
        }
    }
    Ok(outcome)
}

fn maybe_snapshot<T: Scalar>(
    state: &TrainState<T>,
    j: usize,
    snapshot_every: Option<u64>,
    snapshots: &mut Vec<ParamSnapshot>,
) {
    if let Some(every) = snapshot_every {
        let count = state.update_counts[j - 1];
        if count % every == 0 {
            snapshots.push(ParamSnapshot {
                module: j,
                update_count: count,
                params: state.partition.modules[j - 1].param_vector(),
            });
        }
    }
}

fn emit_record<T: Scalar>(
    state: &mut TrainState<T>,
    j: usize,
    step: u64,
    window: &mut Window,
    evaluator: &mut Evaluator<T>,
    trace: &mut MetricsTrace,
) -> Result<()> {
    let test_acc = evaluator.test_accuracy(&mut state.partition, j)?;
    let drift = evaluator.drift(&mut state.partition, j)?;
    trace.push(MetricRecord {
        step,
        module_id: j,
        epoch_equivalent: state.update_counts[j - 1] as f64 / state.batches_per_epoch as f64,
        train_loss: window.mean_loss(),
        train_acc: window.train_acc(),
        test_acc,
        grad_norm: window.mean_grad_norm(),
        drift,
        bits_sent: 0.0,
        buffer_bytes: 0,
        starvation_count: 0,
    });
    *window = Window::default();
    Ok(())
}

type PipeMsg<T> = (Tensor<T>, Vec<usize>);

struct WorkerOut<T: Scalar> {
    module: GreedyModule<T>,
    window: Window,
    snapshots: Vec<ParamSnapshot>,
    update_count: u64,
}

#[allow(clippy::too_many_arguments)]
fn pipeline_worker<T: Scalar>(
    j: usize,
    mut module: GreedyModule<T>,
    optimizer: Sgd,
    rx: mpsc::Receiver<PipeMsg<T>>,
    tx: Option<mpsc::SyncSender<PipeMsg<T>>>,
    total_batches: u64,
    batches_per_epoch: u64,
    snapshot_every: Option<u64>,
    sleep_ms: u64,
) -> Result<WorkerOut<T>> {
    let mut window = Window::default();
    let mut snapshots = Vec::new();
    let mut update_count = 0u64;
    for _ in 0..total_batches {
        let (x, labels) = rx.recv().map_err(|_| Error::WorkerFailed {
            module: j,
            reason: "upstream channel closed early".into(),
        })?;
        module.zero_grad();
        let trunk_out = module.trunk.forward(&x, true)?;
        let logits = module.head.forward(&trunk_out, true)?;
        let (loss, dlogits) = cross_entropy(&logits, &labels)?;
        let correct = correct_count(&logits, &labels);
        let dout = module.head.backward(&dlogits)?;
        module.trunk.backward(&dout)?;
        let grad_norm = module.grad_sq_norm().sqrt();
        let epoch = (update_count / batches_per_epoch) as u32;
        let lr = optimizer.schedule.rate(epoch);
        {
            let mut params = module.params_mut();
            optimizer.step_with_lr(&mut params, lr)?;
        }
        update_count += 1;
        window.add(loss.as_f64(), correct, labels.len(), grad_norm);
        if let Some(every) = snapshot_every {
            if update_count % every == 0 {
                snapshots.push(ParamSnapshot {
                    module: j,
                    update_count,
                    params: module.param_vector(),
                });
            }
        }
        if sleep_ms > 0 {
            std::thread::sleep(std::time::Duration::from_millis(sleep_ms));
        }
        if let Some(tx) = &tx {
            tx.send((trunk_out, labels)).map_err(|_| Error::WorkerFailed {
                module: j,
                reason: "downstream channel closed early".into(),
            })?;
        }
    }
    Ok(WorkerOut {
        module,
        window,
        snapshots,
        update_count,
    })
}

/// Worker-per-module pipelined runner. A feeder thread streams seeded batches
/// into the first bounded channel; worker j waits for each activation from
/// worker j-1, updates its own module, and forwards its output. Per-module
/// arithmetic matches `train_sync`; only the wall-clock overlap differs.
/// Metrics are evaluated once at the end on the re-assembled partition.
pub fn train_pipelined<T: Scalar>(
    dataset: &Dataset<T>,
    state: &mut TrainState<T>,
    opts: &TrainOpts,
    master_seed: u64,
) -> Result<TrainOutcome> {
    let modules = state.modules();
    let total_batches = state.budget_updates();
    let batch_size = state.batch_size;
    let batches_per_epoch = state.batches_per_epoch as u64;
    let capacity = opts.channel_capacity.max(1);
    let mut outcome = TrainOutcome::default();
    if modules == 0 || total_batches == 0 {
        return Ok(outcome);
    }

    let (feed_tx, mut chain_rx) = mpsc::sync_channel::<PipeMsg<T>>(capacity);
    let feeder_dataset = dataset.clone();
    let epochs = state.epochs;
    let feeder = std::thread::spawn(move || -> Result<()> {
        for epoch in 0..u64::from(epochs) {
            for (x, labels) in feeder_dataset.epoch_batches(master_seed, epoch, batch_size) {
                if feed_tx.send((x, labels)).is_err() {
                    // Downstream failed; the worker error is reported there.
                    return Ok(());
                }
            }
        }
        Ok(())
    });

    let mut handles = Vec::new();
    for j in 1..=modules {
        let module = state.partition.modules[j - 1].clone();
        let optimizer = state.optimizers[j - 1];
        let rx = chain_rx;
        let (tx, next_rx) = if j < modules {
            let (tx, rx) = mpsc::sync_channel::<PipeMsg<T>>(capacity);
            (Some(tx), rx)
        } else {
            // The last worker's output channel is never read.
            let (tx, rx) = mpsc::sync_channel::<PipeMsg<T>>(1);
            drop(tx);
            (None, rx)
        };
        chain_rx = next_rx;
        let snapshot_every = opts.snapshot_every;
        let sleep_ms = opts.sleep_ms.get(j - 1).copied().unwrap_or(0);
        handles.push(std::thread::spawn(move || {
            pipeline_worker(
                j,
                module,
                optimizer,
                rx,
                tx,
                total_batches,
                batches_per_epoch,
                snapshot_every,
                sleep_ms,
            )
        }));
    }

    feeder.join().map_err(|_| Error::WorkerFailed {
        module: 0,
        reason: "feeder thread panicked".into(),
    })??;

    let mut windows = Vec::new();
    for (i, handle) in handles.into_iter().enumerate() {
        let out = handle.join().map_err(|_| Error::WorkerFailed {
            module: i + 1,
            reason: "worker thread panicked".into(),
        })??;
        state.partition.modules[i] = out.module;
        state.update_counts[i] = out.update_count;
        outcome.snapshots.extend(out.snapshots);
        windows.push(out.window);
    }
    outcome
        .snapshots
        .sort_by_key(|s| (s.update_count, s.module));

    // Final evaluation on the drained partition.
    let mut evaluator = Evaluator::new(dataset, modules, opts.probe_n, master_seed);
    for j in 1..=modules {
        emit_record(
            state,
            j,
            total_batches,
            &mut windows[j - 1],
            &mut evaluator,
            &mut outcome.trace,
        )?;
    }
    Ok(outcome)
}
