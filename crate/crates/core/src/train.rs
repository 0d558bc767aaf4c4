//! One-epoch online training over a task sequence.
//!
//! Replay methods load each arriving sample into the ring buffer and take one
//! SGD step on a batch drawn from memory. A-GEM trains on current-task
//! samples from memory and projects against a reference gradient from older
//! tasks. GSS-greedy owns its loop: stream batches get several iterations
//! mixed with a memory batch, after which the memory is updated by gradient
//! diversity.

use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, GssGreedyBuffer, RefGradient};
use crate::data::TaskSequence;
use crate::error::{Error, Result};
use crate::losses::{LossSpec, Objective};
use crate::memory::{self, MemoryBuffer, ReplaySpec, Sample, Strategy};
use crate::metrics::AccuracyMatrix;
use crate::nn::{self, GradientVector, MlpModel};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainMethod {
    Replay(ReplaySpec),
    Agem {
        batch_size: usize,
        ref_batch_size: usize,
    },
    GssGreedy {
        batch_size: usize,
        memory_batch_size: usize,
        n_iter: usize,
        comparison_size: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub method: TrainMethod,
    pub loss: LossSpec,
    pub lr: f64,
    pub l1_coeff: f64,
    /// L1 is applied during the first `l1_tasks` tasks only.
    pub l1_tasks: usize,
    pub memory_size: usize,
    /// Key the memory by task id instead of class id.
    pub key_by_task: bool,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub accuracy: AccuracyMatrix,
    pub task_seconds: Vec<f64>,
    pub steps: usize,
    pub final_loss: f64,
}

/// Read-only view handed to the task-boundary hook.
pub struct TaskEnd<'a> {
    pub task: usize,
    /// Test accuracies on tasks `0..=task` just recorded.
    pub row: &'a [f64],
    pub model: &'a MlpModel,
    pub tasks: &'a TaskSequence,
}

const STREAM_ORDER: u64 = 1;
const REPLAY: u64 = 2;
const OBJECTIVE: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub fn online_train(model: &mut MlpModel, tasks: &TaskSequence, settings: &TrainSettings) -> Result<TrainOutcome> {
    online_train_with(model, tasks, settings, |_| Ok(()))
}

/// [`online_train`] with a hook called after each task's evaluation row.
pub fn online_train_with<F>(
    model: &mut MlpModel,
    tasks: &TaskSequence,
    settings: &TrainSettings,
    mut on_task_end: F,
) -> Result<TrainOutcome>
where
    F: FnMut(TaskEnd<'_>) -> Result<()>,
{
    settings.loss.validate()?;
    if model.input_dim() != tasks.input_dim {
        return Err(Error::Shape(format!(
            "model takes {} inputs, tasks have {}",
            model.input_dim(),
            tasks.input_dim
        )));
    }
    let mut state = State {
        order_rng: rng_for(settings.seed, STREAM_ORDER),
        replay_rng: rng_for(settings.seed, REPLAY),
        objective: Objective::new(settings.loss, settings.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ OBJECTIVE),
        ce: Objective::new(LossSpec::cross_entropy(), 0),
        ring: MemoryBuffer::new(settings.memory_size),
        gss: GssGreedyBuffer::new(settings.memory_size),
        steps: 0,
        last_loss: 0.0,
    };
    if let TrainMethod::Replay(spec) = settings.method {
        spec.validate()?;
    }

    let mut accuracy = AccuracyMatrix::new();
    let mut task_seconds = Vec::with_capacity(tasks.len());
    for (t, task) in tasks.tasks.iter().enumerate() {
        let started = Instant::now();
        let l1 = if t < settings.l1_tasks { settings.l1_coeff } else { 0.0 };
        let task_keys: Vec<usize> = if settings.key_by_task {
            vec![task.id]
        } else {
            task.classes.clone()
        };
        let mut order: Vec<usize> = (0..task.train.len()).collect();
        order.shuffle(&mut state.order_rng);
        let sample_at = |i: usize| Sample {
            x: task.train.features.row(i).to_vec(),
            label: task.train.labels[i],
            key: if settings.key_by_task { task.id } else { task.train.labels[i] },
            source: task.train_source_idx[i],
        };

        match settings.method {
            TrainMethod::Replay(spec) => {
                for chunk in order.chunks(spec.stream_load_size) {
                    let arrivals: Vec<Sample> = chunk.iter().map(|&i| sample_at(i)).collect();
                    let batch_keys: Vec<usize> = arrivals.iter().map(|s| s.key).collect();
                    state.ring.update(arrivals)?;
                    let batch = match spec.strategy {
                        Strategy::Ber => memory::ber_select(
                            &state.ring,
                            &batch_keys,
                            spec.batch_size,
                            spec.min_positive_pairs,
                            &mut state.replay_rng,
                        )?,
                        Strategy::Er => {
                            memory::er_select(&state.ring, &task_keys, spec.batch_size, &mut state.replay_rng)?
                        }
                    };
                    state.step(model, &batch.x, &batch.labels, settings.lr, l1)?;
                }
            }
            TrainMethod::Agem {
                batch_size,
                ref_batch_size,
            } => {
                for &i in &order {
                    let arrival = sample_at(i);
                    let newest = (arrival.key, 0);
                    state.ring.update(vec![arrival])?;
                    let newest = (newest.0, state.ring.count(newest.0) - 1);
                    let mut own: Vec<_> = memory::sample_uniform(
                        &state.ring,
                        &complement(&state.ring, &task_keys),
                        batch_size,
                        &mut state.replay_rng,
                    )
                    .into_iter()
                    .filter(|&s| s != newest)
                    .take(batch_size.saturating_sub(1))
                    .collect();
                    own.insert(0, newest);
                    let refs = memory::sample_uniform(&state.ring, &task_keys, ref_batch_size, &mut state.replay_rng);
                    let batch = state.ring.gather(&own)?;
                    let reference = if refs.is_empty() {
                        None
                    } else {
                        let rb = state.ring.gather(&refs)?;
                        Some(RefGradient::compute(model, &rb.x, &rb.labels)?)
                    };
                    state.agem_step(model, &batch.x, &batch.labels, reference.as_ref(), settings.lr, l1)?;
                }
            }
            TrainMethod::GssGreedy {
                batch_size,
                memory_batch_size,
                n_iter,
                comparison_size,
            } => {
                for chunk in order.chunks(batch_size) {
                    let arrivals: Vec<Sample> = chunk.iter().map(|&i| sample_at(i)).collect();
                    let rows: Vec<&[f64]> = arrivals.iter().map(|s| s.x.as_slice()).collect();
                    let sx = Tensor2::from_rows(&rows)?;
                    let sy: Vec<usize> = arrivals.iter().map(|s| s.label).collect();
                    for _ in 0..n_iter.max(1) {
                        let (x, y) = if state.gss.is_empty() {
                            (sx.clone(), sy.clone())
                        } else {
                            let m = memory_batch_size.min(state.gss.len());
                            let idx = index::sample(&mut state.replay_rng, state.gss.len(), m).into_vec();
                            let (mx, my) = state.gss.batch(&idx)?;
                            let mut data = sx.data().to_vec();
                            data.extend_from_slice(mx.data());
                            let mut y = sy.clone();
                            y.extend(my);
                            (Tensor2::new(y.len(), sx.cols(), data)?, y)
                        };
                        state.step(model, &x, &y, settings.lr, l1)?;
                    }
                    let trace = nn::forward(model, &sx)?;
                    let grads = nn::per_sample_gradients(model, &trace, &sy)?;
                    let grads: Vec<Vec<f64>> = grads.into_iter().map(|g| g.flat).collect();
                    state
                        .gss
                        .offer_batch(model, arrivals, &grads, comparison_size, &mut state.replay_rng)?;
                }
            }
        }

        let row = tasks.tasks[..=t]
            .iter()
            .map(|tk| tk.test_accuracy(model))
            .collect::<Result<Vec<f64>>>()?;
        log::info!(
            "task {}/{}: avg acc {:.4} ({} steps)",
            t + 1,
            tasks.len(),
            row.iter().sum::<f64>() / row.len() as f64,
            state.steps
        );
        if log::log_enabled!(log::Level::Debug) {
            let mut counts = std::collections::BTreeMap::new();
            let labels: Vec<usize> = match settings.method {
                TrainMethod::GssGreedy { .. } => state.gss.samples.iter().map(|s| s.label).collect(),
                _ => state.ring.iter().map(|s| s.label).collect(),
            };
            for l in labels {
                *counts.entry(l).or_insert(0usize) += 1;
            }
            log::debug!("memory by class after task {}: {counts:?}", t + 1);
        }
        task_seconds.push(started.elapsed().as_secs_f64());
        on_task_end(TaskEnd {
            task: t,
            row: &row,
            model,
            tasks,
        })?;
        accuracy.push_row(row)?;
    }
    Ok(TrainOutcome {
        accuracy,
        task_seconds,
        steps: state.steps,
        final_loss: state.last_loss,
    })
}

fn complement(buffer: &MemoryBuffer, keep: &[usize]) -> Vec<usize> {
    buffer.keys().into_iter().filter(|k| !keep.contains(k)).collect()
}

struct State {
    order_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    objective: Objective,
    ce: Objective,
    ring: MemoryBuffer,
    gss: GssGreedyBuffer,
    steps: usize,
    last_loss: f64,
}

impl State {
    fn step(&mut self, model: &mut MlpModel, x: &Tensor2, y: &[usize], lr: f64, l1: f64) -> Result<()> {
        let trace = nn::forward(model, x)?;
        let b = nn::backward(model, &trace, y, &mut self.objective, false)?;
        self.check(b.loss.total)?;
        nn::sgd_step(model, &b.grad, lr, l1).map_err(|e| self.context(e))?;
        self.objective.step(b.objective_grad, lr);
        Ok(())
    }

    fn agem_step(
        &mut self,
        model: &mut MlpModel,
        x: &Tensor2,
        y: &[usize],
        reference: Option<&RefGradient>,
        lr: f64,
        l1: f64,
    ) -> Result<()> {
        let trace = nn::forward(model, x)?;
        let b = nn::backward(model, &trace, y, &mut self.ce, false)?;
        self.check(b.loss.total)?;
        let grad = match reference {
            Some(r) => GradientVector {
                flat: baselines::agem_project(&b.grad.flat, &r.flat.flat).0,
            },
            None => b.grad,
        };
        nn::sgd_step(model, &grad, lr, l1).map_err(|e| self.context(e))
    }

    fn check(&mut self, loss: f64) -> Result<()> {
        self.steps += 1;
        self.last_loss = loss;
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("non-finite loss {loss} at step {}", self.steps)));
        }
        Ok(())
    }

    fn context(&self, e: Error) -> Error {
        match e {
            Error::Divergence(m) => Error::Divergence(format!("{m} at step {}", self.steps)),
            other => other,
        }
    }
}
