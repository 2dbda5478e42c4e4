use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netmodel::{NetVars, ToyNetwork};
use crate::numkernel::{Matrix, RngStream, Scalar, Tape, Var};
use crate::seqmodel::RoutingMask;

use super::optim::{AdamW, OptimizerConfig, Schedule};
use super::task::{Sample, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Held-out evaluation every this many updates (0 disables the periodic rows).
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            eval_interval: 250,
            eval_samples: 512,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricRow>,
    /// Mean batch loss of every update.
    pub train_losses: Vec<f64>,
    pub initial: Evaluation,
    pub last: Evaluation,
    pub frozen_checksum: u64,
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy of `samples` on one tape; also returns the hit count.
pub fn batch_loss<T: Scalar>(
    net: &ToyNetwork<T>,
    tape: &mut Tape<T>,
    vars: &NetVars,
    samples: &[Sample<T>],
    mask: Option<&RoutingMask>,
) -> Result<(Var, usize)> {
    if samples.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total: Option<Var> = None;
    let mut hits = 0;
    for s in samples {
        let logits = net.build(tape, vars, &s.seq, mask, None)?;
        if argmax(tape.value(logits).row(0)) == s.label {
            hits += 1;
        }
        let l = tape.cross_entropy(logits, s.label)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let mean = tape.scale(total.expect("non-empty"), T::one() / T::lit(samples.len() as f64))?;
    Ok((mean, hits))
}

/// Held-out loss and accuracy.
pub fn evaluate<T: Scalar>(
    net: &ToyNetwork<T>,
    samples: &[Sample<T>],
    mask: Option<&RoutingMask>,
) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut hits = 0;
    for s in samples {
        let logits = net.forward(&s.seq, mask)?;
        if argmax(logits.row(0)) == s.label {
            hits += 1;
        }
        loss += crate::numkernel::cross_entropy(logits.row(0), s.label).as_f64();
    }
    let n = samples.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        accuracy: hits as f64 / n,
        samples: samples.len(),
    })
}

/// Gradients of the mean batch loss for every trainable tensor, in
/// `trainable_parameters` order, plus the loss itself.
pub fn gradients<T: Scalar>(net: &ToyNetwork<T>, samples: &[Sample<T>]) -> Result<(f64, Vec<Matrix<T>>, usize)> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let (loss, hits) = batch_loss(net, &mut tape, &vars, samples, None)?;
    let grads = tape.backward(loss)?;
    let g = vars.trainable().into_iter().map(|v| grads.wrt(v)).collect();
    Ok((tape.value(loss).get(0, 0).as_f64(), g, hits))
}

/// Trains adapters and head of `net` in place.
///
/// Batches are drawn online from a stream keyed by `seed`; the held-out set
/// comes from the task. Deterministic for a given `(net, task, cfg, seed)`.
pub fn train<T: Scalar>(net: &mut ToyNetwork<T>, task: &Task, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let checksum = net.frozen_checksum();
    let held_out: Vec<Sample<T>> = task.held_out(cfg.eval_samples);
    let schedule = Schedule::new(cfg.optimizer.lr, cfg.optimizer.warmup_ratio, cfg.steps);
    let shapes: Vec<(usize, usize)> = net.trainable_parameters().iter().map(|(_, m)| m.shape()).collect();
    let mut opt = AdamW::<T>::new(cfg.optimizer, shapes);
    let mut rng = RngStream::new(seed, 4);
    let mut metrics = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.steps);

    let initial = evaluate(net, &held_out, None)?;
    metrics.push(MetricRow {
        step: 0,
        split: "eval".into(),
        loss: initial.loss,
        accuracy: initial.accuracy,
        lr: schedule.lr_at(0),
    });
    let mut last = initial;

    for step in 0..cfg.steps {
        let lr = schedule.lr_at(step);
        let batch: Vec<Sample<T>> = task.samples(cfg.batch_size, &mut rng);
        let (loss, grads, hits) = gradients(net, &batch)?;
        let grad_norm = grads
            .iter()
            .flat_map(|g| g.data().iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { step, lr, grad_norm });
        }
        {
            let mut params: Vec<&mut Matrix<T>> = net.trainable_parameters_mut().into_iter().map(|(_, m)| m).collect();
            opt.step(&mut params, &grads, lr)?;
        }
        train_losses.push(loss);
        metrics.push(MetricRow {
            step: step + 1,
            split: "train".into(),
            loss,
            accuracy: hits as f64 / batch.len() as f64,
            lr,
        });
        let done = step + 1 == cfg.steps;
        if done || (cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0) {
            last = evaluate(net, &held_out, None)?;
            metrics.push(MetricRow {
                step: step + 1,
                split: "eval".into(),
                loss: last.loss,
                accuracy: last.accuracy,
                lr,
            });
        }
    }

    if net.frozen_checksum() != checksum {
        return Err(Error::Invariant("frozen weights changed during training".into()));
    }
    Ok(TrainOutcome {
        metrics,
        train_losses,
        initial,
        last,
        frozen_checksum: checksum,
    })
}

/// Mean of the first and last `window` entries.
pub fn smoothed_ends(losses: &[f64], window: usize) -> (f64, f64) {
    let w = window.min(losses.len()).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    (
        mean(&losses[..w.min(losses.len())]),
        mean(&losses[losses.len().saturating_sub(w)..]),
    )
}
