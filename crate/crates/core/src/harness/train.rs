//! SGD with global-norm clipping, periodic held-out evaluation and
//! divergence detection.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::checkpoint::save_checkpoint;
use crate::harness::config::{ExperimentConfig, TrainConfig};
use crate::harness::metrics::{evaluate, Metrics};
use crate::harness::model::{Dropout, Model, ModelInputs};
use crate::harness::task::{Batch, Split, Task};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// One line of the run log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    /// Training loss of this step's batch.
    pub loss: f64,
    /// Validation token accuracy.
    pub metric: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    ReachedTarget { step: usize },
    Diverged { step: usize, reason: String },
}

impl Outcome {
    pub fn diverged(&self) -> bool {
        matches!(self, Outcome::Diverged { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub records: Vec<LogRecord>,
    pub outcome: Outcome,
    pub steps_run: usize,
    /// Loss of the last completed step (NaN if none completed).
    pub final_loss: f64,
    pub validation: Option<Metrics>,
    pub test: Option<Metrics>,
    pub wall_s: f64,
    /// How parameters were initialized for this run.
    pub init: String,
}

/// Loss and parameter gradients for one batch.
pub fn loss_and_grads(model: &Model, batch: &Batch, dropout: Option<Dropout>) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let logits = match &batch.inputs {
        ModelInputs::Seq2Seq { src, tgt_in } => model.seq2seq_logits(&mut tape, &bound, src, tgt_in, dropout)?,
        ModelInputs::Lm { tokens } => model.lm_logits(&mut tape, &bound, tokens, dropout)?,
    };
    let loss = tape.cross_entropy(logits, &batch.targets, &batch.weights)?;
    let value = tape.value(loss).data()[0];
    tape.backward(loss)?;
    let grads = bound.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    Ok((value, grads))
}

/// Loss on `batch` without gradients.
pub fn batch_loss(model: &Model, batch: &Batch) -> Result<f64> {
    let logits = model.logits(&batch.inputs)?;
    let mut tape = Tape::new();
    let l = tape.constant(logits);
    let loss = tape.cross_entropy(l, &batch.targets, &batch.weights)?;
    Ok(tape.value(loss).data()[0])
}

/// Scales `grads` in place so their global L2 norm is at most `clip`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> Result<f64> {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {norm}")));
    }
    if clip > 0.0 && norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// One SGD step; returns the batch loss before the update.
pub fn train_step(model: &mut Model, batch: &Batch, tc: &TrainConfig, dropout: Option<Dropout>) -> Result<f64> {
    let (loss, mut grads) = loss_and_grads(model, batch, dropout)?;
    clip_global_norm(&mut grads, tc.grad_clip)?;
    if tc.lr != 0.0 {
        for (p, g) in model.params.tensors_mut().iter_mut().zip(&grads) {
            for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                *w -= tc.lr * d;
            }
        }
    }
    Ok(loss)
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    pub exec: Execution,
    /// Called with every log record as soon as it exists.
    pub on_record: Option<&'a mut dyn FnMut(&LogRecord)>,
}

/// Trains `model` in place. Divergence ends the run and is reported in the
/// outcome rather than as an error.
pub fn train(model: &mut Model, task: &Task, tc: &TrainConfig, mut opts: TrainOptions) -> Result<RunLog> {
    let start = Instant::now();
    let mut data_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    data_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    drop_rng.set_stream(2);
    let rate = model.config.dropout;
    let val_batch = task.heldout(Split::Validation, tc.eval_size, tc.eval_seed);

    let mut records = Vec::new();
    let mut outcome = Outcome::Completed;
    let mut final_loss = f64::NAN;
    let mut steps_run = 0;
    let mut validation = None;
    for step in 1..=tc.steps {
        let batch = task.sample(Split::Train, tc.batch_size, &mut data_rng);
        let dropout = (rate > 0.0).then_some(Dropout {
            rate,
            rng: &mut drop_rng,
        });
        let loss = match train_step(model, &batch, tc, dropout) {
            Ok(l) if l.is_finite() => l,
            Ok(l) => {
                outcome = Outcome::Diverged {
                    step,
                    reason: format!("loss is {l}"),
                };
                break;
            }
            Err(e) if e.is_divergence() => {
                outcome = Outcome::Diverged {
                    step,
                    reason: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        };
        final_loss = loss;
        steps_run = step;
        if step % tc.eval_every == 0 || step == tc.steps {
            let m = match crate::harness::metrics::evaluate_batch(model, &val_batch, opts.exec) {
                Ok(m) => m,
                Err(e) if e.is_divergence() => {
                    outcome = Outcome::Diverged {
                        step,
                        reason: e.to_string(),
                    };
                    break;
                }
                Err(e) => return Err(e),
            };
            let rec = LogRecord {
                step,
                loss,
                metric: m.accuracy,
                wall_ms: start.elapsed().as_millis() as u64,
            };
            if let Some(f) = opts.on_record.as_mut() {
                f(&rec);
            }
            records.push(rec);
            validation = Some(m);
            if tc.target_accuracy.is_some_and(|t| m.accuracy >= t) {
                outcome = Outcome::ReachedTarget { step };
                break;
            }
        }
    }
    let test = if outcome.diverged() {
        None
    } else {
        if validation.is_none() {
            validation = Some(crate::harness::metrics::evaluate_batch(model, &val_batch, opts.exec)?);
        }
        Some(evaluate(
            model,
            task,
            Split::Test,
            tc.eval_size,
            tc.eval_seed,
            opts.exec,
        )?)
    };
    Ok(RunLog {
        seed: tc.seed,
        records,
        outcome,
        steps_run,
        final_loss,
        validation,
        test,
        wall_s: start.elapsed().as_secs_f64(),
        init: format!("all parameters re-initialized from seed {}", tc.seed),
    })
}

/// Builds the model and task of `cfg`, trains, and optionally writes the
/// final checkpoint.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    opts: TrainOptions,
) -> Result<(Model, RunLog)> {
    cfg.validate()?;
    let mc = cfg.model_config()?;
    let mut model = Model::init(&mc, cfg.train.seed)?;
    let task = Task::new(&cfg.task)?;
    let log = train(&mut model, &task, &cfg.train, opts)?;
    if let Some(path) = checkpoint {
        save_checkpoint(&model, path)?;
    }
    Ok((model, log))
}
