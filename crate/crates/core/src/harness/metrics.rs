//! Cross-entropy, perplexity and token accuracy over weighted targets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::harness::model::Model;
use crate::harness::task::{Batch, Split, Task};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean per-token cross-entropy in nats.
    pub cross_entropy: f64,
    /// `exp(cross_entropy)`.
    pub perplexity: f64,
    pub accuracy: f64,
    /// Total target weight the means are taken over.
    pub tokens: f64,
}

/// Running sums that merge exactly across chunks.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricSums {
    pub nll: f64,
    pub correct: f64,
    pub weight: f64,
}

impl MetricSums {
    /// Accumulates rows of `logits` `[N × V]` against `targets`.
    /// Ties in the arg-max go to the lowest token id.
    pub fn from_logits(logits: &Tensor, targets: &[usize], weights: &[f64]) -> Result<Self> {
        if logits.rows() != targets.len() || targets.len() != weights.len() {
            return Err(Error::shape(
                "metrics",
                format!("{:?} logits for {} targets", logits.shape(), targets.len()),
            ));
        }
        let mut s = Self::default();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w == 0.0 {
                continue;
            }
            let row = logits.row(i);
            let (arg, max) = row.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |(a, m), (j, &v)| if v > m { (j, v) } else { (a, m) },
            );
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            s.nll += w * (lse - row[t]);
            if arg == t {
                s.correct += w;
            }
            s.weight += w;
        }
        Ok(s)
    }

    pub fn merge(self, o: Self) -> Self {
        Self {
            nll: self.nll + o.nll,
            correct: self.correct + o.correct,
            weight: self.weight + o.weight,
        }
    }

    pub fn finish(self) -> Metrics {
        let w = self.weight.max(f64::MIN_POSITIVE);
        let ce = self.nll / w;
        Metrics {
            cross_entropy: ce,
            perplexity: ce.exp(),
            accuracy: self.correct / w,
            tokens: self.weight,
        }
    }
}

/// Items per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 32;

/// Metrics of `model` on `batch`, evaluated in chunks that may run
/// concurrently; the result does not depend on `exec`.
pub fn evaluate_batch(model: &Model, batch: &Batch, exec: Execution) -> Result<Metrics> {
    let n = batch.len();
    let chunks = n.div_ceil(EVAL_CHUNK);
    let parts = exec.map_range(chunks, |c| {
        let part = batch.slice(c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(n));
        let logits = model.logits(&part.inputs)?;
        MetricSums::from_logits(&logits, &part.targets, &part.weights)
    });
    let mut total = MetricSums::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total.finish())
}

/// Metrics on `n` held-out sequences of `split`, generated from `seed`.
pub fn evaluate(model: &Model, task: &Task, split: Split, n: usize, seed: u64, exec: Execution) -> Result<Metrics> {
    evaluate_batch(model, &task.heldout(split, n, seed), exec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_have_vocab_perplexity() {
        let logits = Tensor::zeros(&[4, 16]);
        let m = MetricSums::from_logits(&logits, &[0, 3, 7, 15], &[1.0; 4])
            .unwrap()
            .finish();
        assert!((m.perplexity - 16.0).abs() < 1e-12);
        assert!((m.cross_entropy - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_predictions() {
        let mut logits = Tensor::zeros(&[2, 3]);
        logits.set(0, 1, 800.0);
        logits.set(1, 2, 800.0);
        let m = MetricSums::from_logits(&logits, &[1, 2], &[1.0, 1.0]).unwrap().finish();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.perplexity, 1.0);
    }

    #[test]
    fn zero_weight_rows_are_skipped() {
        let logits = Tensor::zeros(&[2, 2]);
        let m = MetricSums::from_logits(&logits, &[0, 1], &[1.0, 0.0]).unwrap().finish();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.tokens, 1.0);
    }
}
