//! Top-1 accuracy over a dataset or subset of it.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::engine::{argmax, forward_with, ForwardOptions};
use crate::error::{Error, Result};
use crate::quant::QuantizedModel;

/// Samples per forward call during evaluation.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyResult {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

impl AccuracyResult {
    pub fn new(correct: usize, total: usize) -> Self {
        Self {
            correct,
            total,
            accuracy: correct as f64 / total as f64,
        }
    }

    /// Accuracy drop in percentage points relative to `baseline`;
    /// negative when this result is more accurate.
    pub fn loss_pp(&self, baseline: &AccuracyResult) -> f64 {
        acc_loss_pp(baseline.accuracy, self.accuracy)
    }
}

pub fn acc_loss_pp(baseline: f64, accuracy: f64) -> f64 {
    100.0 * (baseline - accuracy)
}

pub fn evaluate(model: &QuantizedModel<'_>, data: &Dataset, subset: Option<&[usize]>, opts: ForwardOptions<'_>) -> Result<AccuracyResult> {
    let all: Vec<usize>;
    let indices = match subset {
        Some(s) => s,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    if indices.is_empty() {
        return Err(Error::EmptySubset);
    }
    if let Some(&bad) = indices.iter().find(|i| **i >= data.len()) {
        return Err(Error::ConfigInvalid(format!("subset index {bad} out of range")));
    }
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = data.batch(chunk, &model.graph.input_shape)?;
        let logits = forward_with(model, &batch, opts)?;
        let classes = logits.numel() / chunk.len();
        for (row, &i) in logits.data().chunks(classes).zip(chunk) {
            if argmax(row) == data.labels[i] {
                correct += 1;
            }
        }
    }
    Ok(AccuracyResult::new(correct, indices.len()))
}
