//! Evaluation metrics: ASR, ACC, the combined defense score, detection
//! precision/recall/F1 and the gradient-norm convergence monitor.

use serde::{Deserialize, Serialize};

use crate::attacks::TriggerSpec;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FlatModel;
use crate::task::TaskModel;

/// `2 * acc * (1 - asr) / (acc + 1 - asr)`, all fractions; 0 when the
/// denominator vanishes.
pub fn compute_ds(asr: f64, acc: f64) -> f64 {
    let clean = 1.0 - asr;
    let denom = acc + clean;
    if denom == 0.0 {
        0.0
    } else {
        2.0 * acc * clean / denom
    }
}

/// Fraction of `backdoor` samples predicted as `target`. Samples whose
/// label is already `target` are skipped, so a plain test set with the
/// trigger applied may be passed directly.
pub fn compute_asr(task: &TaskModel, model: &FlatModel, backdoor: &Dataset, target: usize) -> Result<f64> {
    let preds = task.predict(model.params(), backdoor.features.view());
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for (p, &y) in preds.iter().zip(&backdoor.labels) {
        if y == target {
            continue;
        }
        eligible += 1;
        hits += usize::from(*p == target);
    }
    if eligible == 0 {
        return Err(Error::UndefinedMetric("no backdoor samples outside the target class".into()));
    }
    Ok(hits as f64 / eligible as f64)
}

/// Test set with the trigger applied but original labels kept, for
/// [`compute_asr`].
pub fn triggered_copy(trigger: &TriggerSpec, data: &Dataset) -> Dataset {
    let mut out = data.clone();
    for mut row in out.features.rows_mut() {
        trigger.apply(row.as_slice_mut().expect("row-major"));
    }
    out
}

/// Pooled confusion counts of flagged-versus-truly-malicious clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl DetectionCounts {
    /// Counts for one round over the selected clients.
    pub fn from_round(selected: &[usize], flagged: &[usize], is_malicious: impl Fn(usize) -> bool) -> Self {
        let mut c = Self::default();
        for &id in selected {
            match (flagged.contains(&id), is_malicious(id)) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: DetectionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(precision, recall, f1)`; empty denominators give 0.
    pub fn prf(&self) -> (f64, f64, f64) {
        detection_prf(self.tp, self.fp, self.fn_)
    }
}

pub fn detection_prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Squared gradient norm of the task loss at each round's starting global
/// model, plus its running average.
#[derive(Debug, Clone, Default)]
pub struct ConvergenceMonitor {
    series: Vec<f64>,
    sum: f64,
}

impl ConvergenceMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records `‖∇F(model)‖²` on `probe`; returns `(value, running mean)`.
    pub fn observe(&mut self, task: &TaskModel, model: &FlatModel, probe: &Dataset) -> Result<(f64, f64)> {
        let g = task.grad_norm_sq(model.params(), probe)?;
        Ok((g, self.push(g)))
    }

    pub fn push(&mut self, value: f64) -> f64 {
        self.series.push(value);
        self.sum += value;
        self.running_average()
    }

    pub fn series(&self) -> &[f64] {
        &self.series
    }

    pub fn running_average(&self) -> f64 {
        if self.series.is_empty() {
            0.0
        } else {
            self.sum / self.series.len() as f64
        }
    }

    /// Running average after each round.
    pub fn running_series(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.series
            .iter()
            .enumerate()
            .map(|(i, v)| {
                acc += v;
                acc / (i + 1) as f64
            })
            .collect()
    }
}
