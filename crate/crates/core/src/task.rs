//! Feed-forward task model with hand-written backpropagation.
//!
//! Hidden layers use `tanh`; the output layer is a softmax over classes and
//! training minimises mean cross-entropy. Parameters live in a [`FlatModel`]
//! laid out as `fc1.weight, fc1.bias, fc2.weight, ...`, weights stored
//! row-major as `(out, in)`.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attacks::pgd_project;
use crate::data::Dataset;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{FlatModel, LayerSpec};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.05, epochs: 2, batch_size: 16 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Extra terms attackers add to local training.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainHooks<'a> {
    /// Loss becomes `alpha * CE + (1 - alpha) * ||W - anchor||_2`.
    pub anomaly_penalty: Option<(f64, &'a FlatModel)>,
    /// After every step, project onto the L2 ball `(anchor, radius)`.
    pub projection: Option<(&'a FlatModel, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlatModel,
    /// Set when the local dataset was empty and nothing was trained.
    pub empty_data: bool,
}

/// Multi-layer perceptron shape. Holds no parameters itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    dims: Vec<usize>,
    spec: Arc<LayerSpec>,
}

impl TaskModel {
    /// `dims` lists input width, hidden widths, then class count.
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(config_err(format!("invalid layer dims {dims:?}")));
        }
        let mut layers = Vec::new();
        for (k, w) in dims.windows(2).enumerate() {
            layers.push((format!("fc{}.weight", k + 1), w[0] * w[1]));
            layers.push((format!("fc{}.bias", k + 1), w[1]));
        }
        Ok(Self { dims: dims.to_vec(), spec: Arc::new(LayerSpec::from_lengths(layers)) })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn spec(&self) -> &Arc<LayerSpec> {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.spec.total_len()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Gaussian weights with variance `1 / fan_in`, zero biases.
    pub fn init(&self, rng: &mut StreamRng) -> FlatModel {
        let mut params = vec![0.0; self.num_params()];
        for k in 0..self.num_layers() {
            let fan_in = self.dims[k];
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("finite std");
            let w = &self.spec.slices()[2 * k];
            for p in &mut params[w.range()] {
                *p = dist.sample(rng);
            }
        }
        FlatModel::new(params, self.spec.clone()).expect("spec-sized vector")
    }

    fn check(&self, params: &[f64], data: &Dataset) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(shape_err(format!("expected {} parameters, got {}", self.num_params(), params.len())));
        }
        if data.feature_dim() != self.dims[0] {
            return Err(shape_err(format!(
                "model expects {} features, data has {}",
                self.dims[0],
                data.feature_dim()
            )));
        }
        Ok(())
    }

    fn weight<'p>(&self, params: &'p [f64], k: usize) -> ArrayView2<'p, f64> {
        let slice = &self.spec.slices()[2 * k];
        ArrayView2::from_shape((self.dims[k + 1], self.dims[k]), &params[slice.range()]).expect("weight shape")
    }

    fn bias<'p>(&self, params: &'p [f64], k: usize) -> &'p [f64] {
        &params[self.spec.slices()[2 * k + 1].range()]
    }

    /// Returns the per-layer activations; the last entry holds logits.
    fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(self.dims.len());
        acts.push(x.to_owned());
        for k in 0..self.num_layers() {
            let mut z = acts[k].dot(&self.weight(params, k).t());
            z += &ArrayView2::from_shape((1, self.dims[k + 1]), self.bias(params, k)).expect("bias shape");
            if k + 1 < self.num_layers() {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    pub fn logits(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(params, x).pop().expect("at least one layer")
    }

    /// Mean cross-entropy over `rows` and its gradient.
    pub fn loss_and_grad(&self, params: &[f64], data: &Dataset, rows: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.check(params, data)?;
        if rows.is_empty() {
            return Err(Error::EmptyData("loss over zero samples".into()));
        }
        let x = data.features.select(Axis(0), rows);
        let acts = self.forward(params, x.view());
        let logits = acts.last().expect("logits");
        let b = rows.len() as f64;
        let (loss, mut delta) = softmax_xent(logits, rows.iter().map(|&r| data.labels[r]));
        delta /= b;

        let mut grad = vec![0.0; self.num_params()];
        for k in (0..self.num_layers()).rev() {
            let dw = delta.t().dot(&acts[k]);
            let db = delta.sum_axis(Axis(0));
            let slices = self.spec.slices();
            for (g, v) in grad[slices[2 * k].range()].iter_mut().zip(dw.iter()) {
                *g = *v;
            }
            for (g, v) in grad[slices[2 * k + 1].range()].iter_mut().zip(db.iter()) {
                *g = *v;
            }
            if k > 0 {
                let mut da = delta.dot(&self.weight(params, k));
                da.zip_mut_with(&acts[k], |g, a| *g *= 1.0 - a * a);
                delta = da;
            }
        }
        Ok((loss / b, grad))
    }

    /// Mean cross-entropy over the whole dataset.
    pub fn loss(&self, params: &[f64], data: &Dataset) -> Result<f64> {
        self.check(params, data)?;
        if data.is_empty() {
            return Err(Error::EmptyData("loss over zero samples".into()));
        }
        let logits = self.logits(params, data.features.view());
        let (loss, _) = softmax_xent(&logits, data.labels.iter().copied());
        Ok(loss / data.len() as f64)
    }

    /// Squared norm of the full-batch gradient.
    pub fn grad_norm_sq(&self, params: &[f64], data: &Dataset) -> Result<f64> {
        let rows: Vec<usize> = (0..data.len()).collect();
        let (_, g) = self.loss_and_grad(params, data, &rows)?;
        Ok(g.iter().map(|v| v * v).sum())
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, params: &[f64], x: ArrayView2<f64>) -> Vec<usize> {
        let logits = self.logits(params, x);
        logits.rows().into_iter().map(|row| argmax_first(&row.to_vec())).collect()
    }
}

pub(crate) fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Summed cross-entropy and `softmax - onehot` for each row.
fn softmax_xent(logits: &Array2<f64>, labels: impl Iterator<Item = usize>) -> (f64, Array2<f64>) {
    let mut probs = logits.clone();
    let mut loss = 0.0;
    for ((mut row, logit_row), y) in probs.rows_mut().into_iter().zip(logits.rows()).zip(labels) {
        let max = logit_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        // log-sum-exp minus the target logit
        loss += max + sum.ln() - logit_row[y];
        row.mapv_inplace(|v| v / sum);
        row[y] -= 1.0;
    }
    (loss, probs)
}

/// Mini-batch gradient descent on softmax cross-entropy.
pub fn train_local(
    model: &TaskModel,
    init: &FlatModel,
    data: &Dataset,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<TrainOutcome> {
    train_local_with(model, init, data, cfg, TrainHooks::default(), rng)
}

pub fn train_local_with(
    model: &TaskModel,
    init: &FlatModel,
    data: &Dataset,
    cfg: &TrainConfig,
    hooks: TrainHooks<'_>,
    rng: &mut StreamRng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        log::warn!("local dataset is empty; returning the model unchanged");
        return Ok(TrainOutcome { model: init.clone(), empty_data: true });
    }
    let mut w = init.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, mut grad) = model.loss_and_grad(w.params(), data, batch)?;
            if let Some((alpha, anchor)) = hooks.anomaly_penalty {
                let diff = w.sub(anchor)?;
                let dist = diff.norm();
                for g in grad.iter_mut() {
                    *g *= alpha;
                }
                if dist > 0.0 {
                    for (g, d) in grad.iter_mut().zip(diff.params()) {
                        *g += (1.0 - alpha) * d / dist;
                    }
                }
            }
            for (p, g) in w.params_mut().iter_mut().zip(&grad) {
                *p -= cfg.learning_rate * g;
            }
            if let Some((anchor, radius)) = hooks.projection {
                w = pgd_project(&w, anchor, radius)?;
            }
        }
    }
    Ok(TrainOutcome { model: w, empty_data: false })
}

/// Fraction of samples whose argmax prediction equals the label.
pub fn evaluate(model: &TaskModel, params: &FlatModel, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty dataset".into()));
    }
    model.check(params.params(), data)?;
    let preds = model.predict(params.params(), data.features.view());
    let correct = preds.iter().zip(&data.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Packs explicit `(W, b)` for a single-layer model `logits = W x + b`.
pub fn linear_params(model: &TaskModel, weight: &Array2<f64>, bias: &Array1<f64>) -> Result<FlatModel> {
    if model.num_layers() != 1 || weight.dim() != (model.dims[1], model.dims[0]) || bias.len() != model.dims[1] {
        return Err(shape_err("linear_params needs a single-layer model with matching shapes"));
    }
    let mut params = weight.iter().copied().collect::<Vec<_>>();
    params.extend(bias.iter().copied());
    FlatModel::new(params, model.spec.clone())
}
