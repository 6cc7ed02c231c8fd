//! Flat parameter vectors with per-layer metadata.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// One contiguous slice of the flat parameter vector, e.g. `fc1.weight`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSlice {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerSlice {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    /// Layer group of this slice: the part of the name before the first `.`.
    pub fn group(&self) -> &str {
        self.name.split('.').next().unwrap_or(&self.name)
    }
}

/// Ordered, contiguous, non-overlapping layer slices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    slices: Vec<LayerSlice>,
}

impl LayerSpec {
    /// Builds a spec from `(name, len)` pairs laid out back to back.
    pub fn from_lengths<S: Into<String>>(layers: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let slices = layers
            .into_iter()
            .map(|(name, len)| {
                let s = LayerSlice { name: name.into(), offset, len };
                offset += len;
                s
            })
            .collect();
        Self { slices }
    }

    pub fn slices(&self) -> &[LayerSlice] {
        &self.slices
    }

    pub fn total_len(&self) -> usize {
        self.slices.last().map_or(0, |s| s.offset + s.len)
    }

    /// Ranges of consecutive slices that share a group prefix. A dense layer
    /// stored as `fcN.weight` followed by `fcN.bias` forms one group.
    pub fn groups(&self) -> Vec<Range<usize>> {
        let mut out: Vec<(String, Range<usize>)> = Vec::new();
        for s in &self.slices {
            match out.last_mut() {
                Some((g, r)) if g == s.group() && r.end == s.offset => r.end = s.offset + s.len,
                _ => out.push((s.group().to_string(), s.range())),
            }
        }
        out.into_iter().map(|(_, r)| r).collect()
    }
}

/// A model's parameters as one flat vector plus the layer layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    params: Vec<f64>,
    spec: Arc<LayerSpec>,
}

impl FlatModel {
    pub fn new(params: Vec<f64>, spec: Arc<LayerSpec>) -> Result<Self> {
        if params.len() != spec.total_len() {
            return Err(shape_err(format!(
                "parameter vector has {} entries but layer spec covers {}",
                params.len(),
                spec.total_len()
            )));
        }
        Ok(Self { params, spec })
    }

    /// Single-layer model, handy for small arithmetic cases.
    pub fn from_vec(params: Vec<f64>) -> Self {
        let spec = Arc::new(LayerSpec::from_lengths([("layer0", params.len())]));
        Self { params, spec }
    }

    pub fn zeros(spec: Arc<LayerSpec>) -> Self {
        Self { params: vec![0.0; spec.total_len()], spec }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.spec.clone())
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub fn spec(&self) -> &Arc<LayerSpec> {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn same_layout(&self, other: &FlatModel) -> bool {
        Arc::ptr_eq(&self.spec, &other.spec) || *self.spec == *other.spec
    }

    pub fn check_layout(&self, other: &FlatModel) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(shape_err("models do not share a layer spec"))
        }
    }

    /// Parameters of each layer group, in spec order.
    pub fn layer_groups(&self) -> Vec<&[f64]> {
        self.spec.groups().into_iter().map(|r| &self.params[r]).collect()
    }

    /// `self - other`.
    pub fn sub(&self, other: &FlatModel) -> Result<FlatModel> {
        self.check_layout(other)?;
        let params = self.params.iter().zip(&other.params).map(|(a, b)| a - b).collect();
        Ok(FlatModel { params, spec: self.spec.clone() })
    }

    /// `self + other`.
    pub fn add(&self, other: &FlatModel) -> Result<FlatModel> {
        self.check_layout(other)?;
        let params = self.params.iter().zip(&other.params).map(|(a, b)| a + b).collect();
        Ok(FlatModel { params, spec: self.spec.clone() })
    }

    /// `self + alpha * other`, in place.
    pub fn axpy(&mut self, alpha: f64, other: &FlatModel) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scaled(&self, alpha: f64) -> FlatModel {
        FlatModel {
            params: self.params.iter().map(|v| v * alpha).collect(),
            spec: self.spec.clone(),
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.params)
    }

    /// `||self - other||_2`.
    pub fn distance(&self, other: &FlatModel) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .params
            .iter()
            .zip(&other.params)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
