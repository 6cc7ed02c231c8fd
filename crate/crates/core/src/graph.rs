//! Attributed client graph: statistical node features, three fused
//! similarity matrices, and momentum smoothing across rounds.
//!
//! Column order of the feature matrix is fixed:
//!
//! * model-wise (19): nine measures of `W`, nine of `ΔW`, then `cos(W, G)`;
//! * layer-wise (29 per layer group): nine measures of `w_l`, nine of `Δw_l`,
//!   `cos(w_l, g_l)`, `cos(Δw_l, Δw_l^prev)`, nine of `Δw_l - Δw_l^prev`.
//!
//! The nine measures are, in order: norm, min, max, mean, std, sum, median,
//! p5, p95.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{l2_norm, FlatModel};
use crate::sim::ClientUpdateRecord;
use crate::stats::percentile_sorted;

pub const MODEL_WISE_DIM: usize = 19;
pub const LAYER_WISE_DIM: usize = 29;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispersionMeasure {
    Cos,
    Norm,
    Min,
    Max,
    Mean,
    Std,
    Sum,
    Median,
    P5,
    P95,
}

/// The single-vector measures in feature-column order.
pub const VECTOR_MEASURES: [DispersionMeasure; 9] = [
    DispersionMeasure::Norm,
    DispersionMeasure::Min,
    DispersionMeasure::Max,
    DispersionMeasure::Mean,
    DispersionMeasure::Std,
    DispersionMeasure::Sum,
    DispersionMeasure::Median,
    DispersionMeasure::P5,
    DispersionMeasure::P95,
];

/// Evaluates one measure. `cos` needs `u`; the others ignore it.
pub fn dispersion(measure: DispersionMeasure, v: &[f64], u: Option<&[f64]>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Measure("measure of an empty vector".into()));
    }
    if measure == DispersionMeasure::Cos {
        let u = u.ok_or_else(|| Error::Measure("cos needs a second vector".into()))?;
        if u.len() != v.len() {
            return Err(shape_err(format!("cos of vectors with lengths {} and {}", v.len(), u.len())));
        }
        return Ok(cosine(v, u));
    }
    let all = vector_measures(v);
    let idx = VECTOR_MEASURES.iter().position(|&m| m == measure).expect("non-cos measure");
    Ok(all[idx])
}

/// `v·u / (|v| |u|)`, or 0 when either vector is all zeros.
pub fn cosine(v: &[f64], u: &[f64]) -> f64 {
    let nv = l2_norm(v);
    let nu = l2_norm(u);
    if nv == 0.0 || nu == 0.0 {
        return 0.0;
    }
    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
    (dot / (nv * nu)).clamp(-1.0, 1.0)
}

/// All nine single-vector measures with one sort. `v` must be non-empty.
pub fn vector_measures(v: &[f64]) -> [f64; 9] {
    let n = v.len() as f64;
    let sum: f64 = v.iter().sum();
    let mean = sum / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    [
        l2_norm(v),
        sorted[0],
        sorted[sorted.len() - 1],
        mean,
        var.sqrt(),
        sum,
        percentile_sorted(&sorted, 50.0),
        percentile_sorted(&sorted, 5.0),
        percentile_sorted(&sorted, 95.0),
    ]
}

/// 19 model-wise features of one client.
pub fn model_wise_features(w: &[f64], dw: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    if w.len() != dw.len() || w.len() != g.len() {
        return Err(shape_err("model-wise features need equal-length vectors"));
    }
    if w.is_empty() {
        return Err(Error::Measure("model-wise features of an empty model".into()));
    }
    let mut out = Vec::with_capacity(MODEL_WISE_DIM);
    out.extend(vector_measures(w));
    out.extend(vector_measures(dw));
    out.push(cosine(w, g));
    Ok(out)
}

/// 29 features per layer group, concatenated in layer order.
pub fn layer_wise_features(w: &[&[f64]], dw: &[&[f64]], prev_dw: &[&[f64]], g: &[&[f64]]) -> Result<Vec<f64>> {
    let l = w.len();
    if dw.len() != l || prev_dw.len() != l || g.len() != l {
        return Err(shape_err(format!(
            "layer counts disagree: {l}, {}, {}, {}",
            dw.len(),
            prev_dw.len(),
            g.len()
        )));
    }
    let mut out = Vec::with_capacity(LAYER_WISE_DIM * l);
    for k in 0..l {
        let (wl, dwl, pl, gl) = (w[k], dw[k], prev_dw[k], g[k]);
        if wl.is_empty() || dwl.len() != wl.len() || pl.len() != wl.len() || gl.len() != wl.len() {
            return Err(shape_err(format!("layer {k} has inconsistent or empty slices")));
        }
        out.extend(vector_measures(wl));
        out.extend(vector_measures(dwl));
        out.push(cosine(wl, gl));
        out.push(cosine(dwl, pl));
        let diff: Vec<f64> = dwl.iter().zip(pl).map(|(a, b)| a - b).collect();
        out.extend(vector_measures(&diff));
    }
    Ok(out)
}

/// Raw (un-normalised) feature row of one client: model-wise then layer-wise.
pub fn client_features(rec: &ClientUpdateRecord, base: &FlatModel) -> Result<Vec<f64>> {
    let mut row = model_wise_features(rec.weights.params(), rec.update.params(), base.params())?;
    row.extend(layer_wise_features(
        &rec.weights.layer_groups(),
        &rec.update.layer_groups(),
        &rec.prev_update.layer_groups(),
        &base.layer_groups(),
    )?);
    Ok(row)
}

/// Z-scores every column in place (population std). Constant columns become 0.
pub fn zscore_columns(x: &mut Array2<f64>) {
    for mut col in x.columns_mut() {
        let n = col.len() as f64;
        if n == 0.0 {
            continue;
        }
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        if std > 0.0 {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            col.fill(0.0);
        }
    }
}

/// Maps normalised similarities to edge strengths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EdgeTransform {
    /// `exp(-tanh(max(x, 0)))`
    #[default]
    Literal,
    /// `1 - exp(-tanh(max(x, 0)))`
    Complement,
}

impl EdgeTransform {
    pub fn apply(self, x: f64) -> f64 {
        let t = (-(x.max(0.0)).tanh()).exp();
        match self {
            EdgeTransform::Literal => t,
            EdgeTransform::Complement => 1.0 - t,
        }
    }
}

/// Node features (`M x (19 + 29L)`) and adjacency (`M x M`).
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    pub x: Array2<f64>,
    pub e: Array2<f64>,
}

/// Z-scores a symmetric matrix using statistics from either all entries or
/// the off-diagonal entries only. Zero variance maps the matrix to zeros.
fn zscore_matrix(m: &mut Array2<f64>, include_diagonal: bool) {
    let n = m.nrows();
    let vals: Vec<f64> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| include_diagonal || i != j)
        .map(|(i, j)| m[[i, j]])
        .collect();
    if vals.is_empty() {
        m.fill(0.0);
        return;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64).sqrt();
    if std > 0.0 {
        m.mapv_inplace(|v| (v - mean) / std);
    } else {
        m.fill(0.0);
    }
}

/// Fused adjacency over `total` clients. `ids` are the participants'
/// client ids, aligned with `weights` and `updates`.
pub fn build_adjacency(
    total: usize,
    ids: &[usize],
    weights: &[&[f64]],
    updates: &[&[f64]],
    transform: EdgeTransform,
) -> Result<Array2<f64>> {
    let m = ids.len();
    if m < 2 {
        return Err(Error::Graph(format!("adjacency needs at least two participants, got {m}")));
    }
    if weights.len() != m || updates.len() != m {
        return Err(shape_err("participant ids, weights and updates must align"));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= total) {
        return Err(Error::Graph(format!("client id {bad} outside [0, {total})")));
    }
    let w_norms: Vec<f64> = weights.iter().map(|w| l2_norm(w)).collect();
    let u_norms: Vec<f64> = updates.iter().map(|u| l2_norm(u)).collect();
    let mut e1 = Array2::zeros((m, m));
    let mut e2 = Array2::zeros((m, m));
    let mut e3 = Array2::zeros((m, m));
    for i in 0..m {
        for j in i..m {
            let c = (1.0 + cosine(weights[i], weights[j])) / 2.0;
            let d2 = (w_norms[i] - w_norms[j]).abs();
            let d3 = (u_norms[i] - u_norms[j]).abs();
            for (mat, v) in [(&mut e1, c), (&mut e2, d2), (&mut e3, d3)] {
                mat[[i, j]] = v;
                mat[[j, i]] = v;
            }
        }
    }
    zscore_matrix(&mut e1, true);
    zscore_matrix(&mut e2, false);
    zscore_matrix(&mut e3, false);
    e2.mapv_inplace(|v| -v);
    e3.mapv_inplace(|v| -v);
    let mut out = Array2::zeros((total, total));
    for i in 0..m {
        for j in 0..m {
            let fused = (transform.apply(e1[[i, j]]) + transform.apply(e2[[i, j]]) + transform.apply(e3[[i, j]])) / 3.0;
            out[[ids[i], ids[j]]] = fused;
        }
    }
    Ok(out)
}

/// Builds the round's un-smoothed graph from the participants' records.
/// Records must be sorted by ascending client id.
pub fn construct_graph(
    total: usize,
    records: &[ClientUpdateRecord],
    base: &FlatModel,
    transform: EdgeTransform,
) -> Result<AttributedGraph> {
    let rows = records.iter().map(|r| client_features(r, base)).collect::<Result<Vec<_>>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    let mut block = Array2::zeros((rows.len(), dim));
    for (i, row) in rows.iter().enumerate() {
        block.row_mut(i).assign(&ndarray::ArrayView1::from(row.as_slice()));
    }
    // model-wise and layer-wise blocks are normalised column by column
    zscore_columns(&mut block);
    let mut x = Array2::zeros((total, dim));
    for (i, rec) in records.iter().enumerate() {
        x.row_mut(rec.client_id).assign(&block.row(i));
    }
    let ids: Vec<usize> = records.iter().map(|r| r.client_id).collect();
    let w: Vec<&[f64]> = records.iter().map(|r| r.weights.params()).collect();
    let u: Vec<&[f64]> = records.iter().map(|r| r.update.params()).collect();
    let e = build_adjacency(total, &ids, &w, &u, transform)?;
    Ok(AttributedGraph { x, e })
}

/// Momentum state carried across rounds.
#[derive(Debug, Clone)]
pub struct GraphState {
    pub kappa1: f64,
    pub kappa2: f64,
    prev: Option<AttributedGraph>,
}

impl GraphState {
    pub fn new(kappa1: f64, kappa2: f64) -> Result<Self> {
        for k in [kappa1, kappa2] {
            if !(0.0..=1.0).contains(&k) {
                return Err(crate::error::config_err(format!("momentum factor {k} outside [0, 1]")));
            }
        }
        Ok(Self { kappa1, kappa2, prev: None })
    }

    pub fn current(&self) -> Option<&AttributedGraph> {
        self.prev.as_ref()
    }

    /// `X = (1 - k1) X_prev + k1 X_new`, same for `E` with `k2`. The state
    /// starts from all-zero matrices.
    pub fn smooth(&mut self, new: AttributedGraph) -> Result<AttributedGraph> {
        let out = match &self.prev {
            None => AttributedGraph { x: new.x * self.kappa1, e: new.e * self.kappa2 },
            Some(prev) => {
                if prev.x.dim() != new.x.dim() || prev.e.dim() != new.e.dim() {
                    return Err(shape_err(format!(
                        "graph shapes changed: X {:?} -> {:?}, E {:?} -> {:?}",
                        prev.x.dim(),
                        new.x.dim(),
                        prev.e.dim(),
                        new.e.dim()
                    )));
                }
                AttributedGraph {
                    x: blend(prev.x.view(), new.x.view(), self.kappa1),
                    e: blend(prev.e.view(), new.e.view(), self.kappa2),
                }
            }
        };
        self.prev = Some(out.clone());
        Ok(out)
    }
}

fn blend(prev: ArrayView2<f64>, new: ArrayView2<f64>, k: f64) -> Array2<f64> {
    let mut out = prev.to_owned() * (1.0 - k);
    out.scaled_add(k, &new);
    out
}
