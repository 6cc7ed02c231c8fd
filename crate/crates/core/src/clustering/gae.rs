//! Graph auto-encoder clustering.
//!
//! Encoder: `Z = Â · ReLU(Â · X · W1) · W2` with
//! `Â = D^-1/2 (E + I) D^-1/2`. Decoder: `sigmoid(Z Zᵀ)`. Soft assignments
//! use a unit-variance Gaussian kernel to the centres; the hard assignment is
//! the row argmax. Training is full-batch gradient descent: first on the
//! reconstruction loss alone, then on `L_rec + λ L_clus` with the centres
//! initialised by K-Means and updated alongside the encoder.

use ndarray::{Array1, Array2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::hdbscan::{count_clusters, HdbscanParams};
use super::kmeans::kmeans;
use crate::error::{config_err, Error, Result};
use crate::graph::AttributedGraph;
use crate::rng::StreamRng;

/// Floor/ceiling applied to probabilities inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaeConfig {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub lambda_clus: f64,
    pub pretrain_epochs: usize,
    pub joint_epochs: usize,
    pub learning_rate: f64,
    pub init_std: f64,
    pub kmeans_restarts: usize,
}

impl Default for GaeConfig {
    fn default() -> Self {
        Self {
            latent_dim: 32,
            hidden_dim: 64,
            lambda_clus: 0.1,
            pretrain_epochs: 50,
            joint_epochs: 100,
            learning_rate: 1e-2,
            init_std: 0.1,
            kmeans_restarts: 10,
        }
    }
}

impl GaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(config_err("latent_dim must be at least 2"));
        }
        if self.hidden_dim == 0 {
            return Err(config_err("hidden_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.lambda_clus) {
            return Err(config_err("lambda_clus must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(config_err("GAE learning rate must be positive"));
        }
        Ok(())
    }
}

/// Adjacency and features restricted to the selected clients, rows in
/// ascending client-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubGraph {
    pub ids: Vec<usize>,
    pub e: Array2<f64>,
    pub x: Array2<f64>,
}

impl SubGraph {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn subgraph_extract(graph: &AttributedGraph, selected: &[usize]) -> Result<SubGraph> {
    if selected.is_empty() {
        return Err(Error::Graph("empty client selection".into()));
    }
    let mut ids = selected.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let total = graph.e.nrows();
    if let Some(&bad) = ids.iter().find(|&&i| i >= total) {
        return Err(Error::Graph(format!("client {bad} not in a graph of {total} clients")));
    }
    let e = graph.e.select(Axis(0), &ids).select(Axis(1), &ids);
    let x = graph.x.select(Axis(0), &ids);
    Ok(SubGraph { ids, e, x })
}

/// `D^-1/2 (E + I) D^-1/2`.
pub fn normalized_adjacency(e: &Array2<f64>) -> Array2<f64> {
    let m = e.nrows();
    let a = e + &Array2::<f64>::eye(m);
    let inv_sqrt: Array1<f64> = a.sum_axis(Axis(1)).mapv(|d| 1.0 / d.sqrt());
    let mut out = a;
    for i in 0..m {
        for j in 0..m {
            out[[i, j]] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

/// Two graph-convolution weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

impl Encoder {
    pub fn init(input_dim: usize, cfg: &GaeConfig, rng: &mut StreamRng) -> Self {
        let dist = Normal::new(0.0, cfg.init_std).expect("finite std");
        let w1 = Array2::from_shape_fn((input_dim, cfg.hidden_dim), |_| dist.sample(rng));
        let w2 = Array2::from_shape_fn((cfg.hidden_dim, cfg.latent_dim), |_| dist.sample(rng));
        Self { w1, w2 }
    }
}

pub fn encode(sub: &SubGraph, enc: &Encoder) -> Array2<f64> {
    let a_hat = normalized_adjacency(&sub.e);
    forward(&a_hat, &a_hat.dot(&sub.x), enc).z
}

struct Forward {
    h1: Array2<f64>,
    b: Array2<f64>,
    z: Array2<f64>,
}

fn forward(a_hat: &Array2<f64>, ax: &Array2<f64>, enc: &Encoder) -> Forward {
    let h1 = ax.dot(&enc.w1);
    let b = a_hat.dot(&h1.mapv(|v| v.max(0.0)));
    let z = b.dot(&enc.w2);
    Forward { h1, b, z }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `sigmoid(Z Zᵀ)`.
pub fn reconstruct(z: &Array2<f64>) -> Array2<f64> {
    z.dot(&z.t()).mapv(sigmoid)
}

fn log_soft_assign(z: &Array2<f64>, centers: &Array2<f64>) -> Array2<f64> {
    let (m, q) = (z.nrows(), centers.nrows());
    let mut logits = Array2::zeros((m, q));
    for i in 0..m {
        for j in 0..q {
            let d2: f64 = z.row(i).iter().zip(centers.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            logits[[i, j]] = -0.5 * d2;
        }
    }
    for mut row in logits.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    logits
}

/// Soft assignment `P` (row-stochastic) and one-hot hard assignment.
/// Ties in the argmax go to the lowest cluster index.
pub fn assign(z: &Array2<f64>, centers: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let p = log_soft_assign(z, centers).mapv(f64::exp);
    let hard = hard_assignment(&p);
    (p, hard)
}

pub fn hard_assignment(p: &Array2<f64>) -> Array2<f64> {
    let mut hard = Array2::zeros(p.dim());
    for (i, row) in p.rows().into_iter().enumerate() {
        let j = crate::task::argmax_first(&row.to_vec());
        hard[[i, j]] = 1.0;
    }
    hard
}

/// Cluster index of each row of a one-hot matrix.
pub fn hard_labels(hard: &Array2<f64>) -> Vec<usize> {
    hard.rows()
        .into_iter()
        .map(|r| r.iter().position(|&v| v == 1.0).unwrap_or(0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub rec: f64,
    pub clus: f64,
    pub total: f64,
}

/// Reconstruction cross-entropy, KL of hard against soft assignment, and
/// their weighted sum.
pub fn losses(e_hat: &Array2<f64>, e_check: &Array2<f64>, p: &Array2<f64>, p_hard: &Array2<f64>, lambda: f64) -> Result<Losses> {
    if e_hat.dim() != e_check.dim() || p.dim() != p_hard.dim() || e_hat.nrows() != p.nrows() {
        return Err(Error::Shape("loss inputs disagree in shape".into()));
    }
    let mut rec = 0.0;
    for (&t, &y) in e_hat.iter().zip(e_check.iter()) {
        if !(y.is_finite() && (0.0..=1.0).contains(&y)) {
            return Err(Error::Numeric(format!("reconstructed entry {y} outside [0, 1]")));
        }
        let y = y.clamp(PROB_EPS, 1.0 - PROB_EPS);
        rec -= t * y.ln() + (1.0 - t) * (1.0 - y).ln();
    }
    let mut clus = 0.0;
    for (&h, &s) in p_hard.iter().zip(p.iter()) {
        if h > 0.0 {
            clus += h * (h / s.max(PROB_EPS)).ln();
        }
    }
    Ok(Losses { rec, clus, total: rec + lambda * clus })
}

/// Gradients of the training objective.
#[derive(Debug, Clone)]
pub struct GaeGrads {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub centers: Option<Array2<f64>>,
}

/// Loss and analytic gradients. With `centers = None` only the
/// reconstruction term is used (pre-training). The reconstruction term is
/// evaluated through logits, `softplus(-s)` / `softplus(s)`, which equals the
/// probability form away from sigmoid saturation and stays finite there.
pub fn objective(
    a_hat: &Array2<f64>,
    ax: &Array2<f64>,
    e_hat: &Array2<f64>,
    enc: &Encoder,
    centers: Option<&Array2<f64>>,
    lambda: f64,
) -> (Losses, GaeGrads) {
    let fw = forward(a_hat, ax, enc);
    let z = &fw.z;
    let s = z.dot(&z.t());
    let mut rec = 0.0;
    let mut ds = Array2::zeros(s.dim());
    for ((&sv, &t), d) in s.iter().zip(e_hat.iter()).zip(ds.iter_mut()) {
        rec += t * softplus(-sv) + (1.0 - t) * softplus(sv);
        *d = sigmoid(sv) - t;
    }
    let mut dz = (&ds + &ds.t()).dot(z);

    let mut clus = 0.0;
    let mut dq = None;
    if let Some(q) = centers {
        let logp = log_soft_assign(z, q);
        let p = logp.mapv(f64::exp);
        let hard = hard_assignment(&p);
        for (&h, &lp) in hard.iter().zip(logp.iter()) {
            if h > 0.0 {
                clus -= lp;
            }
        }
        let g = &p - &hard;
        dz.scaled_add(lambda, &g.dot(q));
        let col = g.sum_axis(Axis(0));
        let mut grad_q = g.t().dot(z);
        for (j, mut row) in grad_q.rows_mut().into_iter().enumerate() {
            row.scaled_add(-col[j], &q.row(j));
        }
        dq = Some(grad_q * lambda);
    }

    let w2 = fw.b.t().dot(&dz);
    let db = dz.dot(&enc.w2.t());
    let mut dh1 = a_hat.t().dot(&db);
    dh1.zip_mut_with(&fw.h1, |g, &h| {
        if h <= 0.0 {
            *g = 0.0;
        }
    });
    let w1 = ax.t().dot(&dh1);
    let total = rec + if centers.is_some() { lambda * clus } else { 0.0 };
    (Losses { rec, clus, total }, GaeGrads { w1, w2, centers: dq })
}

/// Number of clusters for this round: the flat-cluster count of a
/// density-based clustering of the feature rows, never below 2.
pub fn estimate_num_clusters(x: &Array2<f64>) -> usize {
    if x.nrows() <= 2 {
        return 2;
    }
    count_clusters(x.view(), HdbscanParams::default()).max(2)
}

/// Everything produced by one clustering fit.
#[derive(Debug, Clone)]
pub struct GaeState {
    pub encoder: Encoder,
    pub centers: Array2<f64>,
    /// Centres right after K-Means, before joint training.
    pub kmeans_centers: Array2<f64>,
    pub z: Array2<f64>,
    pub p: Array2<f64>,
    pub p_hard: Array2<f64>,
    pub num_clusters: usize,
    /// Reconstruction loss before each pre-training step, plus the final value.
    pub pretrain_rec: Vec<f64>,
    pub final_losses: Losses,
}

fn check_finite(l: &Losses, stage: &str, epoch: usize) -> Result<()> {
    if l.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "non-finite GAE loss in {stage} epoch {epoch}: rec={}, clus={}",
            l.rec, l.clus
        )))
    }
}

/// Full fit with the cluster count taken from [`estimate_num_clusters`].
pub fn fit(sub: &SubGraph, cfg: &GaeConfig, rng: &mut StreamRng) -> Result<GaeState> {
    let q = estimate_num_clusters(&sub.x);
    fit_with_clusters(sub, cfg, q, rng)
}

pub fn fit_with_clusters(sub: &SubGraph, cfg: &GaeConfig, num_clusters: usize, rng: &mut StreamRng) -> Result<GaeState> {
    cfg.validate()?;
    let m = sub.len();
    if m < 2 {
        return Err(Error::Graph(format!("clustering needs at least two clients, got {m}")));
    }
    let q = num_clusters.clamp(1, m);
    let a_hat = normalized_adjacency(&sub.e);
    let ax = a_hat.dot(&sub.x);
    let mut enc = Encoder::init(sub.x.ncols(), cfg, rng);
    let lr = cfg.learning_rate;

    let mut pretrain_rec = Vec::with_capacity(cfg.pretrain_epochs + 1);
    for epoch in 0..cfg.pretrain_epochs {
        let (l, g) = objective(&a_hat, &ax, &sub.e, &enc, None, 0.0);
        check_finite(&l, "pre-training", epoch)?;
        pretrain_rec.push(l.rec);
        enc.w1.scaled_add(-lr, &g.w1);
        enc.w2.scaled_add(-lr, &g.w2);
    }
    let z0 = forward(&a_hat, &ax, &enc).z;
    let (l_end, _) = objective(&a_hat, &ax, &sub.e, &enc, None, 0.0);
    check_finite(&l_end, "pre-training", cfg.pretrain_epochs)?;
    pretrain_rec.push(l_end.rec);

    let km = kmeans(z0.view(), q, cfg.kmeans_restarts, 100, rng)?;
    let kmeans_centers = km.centers;
    let mut centers = kmeans_centers.clone();

    for epoch in 0..cfg.joint_epochs {
        let (l, g) = objective(&a_hat, &ax, &sub.e, &enc, Some(&centers), cfg.lambda_clus);
        check_finite(&l, "joint training", epoch)?;
        enc.w1.scaled_add(-lr, &g.w1);
        enc.w2.scaled_add(-lr, &g.w2);
        centers.scaled_add(-lr, g.centers.as_ref().expect("centre gradient"));
    }

    let (final_losses, _) = objective(&a_hat, &ax, &sub.e, &enc, Some(&centers), cfg.lambda_clus);
    check_finite(&final_losses, "joint training", cfg.joint_epochs)?;
    let z = forward(&a_hat, &ax, &enc).z;
    let (p, p_hard) = assign(&z, &centers);
    Ok(GaeState {
        encoder: enc,
        centers,
        kmeans_centers,
        z,
        p,
        p_hard,
        num_clusters: q,
        pretrain_rec,
        final_losses,
    })
}
