//! Reference aggregation rules: Krum, Multi-Krum, norm clipping (NDC) and
//! weak differential privacy.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::model::FlatModel;
use crate::rng::{self, Purpose};
use crate::sim::{fedavg_aggregate, weighted_mean, AggregationInput, AggregationOutput, Aggregator, ClientUpdateRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub krum_f: usize,
    pub ndc_threshold: f64,
    pub weak_dp_sigma: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { krum_f: 2, ndc_threshold: 2.0, weak_dp_sigma: 0.025 }
    }
}

impl BaselineConfig {
    pub fn validate(&self, clients_per_round: usize) -> Result<()> {
        // Krum scores need more than 2f + 2 models per round, which implies f < m/2
        if clients_per_round <= 2 * self.krum_f + 2 {
            return Err(config_err(format!(
                "krum_f={} needs more than {} clients per round, got {clients_per_round}",
                self.krum_f,
                2 * self.krum_f + 2
            )));
        }
        if !(self.ndc_threshold > 0.0) {
            return Err(config_err("ndc_threshold must be positive"));
        }
        if !(self.weak_dp_sigma >= 0.0) {
            return Err(config_err("weak_dp_sigma must be non-negative"));
        }
        Ok(())
    }
}

/// Krum score of every model: the sum of squared distances to its
/// `n - f - 2` nearest other models.
pub fn krum_scores(models: &[FlatModel], f: usize) -> Result<Vec<f64>> {
    let n = models.len();
    if n <= 2 * f + 2 {
        return Err(config_err(format!("Krum needs more than {} models for f={f}, got {n}", 2 * f + 2)));
    }
    let k = n - f - 2;
    let mut d2 = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = models[i].distance(&models[j])?;
            d2[i][j] = d * d;
            d2[j][i] = d * d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| d2[i][j]).collect();
            others.sort_by(f64::total_cmp);
            others[..k].iter().sum()
        })
        .collect())
}

/// Index of the lowest Krum score, lowest index on ties.
pub fn krum_select(models: &[FlatModel], f: usize) -> Result<usize> {
    let scores = krum_scores(models, f)?;
    Ok(scores.iter().enumerate().fold(0, |b, (i, &s)| if s < scores[b] { i } else { b }))
}

/// Indices of the `n - f` best-scored models, ascending by score then index.
pub fn multi_krum_indices(models: &[FlatModel], f: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(models, f)?;
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(models.len() - f);
    Ok(order)
}

/// Unweighted mean of the `n - f` best-scored models.
pub fn multi_krum_aggregate(models: &[FlatModel], f: usize) -> Result<FlatModel> {
    let mut keep = multi_krum_indices(models, f)?;
    keep.sort_unstable();
    weighted_mean(keep.into_iter().map(|i| (i, &models[i], 1.0)).collect())
}

/// Clips every update to `threshold`, then sample-weighted averaging.
pub fn ndc_clip_aggregate(records: &[ClientUpdateRecord], g_prev: &FlatModel, threshold: f64) -> Result<FlatModel> {
    if !(threshold > 0.0) {
        return Err(config_err("NDC threshold must be positive"));
    }
    let clipped: Vec<FlatModel> = records
        .iter()
        .map(|r| {
            let norm = r.update.norm();
            let scale = if norm > threshold { threshold / norm } else { 1.0 };
            let mut w = g_prev.clone();
            w.axpy(scale, &r.update)?;
            Ok(w)
        })
        .collect::<Result<_>>()?;
    weighted_mean(clipped.iter().zip(records).map(|(w, r)| (r.client_id, w, r.sample_count as f64)).collect())
}

/// FedAvg plus i.i.d. `N(0, sigma^2)` noise on every coordinate.
pub fn weak_dp_aggregate(records: &[ClientUpdateRecord], sigma: f64, seed: u64, round: usize) -> Result<FlatModel> {
    if !(sigma >= 0.0) {
        return Err(config_err("weak DP sigma must be non-negative"));
    }
    let mut out = fedavg_aggregate(records)?;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Numeric(e.to_string()))?;
        let mut r = rng::stream(seed, Purpose::WeakDp, round as u64, 0);
        for p in out.params_mut() {
            *p += noise.sample(&mut r);
        }
    }
    Ok(out)
}

fn models_of(records: &[ClientUpdateRecord]) -> Vec<FlatModel> {
    records.iter().map(|r| r.weights.clone()).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Krum {
    pub f: usize,
}

impl Aggregator for Krum {
    fn name(&self) -> &'static str {
        "krum"
    }

    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput> {
        let models = models_of(input.records);
        let pick = krum_select(&models, self.f)?;
        let flagged = input.records.iter().enumerate().filter(|&(i, _)| i != pick).map(|(_, r)| r.client_id).collect();
        Ok(AggregationOutput { model: models[pick].clone(), flagged, diagnostics: None })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MultiKrum {
    pub f: usize,
}

impl Aggregator for MultiKrum {
    fn name(&self) -> &'static str {
        "multi_krum"
    }

    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput> {
        let models = models_of(input.records);
        let keep = multi_krum_indices(&models, self.f)?;
        let flagged = (0..models.len()).filter(|i| !keep.contains(i)).map(|i| input.records[i].client_id).collect();
        Ok(AggregationOutput { model: multi_krum_aggregate(&models, self.f)?, flagged, diagnostics: None })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Ndc {
    pub threshold: f64,
}

impl Aggregator for Ndc {
    fn name(&self) -> &'static str {
        "ndc"
    }

    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput> {
        let model = ndc_clip_aggregate(input.records, input.global, self.threshold)?;
        Ok(AggregationOutput { model, flagged: Vec::new(), diagnostics: None })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WeakDp {
    pub sigma: f64,
    pub seed: u64,
}

impl Aggregator for WeakDp {
    fn name(&self) -> &'static str {
        "weak_dp"
    }

    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput> {
        let model = weak_dp_aggregate(input.records, self.sigma, self.seed, input.round)?;
        Ok(AggregationOutput { model, flagged: Vec::new(), diagnostics: None })
    }
}
