//! Backdoor attacks: data poisoning, PGD-constrained and scaled model
//! poisoning, constrain-and-scale, distributed triggers, and the adaptive
//! variants (dynamic PDR, noise obfuscation, fixed-frequency attacks).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config_err, Result};
use crate::model::FlatModel;
use crate::rng::{self, Purpose, StreamRng};
use crate::task::{train_local_with, TaskModel, TrainConfig, TrainHooks, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    #[default]
    None,
    Blackbox,
    PgdNoReplace,
    PgdReplace,
    ConstrainAndScale,
    Dba,
}

impl std::str::FromStr for AttackKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => AttackKind::None,
            "blackbox" => AttackKind::Blackbox,
            "pgd_no_replace" => AttackKind::PgdNoReplace,
            "pgd_replace" => AttackKind::PgdReplace,
            "constrain_and_scale" => AttackKind::ConstrainAndScale,
            "dba" => AttackKind::Dba,
            other => return Err(config_err(format!("unknown attack {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AdaptiveKind {
    #[default]
    None,
    DynamicPdr,
    Obfuscation,
    FixedFrequency,
}

/// PGD radii used for the four reference tasks (digits, images, sentiment,
/// next-word prediction).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PgdRadiusPreset {
    Mnist,
    Cifar10,
    Sentiment140,
    Reddit,
}

impl PgdRadiusPreset {
    pub fn radius(self) -> f64 {
        match self {
            PgdRadiusPreset::Mnist => 0.2,
            PgdRadiusPreset::Cifar10 => 1.0,
            PgdRadiusPreset::Sentiment140 | PgdRadiusPreset::Reddit => 2.0,
        }
    }
}

pub const DYNAMIC_PDR_RANGE: (f64, f64) = (0.05, 0.20);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub kind: AttackKind,
    pub pdr: f64,
    pub target_label: usize,
    pub pgd_radius: f64,
    pub cs_alpha: f64,
    pub dba_parts: usize,
    pub adaptive: AdaptiveKind,
    pub obfuscation_sigma: f64,
    pub attack_period: usize,
    /// First round in which compromised clients misbehave.
    pub start_round: usize,
    /// Model-replacement factor; `None` means the number of clients per round.
    pub replacement_scale: Option<f64>,
    /// Trigger: the first `trigger_size` features are overwritten with `trigger_value`.
    pub trigger_size: usize,
    pub trigger_value: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::None,
            pdr: 0.5,
            target_label: 0,
            pgd_radius: PgdRadiusPreset::Cifar10.radius(),
            cs_alpha: 0.5,
            dba_parts: 4,
            adaptive: AdaptiveKind::None,
            obfuscation_sigma: 0.034,
            attack_period: 10,
            start_round: 1,
            replacement_scale: None,
            trigger_size: 4,
            trigger_value: 3.0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, feature_dim: usize, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pdr) {
            return Err(config_err(format!("pdr must lie in [0, 1], got {}", self.pdr)));
        }
        if self.target_label >= num_classes {
            return Err(config_err(format!("target label {} outside [0, {num_classes})", self.target_label)));
        }
        if matches!(self.kind, AttackKind::PgdNoReplace | AttackKind::PgdReplace) && self.pgd_radius <= 0.0 {
            return Err(config_err("pgd_radius must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cs_alpha) {
            return Err(config_err("cs_alpha must lie in [0, 1]"));
        }
        if self.kind == AttackKind::Dba && (self.dba_parts < 2 || self.dba_parts > self.trigger_size) {
            return Err(config_err(format!(
                "dba_parts must be in [2, trigger_size={}], got {}",
                self.trigger_size, self.dba_parts
            )));
        }
        if self.trigger_size == 0 || self.trigger_size > feature_dim {
            return Err(config_err(format!("trigger_size must be in [1, {feature_dim}]")));
        }
        if self.obfuscation_sigma < 0.0 {
            return Err(config_err("obfuscation_sigma must be non-negative"));
        }
        if self.adaptive == AdaptiveKind::FixedFrequency && self.attack_period == 0 {
            return Err(config_err("attack_period must be positive"));
        }
        if let Some(s) = self.replacement_scale {
            if s < 1.0 {
                return Err(config_err("replacement_scale must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn trigger(&self) -> TriggerSpec {
        TriggerSpec {
            indices: (0..self.trigger_size).collect(),
            values: vec![self.trigger_value; self.trigger_size],
            target_label: self.target_label,
        }
    }
}

/// Feature positions overwritten by the trigger, their values, and the label
/// the attacker wants triggered samples to receive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriggerSpec {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub target_label: usize,
}

impl TriggerSpec {
    pub fn apply(&self, row: &mut [f64]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            row[i] = v;
        }
    }

    /// Triggered copy of every sample whose label differs from the target,
    /// labelled with the target.
    pub fn backdoor_test_set(&self, data: &Dataset) -> Dataset {
        let keep: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != self.target_label).collect();
        let mut out = data.select(&keep);
        for mut row in out.features.rows_mut() {
            self.apply(row.as_slice_mut().expect("row-major"));
        }
        out.labels.iter_mut().for_each(|l| *l = self.target_label);
        out
    }
}

/// Applies the trigger to a uniformly drawn `floor(pdr * n)` subset and
/// relabels those samples with the target.
pub fn poison_dataset(data: &Dataset, trigger: &TriggerSpec, pdr: f64, rng: &mut StreamRng) -> Dataset {
    let n = data.len();
    // tolerance keeps e.g. 0.29 * 100 from flooring to 28
    let count = ((pdr.clamp(0.0, 1.0) * n as f64) + 1e-9).floor() as usize;
    let count = count.min(n);
    let mut out = data.clone();
    if count == 0 {
        return out;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in &order[..count] {
        let mut row = out.features.row_mut(i);
        trigger.apply(row.as_slice_mut().expect("row-major"));
        out.labels[i] = trigger.target_label;
    }
    out
}

/// Projects `w` onto the L2 ball of radius `eps` around `g`.
pub fn pgd_project(w: &FlatModel, g: &FlatModel, eps: f64) -> Result<FlatModel> {
    if !(eps > 0.0) {
        return Err(config_err(format!("projection radius must be positive, got {eps}")));
    }
    let diff = w.sub(g)?;
    let dist = diff.norm();
    if dist <= eps {
        return Ok(w.clone());
    }
    let mut out = g.clone();
    out.axpy(eps / dist, &diff)?;
    Ok(out)
}

/// `g + scale * (w_mal - g)`: with `scale = m` and the other `m - 1`
/// clients sending `g`, equal-weight FedAvg returns `w_mal`.
pub fn model_replacement_scale(w_mal: &FlatModel, g: &FlatModel, scale: f64) -> Result<FlatModel> {
    if scale < 1.0 {
        return Err(config_err(format!("replacement scale must be >= 1, got {scale}")));
    }
    let diff = w_mal.sub(g)?;
    let mut out = g.clone();
    out.axpy(scale, &diff)?;
    Ok(out)
}

pub fn constrain_and_scale_loss(class_loss: f64, anomaly: f64, alpha: f64) -> f64 {
    alpha * class_loss + (1.0 - alpha) * anomaly
}

/// Splits the trigger's indices into `parts` disjoint, contiguous chunks and
/// hands them to malicious clients round-robin in ascending id order.
pub fn dba_assign_subtriggers(
    trigger: &TriggerSpec,
    parts: usize,
    malicious_ids: &[usize],
) -> Result<BTreeMap<usize, TriggerSpec>> {
    let n = trigger.indices.len();
    if parts == 0 || parts > n {
        return Err(config_err(format!("cannot split {n} trigger indices into {parts} parts")));
    }
    let base = n / parts;
    let extra = n % parts;
    let mut subs = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        subs.push(TriggerSpec {
            indices: trigger.indices[start..start + len].to_vec(),
            values: trigger.values[start..start + len].to_vec(),
            target_label: trigger.target_label,
        });
        start += len;
    }
    let mut ids = malicious_ids.to_vec();
    ids.sort_unstable();
    Ok(ids.into_iter().enumerate().map(|(k, id)| (id, subs[k % parts].clone())).collect())
}

/// What a compromised client does in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Behavior {
    pub attack: bool,
    pub pdr: f64,
    pub noise_sigma: f64,
}

pub fn apply_adaptive(cfg: &AttackConfig, seed: u64, round: usize, client: usize, base: Behavior) -> Behavior {
    match cfg.adaptive {
        AdaptiveKind::None => base,
        AdaptiveKind::DynamicPdr => {
            let mut r = rng::stream(seed, Purpose::AdaptivePdr, round as u64, client as u64);
            let (lo, hi) = DYNAMIC_PDR_RANGE;
            Behavior { pdr: r.random_range(lo..=hi), ..base }
        }
        AdaptiveKind::Obfuscation => Behavior { noise_sigma: cfg.obfuscation_sigma, ..base },
        AdaptiveKind::FixedFrequency => Behavior { attack: base.attack && round.is_multiple_of(cfg.attack_period), ..base },
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every parameter.
pub fn obfuscate(model: &FlatModel, sigma: f64, rng: &mut StreamRng) -> FlatModel {
    if sigma <= 0.0 {
        return model.clone();
    }
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    let mut out = model.clone();
    for p in out.params_mut() {
        *p += noise.sample(rng);
    }
    out
}

/// Everything a compromised client needs to craft its submission.
#[derive(Debug, Clone, Copy)]
pub struct AttackContext<'a> {
    pub task: &'a TaskModel,
    pub global: &'a FlatModel,
    pub data: &'a Dataset,
    pub train: &'a TrainConfig,
    pub trigger: &'a TriggerSpec,
    pub clients_per_round: usize,
    pub seed: u64,
    pub round: usize,
    pub client: usize,
}

/// Runs the configured attack for one client. Returns `None` when the
/// client should behave benignly this round.
pub fn craft_malicious(cfg: &AttackConfig, ctx: &AttackContext<'_>) -> Result<Option<TrainOutcome>> {
    if cfg.kind == AttackKind::None || ctx.round < cfg.start_round {
        return Ok(None);
    }
    let base = Behavior { attack: true, pdr: cfg.pdr, noise_sigma: 0.0 };
    let behavior = apply_adaptive(cfg, ctx.seed, ctx.round, ctx.client, base);
    if !behavior.attack {
        return Ok(None);
    }
    let (round, client) = (ctx.round as u64, ctx.client as u64);
    let poisoned = poison_dataset(
        ctx.data,
        ctx.trigger,
        behavior.pdr,
        &mut rng::stream(ctx.seed, Purpose::Poisoning, round, client),
    );
    let mut hooks = TrainHooks::default();
    match cfg.kind {
        AttackKind::PgdNoReplace | AttackKind::PgdReplace => hooks.projection = Some((ctx.global, cfg.pgd_radius)),
        AttackKind::ConstrainAndScale => hooks.anomaly_penalty = Some((cfg.cs_alpha, ctx.global)),
        _ => {}
    }
    let mut train_rng = rng::stream(ctx.seed, Purpose::LocalTraining, round, client);
    let mut outcome = train_local_with(ctx.task, ctx.global, &poisoned, ctx.train, hooks, &mut train_rng)?;
    if cfg.kind == AttackKind::PgdReplace {
        let scale = cfg.replacement_scale.unwrap_or(ctx.clients_per_round as f64);
        outcome.model = model_replacement_scale(&outcome.model, ctx.global, scale)?;
    }
    if behavior.noise_sigma > 0.0 {
        let mut r = rng::stream(ctx.seed, Purpose::Obfuscation, round, client);
        outcome.model = obfuscate(&outcome.model, behavior.noise_sigma, &mut r);
    }
    Ok(Some(outcome))
}
