//! Invariant checks and small builders shared by the property suite and the
//! acceptance target. Each check returns a `TestCaseError` on violation so it
//! can run under `proptest!` or a hand-driven `TestRunner`.

#![allow(dead_code)]

use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};

use guardfl_core::attacks::{pgd_project, poison_dataset, TriggerSpec};
use guardfl_core::clustering::{assign, fit_with_clusters, GaeConfig, SubGraph};
use guardfl_core::data::{gen_synthetic, partition, PartitionSpec};
use guardfl_core::defense::{clip_updates, limit_magnitude, softmax_weights, update_benign_scores, SoftmaxSign};
use guardfl_core::harness::{ExperimentConfig, Experiment};
use guardfl_core::model::LayerSpec;
use guardfl_core::rng::{self, Purpose};
use guardfl_core::sim::{compute_updates, ClientUpdateRecord, DefenseKind};
use guardfl_core::FlatModel;

pub const CASES: u32 = 200;

pub fn runner() -> TestRunner {
    TestRunner::new(Config { cases: CASES, failure_persistence: None, ..Config::default() })
}

pub fn vec_f64(len: impl Into<proptest::collection::SizeRange>, scale: f64) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-scale..scale, len)
}

pub fn matrix(rows: usize, cols: usize, values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), values[..rows * cols].to_vec()).unwrap()
}

pub fn two_layer_spec(a: usize, b: usize) -> Arc<LayerSpec> {
    Arc::new(LayerSpec::from_lengths([("l0.weight", a), ("l1.weight", b)]))
}

/// Records with the given updates around `g`, ids 0.., unit sample counts.
pub fn records_from_updates(g: &FlatModel, updates: &[Vec<f64>]) -> Vec<ClientUpdateRecord> {
    updates
        .iter()
        .enumerate()
        .map(|(i, u)| {
            let mut w = g.clone();
            w.axpy(1.0, &FlatModel::new(u.clone(), g.spec().clone()).unwrap()).unwrap();
            compute_updates(i, w, g, None, g, 1).unwrap()
        })
        .collect()
}

// ---- invariants ----

/// Soft assignments are row-stochastic and the hard assignment is one-hot.
pub fn check_assignment(z: &Array2<f64>, centers: &Array2<f64>) -> Result<(), TestCaseError> {
    let (p, hard) = assign(z, centers);
    for (row, hrow) in p.rows().into_iter().zip(hard.rows()) {
        prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((row.sum() - 1.0).abs() < 1e-9, "row sum {}", row.sum());
        prop_assert_eq!(hrow.iter().filter(|&&v| v == 1.0).count(), 1);
        prop_assert_eq!(hrow.iter().filter(|&&v| v == 0.0).count(), hrow.len() - 1);
    }
    Ok(())
}

pub fn check_clip_bound(g: &FlatModel, updates: &[Vec<f64>], n_r: f64) -> Result<(), TestCaseError> {
    let recs = records_from_updates(g, updates);
    let clipped = clip_updates(&recs, g, n_r).unwrap();
    for (c, r) in clipped.iter().zip(&recs) {
        let norm = c.sub(g).unwrap().norm();
        prop_assert!(norm <= n_r * (1.0 + 1e-12) + 1e-12, "clipped norm {norm} > {n_r}");
        if r.update.norm() <= n_r {
            prop_assert!(c.distance(&r.weights).unwrap() < 1e-12);
        }
    }
    Ok(())
}

pub fn check_score_bound(s: &[f64], probs: &[f64], split: usize, kappa4: f64) -> Result<(), TestCaseError> {
    let n = s.len();
    let split = split % (n + 1);
    let c_plus: Vec<(usize, f64)> = (0..split).map(|i| (i, probs[i % probs.len()])).collect();
    let c_minus: Vec<usize> = (split..n).collect();
    let out = update_benign_scores(s, &c_plus, &c_minus, kappa4);
    prop_assert_eq!(out.len(), n);
    for v in out {
        prop_assert!(v > -1.0 && v < 1.0, "score {v}");
    }
    Ok(())
}

pub fn check_null_poison(seed: u64, per_class: usize) -> Result<(), TestCaseError> {
    let data = gen_synthetic(3, per_class, 6, seed).unwrap();
    let trigger = TriggerSpec { indices: vec![0, 1], values: vec![3.0, 3.0], target_label: 0 };
    let out = poison_dataset(&data, &trigger, 0.0, &mut rng::stream(seed, Purpose::Poisoning, 1, 0));
    prop_assert_eq!(out, data);
    Ok(())
}

pub fn check_pgd_idempotent(w: &[f64], g: &[f64], eps: f64) -> Result<(), TestCaseError> {
    let n = w.len().min(g.len());
    let w = FlatModel::from_vec(w[..n].to_vec());
    let g = FlatModel::from_vec(g[..n].to_vec());
    let once = pgd_project(&w, &g, eps).unwrap();
    let twice = pgd_project(&once, &g, eps).unwrap();
    prop_assert!(once.distance(&g).unwrap() <= eps * (1.0 + 1e-12));
    prop_assert!(once.distance(&twice).unwrap() <= 1e-12 * (1.0 + eps));
    Ok(())
}

pub fn check_partition(seed: u64, clients: usize, alpha: Option<f64>) -> Result<(), TestCaseError> {
    let data = gen_synthetic(4, 30, 3, seed).unwrap();
    let spec = alpha.map_or(PartitionSpec::Uniform, |alpha| PartitionSpec::Dirichlet { alpha });
    let shards = partition(&data, clients, spec, seed).unwrap();
    prop_assert_eq!(shards.len(), clients);
    prop_assert_eq!(shards.iter().map(|s| s.len()).sum::<usize>(), data.len());
    let mut counts = vec![0; data.num_classes];
    for s in &shards {
        for (c, n) in s.label_counts().into_iter().enumerate() {
            counts[c] += n;
        }
    }
    prop_assert_eq!(counts, data.label_counts());
    // every original row appears exactly once
    let mut rows: Vec<Vec<u64>> = shards
        .iter()
        .flat_map(|s| s.features.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect::<Vec<_>>())
        .collect();
    let mut orig: Vec<Vec<u64>> = data.features.rows().into_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort();
    orig.sort();
    prop_assert_eq!(rows, orig);
    if alpha.is_none() {
        let (lo, hi) = shards.iter().fold((usize::MAX, 0), |(lo, hi), s| (lo.min(s.len()), hi.max(s.len())));
        prop_assert!(hi - lo <= 1);
    }
    Ok(())
}

pub fn check_magnitude_limit(plus: &[f64], minus: &[f64], prev: &[f64]) -> Result<(), TestCaseError> {
    let n = plus.len().min(minus.len()).min(prev.len());
    let [p, m, g] = [plus, minus, prev].map(|v| FlatModel::from_vec(v[..n].to_vec()));
    let out = limit_magnitude(&p, &m, &g).unwrap();
    let up = p.distance(&g).unwrap();
    let dm = m.distance(&g).unwrap();
    let got = out.distance(&g).unwrap();
    prop_assert!((got - up.min(dm)).abs() <= 1e-9 * (1.0 + up + dm), "{got} vs min({up}, {dm})");
    Ok(())
}

pub fn check_softmax(d: &[f64], negated: bool) -> Result<(), TestCaseError> {
    let sign = if negated { SoftmaxSign::Negated } else { SoftmaxSign::AsWritten };
    let w = softmax_weights(d, sign);
    prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    prop_assert!(w.iter().all(|&v| v >= 0.0 && v.is_finite()));
    Ok(())
}

pub fn tiny_experiment(seed: u64, defense: DefenseKind) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.total_clients = 10;
    cfg.sim.clients_per_round = 4;
    cfg.sim.max_rounds = 3;
    cfg.sim.local_epochs = 1;
    cfg.sim.seed = seed;
    cfg.sim.defense = defense;
    cfg.attack.kind = guardfl_core::attacks::AttackKind::PgdReplace;
    cfg.attack.start_round = 2;
    cfg.data.train_per_class = 20;
    cfg.data.test_per_class = 10;
    cfg.data.probe_per_class = 5;
    cfg.data.hidden = vec![6];
    cfg.gae.pretrain_epochs = 5;
    cfg.gae.joint_epochs = 5;
    cfg
}

/// Two runs from the same config produce bit-identical global models and reports.
pub fn check_determinism(seed: u64, guarded: bool) -> Result<(), TestCaseError> {
    let defense = if guarded { DefenseKind::Guardfl } else { DefenseKind::None };
    let cfg = tiny_experiment(seed, defense);
    let run = || {
        let mut e = Experiment::new(cfg.clone()).unwrap();
        let r = e.run().unwrap();
        (e.simulation().state().global_model.clone(), r.reports)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    prop_assert!(m1.params().iter().zip(m2.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
    prop_assert_eq!(r1, r2);
    Ok(())
}

/// Fitted GAE assignments stay row-stochastic / one-hot.
pub fn check_fitted_assignment(seed: u64, m: usize) -> Result<(), TestCaseError> {
    let mut r = rng::seeded(seed);
    let x = Array2::from_shape_fn((m, 5), |_| rand::Rng::random_range(&mut r, -1.0..1.0));
    let e = Array2::from_shape_fn((m, m), |(i, j)| if i == j { 0.0 } else { 0.5 + 0.4 * ((i + j) % 2) as f64 });
    let sub = SubGraph { ids: (0..m).collect(), e, x };
    let cfg = GaeConfig { latent_dim: 4, hidden_dim: 8, pretrain_epochs: 3, joint_epochs: 3, ..GaeConfig::default() };
    let st = fit_with_clusters(&sub, &cfg, 2, &mut rng::seeded(seed)).unwrap();
    check_assignment(&st.z, &st.centers)?;
    prop_assert_eq!(st.p_hard.nrows(), m);
    Ok(())
}
