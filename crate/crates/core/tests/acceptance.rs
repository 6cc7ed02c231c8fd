//! Acceptance suite. Every criterion prints one `PASS` / `FAIL` line to
//! stdout (uncaptured) and then asserts, so a failing criterion both shows in
//! the log and fails the test.

mod common;

use std::io::Write;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;

use guardfl_core::attacks::AttackKind;
use guardfl_core::baselines::{krum_scores, krum_select};
use guardfl_core::clustering::{normalized_adjacency, objective, Encoder, GaeConfig};
use guardfl_core::data::{Dataset, PartitionSpec};
use guardfl_core::defense::{filter_benign, Degenerate};
use guardfl_core::graph::{layer_wise_features, model_wise_features, MODEL_WISE_DIM};
use guardfl_core::harness::{compute_ds, Experiment, ExperimentConfig, ExperimentResult};
use guardfl_core::rng;
use guardfl_core::sim::{DefenseKind, LrSchedule};
use guardfl_core::task::TaskModel;
use guardfl_core::FlatModel;

const SEEDS: [u64; 3] = [1, 2, 3];

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    writeln!(out, "[acceptance] criterion {id} {verdict} {name}: {detail}").unwrap();
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---- criterion 1 ----

#[test]
fn c1_ds_formula() {
    let rows = [("MNIST", 0.00, 99.33, 99.66), ("CIFAR-10", 1.67, 84.84, 91.09), ("Sentiment-140", 7.92, 74.12, 82.13)];
    let mut pass = true;
    let mut detail = Vec::new();
    for (name, asr, acc, want) in rows {
        let got = 100.0 * compute_ds(asr / 100.0, acc / 100.0);
        pass &= (got - want).abs() <= 0.01;
        detail.push(format!("{name} {got:.4} (want {want})"));
    }
    report(1, "DS formula", pass, &detail.join(", "));
    assert!(pass);
}

// ---- criterion 2 ----

#[test]
fn c2_feature_dimensions() {
    let mut r = rng::seeded(2);
    let mut v = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let (w, dw, g) = (v(30), v(30), v(30));
    let mw = model_wise_features(&w, &dw, &g).unwrap().len();
    let mut pass = mw == 19 && MODEL_WISE_DIM == 19;
    let mut detail = vec![format!("model-wise {mw}")];
    for layers in 1..=3usize {
        let groups: Vec<Vec<f64>> = (0..layers).map(|l| v(5 + l)).collect();
        let refs: Vec<&[f64]> = groups.iter().map(Vec::as_slice).collect();
        let lw = layer_wise_features(&refs, &refs, &refs, &refs).unwrap().len();
        pass &= lw == 29 * layers;
        detail.push(format!("L={layers} layer-wise {lw}"));
    }
    report(2, "feature dimensions", pass, &detail.join(", "));
    assert!(pass);
}

// ---- criterion 3 ----

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-6)
}

fn gae_gradient_error(seed: u64) -> f64 {
    let m = 6;
    let mut r = rng::seeded(seed);
    let x = Array2::from_shape_fn((m, 7), |_| r.random_range(-1.0..1.0));
    let mut e = Array2::zeros((m, m));
    for i in 0..m {
        for j in i + 1..m {
            let v: f64 = r.random_range(0.05..0.95);
            e[[i, j]] = v;
            e[[j, i]] = v;
        }
    }
    let a_hat = normalized_adjacency(&e);
    let ax = a_hat.dot(&x);
    let cfg = GaeConfig { hidden_dim: 8, latent_dim: 4, init_std: 0.5, ..GaeConfig::default() };
    let enc = Encoder::init(7, &cfg, &mut r);
    let centers = Array2::from_shape_fn((2, 4), |_| r.random_range(-1.0..1.0));
    let lambda = 0.7;
    let (_, grads) = objective(&a_hat, &ax, &e, &enc, Some(&centers), lambda);
    let loss = |enc: &Encoder, q: &Array2<f64>| objective(&a_hat, &ax, &e, enc, Some(q), lambda).0.total;

    let h = 1e-6;
    let mut worst = 0.0f64;
    for which in 0..2 {
        let shape = if which == 0 { enc.w1.dim() } else { enc.w2.dim() };
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let mut plus = enc.clone();
                let mut minus = enc.clone();
                let (p, mi) = if which == 0 { (&mut plus.w1, &mut minus.w1) } else { (&mut plus.w2, &mut minus.w2) };
                p[[i, j]] += h;
                mi[[i, j]] -= h;
                let num = (loss(&plus, &centers) - loss(&minus, &centers)) / (2.0 * h);
                let ana = if which == 0 { grads.w1[[i, j]] } else { grads.w2[[i, j]] };
                worst = worst.max(rel_err(ana, num));
            }
        }
    }
    let gq = grads.centers.as_ref().expect("centre gradient");
    for i in 0..2 {
        for j in 0..4 {
            let mut qp = centers.clone();
            let mut qm = centers.clone();
            qp[[i, j]] += h;
            qm[[i, j]] -= h;
            let num = (loss(&enc, &qp) - loss(&enc, &qm)) / (2.0 * h);
            worst = worst.max(rel_err(gq[[i, j]], num));
        }
    }
    worst
}

fn mlp_gradient_error(seed: u64) -> f64 {
    let task = TaskModel::new(&[2, 4, 2]).unwrap();
    let mut r = rng::seeded(seed);
    let params: Vec<f64> = (0..task.num_params()).map(|_| r.random_range(-1.0..1.0)).collect();
    let x = Array2::from_shape_fn((9, 2), |_| r.random_range(-2.0..2.0));
    let labels: Vec<usize> = (0..9).map(|i| i % 2).collect();
    let data = Dataset::new(x, labels, 2).unwrap();
    let rows: Vec<usize> = (0..data.len()).collect();
    let (_, grad) = task.loss_and_grad(&params, &data, &rows).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        let mut p = params.clone();
        p[k] += h;
        let lp = task.loss(&p, &data).unwrap();
        p[k] -= 2.0 * h;
        let lm = task.loss(&p, &data).unwrap();
        worst = worst.max(rel_err(grad[k], (lp - lm) / (2.0 * h)));
    }
    worst
}

#[test]
fn c3_gradient_oracle() {
    let start = Instant::now();
    let gae = (0..5).map(gae_gradient_error).fold(0.0, f64::max);
    let mlp = (0..5).map(mlp_gradient_error).fold(0.0, f64::max);
    let secs = start.elapsed().as_secs_f64();
    let pass = gae < 1e-4 && mlp < 1e-4 && secs < 10.0;
    report(3, "gradient oracle", pass, &format!("GAE max rel err {gae:.2e}, MLP max rel err {mlp:.2e}, {secs:.2}s"));
    assert!(pass);
}

// ---- criterion 4 ----

/// Exhaustive Krum: minimum over every (n-f-2)-subset of the other models.
fn brute_krum(models: &[FlatModel], f: usize) -> (Vec<f64>, usize) {
    let n = models.len();
    let k = n - f - 2;
    let scores: Vec<f64> = (0..n)
        .map(|i| {
            let others: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| models[i].params().iter().zip(models[j].params()).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            let mut best = f64::INFINITY;
            for mask in 0u32..(1 << others.len()) {
                if mask.count_ones() as usize == k {
                    let s: f64 = (0..others.len()).filter(|b| mask >> b & 1 == 1).map(|b| others[b]).sum();
                    best = best.min(s);
                }
            }
            best
        })
        .collect();
    let mut sel = 0;
    for i in 1..n {
        if scores[i] < scores[sel] {
            sel = i;
        }
    }
    (scores, sel)
}

/// Rank-based linear interpolation: position p/100 * (n-1) in the sorted list.
fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = p / 100.0 * (v.len() - 1) as f64;
    let lo = rank as usize;
    if lo + 1 >= v.len() {
        return v[v.len() - 1];
    }
    v[lo] * (1.0 - (rank - lo as f64)) + v[lo + 1] * (rank - lo as f64)
}

#[test]
fn c4_brute_force_equivalence() {
    let mut r = rng::seeded(4);
    let mut krum_ok = 0;
    for _ in 0..50 {
        let f = r.random_range(0..=1usize);
        let dim = r.random_range(2..6usize);
        let models: Vec<FlatModel> =
            (0..6).map(|_| FlatModel::from_vec((0..dim).map(|_| r.random_range(-3.0..3.0)).collect())).collect();
        let (want_scores, want_sel) = brute_krum(&models, f);
        let got_scores = krum_scores(&models, f).unwrap();
        let scores_ok = got_scores.iter().zip(&want_scores).all(|(a, b)| (a - b).abs() <= 1e-9 * (1.0 + b.abs()));
        if scores_ok && krum_select(&models, f).unwrap() == want_sel {
            krum_ok += 1;
        }
    }
    let mut filter_ok = 0;
    for _ in 0..50 {
        let m = r.random_range(2..12usize);
        let s: Vec<f64> = (0..m).map(|_| r.random_range(-1.0..1.0)).collect();
        let d: Vec<f64> = (0..m).map(|_| r.random_range(0.0..5.0)).collect();
        let c_hat: Vec<usize> = (0..m).filter(|_| r.random_bool(0.6)).collect();
        let (a1, a2) = (r.random_range(0.0..100.0), r.random_range(0.0..100.0));
        let want = if c_hat.is_empty() {
            Err(Degenerate::EmptyBenign)
        } else {
            let s_cut = oracle_percentile(&s, a1);
            let d_cut = oracle_percentile(&c_hat.iter().map(|&i| d[i]).collect::<Vec<_>>(), a2);
            let kept: Vec<usize> = c_hat.iter().copied().filter(|&i| s[i] >= s_cut && d[i] <= d_cut).collect();
            if kept.is_empty() {
                Err(Degenerate::EmptyBenign)
            } else {
                Ok(kept)
            }
        };
        if filter_benign(&c_hat, &d, &s, a1, a2) == want {
            filter_ok += 1;
        }
    }
    let pass = krum_ok == 50 && filter_ok == 50;
    report(4, "brute-force equivalence", pass, &format!("Krum {krum_ok}/50, percentile filter {filter_ok}/50"));
    assert!(pass);
}

// ---- criteria 5, 6, 8: end-to-end runs ----

fn scenario(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sim.total_clients = 40;
    cfg.sim.clients_per_round = 8;
    cfg.sim.max_rounds = 150;
    cfg.sim.pmr = 0.25;
    cfg.sim.seed = seed;
    cfg.attack.kind = AttackKind::PgdReplace;
    cfg.attack.pdr = 0.5;
    cfg.attack.start_round = 30;
    cfg
}

fn run(cfg: ExperimentConfig) -> ExperimentResult {
    Experiment::new(cfg).unwrap().run().unwrap()
}

fn with(seed: u64, f: impl Fn(&mut ExperimentConfig)) -> ExperimentConfig {
    let mut cfg = scenario(seed);
    f(&mut cfg);
    cfg
}

#[test]
fn c5_end_to_end_defense() {
    let start = Instant::now();
    let mut none_asr = Vec::new();
    let mut guard_asr = Vec::new();
    let mut acc_gap = Vec::new();
    let mut f1 = Vec::new();
    for seed in SEEDS {
        let none = run(with(seed, |c| c.sim.defense = DefenseKind::None)).summary;
        let guard = run(with(seed, |c| c.sim.defense = DefenseKind::Guardfl)).summary;
        let benign = run(with(seed, |c| {
            c.sim.defense = DefenseKind::None;
            c.attack.kind = AttackKind::None;
        }))
        .summary;
        none_asr.push(none.final_asr);
        guard_asr.push(guard.final_asr);
        acc_gap.push((guard.final_acc - benign.final_acc).abs());
        f1.push(guard.f1);
    }
    let secs = start.elapsed().as_secs_f64();
    let (na, ga, gap, f) = (median(none_asr.clone()), median(guard_asr.clone()), median(acc_gap.clone()), median(f1.clone()));
    let checks = [
        ("no-defense ASR >= 70", na >= 70.0),
        ("guardfl ASR <= 10", ga <= 10.0),
        ("ACC gap <= 5pp", gap <= 5.0),
        ("F1 >= 0.75", f >= 0.75),
        ("runtime < 300s", secs < 300.0),
    ];
    let pass = checks.iter().all(|c| c.1);
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    report(
        5,
        "end-to-end defense",
        pass,
        &format!(
            "median no-defense ASR {na:.2} {none_asr:.2?}, guardfl ASR {ga:.2} {guard_asr:.2?}, ACC gap {gap:.2}pp, \
             F1 {f:.3} {f1:.3?}, {secs:.1}s{}",
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    );
    assert!(pass);
}

#[test]
fn c6_ape_ablation_direction() {
    let dirichlet = |seed, ape| {
        with(seed, move |c| {
            c.partition = PartitionSpec::Dirichlet { alpha: 0.05 };
            c.defense.ape_enabled = ape;
        })
    };
    let on: Vec<f64> = SEEDS.iter().map(|&s| run(dirichlet(s, true)).summary.final_asr).collect();
    let off: Vec<f64> = SEEDS.iter().map(|&s| run(dirichlet(s, false)).summary.final_asr).collect();
    let (mon, moff) = (median(on.clone()), median(off.clone()));
    let pass = moff >= mon;
    report(
        6,
        "APE ablation direction",
        pass,
        &format!("median final ASR without APE {moff:.2} {off:.2?} vs with APE {mon:.2} {on:.2?}"),
    );
    assert!(pass);
}

#[test]
fn c8_convergence_monitor() {
    let mut detail = Vec::new();
    let mut pass = true;
    for seed in SEEDS {
        let cfg = with(seed, |c| {
            c.attack.kind = AttackKind::None;
            c.sim.max_rounds = 200;
            c.sim.lr_schedule = LrSchedule::InvSqrt;
        });
        let reports = run(cfg).reports;
        let (r20, r200) = (reports[19].grad_norm_sq_avg, reports[199].grad_norm_sq_avg);
        pass &= reports[199].round == 200 && r200 < r20;
        detail.push(format!("seed {seed}: {r20:.4} -> {r200:.4}"));
    }
    report(8, "convergence monitor", pass, &format!("running avg grad norm^2 round 20 -> 200: {}", detail.join(", ")));
    assert!(pass);
}

// ---- criterion 7 ----

#[test]
fn c7_invariant_suite() {
    use common::*;
    use proptest::prelude::*;

    fn outcome<T: std::fmt::Debug>(res: Result<(), proptest::test_runner::TestError<T>>) -> Result<(), String> {
        res.map_err(|e| format!("{e:?}"))
    }
    let mut results: Vec<(&str, Result<(), String>)> = Vec::new();
    let mut go = |name, res| results.push((name, res));

    let z_and_q = (1usize..12, 1usize..5, 1usize..6, vec_f64(60, 20.0), vec_f64(30, 20.0));
    go(
        "row-stochastic P / one-hot hard P",
        outcome(runner().run(&z_and_q, |(m, q, d, zv, qv)| check_assignment(&matrix(m, d, &zv), &matrix(q, d, &qv)))),
    );
    go("fitted GAE assignments", outcome(runner().run(&(any::<u64>(), 3usize..9), |(s, m)| check_fitted_assignment(s, m))));
    let clip = (vec_f64(6, 2.0), proptest::collection::vec(vec_f64(6, 5.0), 1..8), 1e-3f64..4.0);
    go(
        "post-clip norm bound",
        outcome(runner().run(&clip, |(g, ups, n)| check_clip_bound(&FlatModel::new(g, two_layer_spec(2, 4)).unwrap(), &ups, n))),
    );
    let scores = (vec_f64(1..30, 0.999), proptest::collection::vec(0.0f64..=1.0, 1..5), any::<usize>(), 0.01f64..=1.0);
    go("score bound", outcome(runner().run(&scores, |(s, p, k, k4)| check_score_bound(&s, &p, k, k4))));
    go("null-poison identity", outcome(runner().run(&(any::<u64>(), 1usize..20), |(s, n)| check_null_poison(s, n))));
    go(
        "PGD idempotence",
        outcome(runner().run(&(vec_f64(1..10, 10.0), vec_f64(1..10, 10.0), 1e-3f64..5.0), |(w, g, e)| check_pgd_idempotent(&w, &g, e))),
    );
    let part = (any::<u64>(), 1usize..25, proptest::option::of(0.01f64..10.0));
    go("partition conservation", outcome(runner().run(&part, |(s, c, a)| check_partition(s, c, a))));
    go("determinism", outcome(runner().run(&(0u64..1_000_000, any::<bool>()), |(s, g)| check_determinism(s, g))));
    go(
        "malicious magnitude limit",
        outcome(runner().run(&(vec_f64(1..8, 5.0), vec_f64(1..8, 50.0), vec_f64(1..8, 5.0)), |(p, m, g)| {
            check_magnitude_limit(&p, &m, &g)
        })),
    );
    go("softmax sums to one", outcome(runner().run(&(vec_f64(1..12, 500.0), any::<bool>()), |(d, n)| check_softmax(&d, n))));

    let pass = results.iter().all(|r| r.1.is_ok());
    let detail: Vec<String> = results
        .iter()
        .map(|(n, r)| match r {
            Ok(()) => format!("{n} ok"),
            Err(e) => format!("{n} FAILED {e}"),
        })
        .collect();
    report(7, "invariant suite", pass, &format!("{CASES} cases each: {}", detail.join("; ")));
    assert!(pass);
}
