//! Builds a full experiment from its configuration and runs it round by
//! round, scoring every round against held-out clean and triggered data.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::{compute_asr, compute_ds, triggered_copy, ConvergenceMonitor, DetectionCounts};
use super::report::{write_jsonl_line, write_summary_csv, RoundReport};
use crate::attacks::AttackKind;
use crate::baselines::{Krum, MultiKrum, Ndc, WeakDp};
use crate::data::{partition, Dataset, SyntheticTask};
use crate::defense::GuardFl;
use crate::error::Result;
use crate::rng::{self, Purpose};
use crate::sim::{Aggregator, DefenseKind, FedAvg, Simulation};
use crate::task::{evaluate, TaskModel};

/// Client shards plus the harness-only evaluation sets.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub task: TaskModel,
    pub clients: Vec<Dataset>,
    pub test: Dataset,
    /// Test set with the full trigger applied and original labels kept.
    pub backdoor: Dataset,
    pub probe: Dataset,
}

pub fn build_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let d = &cfg.data;
    let seed = cfg.sim.seed;
    let gen = SyntheticTask::new(d.classes, d.feature_dim, d.separation, seed)?.with_nuisance(d.nuisance_dims)?;
    let train = gen.sample(d.train_per_class, &mut rng::stream(seed, Purpose::TrainData, 0, 0))?;
    let test = gen.sample(d.test_per_class, &mut rng::stream(seed, Purpose::TestData, 0, 0))?;
    let probe = gen.sample(d.probe_per_class, &mut rng::stream(seed, Purpose::ProbeData, 0, 0))?;
    let clients = partition(&train, cfg.sim.total_clients, cfg.partition, seed)?;
    let backdoor = triggered_copy(&cfg.attack.trigger(), &test);
    Ok(ExperimentData { task: TaskModel::new(&d.layer_dims())?, clients, test, backdoor, probe })
}

pub fn build_aggregator(cfg: &ExperimentConfig) -> Result<Box<dyn Aggregator>> {
    let b = &cfg.baselines;
    Ok(match cfg.sim.defense {
        DefenseKind::None => Box::new(FedAvg),
        DefenseKind::Guardfl => Box::new(
            GuardFl::new(cfg.defense, cfg.gae, cfg.sim.total_clients, cfg.sim.seed)?
                .with_dumps(cfg.output.dump_graph.clone(), cfg.output.dump_clustering.clone()),
        ),
        DefenseKind::Krum => Box::new(Krum { f: b.krum_f }),
        DefenseKind::MultiKrum => Box::new(MultiKrum { f: b.krum_f }),
        DefenseKind::Ndc => Box::new(Ndc { threshold: b.ndc_threshold }),
        DefenseKind::WeakDp => Box::new(WeakDp { sigma: b.weak_dp_sigma, seed: cfg.sim.seed }),
    })
}

/// End-of-run numbers. Percentages for ASR/ACC/DS, fractions for P/R/F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rounds: usize,
    pub final_asr: f64,
    pub final_acc: f64,
    pub final_ds: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Detection counts pooled over the rounds in which the attack was live.
    pub detection: DetectionCounts,
}

impl Summary {
    pub fn table(&self) -> String {
        format!(
            "{:>6} {:>8} {:>8} {:>8} {:>9} {:>8} {:>8}\n{:>6} {:>8.2} {:>8.2} {:>8.2} {:>9.4} {:>8.4} {:>8.4}",
            "rounds",
            "ASR",
            "ACC",
            "DS",
            "precision",
            "recall",
            "F1",
            self.rounds,
            self.final_asr,
            self.final_acc,
            self.final_ds,
            self.precision,
            self.recall,
            self.f1
        )
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
}

pub struct Experiment {
    cfg: ExperimentConfig,
    sim: Simulation,
    test: Dataset,
    backdoor: Dataset,
    probe: Dataset,
    monitor: ConvergenceMonitor,
    detection: DetectionCounts,
    last: Option<RoundReport>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let data = build_data(&cfg)?;
        let aggregator = build_aggregator(&cfg)?;
        let sim = Simulation::new(cfg.sim.clone(), cfg.train, cfg.attack.clone(), data.task, data.clients, aggregator)?;
        Ok(Self {
            cfg,
            sim,
            test: data.test,
            backdoor: data.backdoor,
            probe: data.probe,
            monitor: ConvergenceMonitor::new(),
            detection: DetectionCounts::default(),
            last: None,
        })
    }

    pub fn simulation(&self) -> &Simulation {
        &self.sim
    }

    pub fn monitor(&self) -> &ConvergenceMonitor {
        &self.monitor
    }

    pub fn is_finished(&self) -> bool {
        self.sim.is_finished()
    }

    fn attack_live(&self, round: usize) -> bool {
        self.cfg.attack.kind != AttackKind::None && round >= self.cfg.attack.start_round
    }

    /// Runs one round and scores the resulting global model.
    pub fn step(&mut self) -> Result<RoundReport> {
        let task = self.sim.task().clone();
        let (grad_norm_sq, grad_norm_sq_avg) = self.monitor.observe(&task, &self.sim.state().global_model, &self.probe)?;
        let out = self.sim.run_round()?;
        let global = &self.sim.state().global_model;
        let acc = evaluate(&task, global, &self.test)?;
        let asr = compute_asr(&task, global, &self.backdoor, self.cfg.attack.target_label)?;
        let cfg = self.sim.config().clone();
        let counts = DetectionCounts::from_round(&out.selected, &out.flagged, |id| cfg.is_compromised(id));
        if self.attack_live(out.round) {
            self.detection.add(counts);
        }
        let detected_benign = out.selected.iter().copied().filter(|id| !out.flagged.contains(id)).collect();
        let report = RoundReport {
            round: out.round,
            asr: 100.0 * asr,
            acc: 100.0 * acc,
            ds: 100.0 * compute_ds(asr, acc),
            selected: out.selected,
            detected_malicious: out.flagged,
            detected_benign,
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            median_update_norm: out.median_update_norm,
            n_r: out.diagnostics.as_ref().map(|d| d.n_r),
            learning_rate: out.learning_rate,
            grad_norm_sq,
            grad_norm_sq_avg,
            diagnostics: out.diagnostics,
        };
        self.last = Some(report.clone());
        Ok(report)
    }

    pub fn summary(&self) -> Summary {
        let (precision, recall, f1) = self.detection.prf();
        let last = self.last.as_ref();
        Summary {
            rounds: last.map_or(0, |r| r.round),
            final_asr: last.map_or(0.0, |r| r.asr),
            final_acc: last.map_or(0.0, |r| r.acc),
            final_ds: last.map_or(0.0, |r| r.ds),
            precision,
            recall,
            f1,
            detection: self.detection,
        }
    }

    /// Runs every remaining round, handing each report to `sink`.
    pub fn run_with(&mut self, mut sink: impl FnMut(&RoundReport) -> Result<()>) -> Result<ExperimentResult> {
        let mut reports = Vec::with_capacity(self.cfg.sim.max_rounds);
        while !self.is_finished() {
            let r = self.step()?;
            sink(&r)?;
            log::info!("round {:>4}: asr {:6.2} acc {:6.2} flagged {:?}", r.round, r.asr, r.acc, r.detected_malicious);
            reports.push(r);
        }
        Ok(ExperimentResult { reports, summary: self.summary() })
    }

    pub fn run(&mut self) -> Result<ExperimentResult> {
        self.run_with(|_| Ok(()))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs the experiment and writes the JSON-lines report and CSV summary to
/// the paths in `cfg.output`, when set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut exp = Experiment::new(cfg.clone())?;
    let mut jsonl = cfg.output.jsonl.as_deref().map(create).transpose()?;
    let result = exp.run_with(|r| match jsonl.as_mut() {
        Some(w) => write_jsonl_line(w, r),
        None => Ok(()),
    })?;
    if let Some(mut w) = jsonl {
        w.flush()?;
    }
    if let Some(path) = &cfg.output.csv {
        let mut w = create(path)?;
        write_summary_csv(&mut w, &result.reports)?;
        w.flush()?;
    }
    Ok(result)
}
