//! Graph-clustering defense: benign-score bookkeeping, cluster verdicts,
//! percentile filtering, norm clipping, dual aggregation and adaptive
//! poison elimination.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::gae::{self, hard_labels, GaeConfig, Losses};
use crate::error::{config_err, Error, Result};
use crate::graph::{construct_graph, AttributedGraph, EdgeTransform, GraphState};
use crate::model::FlatModel;
use crate::rng::{self, Purpose};
use crate::sim::{AggregationInput, AggregationOutput, Aggregator, ClientUpdateRecord};
use crate::stats::{median, percentile};

/// Sign of the exponent in the dual-aggregation softmax over distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxSign {
    /// Weights proportional to `exp(d_i)`.
    #[default]
    AsWritten,
    /// Weights proportional to `exp(-d_i)`.
    Negated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DefenseConfig {
    /// Momentum factor for node features.
    pub kappa1: f64,
    /// Momentum factor for the adjacency.
    pub kappa2: f64,
    pub kappa3: f64,
    pub kappa4: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub gamma: f64,
    pub ape_enabled: bool,
    pub softmax_sign: SoftmaxSign,
    pub edge_transform: EdgeTransform,
    /// Variance of the initial benign scores.
    pub score_init_var: f64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kappa1: 0.1,
            kappa2: 0.1,
            kappa3: 0.3,
            kappa4: 0.5,
            alpha1: 25.0,
            alpha2: 75.0,
            gamma: 0.01,
            ape_enabled: true,
            softmax_sign: SoftmaxSign::AsWritten,
            edge_transform: EdgeTransform::Literal,
            score_init_var: 1e-3,
        }
    }
}

impl DefenseConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, k) in [("kappa1", self.kappa1), ("kappa2", self.kappa2)] {
            if !(0.0..=1.0).contains(&k) {
                return Err(config_err(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(self.kappa3 > 0.0) {
            return Err(config_err("kappa3 must be positive"));
        }
        if !(self.kappa4 > 0.0 && self.kappa4 <= 1.0) {
            return Err(config_err("kappa4 must lie in (0, 1]"));
        }
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2)] {
            if !(0.0..=100.0).contains(&a) {
                return Err(config_err(format!("{name} must lie in [0, 100]")));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(config_err("gamma must be positive"));
        }
        if !(self.score_init_var > 0.0) {
            return Err(config_err("score_init_var must be positive"));
        }
        Ok(())
    }
}

/// Persistent per-client benign score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenignScores {
    pub s: Vec<f64>,
}

impl BenignScores {
    /// Scores drawn i.i.d. from `N(0, var)`.
    pub fn init(total_clients: usize, var: f64, seed: u64) -> Self {
        let dist = Normal::new(0.0, var.sqrt()).expect("finite variance");
        let mut r = rng::stream(seed, Purpose::BenignScoreInit, 0, 0);
        Self { s: (0..total_clients).map(|_| dist.sample(&mut r)).collect() }
    }

    pub fn select(&self, ids: &[usize]) -> Vec<f64> {
        ids.iter().map(|&i| self.s[i]).collect()
    }
}

/// Why a round could not produce a two-sided verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degenerate {
    /// Fewer than two nonempty clusters.
    SingleCluster,
    /// Nothing survived the percentile filter.
    EmptyBenign,
}

impl std::fmt::Display for Degenerate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Degenerate::SingleCluster => write!(f, "fewer than two nonempty clusters"),
            Degenerate::EmptyBenign => write!(f, "no client passed the benign filter"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterScores {
    /// `None` for empty clusters.
    pub p: Vec<Option<f64>>,
    pub sizes: Vec<usize>,
    pub p_plus: usize,
    pub p_minus: usize,
}

/// `p_j = kappa3 * size_j / m + mean score of cluster j` over nonempty
/// clusters; `p_plus` is the argmax, `p_minus` the argmin among the other
/// clusters, both lowest-index on ties.
pub fn cluster_scores(p_hard: &Array2<f64>, s_m: &[f64], kappa3: f64) -> std::result::Result<ClusterScores, Degenerate> {
    let (m, q) = p_hard.dim();
    assert_eq!(m, s_m.len(), "one score per assigned row");
    let labels = hard_labels(p_hard);
    let mut sizes = vec![0usize; q];
    let mut sums = vec![0.0; q];
    for (&k, &s) in labels.iter().zip(s_m) {
        sizes[k] += 1;
        sums[k] += s;
    }
    let p: Vec<Option<f64>> = (0..q)
        .map(|j| (sizes[j] > 0).then(|| kappa3 / m as f64 * sizes[j] as f64 + sums[j] / sizes[j] as f64))
        .collect();
    let nonempty: Vec<usize> = (0..q).filter(|&j| p[j].is_some()).collect();
    if nonempty.len() < 2 {
        return Err(Degenerate::SingleCluster);
    }
    let val = |j: usize| p[j].expect("nonempty");
    let p_plus = nonempty.iter().copied().fold(nonempty[0], |b, j| if val(j) > val(b) { j } else { b });
    let rest: Vec<usize> = nonempty.into_iter().filter(|&j| j != p_plus).collect();
    let p_minus = rest.iter().copied().fold(rest[0], |b, j| if val(j) < val(b) { j } else { b });
    Ok(ClusterScores { p, sizes, p_plus, p_minus })
}

/// `‖z_i - q_{label(i)}‖` for every row.
pub fn assignment_distances(z: &Array2<f64>, centers: &Array2<f64>, labels: &[usize]) -> Vec<f64> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &k)| z.row(i).iter().zip(centers.row(k).iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .collect()
}

/// Rows of the benign cluster whose score is at least the `alpha1`
/// percentile of all selected scores and whose distance is at most the
/// `alpha2` percentile of the benign cluster's distances.
pub fn filter_benign(
    c_hat_plus: &[usize],
    d: &[f64],
    s_m: &[f64],
    alpha1: f64,
    alpha2: f64,
) -> std::result::Result<Vec<usize>, Degenerate> {
    if c_hat_plus.is_empty() {
        return Err(Degenerate::EmptyBenign);
    }
    let s_cut = percentile(s_m, alpha1).expect("non-empty scores");
    let d_plus: Vec<f64> = c_hat_plus.iter().map(|&i| d[i]).collect();
    let d_cut = percentile(&d_plus, alpha2).expect("non-empty distances");
    let kept: Vec<usize> = c_hat_plus.iter().copied().filter(|&i| s_m[i] >= s_cut && d[i] <= d_cut).collect();
    if kept.is_empty() {
        Err(Degenerate::EmptyBenign)
    } else {
        Ok(kept)
    }
}

/// Multiplicative score step followed by `tanh` over the full vector.
/// `c_plus` pairs each benign client id with its soft assignment to the
/// benign cluster.
pub fn update_benign_scores(s: &[f64], c_plus: &[(usize, f64)], c_minus: &[usize], kappa4: f64) -> Vec<f64> {
    let mut out = s.to_vec();
    for &(i, prob) in c_plus {
        out[i] += kappa4 * s[i].abs() * prob;
    }
    for &i in c_minus {
        out[i] -= kappa4 * s[i].abs();
    }
    out.iter_mut().for_each(|v| *v = v.tanh());
    out
}

/// Running mean of per-round median update norms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct NormTracker {
    pub n: f64,
    pub rounds: usize,
}

impl NormTracker {
    /// Folds in one round's update norms and returns the new mean.
    pub fn update(&mut self, norms: &[f64]) -> Result<f64> {
        let med = median(norms).ok_or_else(|| Error::EmptyData("no update norms this round".into()))?;
        self.rounds += 1;
        self.n += (med - self.n) / self.rounds as f64;
        Ok(self.n)
    }
}

/// `G_prev + ΔW * min(1, n_r / ‖ΔW‖)` for every record.
pub fn clip_updates(records: &[ClientUpdateRecord], g_prev: &FlatModel, n_r: f64) -> Result<Vec<FlatModel>> {
    records
        .iter()
        .map(|r| {
            let norm = r.update.norm();
            let scale = if norm > n_r { n_r / norm } else { 1.0 };
            let mut w = g_prev.clone();
            w.axpy(scale, &r.update)?;
            Ok(w)
        })
        .collect()
}

/// Softmax of the distances, max-shifted.
pub fn softmax_weights(d: &[f64], sign: SoftmaxSign) -> Vec<f64> {
    let sgn = match sign {
        SoftmaxSign::AsWritten => 1.0,
        SoftmaxSign::Negated => -1.0,
    };
    let max = d.iter().map(|v| sgn * v).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = d.iter().map(|v| (sgn * v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Inputs for [`aggregate_and_eliminate`]. Index sets refer to rows of
/// `clipped`, `d` and `s_m` (the selected clients in ascending id order).
#[derive(Debug, Clone, Copy)]
pub struct Elimination<'a> {
    pub clipped: &'a [FlatModel],
    pub c_plus: &'a [usize],
    pub c_minus: &'a [usize],
    pub d: &'a [f64],
    pub s_m: &'a [f64],
    pub g_prev: &'a FlatModel,
    pub n_r: f64,
    pub gamma: f64,
    pub ape_enabled: bool,
    pub sign: SoftmaxSign,
}

fn dual_aggregate(rows: &[usize], e: &Elimination<'_>) -> Result<FlatModel> {
    let d: Vec<f64> = rows.iter().map(|&i| e.d[i]).collect();
    let weights = softmax_weights(&d, e.sign);
    let mut delta = e.g_prev.zeros_like();
    for (&i, &w) in rows.iter().zip(&weights) {
        delta.axpy(w, &e.clipped[i].sub(e.g_prev)?)?;
    }
    e.g_prev.add(&delta)
}

pub fn aggregate_and_eliminate(e: &Elimination<'_>) -> Result<FlatModel> {
    if e.c_plus.is_empty() {
        return Err(Error::Aggregation("benign set is empty".into()));
    }
    let g_plus = dual_aggregate(e.c_plus, e)?;
    if e.c_minus.is_empty() || !e.ape_enabled {
        return Ok(g_plus);
    }
    let g_minus = dual_aggregate(e.c_minus, e)?;
    let g_minus_bar = limit_magnitude(&g_plus, &g_minus, e.g_prev)?;
    let mass_minus: f64 = e.c_minus.iter().map(|&i| e.s_m[i].abs()).sum();
    let mass_all: f64 = e.s_m.iter().map(|v| v.abs()).sum();
    let ratio = if mass_all > 0.0 { mass_minus / mass_all } else { 0.0 };
    let coef = e.gamma * ratio * (1.0 + e.n_r).ln();
    let mut out = g_plus.clone();
    out.axpy(coef, &g_plus.sub(&g_minus_bar)?)?;
    Ok(out)
}

/// `G_prev + (G⁻ - G_prev) * min(1, ‖G⁺ - G_prev‖ / ‖G⁻ - G_prev‖)`.
pub fn limit_magnitude(g_plus: &FlatModel, g_minus: &FlatModel, g_prev: &FlatModel) -> Result<FlatModel> {
    let up = g_plus.sub(g_prev)?.norm();
    let dm = g_minus.sub(g_prev)?;
    let dn = dm.norm();
    let scale = if dn > up { up / dn } else { 1.0 };
    let mut out = g_prev.clone();
    out.axpy(scale, &dm)?;
    Ok(out)
}

/// Per-round defense record, written to the JSON-lines report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseDiagnostics {
    pub num_clusters: usize,
    pub cluster_sizes: Vec<usize>,
    pub cluster_probs: Vec<Option<f64>>,
    pub p_plus: Option<usize>,
    pub p_minus: Option<usize>,
    pub c_hat_plus: Vec<usize>,
    pub c_plus: Vec<usize>,
    pub c_minus: Vec<usize>,
    pub n_r: f64,
    pub losses: Losses,
    pub degenerate: Option<Degenerate>,
}

/// Result of one defended round.
#[derive(Debug, Clone)]
pub struct DefenseOutcome {
    pub model: FlatModel,
    pub c_plus: Vec<usize>,
    pub c_minus: Vec<usize>,
    pub diagnostics: DefenseDiagnostics,
}

/// The full defense as a stateful aggregator.
#[derive(Debug, Clone)]
pub struct GuardFl {
    cfg: DefenseConfig,
    gae: GaeConfig,
    seed: u64,
    total_clients: usize,
    scores: BenignScores,
    tracker: NormTracker,
    graph: GraphState,
    dump_graph: Option<PathBuf>,
    dump_clustering: Option<PathBuf>,
}

impl GuardFl {
    pub fn new(cfg: DefenseConfig, gae: GaeConfig, total_clients: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        gae.validate()?;
        Ok(Self {
            scores: BenignScores::init(total_clients, cfg.score_init_var, seed),
            graph: GraphState::new(cfg.kappa1, cfg.kappa2)?,
            tracker: NormTracker::default(),
            cfg,
            gae,
            seed,
            total_clients,
            dump_graph: None,
            dump_clustering: None,
        })
    }

    /// Directories for per-round CSV dumps of the graph and the clustering.
    pub fn with_dumps(mut self, graph: Option<PathBuf>, clustering: Option<PathBuf>) -> Self {
        self.dump_graph = graph;
        self.dump_clustering = clustering;
        self
    }

    pub fn scores(&self) -> &BenignScores {
        &self.scores
    }

    pub fn tracker(&self) -> &NormTracker {
        &self.tracker
    }

    pub fn graph(&self) -> Option<&AttributedGraph> {
        self.graph.current()
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.cfg
    }

    /// One server step. `records` must be sorted by ascending client id and
    /// `global` is the model that was broadcast this round.
    pub fn defend_round(&mut self, round: usize, records: &[ClientUpdateRecord], global: &FlatModel) -> Result<DefenseOutcome> {
        let ids: Vec<usize> = records.iter().map(|r| r.client_id).collect();
        if ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Aggregation("records must be sorted by ascending client id".into()));
        }
        let raw = construct_graph(self.total_clients, records, global, self.cfg.edge_transform)?;
        let smoothed = self.graph.smooth(raw)?;
        if let Some(dir) = &self.dump_graph {
            dump_matrix(&dir.join(format!("round_{round:05}_x.csv")), &smoothed.x)?;
            dump_matrix(&dir.join(format!("round_{round:05}_e.csv")), &smoothed.e)?;
        }
        let sub = gae::subgraph_extract(&smoothed, &ids)?;
        let mut rng = rng::stream(self.seed, Purpose::GaeInit, round as u64, 0);
        let fit = gae::fit(&sub, &self.gae, &mut rng)?;
        if let Some(dir) = &self.dump_clustering {
            dump_matrix(&dir.join(format!("round_{round:05}_z.csv")), &fit.z)?;
            dump_matrix(&dir.join(format!("round_{round:05}_p.csv")), &fit.p)?;
            dump_matrix(&dir.join(format!("round_{round:05}_centers.csv")), &fit.centers)?;
        }

        let s_m = self.scores.select(&ids);
        let norms: Vec<f64> = records.iter().map(|r| r.update.norm()).collect();
        let n_r = self.tracker.update(&norms)?;
        let clipped = clip_updates(records, global, n_r)?;
        let labels = hard_labels(&fit.p_hard);
        let d = assignment_distances(&fit.z, &fit.centers, &labels);

        let mut diag = DefenseDiagnostics {
            num_clusters: fit.num_clusters,
            cluster_sizes: (0..fit.num_clusters).map(|k| labels.iter().filter(|&&l| l == k).count()).collect(),
            cluster_probs: Vec::new(),
            p_plus: None,
            p_minus: None,
            c_hat_plus: Vec::new(),
            c_plus: Vec::new(),
            c_minus: Vec::new(),
            n_r,
            losses: fit.final_losses,
            degenerate: None,
        };

        let verdict = cluster_scores(&fit.p_hard, &s_m, self.cfg.kappa3).and_then(|cs| {
            let hat: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == cs.p_plus).collect();
            diag.cluster_probs = cs.p.clone();
            diag.p_plus = Some(cs.p_plus);
            diag.p_minus = Some(cs.p_minus);
            diag.c_hat_plus = hat.iter().map(|&i| ids[i]).collect();
            let kept = filter_benign(&hat, &d, &s_m, self.cfg.alpha1, self.cfg.alpha2)?;
            let minus: Vec<usize> = (0..ids.len()).filter(|&i| labels[i] == cs.p_minus).collect();
            Ok((cs, kept, minus))
        });

        let (cs, c_plus, c_minus) = match verdict {
            Ok(v) => v,
            Err(reason) => {
                log::debug!("round {round}: degenerate verdict ({reason}); using clipped FedAvg");
                diag.degenerate = Some(reason);
                let items = clipped.iter().zip(records).map(|(w, r)| (r.client_id, w, r.sample_count as f64)).collect();
                let model = crate::sim::weighted_mean(items)?;
                return Ok(DefenseOutcome { model, c_plus: Vec::new(), c_minus: Vec::new(), diagnostics: diag });
            }
        };

        let plus_ids: Vec<(usize, f64)> = c_plus.iter().map(|&i| (ids[i], fit.p[[i, cs.p_plus]])).collect();
        let minus_ids: Vec<usize> = c_minus.iter().map(|&i| ids[i]).collect();
        self.scores.s = update_benign_scores(&self.scores.s, &plus_ids, &minus_ids, self.cfg.kappa4);

        let model = aggregate_and_eliminate(&Elimination {
            clipped: &clipped,
            c_plus: &c_plus,
            c_minus: &c_minus,
            d: &d,
            s_m: &s_m,
            g_prev: global,
            n_r,
            gamma: self.cfg.gamma,
            ape_enabled: self.cfg.ape_enabled,
            sign: self.cfg.softmax_sign,
        })?;
        diag.c_plus = plus_ids.iter().map(|&(i, _)| i).collect();
        diag.c_minus = minus_ids.clone();
        Ok(DefenseOutcome { model, c_plus: diag.c_plus.clone(), c_minus: minus_ids, diagnostics: diag })
    }
}

impl Aggregator for GuardFl {
    fn name(&self) -> &'static str {
        "guardfl"
    }

    fn aggregate(&mut self, input: AggregationInput<'_>) -> Result<AggregationOutput> {
        let out = self.defend_round(input.round, input.records, input.global)?;
        Ok(AggregationOutput { model: out.model, flagged: out.c_minus, diagnostics: Some(out.diagnostics) })
    }
}

/// Row-major CSV with 17 significant digits.
pub fn dump_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for row in m.rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(f, "{}", line.join(","))?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fm(v: &[f64]) -> FlatModel {
        FlatModel::from_vec(v.to_vec())
    }

    #[test]
    fn cluster_score_example() {
        let hard = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let cs = cluster_scores(&hard, &[0.5, 0.5, -0.5, -0.5], 0.3).unwrap();
        assert!((cs.p[0].unwrap() - 0.65).abs() < 1e-12);
        assert!((cs.p[1].unwrap() + 0.35).abs() < 1e-12);
        assert_eq!((cs.p_plus, cs.p_minus), (0, 1));
    }

    #[test]
    fn cluster_score_degenerate_and_ties() {
        let one = array![[1.0, 0.0], [1.0, 0.0]];
        assert_eq!(cluster_scores(&one, &[0.1, 0.2], 0.3), Err(Degenerate::SingleCluster));
        let tie = array![[1.0, 0.0], [0.0, 1.0]];
        let cs = cluster_scores(&tie, &[0.2, 0.2], 0.3).unwrap();
        assert_eq!((cs.p_plus, cs.p_minus), (0, 1));
        let gap = array![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let cs = cluster_scores(&gap, &[0.1, 0.3], 0.3).unwrap();
        assert_eq!(cs.p[1], None);
        assert_eq!((cs.p_plus, cs.p_minus), (2, 0));
    }

    #[test]
    fn filter_examples() {
        let all = filter_benign(&[0, 1, 2], &[1.0; 3], &[0.3; 3], 25.0, 75.0).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
        // selected scores (0.9, 0.8, 0.1, 0.7, 0.4, 0.3); P25 over these is 0.325
        let s = [0.9, 0.8, 0.1, 0.7, 0.4, 0.3];
        let kept = filter_benign(&[0, 1, 2, 3], &[0.0; 6], &s, 25.0, 75.0).unwrap();
        assert_eq!(kept, vec![0, 1, 3]);
        assert_eq!(filter_benign(&[2], &[0.0; 6], &s, 25.0, 75.0), Err(Degenerate::EmptyBenign));
        assert_eq!(filter_benign(&[0], &[0.0; 6], &s, 25.0, 75.0).unwrap(), vec![0]);
        assert_eq!(filter_benign(&[], &[], &[], 25.0, 75.0), Err(Degenerate::EmptyBenign));
    }

    #[test]
    fn score_update_examples() {
        let s = update_benign_scores(&[0.5, 0.5, 0.0, 0.2], &[(0, 1.0), (2, 1.0)], &[1], 0.5);
        assert!((s[0] - 0.75f64.tanh()).abs() < 1e-15);
        assert!((s[0] - 0.6351).abs() < 1e-4);
        assert!((s[1] - 0.2449).abs() < 1e-4);
        assert_eq!(s[2], 0.0);
        assert_eq!(s[3], 0.2f64.tanh());
    }

    #[test]
    fn norm_tracker_running_mean() {
        let mut t = NormTracker::default();
        assert_eq!(t.update(&[2.0]).unwrap(), 2.0);
        assert_eq!(t.update(&[3.0, 4.0, 5.0]).unwrap(), 3.0);
        assert!(t.update(&[]).is_err());
    }

    fn record(id: usize, delta: &[f64]) -> ClientUpdateRecord {
        let u = fm(delta);
        ClientUpdateRecord { client_id: id, weights: u.clone(), prev_update: u.zeros_like(), update: u, sample_count: 1 }
    }

    #[test]
    fn clipping_examples() {
        let g = fm(&[1.0, 1.0]);
        let recs = [record(0, &[6.0, 8.0]), record(1, &[0.3, 0.4]), record(2, &[0.0, 0.0])];
        let c = clip_updates(&recs, &g, 5.0).unwrap();
        assert!((c[0].distance(&g).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(c[1].params(), &[1.3, 1.4]);
        assert_eq!(c[2], g);
    }

    #[test]
    fn elimination_cases() {
        let g = fm(&[0.0, 0.0]);
        let clipped = vec![fm(&[1.0, 0.0]), fm(&[3.0, 0.0]), fm(&[-4.0, 0.0])];
        let d = [0.1, 0.7, 0.2];
        let s = [0.2, 0.1, -0.3];
        let base = Elimination {
            clipped: &clipped,
            c_plus: &[0],
            c_minus: &[],
            d: &d,
            s_m: &s,
            g_prev: &g,
            n_r: 1.0,
            gamma: 0.01,
            ape_enabled: true,
            sign: SoftmaxSign::AsWritten,
        };
        assert_eq!(aggregate_and_eliminate(&base).unwrap(), clipped[0]);

        let both = Elimination { c_plus: &[0, 1], c_minus: &[2], ..base };
        let w = softmax_weights(&[0.1, 0.7], SoftmaxSign::AsWritten);
        let g_plus = w[0] * 1.0 + w[1] * 3.0;
        // G⁻ = -4 is limited to magnitude |G⁺|
        let coef = 0.01 * (0.3 / 0.6) * 2f64.ln();
        let expected = g_plus + coef * (g_plus - (-g_plus));
        let got = aggregate_and_eliminate(&both).unwrap();
        assert!((got.params()[0] - expected).abs() < 1e-12);

        let off = Elimination { ape_enabled: false, ..both };
        let plus_only = Elimination { c_minus: &[], ..both };
        assert_eq!(aggregate_and_eliminate(&off).unwrap(), aggregate_and_eliminate(&plus_only).unwrap());
    }

    #[test]
    fn magnitude_limit_halves() {
        let g = fm(&[0.0]);
        let out = limit_magnitude(&fm(&[1.0]), &fm(&[-2.0]), &g).unwrap();
        assert_eq!(out.params(), &[-1.0]);
    }

    #[test]
    fn softmax_sign() {
        let a = softmax_weights(&[0.0, 1.0], SoftmaxSign::AsWritten);
        let b = softmax_weights(&[0.0, 1.0], SoftmaxSign::Negated);
        assert!(a[1] > a[0] && b[0] > b[1]);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
