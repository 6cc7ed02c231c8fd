//! Synthetic classification data, client partitioning and CSV import.

use std::io::Read;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::rng::{self, Purpose, StreamRng};

/// Feature matrix (one row per sample) and aligned integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(config_err(format!("label {bad} outside [0, {num_classes})")));
        }
        let features = if features.is_standard_layout() { features } else { features.as_standard_layout().into_owned() };
        Ok(Self { features, labels, num_classes })
    }

    pub fn empty(feature_dim: usize, num_classes: usize) -> Self {
        Self { features: Array2::zeros((0, feature_dim)), labels: Vec::new(), num_classes }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Reads a headerless or single-header CSV whose last column is an
    /// integer label and whose other columns are features.
    pub fn from_csv<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(reader);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut labels = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(config_err(format!("csv row {i} needs at least one feature and a label")));
            }
            let label_field = rec[rec.len() - 1].trim();
            let label: usize = match label_field.parse() {
                Ok(l) => l,
                Err(_) if i == 0 => continue,
                Err(_) => return Err(config_err(format!("csv row {i}: bad label {label_field:?}"))),
            };
            let feats = rec
                .iter()
                .take(rec.len() - 1)
                .map(|f| f.trim().parse::<f64>().map_err(|_| config_err(format!("csv row {i}: bad feature {f:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != feats.len() {
                    return Err(Error::Shape(format!("csv row {i} has {} features, expected {}", feats.len(), first.len())));
                }
            }
            rows.push(feats);
            labels.push(label);
        }
        if rows.is_empty() {
            return Err(Error::EmptyData("csv contains no samples".into()));
        }
        let dim = rows[0].len();
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let features = Array2::from_shape_vec((labels.len(), dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Dataset::new(features, labels, classes)
    }
}

pub const DEFAULT_SEPARATION: f64 = 0.8;

/// A fixed set of Gaussian class means; samples drawn from it share the
/// same underlying task, so train and test sets stay comparable.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    means: Array2<f64>,
    noise_std: f64,
}

impl SyntheticTask {
    /// Class means have i.i.d. `N(0, separation^2)` coordinates; samples add
    /// unit-variance isotropic noise.
    pub fn new(classes: usize, feature_dim: usize, separation: f64, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(config_err("synthetic task needs at least two classes"));
        }
        if feature_dim == 0 {
            return Err(config_err("feature_dim must be positive"));
        }
        let mut rng = rng::stream(seed, Purpose::TaskMeans, 0, 0);
        let means = Array2::from_shape_fn((classes, feature_dim), |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * separation
        });
        Ok(Self { means, noise_std: 1.0 })
    }

    /// Zeroes the class means of the first `count` features, leaving them as
    /// pure noise that carries no label information.
    pub fn with_nuisance(mut self, count: usize) -> Result<Self> {
        if count >= self.feature_dim() {
            return Err(config_err(format!("{count} nuisance features leave nothing informative")));
        }
        self.means.columns_mut().into_iter().take(count).for_each(|mut c| c.fill(0.0));
        Ok(self)
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn classes(&self) -> usize {
        self.means.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.means.ncols()
    }

    /// `per_class` samples of every class, grouped by label.
    pub fn sample(&self, per_class: usize, rng: &mut StreamRng) -> Result<Dataset> {
        if per_class == 0 {
            return Err(Error::EmptyData("per_class must be positive".into()));
        }
        let (classes, dim) = self.means.dim();
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| config_err(e.to_string()))?;
        let n = classes * per_class;
        let mut features = Array2::zeros((n, dim));
        let mut labels = Vec::with_capacity(n);
        for c in 0..classes {
            for k in 0..per_class {
                let row = c * per_class + k;
                for j in 0..dim {
                    features[[row, j]] = self.means[[c, j]] + noise.sample(rng);
                }
                labels.push(c);
            }
        }
        Dataset::new(features, labels, classes)
    }
}

/// Gaussian class blobs: `classes * per_class` samples, deterministic in `seed`.
pub fn gen_synthetic(classes: usize, per_class: usize, feature_dim: usize, seed: u64) -> Result<Dataset> {
    let task = SyntheticTask::new(classes, feature_dim, DEFAULT_SEPARATION, seed)?;
    task.sample(per_class, &mut rng::stream(seed, Purpose::TrainData, 0, 0))
}

/// How samples are spread over clients.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PartitionSpec {
    #[default]
    Uniform,
    Dirichlet { alpha: f64 },
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PartitionSpec::Dirichlet { alpha } if !(alpha > 0.0 && alpha.is_finite()) => {
                Err(config_err(format!("dirichlet alpha must be positive, got {alpha}")))
            }
            _ => Ok(()),
        }
    }
}

/// Splits `data` into `clients` shards. Every sample lands in exactly one
/// shard; shards may be empty under skewed Dirichlet draws.
pub fn partition(data: &Dataset, clients: usize, spec: PartitionSpec, seed: u64) -> Result<Vec<Dataset>> {
    if clients == 0 {
        return Err(config_err("partition needs at least one client"));
    }
    spec.validate()?;
    let mut rng = rng::stream(seed, Purpose::Partition, 0, 0);
    let assignment = match spec {
        PartitionSpec::Uniform => uniform_indices(data.len(), clients, &mut rng),
        PartitionSpec::Dirichlet { alpha } => dirichlet_indices(data, clients, alpha, &mut rng)?,
    };
    Ok(assignment.iter().map(|idx| data.select(idx)).collect())
}

fn uniform_indices(n: usize, clients: usize, rng: &mut StreamRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let base = n / clients;
    let extra = n % clients;
    let mut out = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let size = base + usize::from(c < extra);
        let mut shard = order[start..start + size].to_vec();
        shard.sort_unstable();
        out.push(shard);
        start += size;
    }
    out
}

fn dirichlet_indices(data: &Dataset, clients: usize, alpha: f64, rng: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); clients];
    for label in 0..data.num_classes {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] == label).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(rng);
        let props = sample_dirichlet(clients, alpha, rng)?;
        let n = idx.len();
        let mut cum = 0.0;
        let mut start = 0;
        for (c, p) in props.iter().enumerate() {
            cum += p;
            let end = if c + 1 == clients { n } else { ((cum * n as f64).floor() as usize).min(n) };
            let end = end.max(start);
            out[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for shard in &mut out {
        shard.sort_unstable();
    }
    Ok(out)
}

/// Symmetric Dirichlet draw. Gamma variates are taken in log space
/// (`Gamma(a) = Gamma(a + 1) * U^(1/a)`) so very small `alpha` does not
/// underflow every component to zero.
pub fn sample_dirichlet(k: usize, alpha: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).map_err(|e| config_err(e.to_string()))?;
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_counts_and_determinism() {
        let a = gen_synthetic(2, 50, 5, 11).unwrap();
        assert_eq!(a.len(), 100);
        assert_eq!(a.label_counts(), vec![50, 50]);
        let b = gen_synthetic(2, 50, 5, 11).unwrap();
        assert_eq!(a, b);
        assert!(matches!(gen_synthetic(2, 0, 5, 11), Err(Error::EmptyData(_))));
        assert!(gen_synthetic(1, 5, 5, 11).is_err());
    }

    #[test]
    fn uniform_partition_even() {
        let d = gen_synthetic(4, 25, 3, 1).unwrap();
        let shards = partition(&d, 4, PartitionSpec::Uniform, 9).unwrap();
        assert!(shards.iter().all(|s| s.len() == 25));
        let shards = partition(&d, 7, PartitionSpec::Uniform, 9).unwrap();
        let sizes: Vec<_> = shards.iter().map(Dataset::len).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 100);
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn dirichlet_rejects_nonpositive_alpha() {
        let d = gen_synthetic(2, 5, 3, 1).unwrap();
        assert!(partition(&d, 3, PartitionSpec::Dirichlet { alpha: 0.0 }, 1).is_err());
    }

    #[test]
    fn dirichlet_tiny_alpha_is_finite() {
        let mut r = rng::seeded(3);
        for _ in 0..100 {
            let p = sample_dirichlet(10, 0.01, &mut r).unwrap();
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_import_with_header() {
        let text = "f0,f1,label\n0.5,1.0,1\n-0.5,2.0,0\n";
        let d = Dataset::from_csv(text.as_bytes(), None).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![1, 0]);
        assert_eq!(d.num_classes, 2);
        assert_eq!(d.features[[1, 1]], 2.0);
        assert!(Dataset::from_csv("1.0,x\n2.0,y\n".as_bytes(), None).is_err());
    }
}
