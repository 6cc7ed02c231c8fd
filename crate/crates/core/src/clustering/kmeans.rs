//! Seeded K-Means with k-means++ seeding and restarts.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{config_err, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Array2<f64>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn plus_plus_init(data: ArrayView2<f64>, k: usize, rng: &mut StreamRng) -> Array2<f64> {
    let n = data.nrows();
    let mut centers = Array2::zeros((k, data.ncols()));
    centers.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).assign(&data.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(data.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(data: ArrayView2<f64>, mut centers: Array2<f64>, max_iter: usize) -> KMeansResult {
    let (n, dim) = data.dim();
    let k = centers.nrows();
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (j, d) = nearest(data.row(i), &centers);
            dists[i] = d;
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            sums.row_mut(labels[i]).scaled_add(1.0, &data.row(i));
            counts[labels[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            } else {
                // re-seed an empty cluster at the worst-fit point
                let far = (0..n).fold(0, |b, i| if dists[i] > dists[b] { i } else { b });
                centers.row_mut(j).assign(&data.row(far));
                dists[far] = 0.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (j, d) = nearest(data.row(i), &centers);
        labels[i] = j;
        inertia += d;
    }
    KMeansResult { centers, labels, inertia }
}

/// Best of `restarts` runs by inertia; the earliest run wins ties.
pub fn kmeans(data: ArrayView2<f64>, k: usize, restarts: usize, max_iter: usize, rng: &mut StreamRng) -> Result<KMeansResult> {
    if k == 0 || k > data.nrows() {
        return Err(config_err(format!("cannot form {k} clusters from {} points", data.nrows())));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..restarts.max(1) {
        let init = plus_plus_init(data, k, rng);
        let run = lloyd(data, init, max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}
