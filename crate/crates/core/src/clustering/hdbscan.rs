//! Density-based hierarchical clustering (HDBSCAN) for small point sets.
//!
//! Mutual-reachability distances feed a minimum spanning tree, the tree is
//! turned into a single-linkage hierarchy, condensed with a minimum cluster
//! size, and flat clusters are picked by excess of mass. The root is never
//! selected, so a single dense blob yields zero clusters.

use ndarray::ArrayView2;

/// Upper bound on `1 / distance`, used when points coincide.
const MAX_LAMBDA: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Neighbour count for core distances, counting the point itself.
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self { min_cluster_size: 2, min_samples: 2 }
    }
}

#[derive(Debug, Clone)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn euclid(data: &ArrayView2<f64>, i: usize, j: usize) -> f64 {
    data.row(i).iter().zip(data.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

fn lambda_of(dist: f64) -> f64 {
    if dist > 1.0 / MAX_LAMBDA {
        1.0 / dist
    } else {
        MAX_LAMBDA
    }
}

/// Minimum spanning tree of the mutual-reachability graph (Prim, O(n^2)),
/// edges sorted by weight.
fn mst(data: &ArrayView2<f64>, min_samples: usize) -> Vec<(usize, usize, f64)> {
    let n = data.nrows();
    let dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| euclid(data, i, j)).collect()).collect();
    let k = min_samples.saturating_sub(1).min(n - 1);
    let core: Vec<f64> = dist
        .iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[k]
        })
        .collect();
    let mr = |i: usize, j: usize| dist[i][j].max(core[i]).max(core[j]);

    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if !in_tree[j] {
                let d = mr(current, j);
                if d < best[j] {
                    best[j] = d;
                    from[j] = current;
                }
            }
        }
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .fold(None, |acc: Option<usize>, j| match acc {
                Some(b) if best[b] <= best[j] => Some(b),
                _ => Some(j),
            })
            .expect("remaining vertex");
        edges.push((from[next], next, best[next]));
        in_tree[next] = true;
        current = next;
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2));
    edges
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..2 * n).collect(), size: (0..2 * n).map(|i| usize::from(i < n)).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
}

/// Single-linkage merges `(left, right, distance, size)`; merge `k` creates
/// node `n + k`.
fn single_linkage(n: usize, edges: &[(usize, usize, f64)]) -> Vec<(usize, usize, f64, usize)> {
    let mut uf = UnionFind::new(n);
    let mut out = Vec::with_capacity(edges.len());
    for (k, &(a, b, w)) in edges.iter().enumerate() {
        let ra = uf.find(a);
        let rb = uf.find(b);
        let node = n + k;
        let size = uf.size[ra] + uf.size[rb];
        out.push((ra, rb, w, size));
        uf.parent[ra] = node;
        uf.parent[rb] = node;
        uf.size[node] = size;
    }
    out
}

fn leaves_under(node: usize, n: usize, hierarchy: &[(usize, usize, f64, usize)]) -> Vec<usize> {
    let mut stack = vec![node];
    let mut out = Vec::new();
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let (l, r, _, _) = hierarchy[x - n];
            stack.push(r);
            stack.push(l);
        }
    }
    out
}

fn condense(n: usize, hierarchy: &[(usize, usize, f64, usize)], min_size: usize) -> Vec<CondensedEdge> {
    let node_size = |x: usize| if x < n { 1 } else { hierarchy[x - n].3 };
    let root = 2 * n - 2;
    let mut out = Vec::new();
    let mut next_label = n + 1;
    // (hierarchy node, condensed cluster label it currently belongs to)
    let mut stack = vec![(root, n)];
    while let Some((node, label)) = stack.pop() {
        if node < n {
            continue;
        }
        let (left, right, dist, _) = hierarchy[node - n];
        let lambda = lambda_of(dist);
        let (ls, rs) = (node_size(left), node_size(right));
        match (ls >= min_size, rs >= min_size) {
            (true, true) => {
                for (child, size) in [(left, ls), (right, rs)] {
                    let child_label = next_label;
                    next_label += 1;
                    out.push(CondensedEdge { parent: label, child: child_label, lambda, size });
                    stack.push((child, child_label));
                }
            }
            (false, false) => {
                for child in [left, right] {
                    for p in leaves_under(child, n, hierarchy) {
                        out.push(CondensedEdge { parent: label, child: p, lambda, size: 1 });
                    }
                }
            }
            (false, true) | (true, false) => {
                let (small, big) = if ls < min_size { (left, right) } else { (right, left) };
                for p in leaves_under(small, n, hierarchy) {
                    out.push(CondensedEdge { parent: label, child: p, lambda, size: 1 });
                }
                stack.push((big, label));
            }
        }
    }
    out
}

/// Cluster label per point (`None` for noise). Labels are dense, starting
/// at 0, in order of first appearance by point index.
pub fn hdbscan(data: ArrayView2<f64>, params: HdbscanParams) -> Vec<Option<usize>> {
    let n = data.nrows();
    let min_size = params.min_cluster_size.max(2);
    if n < min_size || n < 2 {
        return vec![None; n];
    }
    let edges = mst(&data, params.min_samples.max(1));
    let hierarchy = single_linkage(n, &edges);
    let tree = condense(n, &hierarchy, min_size);

    let max_label = tree.iter().map(|e| e.child.max(e.parent)).max().unwrap_or(n);
    let mut birth = vec![0.0; max_label + 1];
    for e in &tree {
        if e.child >= n {
            birth[e.child] = e.lambda;
        }
    }
    let mut stability = vec![0.0; max_label + 1];
    for e in &tree {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for e in &tree {
        if e.child >= n {
            children[e.parent].push(e.child);
        }
    }

    let mut selected = vec![false; max_label + 1];
    for c in (n + 1..=max_label).rev() {
        let subtree: f64 = children[c].iter().map(|&k| stability[k]).sum();
        if subtree > stability[c] {
            stability[c] = subtree;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(children[k].iter().copied());
            }
        }
    }

    // map each point to the nearest selected ancestor
    let mut parent_of = vec![usize::MAX; max_label + 1];
    let mut point_parent = vec![usize::MAX; n];
    for e in &tree {
        if e.child >= n {
            parent_of[e.child] = e.parent;
        } else {
            point_parent[e.child] = e.parent;
        }
    }
    let mut dense: Vec<usize> = Vec::new();
    let mut labels = vec![None; n];
    for (p, label) in labels.iter_mut().enumerate() {
        let mut c = point_parent[p];
        while c != usize::MAX && c != n && !selected[c] {
            c = parent_of[c];
        }
        if c != usize::MAX && c != n && selected[c] {
            let id = match dense.iter().position(|&x| x == c) {
                Some(i) => i,
                None => {
                    dense.push(c);
                    dense.len() - 1
                }
            };
            *label = Some(id);
        }
    }
    labels
}

/// Number of flat clusters found.
pub fn count_clusters(data: ArrayView2<f64>, params: HdbscanParams) -> usize {
    let labels = hdbscan(data, params);
    labels.iter().flatten().max().map_or(0, |m| m + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn two_blobs() {
        let x = array![[0.0, 0.0], [0.1, 0.0], [0.0, 0.1], [10.0, 0.0], [10.1, 0.0], [10.0, 0.1]];
        let labels = hdbscan(x.view(), HdbscanParams::default());
        assert_eq!(count_clusters(x.view(), HdbscanParams::default()), 2);
        assert_eq!(labels[0], labels[2]);
        assert_eq!(labels[3], labels[5]);
        assert_ne!(labels[0], labels[3]);
    }

    #[test]
    fn three_blobs() {
        let mut pts = Vec::new();
        for c in [0.0, 20.0, 40.0] {
            for k in 0..3 {
                pts.extend([c + 0.1 * k as f64, 0.0]);
            }
        }
        let x = Array2::from_shape_vec((9, 2), pts).unwrap();
        assert_eq!(count_clusters(x.view(), HdbscanParams::default()), 3);
    }

    #[test]
    fn tiny_inputs() {
        let two = array![[0.0], [1.0]];
        assert_eq!(count_clusters(two.view(), HdbscanParams::default()), 0);
        let one = array![[0.0]];
        assert_eq!(hdbscan(one.view(), HdbscanParams::default()), vec![None]);
    }

    #[test]
    fn identical_points() {
        let x = Array2::<f64>::zeros((5, 3));
        let c = count_clusters(x.view(), HdbscanParams::default());
        assert!(c <= 2);
    }
}
