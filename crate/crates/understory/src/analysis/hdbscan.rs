//! Density-based hierarchical clustering.
//!
//! Pipeline: core distances at `min_samples`, mutual-reachability metric,
//! minimum spanning tree (Prim's with on-the-fly distances, so no O(n^2)
//! edge list is materialized), single-linkage dendrogram from the sorted
//! MST edges, condensed tree at `min_cluster_size`, and excess-of-mass
//! cluster extraction with the root excluded. All tie-breaks resolve
//! toward the lower point index, so the labeling is deterministic for a
//! fixed input order.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// Core distance = distance to this many-th nearest other point.
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        HdbscanParams {
            min_cluster_size: 20,
            min_samples: 5,
        }
    }
}

/// Noise label.
pub const NOISE: i64 = -1;

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// Distance to the `min_samples`-th nearest other point (capped at n-1
/// neighbors for tiny inputs).
fn core_distances(points: &[[f64; 3]], min_samples: usize) -> Vec<f64> {
    let n = points.len();
    let k = min_samples.min(n.saturating_sub(1)).max(1);
    (0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| dist(&points[i], &points[j]))
                .collect();
            if d.is_empty() {
                return 0.0;
            }
            let (_, kth, _) = d.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).unwrap());
            *kth
        })
        .collect()
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
        }
    }
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }
    fn union(&mut self, a: usize, b: usize, new_root: usize) {
        let ra = self.find(a);
        let rb = self.find(b);
        self.parent[ra] = new_root;
        self.parent[rb] = new_root;
        self.parent[new_root] = new_root;
    }
}

/// Dendrogram node: leaves are 0..n-1, internal nodes n..2n-2.
#[derive(Debug, Clone, Copy)]
struct Merge {
    left: usize,
    right: usize,
    distance: f64,
    size: usize,
}

/// Mutual-reachability MST via Prim's algorithm with O(n) extra memory;
/// the argmin scan breaks distance ties toward the lower point index.
fn reachability_mst(points: &[[f64; 3]], core: &[f64]) -> Vec<(f64, usize, usize)> {
    let n = points.len();
    let mut in_tree = vec![false; n];
    let mut best_dist = vec![f64::INFINITY; n];
    let mut best_from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    in_tree[0] = true;
    let mut latest = 0usize;
    for _ in 1..n {
        for j in 0..n {
            if !in_tree[j] {
                let d = dist(&points[latest], &points[j])
                    .max(core[latest])
                    .max(core[j]);
                if d < best_dist[j] {
                    best_dist[j] = d;
                    best_from[j] = latest;
                }
            }
        }
        let mut pick = usize::MAX;
        for j in 0..n {
            if !in_tree[j] && (pick == usize::MAX || best_dist[j] < best_dist[pick]) {
                pick = j;
            }
        }
        let (a, b) = (best_from[pick].min(pick), best_from[pick].max(pick));
        edges.push((best_dist[pick], a, b));
        in_tree[pick] = true;
        latest = pick;
    }
    edges
}

/// Single-linkage dendrogram from the mutual-reachability MST edges,
/// Kruskal-sorted by (weight, lower endpoint) for determinism.
fn single_linkage(points: &[[f64; 3]], core: &[f64]) -> Vec<Merge> {
    let n = points.len();
    let mut edges = reachability_mst(points, core);
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap()
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    // Each MST edge becomes one dendrogram merge. A union-find tracks the
    // current dendrogram node of each component.
    let mut uf = UnionFind::new(n);
    let mut node_of: Vec<usize> = (0..n).collect();
    let mut sizes: Vec<usize> = vec![1; n];
    let mut merges = Vec::with_capacity(n - 1);
    for (d, i, j) in edges {
        let ri = uf.find(i);
        let rj = uf.find(j);
        if ri == rj {
            continue;
        }
        let node = n + merges.len();
        merges.push(Merge {
            left: node_of[ri],
            right: node_of[rj],
            distance: d,
            size: sizes[ri] + sizes[rj],
        });
        let new_size = sizes[ri] + sizes[rj];
        uf.union(ri, rj, ri);
        let root = uf.find(ri);
        node_of[root] = node;
        sizes[root] = new_size;
        if merges.len() == n - 1 {
            break;
        }
    }
    merges
}

const LAMBDA_CAP: f64 = 1e12;

fn lambda_of(distance: f64) -> f64 {
    if distance <= 0.0 {
        LAMBDA_CAP
    } else {
        (1.0 / distance).min(LAMBDA_CAP)
    }
}

/// Condensed-tree cluster.
#[derive(Debug, Clone)]
struct CondensedCluster {
    parent: Option<usize>,
    lambda_birth: f64,
    children: Vec<usize>,
    /// (point, lambda at which the point left this cluster as noise).
    points: Vec<(usize, f64)>,
    /// Lambda at which the cluster split into child clusters (or fully
    /// dissolved).
    lambda_death: f64,
    /// Leaf points carried into child clusters at the split.
    size: usize,
}

/// Walk the dendrogram top-down, absorbing sub-`min_cluster_size` side
/// branches as point fall-outs and recording genuine splits as new
/// condensed clusters.
fn condense(merges: &[Merge], n: usize, min_cluster_size: usize) -> Vec<CondensedCluster> {
    let node_size = |node: usize| if node < n { 1 } else { merges[node - n].size };
    let mut clusters: Vec<CondensedCluster> = vec![CondensedCluster {
        parent: None,
        lambda_birth: 0.0,
        children: Vec::new(),
        points: Vec::new(),
        lambda_death: 0.0,
        size: node_size(n + merges.len() - 1),
    }];

    // Stack of (dendrogram node, condensed cluster owning it).
    let root_node = n + merges.len() - 1;
    let mut stack = vec![(root_node, 0usize)];
    // Collect all leaves of a dendrogram subtree.
    fn leaves(node: usize, n: usize, merges: &[Merge], out: &mut Vec<usize>) {
        if node < n {
            out.push(node);
        } else {
            let m = merges[node - n];
            leaves(m.left, n, merges, out);
            leaves(m.right, n, merges, out);
        }
    }

    while let Some((node, cluster)) = stack.pop() {
        // Every pushed node owns at least min_cluster_size >= 2 leaves, so
        // it is always an internal merge.
        debug_assert!(node >= n);
        let m = merges[node - n];
        let lambda = lambda_of(m.distance);
        let (sl, sr) = (node_size(m.left), node_size(m.right));
        let big_l = sl >= min_cluster_size;
        let big_r = sr >= min_cluster_size;
        if big_l && big_r {
            // True split: two new condensed clusters.
            clusters[cluster].lambda_death = lambda;
            for child_node in [m.left, m.right] {
                let id = clusters.len();
                clusters.push(CondensedCluster {
                    parent: Some(cluster),
                    lambda_birth: lambda,
                    children: Vec::new(),
                    points: Vec::new(),
                    lambda_death: lambda,
                    size: node_size(child_node),
                });
                clusters[cluster].children.push(id);
                stack.push((child_node, id));
            }
        } else if big_l || big_r {
            // The big side continues as the same cluster; the small side
            // falls out at this lambda.
            let (keep, drop) = if big_l { (m.left, m.right) } else { (m.right, m.left) };
            let mut dropped = Vec::new();
            leaves(drop, n, merges, &mut dropped);
            for p in dropped {
                clusters[cluster].points.push((p, lambda));
            }
            stack.push((keep, cluster));
        } else {
            // Entire remainder dissolves at this lambda.
            clusters[cluster].lambda_death = lambda;
            let mut dropped = Vec::new();
            leaves(node, n, merges, &mut dropped);
            for p in dropped {
                clusters[cluster].points.push((p, lambda));
            }
        }
    }
    clusters
}

fn stability(c: &CondensedCluster) -> f64 {
    let direct: f64 = c
        .points
        .iter()
        .map(|&(_, l)| (l - c.lambda_birth).max(0.0))
        .sum();
    // Points passed to children contribute until the split.
    let passed: f64 = if c.children.is_empty() {
        0.0
    } else {
        let child_points: usize = c.size - c.points.len();
        child_points as f64 * (c.lambda_death - c.lambda_birth).max(0.0)
    };
    direct + passed
}

/// Cluster labels: nonnegative ids ordered by each cluster's minimum point
/// index, noise = -1.
pub fn hdbscan_cluster(
    points: &[[f64; 3]],
    params: &HdbscanParams,
) -> Result<Vec<i64>> {
    if params.min_cluster_size < 2 {
        return Err(Error::input("min_cluster_size must be at least 2"));
    }
    if params.min_samples == 0 {
        return Err(Error::input("min_samples must be at least 1"));
    }
    for p in points {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::input("hdbscan: non-finite point coordinate"));
        }
    }
    let n = points.len();
    if n < params.min_cluster_size {
        return Ok(vec![NOISE; n]);
    }

    let core = core_distances(points, params.min_samples);
    let merges = single_linkage(points, &core);
    let clusters = condense(&merges, n, params.min_cluster_size);

    // Excess-of-mass: bottom-up, a parent keeps its own stability when it
    // is at least the sum of its children's propagated stabilities. Ties
    // favor the parent. The root is never selected.
    let m = clusters.len();
    let mut propagated = vec![0.0f64; m];
    let mut selected = vec![false; m];
    // Children always appear after parents, so reverse order is bottom-up.
    for id in (0..m).rev() {
        let own = stability(&clusters[id]);
        let child_sum: f64 = clusters[id].children.iter().map(|&c| propagated[c]).sum();
        if clusters[id].children.is_empty() || own >= child_sum {
            propagated[id] = own;
            selected[id] = true;
        } else {
            propagated[id] = child_sum;
            selected[id] = false;
        }
    }
    selected[0] = false;
    // Deselect descendants of selected clusters (top-down sweep).
    let mut blocked = vec![false; m];
    for id in 0..m {
        if let Some(parent) = clusters[id].parent {
            blocked[id] = blocked[parent] || selected[parent];
        }
        if blocked[id] {
            selected[id] = false;
        }
    }

    // Assign each point to its deepest selected ancestor-or-owner.
    let mut labels = vec![NOISE; n];
    let mut owner_of_point = vec![usize::MAX; n];
    for (id, c) in clusters.iter().enumerate() {
        for &(p, _) in &c.points {
            owner_of_point[p] = id;
        }
    }
    let selected_ancestor = |mut id: usize| -> Option<usize> {
        loop {
            if selected[id] {
                return Some(id);
            }
            id = clusters[id].parent?;
        }
    };
    let mut cluster_label: Vec<Option<usize>> = vec![None; m];
    let mut cluster_min_point: Vec<usize> = vec![usize::MAX; m];
    for p in 0..n {
        if let Some(sel) = selected_ancestor(owner_of_point[p]) {
            cluster_min_point[sel] = cluster_min_point[sel].min(p);
        }
    }
    let mut order: Vec<usize> = (0..m).filter(|&id| selected[id]).collect();
    order.sort_by_key(|&id| cluster_min_point[id]);
    for (label, &id) in order.iter().enumerate() {
        cluster_label[id] = Some(label);
    }
    for p in 0..n {
        if let Some(sel) = selected_ancestor(owner_of_point[p]) {
            labels[p] = cluster_label[sel].unwrap() as i64;
        }
    }
    Ok(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(rng: &mut impl Rng, center: [f64; 3], sigma: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, c) in out.iter_mut().zip(center) {
            let z: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
            *o = c + sigma * z;
        }
        out
    }

    /// Adjusted Rand index between two labelings.
    fn ari(a: &[i64], b: &[i64]) -> f64 {
        let n = a.len();
        let mut pairs_same_both = 0.0f64;
        let mut pairs_same_a = 0.0f64;
        let mut pairs_same_b = 0.0f64;
        let mut total = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                total += 1.0;
                let sa = a[i] == a[j];
                let sb = b[i] == b[j];
                if sa {
                    pairs_same_a += 1.0;
                }
                if sb {
                    pairs_same_b += 1.0;
                }
                if sa && sb {
                    pairs_same_both += 1.0;
                }
            }
        }
        let expected = pairs_same_a * pairs_same_b / total;
        let max = 0.5 * (pairs_same_a + pairs_same_b);
        (pairs_same_both - expected) / (max - expected)
    }

    #[test]
    fn three_blobs_recovered_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centers = [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        let mut points = Vec::new();
        let mut truth = Vec::new();
        for (label, &c) in centers.iter().enumerate() {
            for _ in 0..100 {
                points.push(gaussian(&mut rng, c, 0.1));
                truth.push(label as i64);
            }
        }
        let labels = hdbscan_cluster(
            &points,
            &HdbscanParams {
                min_cluster_size: 20,
                min_samples: 5,
            },
        )
        .unwrap();
        let distinct: std::collections::HashSet<_> =
            labels.iter().filter(|&&l| l >= 0).collect();
        assert_eq!(distinct.len(), 3);
        assert!(!labels.contains(&NOISE));
        assert!((ari(&labels, &truth) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sparse_scatter_is_all_noise() {
        // Far fewer points than min_cluster_size in any dense region.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<[f64; 3]> = (0..30)
            .map(|_| {
                [
                    rng.gen_range(0.0..1000.0),
                    rng.gen_range(0.0..1000.0),
                    rng.gen_range(0.0..1000.0),
                ]
            })
            .collect();
        let labels = hdbscan_cluster(
            &points,
            &HdbscanParams {
                min_cluster_size: 40,
                min_samples: 5,
            },
        )
        .unwrap();
        assert!(labels.iter().all(|&l| l == NOISE));
    }

    #[test]
    fn duplication_preserves_clustering() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut points = Vec::new();
        for &c in &[[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]] {
            for _ in 0..30 {
                points.push(gaussian(&mut rng, c, 0.1));
            }
        }
        let base = hdbscan_cluster(
            &points,
            &HdbscanParams {
                min_cluster_size: 10,
                min_samples: 4,
            },
        )
        .unwrap();
        let mut doubled = points.clone();
        doubled.extend_from_slice(&points);
        let labels = hdbscan_cluster(
            &doubled,
            &HdbscanParams {
                min_cluster_size: 20,
                min_samples: 8,
            },
        )
        .unwrap();
        assert_eq!(&labels[..points.len()], &base[..]);
        assert_eq!(&labels[points.len()..], &base[..]);
    }

    #[test]
    fn fewer_points_than_min_cluster_size_is_all_noise() {
        let points = vec![[0.0; 3], [1.0; 3], [2.0; 3]];
        let labels = hdbscan_cluster(
            &points,
            &HdbscanParams {
                min_cluster_size: 5,
                min_samples: 2,
            },
        )
        .unwrap();
        assert_eq!(labels, vec![NOISE; 3]);
    }

    #[test]
    fn rejects_bad_params_and_nan() {
        let points = vec![[0.0; 3]; 10];
        assert!(hdbscan_cluster(
            &points,
            &HdbscanParams {
                min_cluster_size: 1,
                min_samples: 2
            }
        )
        .is_err());
        let bad = vec![[f64::NAN; 3]; 10];
        assert!(hdbscan_cluster(&bad, &HdbscanParams::default()).is_err());
    }

    #[test]
    fn deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points: Vec<[f64; 3]> = (0..120)
            .map(|_| {
                [
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                    rng.gen_range(0.0..4.0),
                ]
            })
            .collect();
        let params = HdbscanParams {
            min_cluster_size: 8,
            min_samples: 4,
        };
        let a = hdbscan_cluster(&points, &params).unwrap();
        let b = hdbscan_cluster(&points, &params).unwrap();
        assert_eq!(a, b);
    }
}
