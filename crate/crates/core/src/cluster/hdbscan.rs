use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DistanceSpace;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HdbscanParams {
    pub min_cluster_size: usize,
    /// `k` of the core distance.
    pub min_samples: usize,
}

impl Default for HdbscanParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 5,
            min_samples: 5,
        }
    }
}

/// Distance from each point to its `k`-th nearest other point. With fewer
/// than `k` other points the farthest one is used.
pub fn core_distances(space: &dyn DistanceSpace, k: usize) -> Vec<f64> {
    let n = space.len();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut d: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| space.distance(i, j)).collect();
            if d.is_empty() {
                return 0.0;
            }
            let kth = k.clamp(1, d.len()) - 1;
            let (_, v, _) = d.select_nth_unstable_by(kth, f64::total_cmp);
            *v
        })
        .collect()
}

/// Exact minimum spanning tree of the mutual-reachability graph by Prim's
/// algorithm, as `(a, b, weight)` edges in insertion order.
pub fn mutual_reachability_mst(space: &dyn DistanceSpace, k: usize) -> Vec<(usize, usize, f64)> {
    let n = space.len();
    if n < 2 {
        return Vec::new();
    }
    let core = core_distances(space, k);
    let mreach = |a: usize, b: usize| space.distance(a, b).max(core[a]).max(core[b]);
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut parent = vec![0usize; n];
    let mut edges = Vec::with_capacity(n - 1);
    let mut current = 0;
    in_tree[0] = true;
    for _ in 1..n {
        for j in 0..n {
            if !in_tree[j] {
                let d = mreach(current, j);
                if d < best[j] {
                    best[j] = d;
                    parent[j] = current;
                }
            }
        }
        let next = (0..n)
            .filter(|&j| !in_tree[j])
            .min_by(|&a, &b| best[a].total_cmp(&best[b]).then(a.cmp(&b)))
            .expect("a vertex remains outside the tree");
        in_tree[next] = true;
        edges.push((parent[next], next, best[next]));
        current = next;
    }
    edges
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
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
}

struct Merge {
    left: usize,
    right: usize,
    dist: f64,
    size: usize,
}

/// Single-linkage dendrogram. Leaves are `0..n`, merge `i` is node `n + i`.
fn single_linkage(n: usize, mut edges: Vec<(usize, usize, f64)>) -> Vec<Merge> {
    edges.sort_by(|a, b| {
        a.2.total_cmp(&b.2)
            .then((a.0.min(a.1), a.0.max(a.1)).cmp(&(b.0.min(b.1), b.0.max(b.1))))
    });
    let mut uf = UnionFind::new(2 * n - 1);
    let mut node_of_root: Vec<usize> = (0..2 * n - 1).collect();
    let mut size = vec![1usize; 2 * n - 1];
    let mut merges = Vec::with_capacity(n - 1);
    for (a, b, d) in edges {
        let (ra, rb) = (uf.find(a), uf.find(b));
        let (na, nb) = (node_of_root[ra], node_of_root[rb]);
        let id = n + merges.len();
        size[id] = size[na] + size[nb];
        merges.push(Merge {
            left: na,
            right: nb,
            dist: d,
            size: size[id],
        });
        uf.parent[ra] = id;
        uf.parent[rb] = id;
        node_of_root[id] = id;
    }
    merges
}

struct Condensed {
    parent: Option<usize>,
    birth: f64,
    stability: f64,
    children: Vec<usize>,
}

/// HDBSCAN* with excess-of-mass selection. The root cluster is never
/// selected, so a single dense blob yields all noise. With fewer points than
/// `min_cluster_size` every point is noise.
pub fn hdbscan(space: &dyn DistanceSpace, params: HdbscanParams) -> Vec<Option<usize>> {
    let n = space.len();
    let mcs = params.min_cluster_size.max(2);
    if n < mcs || n < 2 {
        return vec![None; n];
    }
    let edges = mutual_reachability_mst(space, params.min_samples);
    let max_d = edges.iter().map(|e| e.2).fold(0.0, f64::max);
    let floor = if max_d > 0.0 { max_d * 1e-10 } else { 1e-10 };
    let lambda = |d: f64| 1.0 / d.max(floor);
    let merges = single_linkage(n, edges);
    let node_size = |v: usize| if v < n { 1 } else { merges[v - n].size };

    let mut clusters = vec![Condensed {
        parent: None,
        birth: 0.0,
        stability: 0.0,
        children: Vec::new(),
    }];
    // cluster each point finally fell out of
    let mut fell_from = vec![0usize; n];
    let mut stack = vec![(2 * n - 2, 0usize)];
    let mut leaves = Vec::new();
    while let Some((node, c)) = stack.pop() {
        if node < n {
            fell_from[node] = c;
            continue;
        }
        let m = &merges[node - n];
        let l = lambda(m.dist);
        let gain = node_size(node) as f64 * (l - clusters[c].birth);
        clusters[c].stability += gain;
        let (a, b) = (m.left, m.right);
        let (big_a, big_b) = (node_size(a) >= mcs, node_size(b) >= mcs);
        match (big_a, big_b) {
            (true, true) => {
                for child in [a, b] {
                    let id = clusters.len();
                    clusters.push(Condensed {
                        parent: Some(c),
                        birth: l,
                        stability: 0.0,
                        children: Vec::new(),
                    });
                    clusters[c].children.push(id);
                    stack.push((child, id));
                }
            }
            (true, false) | (false, true) => {
                let (keep, drop) = if big_a { (a, b) } else { (b, a) };
                // the kept points did not leave at `l`; undo their share
                clusters[c].stability -= node_size(keep) as f64 * (l - clusters[c].birth);
                leaves.clear();
                collect_leaves(drop, n, &merges, &mut leaves);
                for &p in &leaves {
                    fell_from[p] = c;
                }
                stack.push((keep, c));
            }
            (false, false) => {
                leaves.clear();
                collect_leaves(node, n, &merges, &mut leaves);
                for &p in &leaves {
                    fell_from[p] = c;
                }
            }
        }
    }

    // Excess of mass, bottom-up. Children always have larger ids.
    let k = clusters.len();
    let mut selected = vec![false; k];
    let mut subtree = vec![0.0; k];
    for c in (1..k).rev() {
        let child_sum: f64 = clusters[c].children.iter().map(|&ch| subtree[ch]).sum();
        if clusters[c].stability >= child_sum {
            selected[c] = true;
            subtree[c] = clusters[c].stability;
        } else {
            subtree[c] = child_sum;
        }
    }
    // keep only the topmost selected cluster on each path
    let mut chosen = vec![None; k];
    let mut next_label = 0;
    for c in 1..k {
        let parent = clusters[c].parent.expect("non-root has a parent");
        chosen[c] = chosen[parent];
        if chosen[c].is_none() && selected[c] {
            chosen[c] = Some(next_label);
            next_label += 1;
        }
    }
    fell_from.iter().map(|&c| chosen[c]).collect()
}

fn collect_leaves(node: usize, n: usize, merges: &[Merge], out: &mut Vec<usize>) {
    let mut stack = vec![node];
    while let Some(v) = stack.pop() {
        if v < n {
            out.push(v);
        } else {
            stack.push(merges[v - n].left);
            stack.push(merges[v - n].right);
        }
    }
}
