use std::collections::VecDeque;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::DistanceSpace;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

impl Default for DbscanParams {
    fn default() -> Self {
        Self { eps: 8.0, min_pts: 5 }
    }
}

/// Classic DBSCAN. A point is core when at least `min_pts` points (itself
/// included) lie within `eps`. Points are scanned in ascending index order,
/// so a border point joins the first cluster that reaches it and cluster ids
/// follow discovery order.
pub fn dbscan(space: &dyn DistanceSpace, params: DbscanParams) -> Vec<Option<usize>> {
    let n = space.len();
    let min_pts = params.min_pts.max(1);
    let neighbours: Vec<Vec<usize>> = (0..n)
        .into_par_iter()
        .map(|i| space.neighbours(i, params.eps))
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= min_pts).collect();

    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if labels[start].is_some() || !core[start] {
            continue;
        }
        let c = next;
        next += 1;
        labels[start] = Some(c);
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(c);
                    if core[q] {
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    labels
}
