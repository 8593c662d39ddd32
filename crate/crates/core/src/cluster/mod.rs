//! Unsupervised template discovery: PCA, DBSCAN, HDBSCAN, medoids and label
//! transfer from a labeled subset.

mod dbscan;
mod hdbscan;
mod pca;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;

use crate::classify::{HashIndex, Prediction};
use crate::error::{Error, Result};
use crate::features::{hamming, PerceptualHash};
use crate::ingest::TemplateLabel;

pub use dbscan::{dbscan, DbscanParams};
pub use hdbscan::{core_distances, hdbscan, mutual_reachability_mst, HdbscanParams};
pub use pca::{pca_fit, Pca, DEFAULT_PCA_DIM};

/// Default Hamming threshold for medoid annotation.
pub const DEFAULT_DELTA: u32 = 8;

/// A finite set of points with a symmetric distance.
pub trait DistanceSpace: Sync {
    fn len(&self) -> usize;

    fn distance(&self, i: usize, j: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices `j` (including `i`) with `distance(i, j) <= eps`, ascending.
    fn neighbours(&self, i: usize, eps: f64) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.distance(i, j) <= eps).collect()
    }
}

pub struct HammingSpace {
    codes: Vec<PerceptualHash>,
    index: HashIndex,
}

impl HammingSpace {
    pub fn new(codes: Vec<PerceptualHash>) -> Self {
        let index = HashIndex::new(&codes);
        Self { codes, index }
    }
}

impl DistanceSpace for HammingSpace {
    fn len(&self) -> usize {
        self.codes.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        hamming(self.codes[i], self.codes[j]) as f64
    }

    fn neighbours(&self, i: usize, eps: f64) -> Vec<usize> {
        if eps < 0.0 {
            return Vec::new();
        }
        let r = eps.floor().min(64.0) as u32;
        self.index.range(self.codes[i], r).into_iter().map(|(j, _)| j).collect()
    }
}

pub struct EuclideanSpace<'a>(pub &'a [Vec<f64>]);

impl DistanceSpace for EuclideanSpace<'_> {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        self.0[i]
            .iter()
            .zip(&self.0[j])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

/// `1 - cos` over vectors that are L2-normalised on construction.
pub struct CosineSpace(Vec<Vec<f64>>);

impl CosineSpace {
    pub fn new(vectors: &[Vec<f64>]) -> Result<Self> {
        vectors
            .iter()
            .map(|v| {
                let n = crate::linalg::norm2(v);
                if n == 0.0 {
                    Err(Error::ZeroVector)
                } else {
                    Ok(v.iter().map(|x| x / n).collect())
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }
}

impl DistanceSpace for CosineSpace {
    fn len(&self) -> usize {
        self.0.len()
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let c: f64 = self.0[i].iter().zip(&self.0[j]).map(|(a, b)| a * b).sum();
        (1.0 - c).max(0.0)
    }
}

/// A dense symmetric distance matrix.
pub struct Precomputed {
    n: usize,
    d: Vec<f64>,
}

impl Precomputed {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64 + Sync) -> Self {
        let d: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / n, k % n);
                match i.cmp(&j) {
                    std::cmp::Ordering::Equal => 0.0,
                    std::cmp::Ordering::Less => f(i, j),
                    std::cmp::Ordering::Greater => f(j, i),
                }
            })
            .collect();
        Self { n, d }
    }

    pub fn from_space(space: &dyn DistanceSpace) -> Self {
        Self::from_fn(space.len(), |i, j| space.distance(i, j))
    }

    /// Multiplies every distance by `c`.
    pub fn scaled(&self, c: f64) -> Self {
        Self {
            n: self.n,
            d: self.d.iter().map(|v| v * c).collect(),
        }
    }
}

impl DistanceSpace for Precomputed {
    fn len(&self) -> usize {
        self.n
    }

    fn distance(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Member minimising the summed distance to the other members; ties go to
/// the lexicographically smallest id.
pub fn medoid(space: &dyn DistanceSpace, members: &[usize], ids: &[String]) -> Option<usize> {
    let sums: Vec<(f64, usize)> = members
        .par_iter()
        .map(|&i| (members.iter().map(|&j| space.distance(i, j)).sum::<f64>(), i))
        .collect();
    sums.into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| ids[a.1].cmp(&ids[b.1])))
        .map(|(_, i)| i)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub members: Vec<usize>,
    pub medoid: Option<usize>,
    /// Assigned template with its supporting fraction; `None` is templateless.
    pub assigned: Option<(String, f64)>,
}

/// Point-to-cluster assignment over a fixed list of ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Clustering {
    ids: Vec<String>,
    labels: Vec<Option<usize>>,
    clusters: Vec<Cluster>,
}

impl Clustering {
    /// `labels[i]` is the cluster of point `i` or `None` for noise. Cluster
    /// ids must be dense from zero.
    pub fn from_labels(ids: Vec<String>, labels: Vec<Option<usize>>) -> Self {
        assert_eq!(ids.len(), labels.len());
        let k = labels.iter().flatten().map(|&c| c + 1).max().unwrap_or(0);
        let mut clusters = vec![
            Cluster {
                members: Vec::new(),
                medoid: None,
                assigned: None,
            };
            k
        ];
        for (i, l) in labels.iter().enumerate() {
            if let Some(c) = l {
                clusters[*c].members.push(i);
            }
        }
        Self { ids, labels, clusters }
    }

    pub fn with_medoids(mut self, space: &dyn DistanceSpace) -> Self {
        for c in &mut self.clusters {
            c.medoid = medoid(space, &c.members, &self.ids);
        }
        self
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_none()).count()
    }

    /// Majority vote of the labeled members of each cluster.
    pub fn annotate_majority(&mut self, labeled: &BTreeMap<String, String>) {
        for c in &mut self.clusters {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            let mut total = 0;
            for &m in &c.members {
                if let Some(t) = labeled.get(&self.ids[m]) {
                    *counts.entry(t).or_default() += 1;
                    total += 1;
                }
            }
            // BTreeMap iterates ascending, so `>` keeps the smallest id on ties.
            let mut best: Option<(&str, usize)> = None;
            for (t, n) in counts {
                if best.is_none_or(|(_, b)| n > b) {
                    best = Some((t, n));
                }
            }
            c.assigned = best.map(|(t, n)| (t.to_owned(), n as f64 / total as f64));
        }
    }

    /// Assigns each cluster the template with the largest fraction of its
    /// labeled hashes within `delta` of the cluster medoid.
    pub fn annotate_medoid(
        &mut self,
        hashes: &[PerceptualHash],
        labeled: &[(PerceptualHash, String)],
        delta: u32,
    ) -> Result<()> {
        let mut per_template: BTreeMap<&str, Vec<PerceptualHash>> = BTreeMap::new();
        for (h, t) in labeled {
            per_template.entry(t).or_default().push(*h);
        }
        for (ci, c) in self.clusters.iter_mut().enumerate() {
            let m = c.medoid.ok_or(Error::MissingMedoid(ci))?;
            let h = hashes[m];
            let mut best: Option<(&str, f64)> = None;
            for (t, hs) in &per_template {
                let hits = hs.iter().filter(|&&x| hamming(h, x) <= delta).count();
                let p = hits as f64 / hs.len() as f64;
                if p > 0.0 && best.is_none_or(|(_, b)| p > b) {
                    best = Some((t, p));
                }
            }
            c.assigned = best.map(|(t, p)| (t.to_owned(), p));
        }
        Ok(())
    }

    /// Each query inherits its cluster's template; noise and unassigned
    /// clusters give templateless.
    pub fn predict(&self, queries: &[String], method: &str) -> Result<Vec<Prediction>> {
        let pos: BTreeMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        queries
            .iter()
            .map(|q| {
                let i = *pos.get(q.as_str()).ok_or_else(|| Error::UnknownId(q.clone()))?;
                Ok(match self.labels[i].and_then(|c| self.clusters[c].assigned.as_ref()) {
                    Some((t, s)) => Prediction::template(q, t, *s, method),
                    None => Prediction::templateless(q, method),
                })
            })
            .collect()
    }

    /// Lines of `image_id,cluster_id,assigned_label`; noise has cluster -1.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (id, l) in self.ids.iter().zip(&self.labels) {
            let (cid, label) = match l {
                Some(c) => (
                    *c as i64,
                    match &self.clusters[*c].assigned {
                        Some((t, _)) => TemplateLabel::template(t.as_str()),
                        None => TemplateLabel::Templateless,
                    },
                ),
                None => (-1, TemplateLabel::Templateless),
            };
            writeln!(w, "{id},{cid},{}", label.as_str())?;
        }
        Ok(())
    }
}

pub fn cluster_predict(clustering: &Clustering, queries: &[String], method: &str) -> Result<Vec<Prediction>> {
    clustering.predict(queries, method)
}

/// Adjusted Rand index between two labelings (noise counts as its own label).
pub fn adjusted_rand_index(a: &[Option<usize>], b: &[Option<usize>]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut table: BTreeMap<(Option<usize>, Option<usize>), u64> = BTreeMap::new();
    let mut ra: BTreeMap<Option<usize>, u64> = BTreeMap::new();
    let mut rb: BTreeMap<Option<usize>, u64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((*x, *y)).or_default() += 1;
        *ra.entry(*x).or_default() += 1;
        *rb.entry(*y).or_default() += 1;
    }
    let c2 = |v: u64| (v * v.saturating_sub(1)) as f64 / 2.0;
    let index: f64 = table.values().map(|&v| c2(v)).sum();
    let sa: f64 = ra.values().map(|&v| c2(v)).sum();
    let sb: f64 = rb.values().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = if total > 0.0 { sa * sb / total } else { 0.0 };
    let max = (sa + sb) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
