//! Radius nearest neighbours with leave-one-out radius calibration.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hash_index::HashIndex;
use super::{Classifier, Prediction};
use crate::error::{Error, Result};
use crate::features::{FeatureVector, PerceptualHash};
use crate::keypoints::{
    pairwise_image_distances, set_distance, DescriptorSet, ImageDistance, MatchParams, SparseDistances,
};
use crate::linalg::{dot, norm2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Hamming,
    CosineDistance,
    FeatureMatch,
}

impl Metric {
    /// Method name used in prediction files.
    pub fn method_name(self) -> &'static str {
        match self {
            Metric::Hamming => "rnn:phash",
            Metric::CosineDistance => "rnn:embedding",
            Metric::FeatureMatch => "rnn:fm",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Metric::Hamming => "hamming",
            Metric::CosineDistance => "cosine_distance",
            Metric::FeatureMatch => "feature_match",
        };
        f.write_str(s)
    }
}

/// A query or reference feature for a radius model.
#[derive(Clone, Debug, PartialEq)]
pub enum Feature {
    Hash(PerceptualHash),
    Dense(FeatureVector),
    Descriptors(DescriptorSet),
}

impl Feature {
    fn fits(&self, metric: Metric) -> bool {
        matches!(
            (self, metric),
            (Feature::Hash(_), Metric::Hamming)
                | (Feature::Dense(_), Metric::CosineDistance)
                | (Feature::Descriptors(_), Metric::FeatureMatch)
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum References {
    Hashes(Vec<PerceptualHash>),
    /// L2-normalised rows.
    Unit(Vec<Vec<f64>>),
    Orb {
        sets: Vec<DescriptorSet>,
        params: MatchParams,
        matrix: SparseDistances,
    },
}

#[derive(Serialize, Deserialize)]
struct RadiusModelData {
    metric: Metric,
    method: String,
    radius: Option<f64>,
    labels: Vec<String>,
    refs: References,
}

/// A fitted radius nearest-neighbour model. References always carry concrete
/// template labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(from = "RadiusModelData", into = "RadiusModelData")]
pub struct RadiusModel {
    metric: Metric,
    method: String,
    radius: Option<f64>,
    labels: Vec<String>,
    refs: References,
    hash_index: Option<HashIndex>,
}

impl From<RadiusModelData> for RadiusModel {
    fn from(d: RadiusModelData) -> Self {
        let hash_index = match &d.refs {
            References::Hashes(h) => Some(HashIndex::new(h)),
            _ => None,
        };
        Self {
            metric: d.metric,
            method: d.method,
            radius: d.radius,
            labels: d.labels,
            refs: d.refs,
            hash_index,
        }
    }
}

impl From<RadiusModel> for RadiusModelData {
    fn from(m: RadiusModel) -> Self {
        Self {
            metric: m.metric,
            method: m.method,
            radius: m.radius,
            labels: m.labels,
            refs: m.refs,
        }
    }
}

fn unit(v: &FeatureVector) -> Result<Vec<f64>> {
    let n = norm2(v.values());
    if n == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok(v.values().iter().map(|x| x / n).collect())
}

#[inline]
fn cosine_dist_unit(a: &[f64], b: &[f64]) -> f64 {
    1.0 - dot(a, b)
}

pub fn fit_radius(reference: Vec<(Feature, String)>, metric: Metric) -> Result<RadiusModel> {
    fit_radius_with(reference, metric, MatchParams::default())
}

/// Builds the reference index. `params` is only used by the feature-match
/// metric.
pub fn fit_radius_with(reference: Vec<(Feature, String)>, metric: Metric, params: MatchParams) -> Result<RadiusModel> {
    if reference.is_empty() {
        return Err(Error::EmptyReference);
    }
    if reference.iter().any(|(f, _)| !f.fits(metric)) {
        return Err(Error::MetricFeatureMismatch(metric.to_string()));
    }
    if let Some((_, l)) = reference.iter().find(|(_, l)| l.is_empty()) {
        return Err(Error::Unlabeled(l.clone()));
    }
    let (features, labels): (Vec<Feature>, Vec<String>) = reference.into_iter().unzip();
    let refs = match metric {
        Metric::Hamming => References::Hashes(
            features
                .into_iter()
                .map(|f| match f {
                    Feature::Hash(h) => h,
                    _ => unreachable!(),
                })
                .collect(),
        ),
        Metric::CosineDistance => {
            let mut rows = Vec::with_capacity(features.len());
            let mut dim = None;
            for f in &features {
                let Feature::Dense(v) = f else { unreachable!() };
                match dim {
                    None => dim = Some(v.dim()),
                    Some(d) if d != v.dim() => {
                        return Err(Error::DimensionMismatch {
                            expected: d,
                            actual: v.dim(),
                        })
                    }
                    _ => {}
                }
                rows.push(unit(v)?);
            }
            References::Unit(rows)
        }
        Metric::FeatureMatch => {
            let sets: Vec<DescriptorSet> = features
                .into_iter()
                .map(|f| match f {
                    Feature::Descriptors(s) => s,
                    _ => unreachable!(),
                })
                .collect();
            let matrix = pairwise_image_distances(&sets, params);
            References::Orb { sets, params, matrix }
        }
    };
    Ok(RadiusModel::from(RadiusModelData {
        metric,
        method: metric.method_name().to_owned(),
        radius: None,
        labels,
        refs,
    }))
}

impl RadiusModel {
    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn radius(&self) -> Option<f64> {
        self.radius
    }

    pub fn set_radius(&mut self, r: f64) {
        assert!(r >= 0.0, "radius must be non-negative");
        self.radius = Some(r);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn method(&self) -> &str {
        &self.method
    }

    pub fn set_method(&mut self, method: impl Into<String>) {
        self.method = method.into();
    }

    /// Reference points within `radius` of the query, excluding `exclude`.
    fn neighbours(&self, query: &Feature, radius: f64, exclude: Option<usize>) -> Result<Vec<(usize, f64)>> {
        if !query.fits(self.metric) {
            return Err(Error::MetricFeatureMismatch(self.metric.to_string()));
        }
        let mut out: Vec<(usize, f64)> = match (&self.refs, query) {
            (References::Hashes(_), Feature::Hash(q)) => {
                let index = self.hash_index.as_ref().expect("hash index is built on load");
                let r = radius.floor().min(64.0) as u32;
                index.range(*q, r).into_iter().map(|(i, d)| (i, d as f64)).collect()
            }
            (References::Unit(rows), Feature::Dense(v)) => {
                if v.dim() != rows[0].len() {
                    return Err(Error::DimensionMismatch {
                        expected: rows[0].len(),
                        actual: v.dim(),
                    });
                }
                let q = unit(v)?;
                rows.iter()
                    .enumerate()
                    .filter_map(|(i, r)| {
                        let d = cosine_dist_unit(r, &q);
                        (d <= radius).then_some((i, d))
                    })
                    .collect()
            }
            (References::Orb { sets, params, .. }, Feature::Descriptors(q)) => sets
                .par_iter()
                .enumerate()
                .filter_map(|(i, s)| match set_distance(s, q, *params) {
                    ImageDistance::Similar(d) if d as f64 <= radius => Some((i, d as f64)),
                    _ => None,
                })
                .collect(),
            _ => unreachable!("checked by fits()"),
        };
        if let Some(x) = exclude {
            out.retain(|&(i, _)| i != x);
        }
        Ok(out)
    }

    fn vote(&self, image_id: &str, neighbours: &[(usize, f64)]) -> Prediction {
        let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
        for &(i, d) in neighbours {
            let e = tally.entry(&self.labels[i]).or_insert((0, f64::INFINITY));
            e.0 += 1;
            e.1 = e.1.min(d);
        }
        // BTreeMap iterates in ascending label order, so keeping the first
        // best entry gives the lexicographic tie-break
        let mut best: Option<(&str, usize, f64)> = None;
        for (label, (count, min_d)) in tally {
            let better = match best {
                None => true,
                Some((_, bc, bd)) => count > bc || (count == bc && min_d < bd),
            };
            if better {
                best = Some((label, count, min_d));
            }
        }
        match best {
            Some((label, _, d)) => Prediction::template(image_id, label, 1.0 / (1.0 + d), &self.method),
            None => Prediction::templateless(image_id, &self.method),
        }
    }

    /// Classifies reference point `i` against all other references.
    pub fn predict_leave_one_out(&self, i: usize, image_id: &str) -> Result<Prediction> {
        let r = self.radius.ok_or(Error::RadiusUnset)?;
        let n = match &self.refs {
            References::Hashes(h) => self.neighbours(&Feature::Hash(h[i]), r, Some(i))?,
            // use the stored unit rows directly so distances are bit-identical
            // to the ones calibration saw
            References::Unit(rows) => rows
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .filter_map(|(j, row)| {
                    let d = cosine_dist_unit(row, &rows[i]);
                    (d <= r).then_some((j, d))
                })
                .collect(),
            References::Orb { matrix, .. } => matrix
                .row(i)
                .into_iter()
                .filter(|&(_, d)| d as f64 <= r)
                .map(|(j, d)| (j, d as f64))
                .collect(),
        };
        Ok(self.vote(image_id, &n))
    }

    /// Distance from reference `i` to its nearest other reference (`+inf`
    /// when it has none, which only happens for the feature-match metric).
    fn loo_nearest(&self, i: usize) -> f64 {
        match &self.refs {
            References::Hashes(h) => {
                let index = self.hash_index.as_ref().expect("hash index");
                let mut r = 0u32;
                loop {
                    let best = index
                        .range(h[i], r)
                        .into_iter()
                        .filter(|&(j, _)| j != i)
                        .map(|(_, d)| d)
                        .min();
                    if let Some(d) = best {
                        return d as f64;
                    }
                    if r >= 64 {
                        return f64::INFINITY;
                    }
                    r = (r * 2).clamp(1, 64);
                }
            }
            References::Unit(rows) => rows
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, r)| cosine_dist_unit(r, &rows[i]))
                .fold(f64::INFINITY, f64::min),
            References::Orb { matrix, .. } => matrix
                .row(i)
                .into_iter()
                .map(|(_, d)| d as f64)
                .fold(f64::INFINITY, f64::min),
        }
    }
}

/// Sets the radius to the largest leave-one-out nearest-neighbour distance,
/// the smallest radius at which no reference point is rejected.
///
/// Under the feature-match metric, references with no similar partner can
/// never be accepted; they are skipped with a warning.
pub fn calibrate_radius(model: &mut RadiusModel) -> Result<f64> {
    let n = model.len();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let nearest: Vec<f64> = (0..n).into_par_iter().map(|i| model.loo_nearest(i)).collect();
    let isolated = nearest.iter().filter(|d| d.is_infinite()).count();
    if isolated == n {
        return Err(Error::NoSimilarPairs);
    }
    if isolated > 0 {
        log::warn!("{isolated} of {n} references have no similar neighbour and are ignored by calibration");
    }
    let r = nearest
        .into_iter()
        .filter(|d| d.is_finite())
        .fold(0.0f64, f64::max)
        .max(0.0);
    model.radius = Some(r);
    Ok(r)
}

/// Majority label among references within the radius (ties: nearest, then
/// lexicographic); templateless when the neighbourhood is empty.
pub fn predict_radius(model: &RadiusModel, image_id: &str, query: &Feature) -> Result<Prediction> {
    let r = model.radius.ok_or(Error::RadiusUnset)?;
    let n = model.neighbours(query, r, None)?;
    Ok(model.vote(image_id, &n))
}

impl Classifier<Feature> for RadiusModel {
    fn classify(&self, image_id: &str, input: &Feature) -> Result<Prediction> {
        predict_radius(self, image_id, input)
    }
}
