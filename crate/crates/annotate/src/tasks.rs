use std::collections::{BTreeMap, BTreeSet};

use memeforge_core::classify::Prediction;
use memeforge_core::ingest::ImageRecord;
use serde::{Deserialize, Serialize};

use crate::error::{AnnotateError, Result};

/// One prediction to be judged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub task_id: u64,
    pub image_id: String,
    pub image_url: String,
    pub method: String,
    /// Template id, or the templateless sentinel.
    pub predicted: String,
    pub templated: bool,
    /// A labeled image of the predicted template.
    pub reference_image_id: Option<String>,
    pub reference_url: Option<String>,
}

pub fn image_url(id: &str) -> String {
    format!("/api/images/{id}")
}

/// Builds the task pool: one task per prediction, ordered by
/// `(image_id, method)` and numbered from 1. The reference image of a
/// template is its lexicographically smallest labeled record.
pub fn build_tasks(preds: &[Prediction], manifest: &[ImageRecord]) -> Result<Vec<Task>> {
    let known: BTreeSet<&str> = manifest.iter().map(|r| r.id.as_str()).collect();
    let mut references: BTreeMap<&str, &str> = BTreeMap::new();
    for r in manifest {
        if let Some(t) = r.template_id() {
            let e = references.entry(t).or_insert(r.id.as_str());
            if r.id.as_str() < *e {
                *e = r.id.as_str();
            }
        }
    }
    let mut sorted: Vec<&Prediction> = preds.iter().collect();
    sorted.sort_by(|a, b| (&a.image_id, &a.method).cmp(&(&b.image_id, &b.method)));
    for w in sorted.windows(2) {
        if w[0].image_id == w[1].image_id && w[0].method == w[1].method {
            return Err(AnnotateError::DuplicatePrediction {
                image_id: w[0].image_id.clone(),
                method: w[0].method.clone(),
            });
        }
    }
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            if !known.contains(p.image_id.as_str()) {
                return Err(AnnotateError::MissingImage(p.image_id.clone()));
            }
            let reference = match p.label.template_id() {
                Some(t) => Some(
                    references
                        .get(t)
                        .map(|s| s.to_string())
                        .ok_or_else(|| AnnotateError::MissingReference(t.to_owned()))?,
                ),
                None => None,
            };
            Ok(Task {
                task_id: i as u64 + 1,
                image_id: p.image_id.clone(),
                image_url: image_url(&p.image_id),
                method: p.method.clone(),
                predicted: p.label.to_string(),
                templated: p.label.is_templated(),
                reference_url: reference.as_deref().map(image_url),
                reference_image_id: reference,
            })
        })
        .collect()
}
