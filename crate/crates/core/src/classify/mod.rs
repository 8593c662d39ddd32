//! Supervised template identification with open-set rejection.
//!
//! Every classifier returns a [`Prediction`]: a concrete template or the
//! templateless sentinel, with a method-specific confidence score.

mod gated;
mod hash_index;
mod mlr;
mod radius;
mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ingest::TemplateLabel;

pub use gated::{predict_gated, AlwaysAccept, BinaryGate};
pub use hash_index::HashIndex;
pub use mlr::{fit_mlr, fit_mlr_with_history, mlr_loss_and_grad, predict_mlr, MlrHyper, MlrModel};
pub use radius::{calibrate_radius, fit_radius, fit_radius_with, predict_radius, Feature, Metric, RadiusModel};
pub use sparse::{
    build_dictionary, dictionary_column, l1_objective, predict_sparse, sci, solve_l1, L1Solution, SparseDictionary,
    DEFAULT_LAMBDA, DEFAULT_SCI_THRESHOLD, DICTIONARY_SIDE,
};

/// Per-image output of a method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub image_id: String,
    pub label: TemplateLabel,
    /// Higher is more confident; always 0 for templateless predictions.
    pub score: f64,
    pub method: String,
}

impl Prediction {
    pub fn templateless(image_id: &str, method: &str) -> Self {
        Self {
            image_id: image_id.to_owned(),
            label: TemplateLabel::Templateless,
            score: 0.0,
            method: method.to_owned(),
        }
    }

    pub fn template(image_id: &str, template: &str, score: f64, method: &str) -> Self {
        Self {
            image_id: image_id.to_owned(),
            label: TemplateLabel::template(template),
            score,
            method: method.to_owned(),
        }
    }
}

/// Anything that maps an input of type `I` to a prediction.
pub trait Classifier<I: ?Sized>: Send + Sync {
    fn classify(&self, image_id: &str, input: &I) -> Result<Prediction>;
}
