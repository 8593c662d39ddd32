//! Review service for template predictions.
//!
//! Annotators are served one `(image, method)` prediction at a time and
//! judge whether the predicted template is correct and whether the image is
//! a templated meme at all. Judgments go to an append-only log that is
//! replayed on start. The service reports Fleiss' kappa over the judgments
//! and exports majority-vote ground truth in the format the evaluator reads.

pub mod error;
pub mod journal;
pub mod server;
pub mod state;
pub mod tasks;

pub use error::{AnnotateError, Result};
pub use journal::{Journal, Judgment, Templated, Verdict};
pub use server::{router, serve, AppState, ServeConfig};
pub use state::{Agreement, AnnotationState, Export, ImageTruth};
pub use tasks::{build_tasks, Task};
