//! Meme template identification.
//!
//! The crate covers the whole offline pipeline: loading manifests of images,
//! computing global features (histograms, LBP, 64-bit DCT perceptual hashes)
//! and ORB-style keypoint descriptors, open-set template classifiers (radius
//! nearest neighbours, multinomial logistic regression, sparse representation
//! with SCI rejection, gated composition), density clustering with label
//! transfer, and the evaluation metrics used to compare all of them.
//!
//! ```
//! use memeforge_core::features::{hamming, phash};
//! use memeforge_core::raster::GrayImage;
//!
//! let img = GrayImage::from_fn(64, 64, |x, y| ((x * 3 + y * 5) % 256) as u8);
//! let h = phash(&img);
//! assert_eq!(hamming(h, h), 0);
//! ```

pub mod classify;
pub mod cluster;
pub mod error;
pub mod features;
pub mod ingest;
pub mod keypoints;
pub mod linalg;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
pub use ingest::{ImageRecord, Rect, Source, TemplateLabel};
