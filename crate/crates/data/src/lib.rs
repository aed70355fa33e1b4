//! Paired cross-view data: manifests, PNG decoding, shared flip/crop
//! augmentation, seeded batching and a procedural toy dataset.

pub mod batch;
mod error;
pub mod image_io;
pub mod manifest;
pub mod sample;
pub mod seed;
pub mod toy;

pub use batch::{Batch, BatchIter, BatchPlan};
pub use error::{DataError, Result};
pub use manifest::{Manifest, ManifestEntry, MANIFEST_HEADER};
pub use sample::{load_pair, Augment, LoadOptions, SamplePair};
pub use toy::{generate_toy_dataset, render_toy, TOY_MANIFEST};

pub type SamplePair32 = SamplePair<f32>;
pub type Batch32 = Batch<f32>;
pub type Batch64 = Batch<f64>;
