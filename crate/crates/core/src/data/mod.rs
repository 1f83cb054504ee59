//! Dataset ingestion, long-tail-aware splitting, preprocessing and the
//! synthetic long-tailed generator.

mod manifest;
mod preprocess;
mod source;
mod synthetic;

use ndarray::Array3;

pub use manifest::{scan_dataset, split_manifest, split_sizes, DatasetManifest, SampleEntry, Split};
pub use preprocess::{
    augment_and_crop, load_rgb, normalize, preprocess, preprocess_eval, Mode, PreprocessSpec, CLIP_MEAN, CLIP_STD,
};
pub use source::Dataset;
pub use synthetic::{
    class_templates, geometric_counts, make_synthetic_longtail, partner_class, SyntheticConfig, SyntheticDataset,
};

/// Normalized image tensor laid out `(H, W, 3)`.
pub type Image = Array3<f32>;
