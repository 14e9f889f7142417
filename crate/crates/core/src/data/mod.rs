//! Image ingestion, sparse label sampling, patch extraction and batching.

pub mod batch;
pub mod image;
pub mod patch;
pub mod sparse;
pub mod synth;

pub use self::batch::{make_batches, BatchConfig, BatchStream};
pub use self::image::{load_images, load_manifest, ClassId, LabeledImage};
pub use self::patch::{extract_patch, MaskSpec, PatchSample};
pub use self::sparse::{sample_sparse_labels, SparseLabel, SparseLabelSet};
pub use self::synth::{synth_generate, SynthSpec};
