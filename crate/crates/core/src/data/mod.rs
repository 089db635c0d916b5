//! Image datasets: the binary tensor format, a synthetic correlated-image
//! generator and pre-training augmentations.

mod augment;
mod dataset;
mod synthetic;

pub use augment::{augment, flip_horizontal, resize_crop, AugmentConfig, Interpolation, Normalization};
pub use dataset::{load_dataset, save_dataset, Dataset, DATASET_HEADER_LEN, DATASET_MAGIC};
pub use synthetic::{generate_synthetic, SyntheticSpec};
