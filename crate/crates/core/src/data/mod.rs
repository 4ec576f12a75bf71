//! Image I/O, augmentation and the synthetic paired-data generator.

mod dataset;
pub mod pnm;
mod synth;

pub use dataset::{make_synthetic_pair, random_crop_flip, verify_pairs, Batcher, CropFlip, Dataset, PairCheck, PairedSample, Physics};
pub use pnm::{read_image, read_map, write_image, write_map};
pub use synth::{smooth_field, synthetic_clear, SyntheticConfig};
