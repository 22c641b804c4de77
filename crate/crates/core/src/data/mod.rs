//! Labels, images, synthetic data and AP evaluation.

pub mod eval;
pub mod kitti;
pub mod ppm;
pub mod synth;

pub use eval::{average_precision, evaluate, DEFAULT_EVAL_IOU, ApResult, EvalCell, EvalGt, EvalImage, EvalReport, ImageEval, ScoredBox};
pub use kitti::{
    format_kitti_labels, parse_kitti_labels, read_kitti_labels, split_dataset, DifficultyBucket, KittiLabel, BUCKETS,
    EASY, HARD, MODERATE,
};
pub use ppm::{decode_ppm, draw_box, encode_ppm, image_to_tensor, read_ppm, write_ppm};
pub use synth::{generate_sample, generate_synthetic_dataset, load_dataset, write_dataset, Sample, SynthSpec, SYNTH_CLASSES};
pub use image::RgbImage;
