//! Synthetic low/high-resolution text image pairs.

mod alphabet;
mod dataset;
mod font;
mod render;

pub use alphabet::{Alphabet, BLANK, NUM_CLASSES};
pub use dataset::{
    batch_frame_targets, batch_hr, batch_lr, build_dataset, build_dataset_with, generate_sample, random_label, sample_rng,
    BlurRanges, Dataset, DatasetManifest, SamplePair, SplitCounts, FORMAT_VERSION, MAGIC,
};
pub use font::{glyph_mask, CELL_HEIGHT, CELL_WIDTH};
pub use render::{
    box_downsample, degrade, draw, frame_labels, frame_positions, gaussian_blur, gaussian_taps, layout_label, render_hr,
    Difficulty, GrayImage, Layout, NoiseLevels, FRAMES, FRAME_WIDTH, HR_HEIGHT, HR_WIDTH, LR_HEIGHT, LR_WIDTH,
    MAX_LABEL_LEN,
};
