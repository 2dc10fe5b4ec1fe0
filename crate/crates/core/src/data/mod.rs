//! Dataset loading, splitting, normalization and variable-length sampling.

mod files;
mod sample;
mod sampling;
mod synth;

pub use files::{label_index, label_set, load_ett_csv, load_ucr, DataFormat, DatasetManifest, Series, UcrRecord};
pub use sample::{Normalization, Sample, Target, CONSTANT_STD};
pub use sampling::{
    chronological_split, draw_length, sliding_window_varlen, subsample_indices, subsample_ucr,
    SplitSpec, SubsampleMode,
};
pub use synth::{synth_generate, SynthDataset, SynthKind, SynthSpec};
