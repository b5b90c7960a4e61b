//! Synthetic moving-figure clips and the dataset container.

mod dataset;
mod scene;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, DatasetIndex, IndexFile, Sample, SampleRecord,
    Split, INDEX_VERSION,
};
pub use scene::{
    camouflage_report, clip_id, generate_clip, render_clip, CameraMode, CamouflageReport, Clip,
    SceneConfig, TextureMode,
};
