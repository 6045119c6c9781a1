//! Manifests, feature files, splits and synthetic data.

mod features;
mod manifest;
mod split;
pub mod synth;

pub use features::{
    decode_feature_file, encode_feature_file, load_features, read_feature_file, write_feature_file,
    write_feature_file_f32, zero_audio, FEATURE_MAGIC,
};
pub use manifest::{
    manifest_to_csv, parse_manifest, read_manifest, write_manifest, Manifest, Split, VideoRecord,
    MANIFEST_HEADER, NORMAL_CLASS,
};
pub use split::{class_allocation, largest_remainder, stratified_split, DEFAULT_RATIOS};
pub use synth::{generate, synthesize_dataset, SynthSpec, SyntheticVideo, MANIFEST_FILE};

/// Per-scene class census of the MAVAD dataset (Mgarr, Zejtun Scrapyard,
/// Zejtun Field).
pub const MAVAD_CENSUS: [(&str, [usize; 3]); 11] = [
    ("normal", [161, 117, 125]),
    ("pedestrians", [65, 7, 19]),
    ("pedestrians crossing the road", [21, 48, 33]),
    ("bicycle", [10, 12, 17]),
    ("bus", [20, 0, 1]),
    ("exit side street", [44, 0, 0]),
    ("heavy goods vehicle", [21, 4, 3]),
    ("obstruction", [3, 10, 8]),
    ("u-turn", [1, 9, 6]),
    ("scooter", [0, 3, 2]),
    ("horse", [0, 2, 0]),
];

pub const MAVAD_SCENES: [&str; 3] = ["mgarr", "zejtun-scrapyard", "zejtun-field"];
