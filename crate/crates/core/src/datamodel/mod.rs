//! Core tensors, label conventions, and the binary file formats.

mod bundle;
mod io;
mod maps;

pub use bundle::{
    BundleStage, HeadKind, Manifest, ModelBundle, TensorEntry, BUNDLE_FORMAT_VERSION,
    MANIFEST_FILE,
};
pub use io::{
    decode_feature_map, decode_label_map, decode_score_map, encode_feature_map, encode_label_map,
    encode_score_map, load_feature_map, load_label_map, load_outlier_map, load_score_map,
    save_feature_map, save_label_map, save_outlier_map, save_score_map, FMAP_MAGIC, FORMAT_VERSION,
    LMAP_MAGIC, SMAP_MAGIC,
};
pub use maps::{validate_pair, BinaryOutlierMap, FeatureMap, LabelMap, ScoreMap};

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;
/// Binary outlier map value for known-class pixels.
pub const INLIER: u8 = 0;
/// Binary outlier map value for pseudo-outlier pixels.
pub const OUTLIER: u8 = 1;
