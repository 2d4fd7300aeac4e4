//! Feature files, sliding-window mean normalization and the synthetic
//! corpus generator.

mod format;
mod norm;
pub mod synthetic;

pub use format::{
    decode_features, encode_features, load_features, write_features, FeatureSequence,
    FEATURE_MAGIC, FEATURE_VERSION,
};
pub use norm::{sliding_mean_norm, window_bounds, DEFAULT_MEAN_NORM_WINDOW};
pub use synthetic::{
    generate_synthetic, language_names, write_corpus, Manifest, SyntheticCorpus,
    SyntheticCorpusSpec,
};

use crate::error::{Error, Result};

/// Checks every utterance has `channels` rows and applies mean
/// normalization when `window > 0`.
pub fn prepare(
    utts: &[FeatureSequence],
    channels: usize,
    window: usize,
) -> Result<Vec<FeatureSequence>> {
    utts.iter()
        .map(|u| {
            if u.channels() != channels {
                return Err(Error::Dimension {
                    op: "prepare_features",
                    lhs: vec![channels],
                    rhs: u.features.shape().to_vec(),
                });
            }
            let features = if window > 0 {
                sliding_mean_norm(&u.features, window)?
            } else {
                u.features.clone()
            };
            Ok(FeatureSequence {
                id: u.id.clone(),
                label: u.label,
                features,
            })
        })
        .collect()
}
