//! DMSF feature files: `DMSF` magic, version, utterance count, then per
//! utterance its id, label, channel and frame counts and a row-major
//! little-endian f64 payload; a CRC32 of everything before it closes the
//! file.

use std::path::Path;

use crate::binary::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"DMSF";
pub const FEATURE_VERSION: u32 = 1;

/// One utterance: features `[channels × frames]` and its language label.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: String,
    pub label: usize,
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn new(id: impl Into<String>, label: usize, features: Tensor) -> Result<Self> {
        let (_, frames) = features.dims2()?;
        if frames == 0 {
            return Err(Error::Shape(
                "a feature sequence needs at least one frame".into(),
            ));
        }
        Ok(FeatureSequence {
            id: id.into(),
            label,
            features,
        })
    }

    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

pub fn encode_features(utts: &[FeatureSequence]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.len("utterance count", utts.len())?;
    for u in utts {
        w.str(&u.id)?;
        let label = i32::try_from(u.label)
            .map_err(|_| Error::Config(format!("label {} too large", u.label)))?;
        w.i32(label);
        w.len("channels", u.channels())?;
        w.len("frames", u.frames())?;
        w.f64s(u.features.data());
    }
    Ok(w.finish())
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureSequence>> {
    let mut r = Reader::checked(bytes, FEATURE_MAGIC)?;
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return r.fail(format!("unsupported feature file version {version}"));
    }
    let count = r.u32("utterance count")? as usize;
    let mut utts = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let id = r.str("utterance id")?;
        let at = r.offset();
        let label = r.i32("label")?;
        let label = usize::try_from(label).map_err(|_| Error::Format {
            offset: at,
            message: format!("negative label {label} for utterance {id}"),
        })?;
        let channels = r.u32("channels")? as usize;
        let at = r.offset();
        let frames = r.u32("frames")? as usize;
        if channels == 0 || frames == 0 {
            return Err(Error::Format {
                offset: at,
                message: format!("utterance {id} declares an empty {channels}×{frames} matrix"),
            });
        }
        let data = r.f64s(channels * frames, "feature payload")?;
        utts.push(FeatureSequence {
            id,
            label,
            features: Tensor::new(vec![channels, frames], data)?,
        });
    }
    r.finish()?;
    Ok(utts)
}

pub fn write_features(path: &Path, utts: &[FeatureSequence]) -> Result<()> {
    let bytes = encode_features(utts)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}
