//! Seeded stand-in for a dialect corpus.
//!
//! Every language has a signature: a per-channel mean profile, a per-channel
//! amplitude envelope built from a few formant-like bumps, and a second-order
//! autoregressive filter that shapes the temporal texture. An utterance of
//! language `L` is
//!
//! ```text
//! x[c, t] = bias_L[c] + amp_L[c] · ar_L(c, t) + noise · (offset_u[c] + white[c, t])
//! ```
//!
//! where `ar_L` is unit-variance AR(2) noise, `offset_u` a per-utterance
//! channel offset and `white` i.i.d. Gaussian. Raising `noise_level` blurs
//! the classes; sliding mean normalization removes `bias` and `offset` but
//! keeps the envelope and the filter.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::format::{encode_features, FeatureSequence};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// One formant-like bump of the amplitude envelope.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Formant {
    /// Centre channel (fractional).
    pub center: f64,
    pub width: f64,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Signature {
    /// `e_t = ar[0]·e_{t−1} + ar[1]·e_{t−2} + w_t`; must be stationary.
    pub ar: [f64; 2],
    pub formants: Vec<Formant>,
    /// Per-channel mean; empty means zero.
    #[serde(default)]
    pub bias: Vec<f64>,
}

impl Signature {
    fn random(rng: &mut rng::Rng, channels: usize) -> Self {
        let radius = rng.random_range(0.3..0.9);
        let angle = rng.random_range(0.3..2.8_f64);
        let formants = (0..3)
            .map(|_| Formant {
                center: rng.random_range(0.0..channels as f64),
                width: rng.random_range(0.5..2.0) + channels as f64 / 12.0,
                gain: rng.random_range(0.5..1.5),
            })
            .collect();
        let bias = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Signature {
            ar: [2.0 * radius * angle.cos(), -radius * radius],
            formants,
            bias,
        }
    }

    /// Per-channel amplitude: a floor of 0.2 plus the formant bumps.
    pub fn envelope(&self, channels: usize) -> Vec<f64> {
        (0..channels)
            .map(|c| {
                let c = c as f64;
                0.2 + self
                    .formants
                    .iter()
                    .map(|f| f.gain * (-(c - f.center).powi(2) / (2.0 * f.width * f.width)).exp())
                    .sum::<f64>()
            })
            .collect()
    }

    fn is_stationary(&self) -> bool {
        let [a1, a2] = self.ar;
        a2.abs() < 1.0 && a1 + a2 < 1.0 && a2 - a1 < 1.0
    }

    /// Stationary variance of the AR(2) process with unit innovations.
    fn ar_variance(&self) -> f64 {
        let [a1, a2] = self.ar;
        (1.0 - a2) / ((1.0 + a2) * ((1.0 - a2).powi(2) - a1 * a1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticCorpusSpec {
    pub num_languages: usize,
    /// Utterances generated per language, held-out ones included.
    pub utterances_per_language: usize,
    /// Of those, how many go to the test split.
    pub holdout_per_language: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub channels: usize,
    pub noise_level: f64,
    pub seed: u64,
    /// Explicit signatures, one per language; drawn from the seed when empty.
    pub signatures: Vec<Signature>,
}

impl Default for SyntheticCorpusSpec {
    fn default() -> Self {
        SyntheticCorpusSpec {
            num_languages: 6,
            utterances_per_language: 50,
            holdout_per_language: 10,
            frames_min: 200,
            frames_max: 500,
            channels: 67,
            noise_level: 0.5,
            seed: 0,
            signatures: Vec::new(),
        }
    }
}

impl SyntheticCorpusSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SyntheticCorpusSpec =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_languages < 2 {
            return Err(Error::Config("need at least two languages".into()));
        }
        if self.utterances_per_language == 0
            || self.holdout_per_language > self.utterances_per_language
        {
            return Err(Error::Config(format!(
                "holdout_per_language {} must not exceed utterances_per_language {} (> 0)",
                self.holdout_per_language, self.utterances_per_language
            )));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return Err(Error::Config(format!(
                "bad frame range {}..={}",
                self.frames_min, self.frames_max
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::Config(
                "noise_level must be finite and non-negative".into(),
            ));
        }
        if !self.signatures.is_empty() {
            if self.signatures.len() != self.num_languages {
                return Err(Error::Config(format!(
                    "{} signatures given for {} languages",
                    self.signatures.len(),
                    self.num_languages
                )));
            }
            for (i, s) in self.signatures.iter().enumerate() {
                if !s.is_stationary() {
                    return Err(Error::Config(format!(
                        "signature {i}: AR filter {:?} is not stationary",
                        s.ar
                    )));
                }
                if !s.bias.is_empty() && s.bias.len() != self.channels {
                    return Err(Error::Config(format!(
                        "signature {i}: bias has {} entries for {} channels",
                        s.bias.len(),
                        self.channels
                    )));
                }
                if let Some(j) = self.signatures[..i].iter().position(|o| o == s) {
                    return Err(Error::Config(format!(
                        "signatures {j} and {i} are identical"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn language_signatures(&self) -> Vec<Signature> {
        if !self.signatures.is_empty() {
            return self.signatures.clone();
        }
        (0..self.num_languages)
            .map(|l| {
                Signature::random(
                    &mut rng::stream(self.seed, "signature", l as u64),
                    self.channels,
                )
            })
            .collect()
    }
}

pub fn language_names(n: usize) -> Vec<String> {
    (0..n).map(|l| format!("lang{l}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub train: Vec<FeatureSequence>,
    pub test: Vec<FeatureSequence>,
    pub languages: Vec<String>,
}

fn utterance(
    spec: &SyntheticCorpusSpec,
    sig: &Signature,
    env: &[f64],
    rng: &mut rng::Rng,
) -> Vec<f64> {
    let frames = rng.random_range(spec.frames_min..=spec.frames_max);
    let c_n = spec.channels;
    let ar_scale = 1.0 / sig.ar_variance().sqrt();
    let warmup = 50;
    let mut data = vec![0.0; c_n * frames];
    for c in 0..c_n {
        let offset: f64 = StandardNormal.sample(rng);
        let bias = sig.bias.get(c).copied().unwrap_or(0.0);
        let (mut e1, mut e2) = (0.0, 0.0);
        for t in 0..frames + warmup {
            let w: f64 = StandardNormal.sample(rng);
            let e = sig.ar[0] * e1 + sig.ar[1] * e2 + w;
            e2 = e1;
            e1 = e;
            if t >= warmup {
                let white: f64 = StandardNormal.sample(rng);
                data[c * frames + t - warmup] =
                    bias + env[c] * ar_scale * e + spec.noise_level * (offset + white);
            }
        }
    }
    data
}

/// Generates the corpus; identical specs give identical corpora.
pub fn generate_synthetic(spec: &SyntheticCorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let sigs = spec.language_signatures();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (l, sig) in sigs.iter().enumerate() {
        let env = sig.envelope(spec.channels);
        let mut utts = Vec::with_capacity(spec.utterances_per_language);
        for u in 0..spec.utterances_per_language {
            let mut r = rng::stream(spec.seed, &format!("utterance/{l}"), u as u64);
            let data = utterance(spec, sig, &env, &mut r);
            let frames = data.len() / spec.channels;
            utts.push(FeatureSequence::new(
                format!("lang{l}_{u:04}"),
                l,
                Tensor::new(vec![spec.channels, frames], data)?,
            )?);
        }
        let mut order: Vec<usize> = (0..utts.len()).collect();
        order.shuffle(&mut rng::stream(spec.seed, "split", l as u64));
        let held: std::collections::HashSet<usize> =
            order[..spec.holdout_per_language].iter().copied().collect();
        for (u, utt) in utts.into_iter().enumerate() {
            if held.contains(&u) {
                test.push(utt);
            } else {
                train.push(utt);
            }
        }
    }
    Ok(SyntheticCorpus {
        train,
        test,
        languages: language_names(spec.num_languages),
    })
}

/// What [`write_corpus`] produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub languages: Vec<String>,
    pub files: Vec<ManifestFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: PathBuf,
    pub utterances: usize,
    pub sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes `train.dmsf`, `test.dmsf` and `manifest.toml` into `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for (name, utts) in [("train.dmsf", &corpus.train), ("test.dmsf", &corpus.test)] {
        let bytes = encode_features(utts)?;
        let path = dir.join(name);
        std::fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        files.push(ManifestFile {
            path,
            utterances: utts.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        languages: corpus.languages.clone(),
        files,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ar_variance_matches_simulation() {
        let sig = Signature {
            ar: [0.5, -0.3],
            formants: vec![],
            bias: vec![],
        };
        let mut r = rng::stream(1, "test", 0);
        let (mut e1, mut e2, mut acc) = (0.0, 0.0, 0.0);
        let n = 200_000;
        for _ in 0..n {
            let w: f64 = StandardNormal.sample(&mut r);
            let e = 0.5 * e1 - 0.3 * e2 + w;
            e2 = e1;
            e1 = e;
            acc += e * e;
        }
        let var = acc / n as f64;
        assert!(
            (var / sig.ar_variance() - 1.0).abs() < 0.03,
            "{var} vs {}",
            sig.ar_variance()
        );
    }

    #[test]
    fn duplicate_signatures_are_rejected() {
        let sig = Signature {
            ar: [0.5, -0.3],
            formants: vec![Formant {
                center: 1.0,
                width: 1.0,
                gain: 1.0,
            }],
            bias: vec![],
        };
        let spec = SyntheticCorpusSpec {
            num_languages: 2,
            signatures: vec![sig.clone(), sig],
            ..Default::default()
        };
        assert!(spec
            .validate()
            .unwrap_err()
            .to_string()
            .contains("identical"));
    }

    #[test]
    fn explosive_filter_is_rejected() {
        let spec = SyntheticCorpusSpec {
            num_languages: 2,
            signatures: vec![
                Signature {
                    ar: [1.5, 0.0],
                    formants: vec![],
                    bias: vec![],
                },
                Signature {
                    ar: [0.1, 0.0],
                    formants: vec![],
                    bias: vec![],
                },
            ],
            ..Default::default()
        };
        assert!(spec.validate().is_err());
    }
}
