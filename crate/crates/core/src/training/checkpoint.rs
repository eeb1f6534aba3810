//! Checkpoints: a binary weight manifest plus a JSON sidecar with run metadata.
//!
//! For a checkpoint at `run/best.enfw` the files are:
//!
//! ```text
//! run/best.enfw        parameters and buffers (weight-manifest format)
//! run/best.enfw.json   metadata, see [`CheckpointMeta`]
//! run/best.enfw.optim  optimizer moments (weight-manifest format), when present
//! ```
//!
//! Every file is written atomically. The sidecar records the sha-256 of the weight
//! and optimizer files so a mismatched pair is detected on load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimizerState;
use super::trainer::EpochRecord;
use crate::error::{Error, Result};
use crate::models::Segmenter;
use crate::params::{write_atomic, WeightManifest};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: String,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer updates performed so far.
    pub global_step: usize,
    /// Not finite before the first validation; stored as null then.
    #[serde(with = "non_finite")]
    pub val_dice: f64,
    #[serde(with = "non_finite")]
    pub best_val_dice: f64,
    pub config_hash: String,
    pub seed: u64,
    /// Word position of the training random stream; a string because it is a u128.
    pub rng_word_pos: String,
    pub weights_sha256: String,
    #[serde(default)]
    pub optimizer: Option<OptimizerMeta>,
    #[serde(default)]
    pub history: Vec<EpochRecord>,
}

/// JSON has no NaN or infinity: those are written as null and read back as NaN, and
/// `-inf` as the string `"-inf"`.
mod non_finite {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Tag(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => f64::NAN,
            Some(Repr::Num(v)) => v,
            Some(Repr::Tag(t)) => match t.as_str() {
                "-inf" => f64::NEG_INFINITY,
                "inf" => f64::INFINITY,
                other => return Err(serde::de::Error::custom(format!("not a number: {other}"))),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub sha256: String,
    pub steps: Vec<(String, u64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub weights: WeightManifest,
    pub optimizer: Option<OptimizerState>,
}

/// Hex sha-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    suffixed(path, "json")
}

pub fn optimizer_path(path: &Path) -> PathBuf {
    suffixed(path, "optim")
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

impl Checkpoint {
    /// Snapshot of a model's parameters and buffers with fresh metadata.
    pub fn capture(model: &Segmenter, meta: CheckpointMeta, optimizer: Option<OptimizerState>) -> Result<Self> {
        let weights = model.store().to_manifest()?;
        Ok(Self {
            meta,
            weights,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut meta = self.meta.clone();
        meta.format_version = FORMAT_VERSION;
        meta.weights_sha256 = self.weights.digest_hex();
        meta.optimizer = match &self.optimizer {
            Some(state) => {
                state.moments.save(&optimizer_path(path))?;
                Some(OptimizerMeta {
                    sha256: state.moments.digest_hex(),
                    steps: state.steps.clone(),
                })
            }
            None => None,
        };
        self.weights.save(path)?;
        // the sidecar goes last so a crash never leaves it pointing at missing data
        write_atomic(&sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)
    }

    /// Loads and cross-checks all files. With `expected_hash`, a differing config
    /// hash is an error unless `allow_config_mismatch` is set, in which case it is
    /// only logged.
    pub fn load(path: &Path, expected_hash: Option<&str>, allow_config_mismatch: bool) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&text).map_err(|e| Error::Integrity {
            path: side.clone(),
            reason: format!("unreadable metadata: {e}"),
        })?;
        if meta.format_version != FORMAT_VERSION {
            return Err(Error::Integrity {
                path: side,
                reason: format!("unsupported format version {}", meta.format_version),
            });
        }
        let weights = WeightManifest::load(path)?;
        if weights.digest_hex() != meta.weights_sha256 {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                reason: "weights do not match the checksum recorded in the metadata".into(),
            });
        }
        let optimizer = match &meta.optimizer {
            Some(om) => {
                let opath = optimizer_path(path);
                let moments = WeightManifest::load(&opath)?;
                if moments.digest_hex() != om.sha256 {
                    return Err(Error::Integrity {
                        path: opath,
                        reason: "optimizer state does not match the recorded checksum".into(),
                    });
                }
                Some(OptimizerState {
                    moments,
                    steps: om.steps.clone(),
                })
            }
            None => None,
        };
        if let Some(expected) = expected_hash {
            if expected != meta.config_hash {
                if allow_config_mismatch {
                    log::warn!(
                        "checkpoint {} was written under config {} (current {expected})",
                        path.display(),
                        meta.config_hash
                    );
                } else {
                    return Err(Error::ConfigMismatch {
                        expected: expected.to_string(),
                        found: meta.config_hash.clone(),
                    });
                }
            }
        }
        Ok(Self {
            meta,
            weights,
            optimizer,
        })
    }

    /// Writes the stored parameters and buffers into `model`.
    pub fn restore(&self, model: &Segmenter) -> Result<()> {
        if self.meta.model != model.assembly().name {
            return Err(Error::WeightMismatch(format!(
                "checkpoint holds `{}` but the model is `{}`",
                self.meta.model,
                model.assembly().name
            )));
        }
        model.store().assign("", &self.weights, true)?;
        Ok(())
    }

    pub fn rng_word_pos(&self) -> Result<u128> {
        self.meta.rng_word_pos.parse().map_err(|_| Error::Integrity {
            path: PathBuf::new(),
            reason: format!("bad rng position `{}`", self.meta.rng_word_pos),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn meta(model: &str, hash: &str) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            model: model.into(),
            epoch: 3,
            global_step: 12,
            val_dice: 0.5,
            best_val_dice: 0.6,
            config_hash: hash.into(),
            seed: 9,
            rng_word_pos: "123456789012345678901234567890".into(),
            weights_sha256: String::new(),
            optimizer: None,
            history: Vec::new(),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck/best.enfw");
        let model = Segmenter::from_name("enformer-lite-mini-tiny", 1).unwrap();
        let x = crate::gradcheck::seeded_normal(&[1, 3, 64, 64], 2, DType::F32, &Device::Cpu).unwrap();
        let before = model.forward(&x, false).unwrap();
        let ck = Checkpoint::capture(&model, meta("enformer-lite-mini-tiny", "abc"), None).unwrap();
        ck.save(&path).unwrap();

        let other = Segmenter::from_name("enformer-lite-mini-tiny", 77).unwrap();
        assert_ne!(
            other
                .forward(&x, false)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap(),
            before.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let loaded = Checkpoint::load(&path, Some("abc"), false).unwrap();
        loaded.restore(&other).unwrap();
        let after = other.forward(&x, false).unwrap();
        assert_eq!(
            after.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            before.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        assert_eq!(loaded.rng_word_pos().unwrap(), 123456789012345678901234567890);
    }

    #[test]
    fn corruption_and_mismatch_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.enfw");
        let model = Segmenter::from_name("enformer-lite-mini-tiny", 1).unwrap();
        Checkpoint::capture(&model, meta("enformer-lite-mini-tiny", "abc"), None)
            .unwrap()
            .save(&path)
            .unwrap();

        let err = Checkpoint::load(&path, Some("other"), false).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch { .. }), "{err}");
        assert!(Checkpoint::load(&path, Some("other"), true).is_ok());

        let wrong = Segmenter::from_name("enformer-lite-large-tiny", 1).unwrap();
        let ck = Checkpoint::load(&path, None, false).unwrap();
        assert!(ck.restore(&wrong).is_err());

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        let err = Checkpoint::load(&path, None, false).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }), "{err}");
    }

    #[test]
    fn non_finite_scores_survive_json() {
        let mut m = meta("x", "h");
        m.val_dice = f64::NAN;
        m.best_val_dice = f64::NEG_INFINITY;
        let text = serde_json::to_string(&m).unwrap();
        let back: CheckpointMeta = serde_json::from_str(&text).unwrap();
        assert!(back.val_dice.is_nan());
        assert_eq!(back.best_val_dice, f64::NEG_INFINITY);
        m.val_dice = 0.75;
        let back: CheckpointMeta = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back.val_dice, 0.75);
    }
}
