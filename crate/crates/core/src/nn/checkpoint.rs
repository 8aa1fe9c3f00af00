//! Model checkpoints: versioned JSON documents with layer shapes and flat
//! parameter arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::nn::model::{EncoderModel, HeadSet};
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: &str = "dgd-lab.v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: String,
    pub encoder: EncoderModel,
    pub heads: HeadSet,
}

impl Checkpoint {
    pub fn new(encoder: EncoderModel, heads: HeadSet) -> Self {
        Self { version: CHECKPOINT_VERSION.to_string(), encoder, heads }
    }
}

/// Writes a checkpoint as canonical JSON. The encoding is deterministic, so
/// save -> load -> save is bytewise stable.
pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(checkpoint)?;
    fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let checkpoint: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("malformed checkpoint {}: {e}", path.display())))?;
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {:?} in {} (expected {CHECKPOINT_VERSION:?})",
            checkpoint.version,
            path.display()
        )));
    }
    for layer in checkpoint.encoder.layers() {
        layer.weights.check_finite("checkpoint encoder weights")?;
        layer.bias.check_finite("checkpoint encoder bias")?;
    }
    Ok(checkpoint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::ClassifierHead;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderModel::random(4, &[6], 5, &mut rng).unwrap();
        let head = ClassifierHead::random(3, 5, &mut rng).unwrap();
        Checkpoint::new(encoder, HeadSet::Single(head))
    }

    #[test]
    fn save_load_save_is_bytewise_stable() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("model.json");
        let second = dir.path().join("model2.json");
        let ckpt = sample_checkpoint(8);
        save_checkpoint(&ckpt, &first).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        assert_eq!(loaded, ckpt);
        save_checkpoint(&loaded, &second).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut ckpt = sample_checkpoint(9);
        ckpt.version = "dgd-lab.v0".into();
        save_checkpoint(&ckpt, &path).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn missing_file_is_a_checkpoint_error() {
        let err = load_checkpoint(Path::new("/nonexistent/model.json")).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn per_domain_heads_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let encoder = EncoderModel::random(3, &[], 4, &mut rng).unwrap();
        let heads = HeadSet::PerDomain(
            [
                (0u32, ClassifierHead::random(2, 4, &mut rng).unwrap()),
                (1u32, ClassifierHead::random(5, 4, &mut rng).unwrap()),
            ]
            .into_iter()
            .collect(),
        );
        let ckpt = Checkpoint::new(encoder, heads);
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }
}
