//! Synthetic multi-domain datasets: generation, single-task label merging,
//! train/validation splitting, and the probe/gallery retrieval protocol.

pub mod generate;
pub mod io;
pub mod merge;
pub mod split;

use serde::{Deserialize, Serialize};

use crate::Tensor;

/// One labeled input vector. `local_label` lives in the sample's domain
/// (1-based, contiguous); `merged_label` is the global 1-based id assigned by
/// [`merge::merge_single_task`] and equals `local_label` until then.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub domain_id: u32,
    pub local_label: u32,
    pub merged_label: u32,
    #[serde(with = "flat_features")]
    pub features: Tensor,
}

impl Sample {
    /// Zero-based class index in the merged label space.
    pub fn merged_class(&self) -> usize {
        (self.merged_label - 1) as usize
    }

    /// Zero-based class index in the sample's own domain.
    pub fn local_class(&self) -> usize {
        (self.local_label - 1) as usize
    }
}

/// Serializes sample features as a flat number array.
mod flat_features {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, ser: S) -> Result<S::Ok, S::Error> {
        t.data().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<Tensor, D::Error> {
        let data = Vec::<f64>::deserialize(de)?;
        Tensor::new(vec![data.len()], data).map_err(serde::de::Error::custom)
    }
}

pub use generate::{generate_domain, DomainSpec};
pub use io::{read_samples_jsonl, write_samples_jsonl};
pub use merge::{merge_single_task, MergedDataset};
pub use split::{split_probe_gallery, split_train_val, ProbeGallery};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_serializes_features_flat() {
        let s = Sample {
            domain_id: 1,
            local_label: 3,
            merged_label: 7,
            features: Tensor::new(vec![2], vec![0.5, -1.5]).unwrap(),
        };
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(
            json,
            r#"{"domain_id":1,"local_label":3,"merged_label":7,"features":[0.5,-1.5]}"#
        );
        let back: Sample = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn class_indices_are_zero_based() {
        let s = Sample {
            domain_id: 0,
            local_label: 1,
            merged_label: 4,
            features: Tensor::zeros(vec![1]),
        };
        assert_eq!(s.local_class(), 0);
        assert_eq!(s.merged_class(), 3);
    }
}
