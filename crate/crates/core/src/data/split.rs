//! Dataset splits: stratified train/validation and the single-shot
//! probe/gallery retrieval protocol.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{MergedDataset, Sample};
use crate::rng::{mix_seed, SALT_EVAL, SALT_SPLIT};
use crate::{Error, Result};

/// Splits a merged dataset into train and validation parts, stratified per
/// identity: each identity contributes `round(val_fraction * count)` samples
/// to validation, always keeping at least one training sample.
pub fn split_train_val(
    dataset: &MergedDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(MergedDataset, MergedDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in (0,1), got {val_fraction}"
        )));
    }
    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        by_identity.entry(s.merged_label).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_SPLIT));
    let mut is_val = vec![false; dataset.len()];
    for (label, mut indices) in by_identity {
        indices.shuffle(&mut rng);
        let count = indices.len();
        let wanted = (val_fraction * count as f64).round() as usize;
        let n_val = if wanted >= count {
            log::warn!(
                "identity {label} has {count} sample(s); keeping one in train despite \
                 val_fraction {val_fraction}"
            );
            count - 1
        } else {
            wanted
        };
        for &i in indices.iter().take(n_val) {
            is_val[i] = true;
        }
    }

    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        if is_val[i] {
            val.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    Ok((dataset.with_samples(train), dataset.with_samples(val)))
}

/// Single-shot retrieval protocol for one domain: one gallery sample per
/// identity, all remaining samples as probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeGallery {
    pub domain_id: u32,
    pub probes: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

/// Builds the probe/gallery split from one domain's held-out-identity
/// samples. Identities with fewer than two samples are excluded with a
/// warning (they could not have both a probe and a gallery entry).
pub fn split_probe_gallery(samples: &[Sample], seed: u64) -> Result<ProbeGallery> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("probe/gallery split needs samples".into()));
    }
    let domain_id = samples[0].domain_id;
    if samples.iter().any(|s| s.domain_id != domain_id) {
        return Err(Error::InvalidArgument(
            "probe/gallery split takes samples of a single domain".into(),
        ));
    }
    let mut by_identity: BTreeMap<u32, Vec<&Sample>> = BTreeMap::new();
    for s in samples {
        by_identity.entry(s.local_label).or_default().push(s);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, SALT_EVAL));
    let mut probes = Vec::new();
    let mut gallery = Vec::new();
    for (label, group) in by_identity {
        if group.len() < 2 {
            log::warn!(
                "identity {label} of domain {domain_id} has {} sample(s); excluded from the \
                 retrieval protocol",
                group.len()
            );
            continue;
        }
        let pick = rng.random_range(0..group.len());
        for (k, s) in group.into_iter().enumerate() {
            if k == pick {
                gallery.push(s.clone());
            } else {
                probes.push(s.clone());
            }
        }
    }
    if gallery.is_empty() {
        return Err(Error::InvalidArgument(
            "no identity has enough samples for the retrieval protocol".into(),
        ));
    }
    Ok(ProbeGallery { domain_id, probes, gallery })
}
