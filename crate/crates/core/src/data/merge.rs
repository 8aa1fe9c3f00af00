//! Single-task label merging: relabel every identity of every domain into
//! one contiguous global label space.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::{Error, Result};

/// Samples from all domains under one merged label space of `total_classes`
/// identities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedDataset {
    samples: Vec<Sample>,
    domain_index: BTreeMap<u32, Vec<usize>>,
    total_classes: usize,
}

impl MergedDataset {
    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn domain_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.domain_index.keys().copied()
    }

    /// Indices into [`samples`](Self::samples) for one domain.
    pub fn domain_sample_indices(&self, domain_id: u32) -> Result<&[usize]> {
        self.domain_index
            .get(&domain_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown domain {domain_id}")))
    }

    /// The samples belonging to one domain, cloned out.
    pub fn domain_samples(&self, domain_id: u32) -> Result<Vec<Sample>> {
        Ok(self
            .domain_sample_indices(domain_id)?
            .iter()
            .map(|&i| self.samples[i].clone())
            .collect())
    }

    /// Number of identities contributed by one domain.
    pub fn domain_classes(&self, domain_id: u32) -> Result<usize> {
        let mut max = 0;
        for &i in self.domain_sample_indices(domain_id)? {
            max = max.max(self.samples[i].local_label as usize);
        }
        Ok(max)
    }

    /// Rebuilds the dataset around a subset of samples, keeping the merged
    /// label space. Split halves do not cover every class, so only the
    /// per-sample invariants are rechecked.
    pub(crate) fn with_samples(&self, samples: Vec<Sample>) -> Self {
        let mut domain_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            domain_index.entry(s.domain_id).or_default().push(i);
        }
        Self { samples, domain_index, total_classes: self.total_classes }
    }
}

/// Merges per-domain sample lists into one dataset, relabeling identity `l`
/// of the `i`-th list to `l + sum of earlier lists' identity counts`.
///
/// Every list must use contiguous 1-based local labels; domain ids must be
/// unique across lists.
pub fn merge_single_task(domains: &[Vec<Sample>]) -> Result<MergedDataset> {
    if domains.is_empty() || domains.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("merge needs non-empty domain sample lists".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for list in domains {
        let id = list[0].domain_id;
        if list.iter().any(|s| s.domain_id != id) {
            return Err(Error::InvalidArgument(format!(
                "domain list mixes ids (found {} and another)",
                id
            )));
        }
        if !seen.insert(id) {
            return Err(Error::InvalidArgument(format!("duplicate domain id {id}")));
        }
    }

    let mut samples = Vec::with_capacity(domains.iter().map(Vec::len).sum());
    let mut domain_index: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut offset = 0usize;
    for list in domains {
        let classes = list.iter().map(|s| s.local_label as usize).max().unwrap();
        let mut present = vec![false; classes];
        for s in list {
            if s.local_label == 0 {
                return Err(Error::InvalidArgument("local labels are 1-based".into()));
            }
            present[(s.local_label - 1) as usize] = true;
            let mut merged = s.clone();
            merged.merged_label = s.local_label + offset as u32;
            domain_index.entry(s.domain_id).or_default().push(samples.len());
            samples.push(merged);
        }
        if let Some(missing) = present.iter().position(|&p| !p) {
            return Err(Error::InvalidArgument(format!(
                "domain {} is missing local label {}",
                list[0].domain_id,
                missing + 1
            )));
        }
        offset += classes;
    }
    Ok(MergedDataset { samples, domain_index, total_classes: offset })
}
