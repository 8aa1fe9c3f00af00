//! Retrieval evaluation: feature extraction under a dropout policy,
//! Euclidean gallery ranking, and CMC curves.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::dgd::{apply_test_scaling, DropoutPolicy};
use crate::nn::{encode, EncoderModel};
use crate::{par, Error, Result, Tensor};

/// Row-major feature matrix with one identity label per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Tensor,
    ids: Vec<u32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Tensor, ids: Vec<u32>) -> Result<Self> {
        if data.shape() != [rows, dim] {
            return Err(Error::dimension("feature matrix", rows * dim, data.len()));
        }
        if ids.len() != rows {
            return Err(Error::dimension("feature matrix ids", rows, ids.len()));
        }
        data.check_finite("feature matrix")?;
        Ok(Self { rows, dim, data, ids })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data.data()[i * self.dim..(i + 1) * self.dim]
    }
}

/// Extracts test-time features for every sample: `g(x)` followed by the
/// policy's test scaling rule. Row ids are the samples' in-domain labels.
pub fn extract_features(
    model: &EncoderModel,
    policy: &DropoutPolicy,
    samples: &[Sample],
) -> Result<FeatureMatrix> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("extract_features needs samples".into()));
    }
    let d = model.feature_dim();
    let rows: Vec<Result<Tensor>> = par::map_collect(samples, |s| {
        let g = encode(model, &s.features, None)?;
        apply_test_scaling(policy, &g)
    });
    let mut data = Vec::with_capacity(samples.len() * d);
    for row in rows {
        data.extend_from_slice(row?.data());
    }
    FeatureMatrix::new(
        samples.len(),
        d,
        Tensor::new(vec![samples.len(), d], data)?,
        samples.iter().map(|s| s.local_label).collect(),
    )
}

/// Gallery indices ordered by ascending Euclidean distance to the probe,
/// ties broken by ascending index.
pub fn rank_gallery(probe: &[f64], gallery: &FeatureMatrix) -> Result<Vec<usize>> {
    if gallery.rows() == 0 {
        return Err(Error::InvalidArgument("gallery is empty".into()));
    }
    if probe.len() != gallery.dim() {
        return Err(Error::dimension("probe feature width", gallery.dim(), probe.len()));
    }
    // Squared distance ranks identically to the distance itself.
    let mut order: Vec<(f64, usize)> = (0..gallery.rows())
        .map(|j| {
            let row = gallery.row(j);
            let dist2: f64 = probe.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            (dist2, j)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(order.into_iter().map(|(_, j)| j).collect())
}

/// Cumulative match characteristic over ranks `1..=max_rank`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmcCurve {
    pub accuracies: Vec<f64>,
    pub num_probes: usize,
}

impl CmcCurve {
    pub fn top1(&self) -> f64 {
        self.accuracies[0]
    }
}

/// Fraction of probes whose correct identity appears within the top `k`
/// ranked gallery entries, for `k = 1..=max_rank`.
///
/// Requires the single-shot protocol: every probe identity appears exactly
/// once in the gallery.
pub fn cmc(probes: &FeatureMatrix, gallery: &FeatureMatrix, max_rank: usize) -> Result<CmcCurve> {
    if probes.dim() != gallery.dim() {
        return Err(Error::dimension("probe/gallery width", gallery.dim(), probes.dim()));
    }
    if max_rank == 0 || max_rank > gallery.rows() {
        return Err(Error::InvalidArgument(format!(
            "max_rank must lie in 1..={}, got {max_rank}",
            gallery.rows()
        )));
    }
    for &id in probes.ids() {
        match gallery.ids().iter().filter(|&&g| g == id).count() {
            1 => {}
            0 => {
                return Err(Error::Protocol(format!(
                    "probe identity {id} is absent from the gallery"
                )))
            }
            n => {
                return Err(Error::Protocol(format!(
                    "probe identity {id} appears {n} times in the gallery (single-shot expects 1)"
                )))
            }
        }
    }

    let hit_ranks: Vec<Result<usize>> = par::map_indices(probes.rows(), |p| {
        let order = rank_gallery(probes.row(p), gallery)?;
        let id = probes.ids()[p];
        Ok(order
            .iter()
            .position(|&j| gallery.ids()[j] == id)
            .expect("validated: probe identity present in gallery"))
    });

    let mut hits_at = vec![0usize; gallery.rows()];
    for rank in hit_ranks {
        hits_at[rank?] += 1;
    }
    let mut accuracies = Vec::with_capacity(max_rank);
    let mut cumulative = 0usize;
    for k in 0..max_rank {
        cumulative += hits_at[k];
        accuracies.push(cumulative as f64 / probes.rows() as f64);
    }
    Ok(CmcCurve { accuracies, num_probes: probes.rows() })
}
