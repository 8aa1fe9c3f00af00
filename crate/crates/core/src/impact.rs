//! Per-neuron impact scores: the loss increase caused by zeroing one feature
//! neuron, computed exactly or by a second-order Taylor approximation, and
//! averaged per domain.

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::nn::{backward, loss_and_probs, ClassifierHead, EncoderModel};
use crate::{par, Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactMethod {
    Exact,
    Taylor,
}

/// Per-domain averaged impact scores, one entry per feature neuron.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ImpactRecord", into = "ImpactRecord")]
pub struct ImpactScores {
    pub domain_id: u32,
    pub scores: Tensor,
    pub method: ImpactMethod,
    pub num_samples: usize,
}

/// Wire format: flat score array with an explicit dimension field.
#[derive(Serialize, Deserialize)]
struct ImpactRecord {
    domain_id: u32,
    method: ImpactMethod,
    d: usize,
    scores: Vec<f64>,
    num_samples: usize,
}

impl From<ImpactScores> for ImpactRecord {
    fn from(s: ImpactScores) -> Self {
        Self {
            domain_id: s.domain_id,
            method: s.method,
            d: s.scores.len(),
            scores: s.scores.data().to_vec(),
            num_samples: s.num_samples,
        }
    }
}

impl TryFrom<ImpactRecord> for ImpactScores {
    type Error = Error;

    fn try_from(r: ImpactRecord) -> Result<Self> {
        if r.d != r.scores.len() {
            return Err(Error::dimension("impact score array", r.d, r.scores.len()));
        }
        ImpactScores::new(r.domain_id, Tensor::new(vec![r.d], r.scores)?, r.method, r.num_samples)
    }
}

impl ImpactScores {
    pub fn new(
        domain_id: u32,
        scores: Tensor,
        method: ImpactMethod,
        num_samples: usize,
    ) -> Result<Self> {
        let s = Self { domain_id, scores, method, num_samples };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.is_empty() {
            return Err(Error::InvalidArgument("impact scores must be non-empty".into()));
        }
        self.scores.check_finite("impact scores")
    }

    /// Errors unless the score vector matches the model feature width.
    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.scores.len() != d {
            return Err(Error::dimension("impact scores width", d, self.scores.len()));
        }
        Ok(())
    }

    /// Number of neurons with non-positive averaged impact (the ones a
    /// deterministic guided mask discards).
    pub fn non_positive_count(&self) -> usize {
        self.scores.data().iter().filter(|&&s| s <= 0.0).count()
    }
}

/// Exact impact of every feature neuron on one sample's loss:
/// `s_i = L(g with neuron i zeroed) - L(g)`.
///
/// The encoder runs once; only the classifier head is re-evaluated per
/// neuron, which is mathematically identical to re-running the full network
/// with that neuron forced to zero.
pub fn impact_exact(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let g = crate::nn::encode(model, x, None)?;
    let (base_loss, _) = loss_and_probs(head, &g, label)?;
    let d = g.len();
    let mut scores = vec![0.0; d];
    let mut zeroed = g.clone();
    for i in 0..d {
        if g.data()[i] == 0.0 {
            continue;
        }
        zeroed.data_mut()[i] = 0.0;
        let (loss, _) = loss_and_probs(head, &zeroed, label)?;
        zeroed.data_mut()[i] = g.data()[i];
        scores[i] = loss - base_loss;
    }
    Tensor::new(vec![d], scores)
}

/// Second-order Taylor approximation of the impact:
/// `s_i ~ -dL/dg_i * g_i + 1/2 * d2L/dg_i2 * g_i^2`.
pub fn impact_taylor(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    label: usize,
) -> Result<Tensor> {
    let g = crate::nn::encode(model, x, None)?;
    let grads = backward(model, head, x, label, None)?;
    let d = g.len();
    let mut scores = vec![0.0; d];
    for i in 0..d {
        let gi = g.data()[i];
        scores[i] = -grads.grad_features.data()[i] * gi
            + 0.5 * grads.diag_hessian_features.data()[i] * gi * gi;
    }
    Tensor::new(vec![d], scores)
}

/// Mean per-sample impact over one domain's samples, evaluated against the
/// merged-label head. Samples are scored independently (parallel when the
/// `parallel` feature is on) and reduced in input order.
pub fn average_impact(
    model: &EncoderModel,
    head: &ClassifierHead,
    samples: &[Sample],
    method: ImpactMethod,
) -> Result<ImpactScores> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("average_impact needs at least one sample".into()));
    }
    let domain_id = samples[0].domain_id;
    if samples.iter().any(|s| s.domain_id != domain_id) {
        return Err(Error::InvalidArgument(
            "average_impact takes samples of a single domain".into(),
        ));
    }

    let per_sample: Vec<Result<Tensor>> = par::map_collect(samples, |s| match method {
        ImpactMethod::Exact => impact_exact(model, head, &s.features, s.merged_class()),
        ImpactMethod::Taylor => impact_taylor(model, head, &s.features, s.merged_class()),
    });

    let d = model.feature_dim();
    let mut sum = vec![0.0; d];
    for scores in per_sample {
        let scores = scores?;
        for (acc, v) in sum.iter_mut().zip(scores.data()) {
            *acc += v;
        }
    }
    let n = samples.len() as f64;
    for v in &mut sum {
        *v /= n;
    }
    ImpactScores::new(domain_id, Tensor::new(vec![d], sum)?, method, samples.len())
}

/// Correlation diagnostics between two score vectors. `None` marks an
/// undefined correlation (zero variance on either side).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationReport {
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// Ranks with ties assigned their average rank.
fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut out = vec![0.0; values.len()];
    let mut k = 0;
    while k < order.len() {
        let mut j = k;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &idx in &order[k..=j] {
            out[idx] = avg;
        }
        k = j + 1;
    }
    out
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    pearson(&ranks(a), &ranks(b))
}

/// Pearson and Spearman correlation between two domains' scores.
pub fn cross_domain_correlation(
    a: &ImpactScores,
    b: &ImpactScores,
) -> Result<CorrelationReport> {
    if a.scores.len() != b.scores.len() {
        return Err(Error::dimension("impact score width", a.scores.len(), b.scores.len()));
    }
    Ok(CorrelationReport {
        pearson: pearson(a.scores.data(), b.scores.data()),
        spearman: spearman(a.scores.data(), b.scores.data()),
    })
}

/// Score pairs ordered by the first vector, descending: the x-axis of a
/// cross-domain score comparison curve.
pub fn paired_sorted_by_first(a: &ImpactScores, b: &ImpactScores) -> Result<Vec<(f64, f64)>> {
    if a.scores.len() != b.scores.len() {
        return Err(Error::dimension("impact score width", a.scores.len(), b.scores.len()));
    }
    let mut pairs: Vec<(f64, f64)> = a
        .scores
        .data()
        .iter()
        .copied()
        .zip(b.scores.data().iter().copied())
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    Ok(pairs)
}
