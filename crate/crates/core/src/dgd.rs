//! Dropout mask generation: standard dropout, deterministic domain-guided
//! masks thresholded at zero impact, and stochastic domain-guided masks with
//! a temperature, plus the matching test-time scaling rules.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::impact::ImpactScores;
use crate::{Error, Result, Tensor};

pub const STANDARD_DROPOUT_RATE: f64 = 0.5;
pub const DEFAULT_TARGET_MAX_KEEP: f64 = 0.9;

/// Mask-generation rule for a training stage or evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DropoutPolicy {
    /// Classic Bernoulli dropout, inverted convention: kept activations are
    /// scaled by `1/(1-rate)` at train time, test time is the identity.
    Standard { rate: f64 },
    /// Keep exactly the neurons with positive impact, train and test alike.
    DeterministicDgd { scores: ImpactScores },
    /// Keep neuron i with probability `sigmoid(s_i / temperature)` at train
    /// time; scale it by that probability at test time.
    StochasticDgd { scores: ImpactScores, temperature: f64 },
    /// No dropout at all (plain continued training, evaluation of raw
    /// features).
    None,
}

impl DropoutPolicy {
    pub fn standard() -> Self {
        DropoutPolicy::Standard { rate: STANDARD_DROPOUT_RATE }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DropoutPolicy::Standard { rate } => {
                if !(*rate > 0.0 && *rate < 1.0) {
                    return Err(Error::Config(format!(
                        "standard dropout rate must lie in (0,1), got {rate}"
                    )));
                }
            }
            DropoutPolicy::DeterministicDgd { scores } => scores.validate()?,
            DropoutPolicy::StochasticDgd { scores, temperature } => {
                scores.validate()?;
                if !(*temperature > 0.0) {
                    return Err(Error::Config(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
            }
            DropoutPolicy::None => {}
        }
        Ok(())
    }
}

/// A per-neuron multiplicative gate. Train-time masks are binary except for
/// inverted standard dropout, whose kept entries carry the `1/keep` scale.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub values: Tensor,
}

impl Mask {
    pub fn ones(d: usize) -> Self {
        Self { values: Tensor::new(vec![d], vec![1.0; d]).unwrap() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of zeroed entries.
    pub fn dropped(&self) -> usize {
        self.values.data().iter().filter(|&&v| v == 0.0).count()
    }
}

/// Keeps exactly the neurons with positive impact: `m_i = 1` iff `s_i > 0`.
/// The same mask applies at train and test time.
pub fn deterministic_mask(scores: &Tensor) -> Mask {
    let values: Vec<f64> =
        scores.data().iter().map(|&s| if s > 0.0 { 1.0 } else { 0.0 }).collect();
    Mask { values: Tensor::new(vec![scores.len()], values).unwrap() }
}

/// `sigmoid(s_i / temperature)`, the probability of keeping a neuron with
/// impact `s_i`. Overflow-safe for any finite input.
pub fn keep_probability(s_i: f64, temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let z = s_i / temperature;
    // Evaluate through exp of a non-positive argument only.
    Ok(if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) })
}

/// Samples `m_i ~ Bernoulli(sigmoid(s_i / temperature))` independently per
/// neuron. Reproducible from the generator state.
pub fn stochastic_mask<R: Rng>(scores: &Tensor, temperature: f64, rng: &mut R) -> Result<Mask> {
    let mut values = Vec::with_capacity(scores.len());
    for &s in scores.data() {
        let p = keep_probability(s, temperature)?;
        values.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
    }
    Ok(Mask { values: Tensor::new(vec![scores.len()], values)? })
}

/// Samples the train-time mask for one sample under `policy`.
///
/// Standard dropout keeps each neuron with probability `1-rate` and scales
/// kept entries by `1/(1-rate)`; the two guided variants produce binary
/// masks. `None` keeps everything.
pub fn train_mask<R: Rng>(policy: &DropoutPolicy, d: usize, rng: &mut R) -> Result<Mask> {
    match policy {
        DropoutPolicy::Standard { rate } => {
            let keep = 1.0 - rate;
            let scale = 1.0 / keep;
            let values: Vec<f64> = (0..d)
                .map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 })
                .collect();
            Ok(Mask { values: Tensor::new(vec![d], values)? })
        }
        DropoutPolicy::DeterministicDgd { scores } => {
            scores.check_dim(d)?;
            Ok(deterministic_mask(&scores.scores))
        }
        DropoutPolicy::StochasticDgd { scores, temperature } => {
            scores.check_dim(d)?;
            stochastic_mask(&scores.scores, *temperature, rng)
        }
        DropoutPolicy::None => Ok(Mask::ones(d)),
    }
}

/// Applies the test-time rule: stochastic DGD scales neuron i by its keep
/// probability, deterministic DGD zeroes non-positive-impact neurons, and
/// standard dropout is the identity (the train-time `1/keep` already
/// compensated).
pub fn apply_test_scaling(policy: &DropoutPolicy, features: &Tensor) -> Result<Tensor> {
    match policy {
        DropoutPolicy::Standard { .. } | DropoutPolicy::None => Ok(features.clone()),
        DropoutPolicy::DeterministicDgd { scores } => {
            scores.check_dim(features.len())?;
            let mask = deterministic_mask(&scores.scores);
            let out: Vec<f64> = features
                .data()
                .iter()
                .zip(mask.values.data())
                .map(|(f, m)| f * m)
                .collect();
            Tensor::new(vec![features.len()], out)
        }
        DropoutPolicy::StochasticDgd { scores, temperature } => {
            scores.check_dim(features.len())?;
            let mut out = Vec::with_capacity(features.len());
            for (f, &s) in features.data().iter().zip(scores.scores.data()) {
                out.push(f * keep_probability(s, *temperature)?);
            }
            Tensor::new(vec![features.len()], out)
        }
    }
}

/// Temperature such that the highest-impact neuron is kept with probability
/// `target_max_keep`: `T = max(s) / ln(target/(1-target))`.
pub fn select_temperature(scores: &Tensor, target_max_keep: f64) -> Result<f64> {
    if !(target_max_keep > 0.5 && target_max_keep < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target_max_keep must lie in (0.5, 1), got {target_max_keep}"
        )));
    }
    let max = scores.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::InvalidArgument(
            "no neuron has positive impact; use the deterministic scheme or standard dropout"
                .into(),
        ));
    }
    Ok(max / (target_max_keep / (1.0 - target_max_keep)).ln())
}

/// Points of the cumulative keep-probability curve: for each neuron's keep
/// probability `p`, how many neurons have keep probability at most `p`.
pub fn cumulative_keep_histogram(scores: &Tensor, temperature: f64) -> Result<Vec<(f64, usize)>> {
    let mut probs = scores
        .data()
        .iter()
        .map(|&s| keep_probability(s, temperature))
        .collect::<Result<Vec<f64>>>()?;
    probs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut curve = Vec::new();
    for (idx, &p) in probs.iter().enumerate() {
        match curve.last_mut() {
            Some((last_p, count)) if *last_p == p => *count = idx + 1,
            _ => curve.push((p, idx + 1)),
        }
    }
    Ok(curve)
}
