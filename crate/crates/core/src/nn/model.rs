//! Encoder and classifier head: forward passes and the softmax loss.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    ReLU,
    Identity,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => z.max(0.0),
            Activation::Identity => z,
        }
    }

    /// Derivative at `z`. ReLU uses the 0 subgradient at the kink.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `act(W x + b)` with `W` stored `[out, in]` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "layer weights must be 2-d, got shape {:?}",
                weights.shape()
            )));
        }
        let out = weights.shape()[0];
        if bias.shape() != [out] {
            return Err(Error::dimension("layer bias length", out, bias.len()));
        }
        Ok(Self { weights, bias, activation })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Pre-activation `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        let (out, inp) = (self.output_dim(), self.input_dim());
        debug_assert_eq!(x.len(), inp);
        let w = self.weights.data();
        let b = self.bias.data();
        let mut z = vec![0.0; out];
        for o in 0..out {
            let row = &w[o * inp..(o + 1) * inp];
            let mut acc = b[o];
            for i in 0..inp {
                acc += row[i] * x[i];
            }
            z[o] = acc;
        }
        z
    }
}

/// Feature extractor: a stack of affine layers whose last output is the
/// feature vector impact scores are indexed over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderModel {
    layers: Vec<Layer>,
    feature_dim: usize,
}

impl EncoderModel {
    /// Builds an encoder, checking that consecutive layer dimensions chain.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        for k in 1..layers.len() {
            if layers[k].input_dim() != layers[k - 1].output_dim() {
                return Err(Error::dimension(
                    &format!("encoder layer {k} input"),
                    layers[k - 1].output_dim(),
                    layers[k].input_dim(),
                ));
            }
        }
        let feature_dim = layers.last().unwrap().output_dim();
        Ok(Self { layers, feature_dim })
    }

    /// Random all-ReLU encoder with He-scaled weights and zero biases.
    pub fn random<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(feature_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let scale = (2.0 / inp as f64).sqrt();
            let data: Vec<f64> = (0..out * inp)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            layers.push(Layer::new(
                Tensor::new(vec![out, inp], data)?,
                Tensor::zeros(vec![out]),
                Activation::ReLU,
            )?);
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Named views of every parameter tensor, in a fixed traversal order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2);
        for (k, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("encoder.layer{k}.weights"), &mut layer.weights));
            out.push((format!("encoder.layer{k}.bias"), &mut layer.bias));
        }
        out
    }

    /// Activations after every layer, with the raw input first. The last
    /// entry is the unmasked feature vector `g(x)`.
    pub fn forward_trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        if x.len() != self.input_dim() {
            return Err(Error::dimension("encoder input", self.input_dim(), x.len()));
        }
        let mut trace = Vec::with_capacity(self.layers.len() + 1);
        trace.push(x.to_vec());
        for layer in &self.layers {
            let z = layer.affine(trace.last().unwrap());
            trace.push(z.into_iter().map(|v| layer.activation.apply(v)).collect());
        }
        Ok(trace)
    }
}

/// Computes `g(x)`, elementwise-multiplied by `mask` when provided.
///
/// Mask entries gate both the forward value and, through [`backward`],
/// gradient flow. Binary dropout masks use {0,1}; the inverted standard
/// dropout path passes `1/keep` for kept entries, so values above 1 are
/// accepted.
///
/// [`backward`]: crate::nn::backward
pub fn encode(model: &EncoderModel, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    if x.shape() != [model.input_dim()] {
        return Err(Error::dimension("encoder input", model.input_dim(), x.len()));
    }
    let mut g = model.forward_trace(x.data())?.pop().unwrap();
    if let Some(m) = mask {
        if m.len() != model.feature_dim() {
            return Err(Error::dimension("feature mask", model.feature_dim(), m.len()));
        }
        for (gi, mi) in g.iter_mut().zip(m.data()) {
            *gi *= mi;
        }
    }
    let out = Tensor::new(vec![model.feature_dim()], g)?;
    out.check_finite("encoder output")?;
    Ok(out)
}

/// Linear-softmax classifier over the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub weights: Tensor,
    pub bias: Tensor,
    num_classes: usize,
}

impl ClassifierHead {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.shape().len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "head weights must be 2-d, got shape {:?}",
                weights.shape()
            )));
        }
        let m = weights.shape()[0];
        if m < 2 {
            return Err(Error::InvalidArgument(format!(
                "head needs at least 2 classes, got {m}"
            )));
        }
        if bias.shape() != [m] {
            return Err(Error::dimension("head bias length", m, bias.len()));
        }
        Ok(Self { weights, bias, num_classes: m })
    }

    /// Random head with Xavier-scaled weights and zero bias.
    pub fn random<R: Rng>(num_classes: usize, feature_dim: usize, rng: &mut R) -> Result<Self> {
        let scale = (1.0 / feature_dim as f64).sqrt();
        let data: Vec<f64> = (0..num_classes * feature_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new(
            Tensor::new(vec![num_classes, feature_dim], data)?,
            Tensor::zeros(vec![num_classes]),
        )
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn logits(&self, g: &[f64]) -> Result<Vec<f64>> {
        let d = self.feature_dim();
        if g.len() != d {
            return Err(Error::dimension("head input", d, g.len()));
        }
        let w = self.weights.data();
        let b = self.bias.data();
        let mut u = vec![0.0; self.num_classes];
        for (k, uk) in u.iter_mut().enumerate() {
            let row = &w[k * d..(k + 1) * d];
            let mut acc = b[k];
            for i in 0..d {
                acc += row[i] * g[i];
            }
            *uk = acc;
        }
        Ok(u)
    }
}

/// Cross-entropy loss and class probabilities for one sample.
///
/// Softmax is computed with max-subtraction so saturated logits stay finite.
pub fn loss_and_probs(head: &ClassifierHead, g: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if label >= head.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            head.num_classes()
        )));
    }
    let logits = head.logits(g.data())?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    let loss = total.ln() - (logits[label] - max);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss for label {label}")));
    }
    Ok((loss, Tensor::new(vec![head.num_classes()], probs)?))
}

/// Classifier heads attached to one encoder: a single merged-label head or
/// one head per domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum HeadSet {
    Single(ClassifierHead),
    PerDomain(BTreeMap<u32, ClassifierHead>),
}

impl HeadSet {
    /// The head responsible for `domain_id`.
    pub fn for_domain(&self, domain_id: u32) -> Result<&ClassifierHead> {
        match self {
            HeadSet::Single(h) => Ok(h),
            HeadSet::PerDomain(map) => map.get(&domain_id).ok_or_else(|| {
                Error::Config(format!("no classifier head for domain {domain_id}"))
            }),
        }
    }

    /// Expects the single-head variant.
    pub fn single(&self) -> Result<&ClassifierHead> {
        match self {
            HeadSet::Single(h) => Ok(h),
            HeadSet::PerDomain(_) => {
                Err(Error::Checkpoint("expected a single classifier head".into()))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_layer(dim: usize) -> Layer {
        let mut w = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        Layer::new(w, Tensor::zeros(vec![dim]), Activation::Identity).unwrap()
    }

    #[test]
    fn encode_identity_layer_passes_input_through() {
        let model = EncoderModel::new(vec![identity_layer(2)]).unwrap();
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = encode(&model, &x, None).unwrap();
        assert_eq!(g.data(), &[1.0, 2.0]);
    }

    #[test]
    fn encode_zero_mask_kills_all_neurons() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EncoderModel::random(4, &[5], 3, &mut rng).unwrap();
        let x = Tensor::new(vec![4], vec![0.3, -0.7, 1.1, 0.2]).unwrap();
        let mask = Tensor::zeros(vec![3]);
        let g = encode(&model, &x, Some(&mask)).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_matches_hand_rolled_affine_relu_chain() {
        // Oracle: the same affine+ReLU arithmetic written out longhand.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = EncoderModel::random(3, &[4], 2, &mut rng).unwrap();
        let x = vec![0.5, -1.25, 2.0];

        let l0 = &model.layers()[0];
        let mut a0 = vec![0.0; 4];
        for o in 0..4 {
            let mut acc = l0.bias.data()[o];
            for i in 0..3 {
                acc += l0.weights.data()[o * 3 + i] * x[i];
            }
            a0[o] = acc.max(0.0);
        }
        let l1 = &model.layers()[1];
        let mut expected = vec![0.0; 2];
        for o in 0..2 {
            let mut acc = l1.bias.data()[o];
            for i in 0..4 {
                acc += l1.weights.data()[o * 4 + i] * a0[i];
            }
            expected[o] = acc.max(0.0);
        }

        let g = encode(&model, &Tensor::new(vec![3], x).unwrap(), None).unwrap();
        for (a, b) in g.data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn encode_rejects_wrong_input_shape() {
        let model = EncoderModel::new(vec![identity_layer(2)]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(encode(&model, &x, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn encoder_rejects_unchained_layers() {
        let err = EncoderModel::new(vec![identity_layer(2), identity_layer(3)]).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn uniform_logits_give_ln_m_loss() {
        let head =
            ClassifierHead::new(Tensor::zeros(vec![5, 3]), Tensor::zeros(vec![5])).unwrap();
        let g = Tensor::new(vec![3], vec![0.4, -2.0, 7.5]).unwrap();
        let (loss, probs) = loss_and_probs(&head, &g, 2).unwrap();
        assert!((loss - 5.0f64.ln()).abs() < 1e-15);
        for &p in probs.data() {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_softmax_loss_is_near_zero() {
        let mut head =
            ClassifierHead::new(Tensor::zeros(vec![3, 2]), Tensor::zeros(vec![3])).unwrap();
        head.bias.data_mut()[1] = 1000.0;
        let g = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let (loss, probs) = loss_and_probs(&head, &g, 1).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!((probs.data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_direct_formula() {
        // Oracle: direct softmax cross-entropy over explicit logits.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let head = ClassifierHead::random(7, 4, &mut rng).unwrap();
        let g = Tensor::new(vec![4], vec![0.9, -0.3, 0.05, 1.7]).unwrap();
        let logits = head.logits(g.data()).unwrap();
        let z: f64 = logits.iter().map(|u| u.exp()).sum();
        let expected = z.ln() - logits[3];
        let (loss, probs) = loss_and_probs(&head, &g, 3).unwrap();
        assert!((loss - expected).abs() < 1e-12);
        let sum: f64 = probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let head =
            ClassifierHead::new(Tensor::zeros(vec![2, 2]), Tensor::zeros(vec![2])).unwrap();
        let g = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(loss_and_probs(&head, &g, 2), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn head_rejects_single_class() {
        let err =
            ClassifierHead::new(Tensor::zeros(vec![1, 2]), Tensor::zeros(vec![1])).unwrap_err();
        assert!(matches!(err, Error::InvalidArgument(_)));
    }

    #[test]
    fn head_set_routes_by_domain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h0 = ClassifierHead::random(3, 2, &mut rng).unwrap();
        let h1 = ClassifierHead::random(4, 2, &mut rng).unwrap();
        let set = HeadSet::PerDomain([(0, h0), (1, h1)].into_iter().collect());
        assert_eq!(set.for_domain(1).unwrap().num_classes(), 4);
        assert!(set.for_domain(9).is_err());
        assert!(set.single().is_err());
    }
}
