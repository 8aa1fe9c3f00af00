//! Reverse-mode gradients through the encoder and linear-softmax head.

use crate::nn::model::{ClassifierHead, EncoderModel};
use crate::{Error, Result, Tensor};

/// Gradients for one affine layer, shape-matched to its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Tensor,
    pub bias: Tensor,
}

/// Gradients of the per-sample loss with respect to every parameter, plus
/// first and second derivatives with respect to the head-input features.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
    pub head_weights: Tensor,
    pub head_bias: Tensor,
    /// dL/dg at the head input (after any mask).
    pub grad_features: Tensor,
    /// d²L/dg² diagonal at the head input: `sum_k W_ki² p_k - (sum_k W_ki p_k)²`.
    pub diag_hessian_features: Tensor,
}

impl GradientSet {
    /// Named views matching [`EncoderModel::named_params_mut`] plus the head,
    /// in the same traversal order.
    pub fn named_grads(&self, head_prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(self.layers.len() * 2 + 2);
        for (k, layer) in self.layers.iter().enumerate() {
            out.push((format!("encoder.layer{k}.weights"), &layer.weights));
            out.push((format!("encoder.layer{k}.bias"), &layer.bias));
        }
        out.push((format!("{head_prefix}.weights"), &self.head_weights));
        out.push((format!("{head_prefix}.bias"), &self.head_bias));
        out
    }

    /// Elementwise `self += other`, shape-checked.
    pub fn accumulate(&mut self, other: &GradientSet) -> Result<()> {
        fn add(into: &mut Tensor, from: &Tensor, what: &str) -> Result<()> {
            if into.shape() != from.shape() {
                return Err(Error::dimension(what, into.len(), from.len()));
            }
            for (a, b) in into.data_mut().iter_mut().zip(from.data()) {
                *a += b;
            }
            Ok(())
        }
        if self.layers.len() != other.layers.len() {
            return Err(Error::dimension("gradient layers", self.layers.len(), other.layers.len()));
        }
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            add(&mut mine.weights, &theirs.weights, "layer weight gradient")?;
            add(&mut mine.bias, &theirs.bias, "layer bias gradient")?;
        }
        add(&mut self.head_weights, &other.head_weights, "head weight gradient")?;
        add(&mut self.head_bias, &other.head_bias, "head bias gradient")?;
        add(&mut self.grad_features, &other.grad_features, "feature gradient")?;
        add(
            &mut self.diag_hessian_features,
            &other.diag_hessian_features,
            "feature hessian diagonal",
        )?;
        Ok(())
    }

    /// Scales every gradient by `factor` (for turning sums into means).
    pub fn scale(&mut self, factor: f64) {
        let apply = |t: &mut Tensor| {
            for v in t.data_mut() {
                *v *= factor;
            }
        };
        for layer in &mut self.layers {
            apply(&mut layer.weights);
            apply(&mut layer.bias);
        }
        apply(&mut self.head_weights);
        apply(&mut self.head_bias);
        apply(&mut self.grad_features);
        apply(&mut self.diag_hessian_features);
    }
}

/// [`backward`] plus the forward loss it differentiates.
pub fn backward_with_loss(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    label: usize,
    mask: Option<&Tensor>,
) -> Result<(f64, GradientSet)> {
    let d = model.feature_dim();
    if head.feature_dim() != d {
        return Err(Error::dimension("head input width", d, head.feature_dim()));
    }
    if label >= head.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            head.num_classes()
        )));
    }
    if let Some(m) = mask {
        if m.len() != d {
            return Err(Error::dimension("feature mask", d, m.len()));
        }
    }

    let trace = model.forward_trace(x.data())?;
    let h = trace.last().unwrap();
    let g: Vec<f64> = match mask {
        Some(m) => h.iter().zip(m.data()).map(|(hi, mi)| hi * mi).collect(),
        None => h.clone(),
    };

    let m = head.num_classes();
    let logits = head.logits(&g)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&u| (u - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / total).collect();
    let loss = total.ln() - (logits[label] - max);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss for label {label}")));
    }

    // dL/du_k = p_k - [k == label]
    let mut dlogits = probs.clone();
    dlogits[label] -= 1.0;

    let w = head.weights.data();
    let mut head_weights = Tensor::zeros(vec![m, d]);
    {
        let hw = head_weights.data_mut();
        for k in 0..m {
            let dk = dlogits[k];
            for i in 0..d {
                hw[k * d + i] = dk * g[i];
            }
        }
    }
    let head_bias = Tensor::new(vec![m], dlogits.clone())?;

    let mut grad_features = vec![0.0; d];
    for k in 0..m {
        let dk = dlogits[k];
        let row = &w[k * d..(k + 1) * d];
        for i in 0..d {
            grad_features[i] += dk * row[i];
        }
    }

    // Exact softmax-CE curvature per feature: Var over p of the head column.
    let mut diag_hessian = vec![0.0; d];
    for i in 0..d {
        let mut ex = 0.0;
        let mut ex2 = 0.0;
        for k in 0..m {
            let wk = w[k * d + i];
            ex += wk * probs[k];
            ex2 += wk * wk * probs[k];
        }
        diag_hessian[i] = ex2 - ex * ex;
    }

    // Mask gates the path back into the encoder.
    let mut delta: Vec<f64> = match mask {
        Some(mk) => grad_features.iter().zip(mk.data()).map(|(gi, mi)| gi * mi).collect(),
        None => grad_features.clone(),
    };

    let mut layers = vec![
        LayerGradient { weights: Tensor::zeros(vec![0]), bias: Tensor::zeros(vec![0]) };
        model.layers().len()
    ];
    for (k, layer) in model.layers().iter().enumerate().rev() {
        let input = &trace[k];
        let output = &trace[k + 1];
        let (out_dim, in_dim) = (layer.output_dim(), layer.input_dim());
        // ReLU outputs are pre-activation sign carriers: output > 0 iff z > 0.
        let dz: Vec<f64> = match layer.activation {
            crate::nn::model::Activation::ReLU => delta
                .iter()
                .zip(output)
                .map(|(&dv, &a)| if a > 0.0 { dv } else { 0.0 })
                .collect(),
            crate::nn::model::Activation::Identity => delta.clone(),
        };
        let mut wgrad = Tensor::zeros(vec![out_dim, in_dim]);
        {
            let wg = wgrad.data_mut();
            for o in 0..out_dim {
                let dzo = dz[o];
                for i in 0..in_dim {
                    wg[o * in_dim + i] = dzo * input[i];
                }
            }
        }
        layers[k] = LayerGradient { weights: wgrad, bias: Tensor::new(vec![out_dim], dz.clone())? };
        if k > 0 {
            let wdata = layer.weights.data();
            let mut next = vec![0.0; in_dim];
            for o in 0..out_dim {
                let dzo = dz[o];
                let row = &wdata[o * in_dim..(o + 1) * in_dim];
                for i in 0..in_dim {
                    next[i] += dzo * row[i];
                }
            }
            delta = next;
        }
    }

    Ok((
        loss,
        GradientSet {
            layers,
            head_weights,
            head_bias,
            grad_features: Tensor::new(vec![d], grad_features)?,
            diag_hessian_features: Tensor::new(vec![d], diag_hessian)?,
        },
    ))
}

/// Exact gradients of the loss for one sample. The mask, when given, gates
/// both the forward features and the gradient flowing back into the encoder.
pub fn backward(
    model: &EncoderModel,
    head: &ClassifierHead,
    x: &Tensor,
    label: usize,
    mask: Option<&Tensor>,
) -> Result<GradientSet> {
    backward_with_loss(model, head, x, label, mask).map(|(_, grads)| grads)
}
