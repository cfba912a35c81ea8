use super::network::ModelOutput;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before the logarithm in the class loss.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights and constants of the training objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_cb: f64,
    pub alpha: f64,
}

impl LossWeights {
    pub fn from_config(cfg: &super::ModelConfig) -> Self {
        Self {
            lambda_s: cfg.lambda_s,
            lambda_c: cfg.lambda_c,
            lambda_cb: cfg.lambda_cb,
            alpha: cfg.alpha,
        }
    }
}

/// Loss nodes recorded on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: NodeId,
    pub saliency: NodeId,
    /// Absent when the class weight is zero.
    pub class: Option<NodeId>,
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub saliency: f64,
    pub class: f64,
}

/// Saliency loss: the max-normalized weighted squared error plus
/// `lambda_cb` times the mean squared distance of the upscaled center bias from one.
pub fn saliency_loss(graph: &mut Graph, out: &ModelOutput, target: &Tensor, w: &LossWeights) -> Result<NodeId> {
    let err = graph.max_normalized_sq_error(out.saliency, target, w.alpha)?;
    if w.lambda_cb == 0.0 {
        return Ok(err);
    }
    let cb = graph.mean_sq_from_one(out.center_bias);
    graph.linear_combination(&[(err, 1.0), (cb, w.lambda_cb)])
}

/// Cross entropy of the temperature-1 gate distribution against one-hot targets.
pub fn class_loss(graph: &mut Graph, out: &ModelOutput, one_hot: &Tensor) -> Result<NodeId> {
    graph.nll_clamped(out.gate_probs_1, one_hot, PROB_FLOOR)
}

/// One-hot `[N,K]` tensor from class indices.
pub fn one_hot(classes: &[usize], k: usize) -> Result<Tensor> {
    if classes.is_empty() {
        return Err(Error::usage("no class labels"));
    }
    let mut data = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        if c >= k {
            return Err(Error::usage(format!("class {c} out of range for {k} experts")));
        }
        data[i * k + c] = 1.0;
    }
    Tensor::new(&[classes.len(), k], data)
}

/// Records `lambda_s * L_s + lambda_c * L_c` on the tape.
pub fn total_loss(
    graph: &mut Graph,
    out: &ModelOutput,
    target: &Tensor,
    classes: &[usize],
    w: &LossWeights,
) -> Result<LossNodes> {
    let saliency = saliency_loss(graph, out, target, w)?;
    if w.lambda_c == 0.0 {
        let total = graph.linear_combination(&[(saliency, w.lambda_s)])?;
        return Ok(LossNodes {
            total,
            saliency,
            class: None,
        });
    }
    let k = graph.value(out.gate_probs_1).shape()[1];
    let class = class_loss(graph, out, &one_hot(classes, k)?)?;
    let total = graph.linear_combination(&[(saliency, w.lambda_s), (class, w.lambda_c)])?;
    Ok(LossNodes {
        total,
        saliency,
        class: Some(class),
    })
}

impl LossNodes {
    pub fn values(&self, graph: &Graph) -> LossValues {
        LossValues {
            total: graph.value(self.total).item(),
            saliency: graph.value(self.saliency).item(),
            class: self.class.map_or(0.0, |c| graph.value(c).item()),
        }
    }
}
