use super::kernels::{self, ConvGeom, PoolGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node recorded on the tape of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Handle to a trainable parameter owned by a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    value: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        geom: ConvGeom,
    },
    MaxPool {
        input: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: NodeId,
        planes: usize,
        h: usize,
        w: usize,
        factor: usize,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        n: usize,
        d: usize,
        u: usize,
    },
    Relu {
        input: NodeId,
    },
    Reshape {
        input: NodeId,
    },
    ConcatChannels {
        inputs: Vec<NodeId>,
    },
    Upsample {
        input: NodeId,
        planes: usize,
        h: usize,
        w: usize,
    },
    Softmax {
        input: NodeId,
        tau: f64,
    },
    MulBroadcastBatch {
        maps: NodeId,
        factor: NodeId,
    },
    WeightedChannelSum {
        weights: NodeId,
        maps: NodeId,
    },
    MaxNormSqError {
        pred: NodeId,
        target: Tensor,
        alpha: f64,
        /// Per sample: normalizer and the argmax index it was taken from
        /// (`None` when the epsilon floor replaced the max).
        norms: Vec<(f64, Option<usize>)>,
    },
    MeanSqFromOne {
        input: NodeId,
    },
    NllClamped {
        probs: NodeId,
        targets: Tensor,
        floor: f64,
    },
    LinearCombination {
        terms: Vec<(NodeId, f64)>,
    },
    Sum {
        input: NodeId,
    },
}

#[derive(Clone, Debug)]
struct Node {
    /// `None` for parameter leaves, whose value lives in the parameter table.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Floor used by [`Graph::max_normalized_sq_error`] when a sample's
/// prediction maximum is too small to divide by.
pub const NORMALIZER_EPSILON: f64 = 1e-8;

/// Parameter table plus a tape of recorded operations.
///
/// Parameters persist across forward passes; the tape is cleared with
/// [`Graph::reset`]. Nodes are appended in execution order, so the tape is
/// always topologically sorted and [`Graph::backward`] walks it once in
/// reverse. Gradients accumulate into the parameters until
/// [`Graph::zero_grad`] is called.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    params: Vec<Parameter>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    grad_fault: Option<(ParamId, f64)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- parameters -------------------------------------------------------

    pub fn add_param(&mut self, name: impl Into<String>, mut value: Tensor) -> ParamId {
        value.require_grad();
        self.params.push(Parameter {
            name: name.into(),
            value,
        });
        self.param_nodes.push(None);
        ParamId(self.params.len() - 1)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Mutable access to a parameter's values. Any tape recorded before the
    /// mutation is stale and should be reset.
    pub fn param_data_mut(&mut self, id: ParamId) -> &mut [f64] {
        self.params[id.0].value.data_mut()
    }

    pub fn param_grad(&self, id: ParamId) -> &[f64] {
        self.params[id.0].value.grad().expect("parameters always carry a gradient")
    }

    pub(crate) fn set_param_grad(&mut self, id: ParamId, grad: &[f64]) {
        let dst = self.params[id.0].value.grad_mut().expect("parameters carry gradients");
        dst.copy_from_slice(grad);
    }

    pub fn find_param(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Clears accumulated parameter gradients.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Scales the gradient delivered to one parameter by `factor` on every
    /// backward pass. Only meant for negative-control tests of the gradient
    /// checker.
    #[doc(hidden)]
    pub fn inject_gradient_fault(&mut self, param: ParamId, factor: f64) {
        self.grad_fault = Some((param, factor));
    }

    // ---- tape bookkeeping -------------------------------------------------

    /// Drops every recorded node. Parameters and their gradients are kept.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.param_nodes.iter_mut().for_each(|n| *n = None);
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => &self.params[p.0].value,
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records a constant (non-differentiated) input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Input,
            requires_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records (once per tape) a leaf reading parameter `id`.
    pub fn param_node(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        let n = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(n);
        n
    }

    // ---- operations -------------------------------------------------------

    /// 2-D cross-correlation of `[N,C,H,W]` with `[F,C,kh,kw]` plus a per-filter bias.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xs, ks, bs) = (
            self.value(input).shape().to_vec(),
            self.value(kernel).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 4 || ks.len() != 4 {
            return Err(Error::config(format!("conv2d expects 4-D input and kernel, got {xs:?} and {ks:?}")));
        }
        if xs[1] != ks[1] {
            return Err(Error::config(format!(
                "conv2d channel mismatch: input has {} channels, kernel expects {}",
                xs[1], ks[1]
            )));
        }
        if bs != [ks[0]] {
            return Err(Error::config(format!("conv2d bias shape {bs:?} does not match {} filters", ks[0])));
        }
        if stride == 0 {
            return Err(Error::config("conv2d stride must be positive"));
        }
        let (kh, kw) = (ks[2], ks[3]);
        if xs[2] + 2 * padding < kh || xs[3] + 2 * padding < kw {
            return Err(Error::config(format!("conv2d kernel {kh}x{kw} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            kh,
            kw,
            stride,
            padding,
            oh: (xs[2] + 2 * padding - kh) / stride + 1,
            ow: (xs[3] + 2 * padding - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(&[geom.n, geom.f, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { input, kernel, bias, geom }, &[input, kernel, bias]))
    }

    /// Max pooling without padding.
    pub fn maxpool2d(&mut self, input: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.maxpool2d_padded(input, window, stride, 0)
    }

    /// Max pooling with `pad_end` virtual `-inf` rows/columns appended at the
    /// bottom and right. Gradient goes to the first maximal element in
    /// row-major scan order.
    pub fn maxpool2d_padded(&mut self, input: NodeId, window: usize, stride: usize, pad_end: usize) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::config(format!("maxpool2d expects 4-D input, got {s:?}")));
        }
        if window == 0 || stride == 0 {
            return Err(Error::config("maxpool2d window and stride must be positive"));
        }
        if window > s[2] + pad_end || window > s[3] + pad_end {
            return Err(Error::config(format!(
                "maxpool2d window {window} larger than padded input {}x{}",
                s[2] + pad_end,
                s[3] + pad_end
            )));
        }
        let geom = PoolGeom {
            planes: s[0] * s[1],
            h: s[2],
            w: s[3],
            window,
            stride,
            oh: (s[2] + pad_end - window) / stride + 1,
            ow: (s[3] + pad_end - window) / stride + 1,
        };
        let (out, argmax) = kernels::maxpool_forward(&geom, self.value(input).data());
        let value = Tensor::new(&[s[0], s[1], geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::MaxPool { input, argmax }, &[input]))
    }

    /// Block averaging by an integer factor; extents must divide evenly.
    pub fn avgpool2d(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        if s.len() != 4 {
            return Err(Error::config(format!("avgpool2d expects 4-D input, got {s:?}")));
        }
        if factor == 0 || s[2] % factor != 0 || s[3] % factor != 0 {
            return Err(Error::config(format!(
                "avgpool2d factor {factor} does not divide {}x{}",
                s[2], s[3]
            )));
        }
        let planes = s[0] * s[1];
        let out = kernels::avgpool_forward(planes, s[2], s[3], factor, self.value(input).data());
        let value = Tensor::new(&[s[0], s[1], s[2] / factor, s[3] / factor], out)?;
        Ok(self.push(
            value,
            Op::AvgPool {
                input,
                planes,
                h: s[2],
                w: s[3],
                factor,
            },
            &[input],
        ))
    }

    /// Affine map `[N,D] x [D,U] + [U]`.
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (
            self.value(input).shape().to_vec(),
            self.value(weight).shape().to_vec(),
            self.value(bias).shape().to_vec(),
        );
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(Error::config(format!(
                "dense dimension mismatch: input {xs:?}, weight {ws:?}, bias {bs:?}"
            )));
        }
        let (n, d, u) = (xs[0], xs[1], ws[1]);
        let out = kernels::dense_forward(n, d, u, self.value(input).data(), self.value(weight).data(), self.value(bias).data());
        let value = Tensor::new(&[n, u], out)?;
        Ok(self.push(
            value,
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d,
                u,
            },
            &[input, weight, bias],
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu { input }, &[input])
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { input }, &[input]))
    }

    /// Concatenates `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[NodeId]) -> Result<NodeId> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::config("concat_channels needs at least one input"))?;
        let s0 = self.value(*first).shape().to_vec();
        if s0.len() != 4 {
            return Err(Error::config(format!("concat_channels expects 4-D inputs, got {s0:?}")));
        }
        let mut channels = 0;
        for &i in inputs {
            let s = self.value(i).shape();
            if s.len() != 4 || s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3] {
                return Err(Error::config(format!("concat_channels spatial mismatch: {s0:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let plane = s0[2] * s0[3];
        let mut out = Vec::with_capacity(s0[0] * channels * plane);
        for n in 0..s0[0] {
            for &i in inputs {
                let v = self.value(i);
                let c = v.shape()[1];
                out.extend_from_slice(&v.data()[n * c * plane..(n + 1) * c * plane]);
            }
        }
        let value = Tensor::new(&[s0[0], channels, s0[2], s0[3]], out)?;
        Ok(self.push(
            value,
            Op::ConcatChannels {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }

    /// Align-corners bilinear upsampling of the two trailing axes.
    /// Accepts any rank >= 2.
    pub fn upsample_bilinear(&mut self, input: NodeId, target_h: usize, target_w: usize) -> Result<NodeId> {
        let s = self.value(input).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::config(format!("upsample_bilinear expects rank >= 2, got {s:?}")));
        }
        if target_h == 0 || target_w == 0 {
            return Err(Error::config("upsample_bilinear target extent must be positive"));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if target_h < h || target_w < w {
            return Err(Error::config(format!(
                "upsample_bilinear target {target_h}x{target_w} smaller than input {h}x{w}"
            )));
        }
        let planes: usize = s[..s.len() - 2].iter().product();
        let out = kernels::upsample_forward(planes, h, w, target_h, target_w, self.value(input).data());
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend_from_slice(&[target_h, target_w]);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Upsample { input, planes, h, w }, &[input]))
    }

    /// Row-wise `exp(z_k / tau) / sum_i exp(z_i / tau)` over `[N,K]` logits.
    pub fn softmax_tempered(&mut self, logits: NodeId, tau: f64) -> Result<NodeId> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::config(format!("softmax temperature must be positive and finite, got {tau}")));
        }
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::config(format!("softmax expects [N,K] logits, got {s:?}")));
        }
        let out = kernels::softmax_rows(s[0], s[1], self.value(logits).data(), tau);
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Softmax { input: logits, tau }, &[logits]))
    }

    /// Elementwise product of `[N, ...rest]` maps with a `rest`-shaped factor
    /// shared across the batch.
    pub fn mul_broadcast_batch(&mut self, maps: NodeId, factor: NodeId) -> Result<NodeId> {
        let (ms, fs) = (self.value(maps).shape().to_vec(), self.value(factor).shape().to_vec());
        if ms.len() < 2 || ms[1..] != fs[..] {
            return Err(Error::config(format!("mul_broadcast_batch shape mismatch: {ms:?} vs {fs:?}")));
        }
        let inner = self.value(factor).numel();
        let f = self.value(factor).data();
        let out: Vec<f64> = self
            .value(maps)
            .data()
            .chunks(inner)
            .flat_map(|m| m.iter().zip(f).map(|(a, b)| a * b))
            .collect();
        let value = Tensor::new(&ms, out)?;
        Ok(self.push(value, Op::MulBroadcastBatch { maps, factor }, &[maps, factor]))
    }

    /// `out[n] = sum_k weights[n,k] * maps[n,k]` for weights `[N,K]` and maps
    /// `[N,K,H,W]`, giving `[N,1,H,W]`.
    pub fn weighted_channel_sum(&mut self, weights: NodeId, maps: NodeId) -> Result<NodeId> {
        let (ws, ms) = (self.value(weights).shape().to_vec(), self.value(maps).shape().to_vec());
        if ws.len() != 2 || ms.len() != 4 || ws[0] != ms[0] || ws[1] != ms[1] {
            return Err(Error::config(format!("weighted_channel_sum shape mismatch: {ws:?} vs {ms:?}")));
        }
        let (n, k, plane) = (ms[0], ms[1], ms[2] * ms[3]);
        let (w, m) = (self.value(weights).data(), self.value(maps).data());
        let mut out = vec![0.0; n * plane];
        for i in 0..n {
            let o = &mut out[i * plane..(i + 1) * plane];
            for c in 0..k {
                let wv = w[i * k + c];
                let src = &m[(i * k + c) * plane..(i * k + c + 1) * plane];
                for (ov, sv) in o.iter_mut().zip(src) {
                    *ov += wv * sv;
                }
            }
        }
        let value = Tensor::new(&[n, 1, ms[2], ms[3]], out)?;
        Ok(self.push(value, Op::WeightedChannelSum { weights, maps }, &[weights, maps]))
    }

    /// Batch mean of `(1/P) sum_i (p_i / max_j p_j - y_i)^2 / (alpha - y_i)`
    /// where each sample's prediction is normalized by its own maximum.
    /// The maximum is differentiated through its (first) argmax.
    pub fn max_normalized_sq_error(&mut self, pred: NodeId, target: &Tensor, alpha: f64) -> Result<NodeId> {
        let ps = self.value(pred).shape().to_vec();
        if ps.is_empty() || target.numel() != self.value(pred).numel() || target.shape()[0] != ps[0] {
            return Err(Error::usage(format!(
                "saliency target shape {:?} does not match prediction {ps:?}",
                target.shape()
            )));
        }
        let ymax = target.max();
        if !(alpha > ymax) {
            return Err(Error::config(format!("alpha ({alpha}) must exceed the target maximum ({ymax})")));
        }
        let n = ps[0];
        let per = target.numel() / n;
        let p = self.value(pred).data();
        let y = target.data();
        let mut norms = Vec::with_capacity(n);
        let mut total = 0.0;
        for s in 0..n {
            let ps = &p[s * per..(s + 1) * per];
            let ys = &y[s * per..(s + 1) * per];
            let (mut arg, mut m) = (0, ps[0]);
            for (i, &v) in ps.iter().enumerate().skip(1) {
                if v > m {
                    m = v;
                    arg = i;
                }
            }
            let norm = if m < NORMALIZER_EPSILON {
                (NORMALIZER_EPSILON, None)
            } else {
                (m, Some(s * per + arg))
            };
            let mut acc = 0.0;
            for (&pv, &yv) in ps.iter().zip(ys) {
                let r = pv / norm.0 - yv;
                acc += r * r / (alpha - yv);
            }
            total += acc / per as f64;
            norms.push(norm);
        }
        let value = Tensor::scalar(total / n as f64);
        Ok(self.push(
            value,
            Op::MaxNormSqError {
                pred,
                target: target.clone(),
                alpha,
                norms,
            },
            &[pred],
        ))
    }

    /// `mean((1 - x)^2)` over every element.
    pub fn mean_sq_from_one(&mut self, input: NodeId) -> NodeId {
        let v = self.value(input);
        let m = v.data().iter().map(|x| (1.0 - x) * (1.0 - x)).sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(m), Op::MeanSqFromOne { input }, &[input])
    }

    /// Batch mean of `-sum_k t_k ln(max(p_k, floor))` for one-hot targets.
    pub fn nll_clamped(&mut self, probs: NodeId, targets: &Tensor, floor: f64) -> Result<NodeId> {
        let ps = self.value(probs).shape().to_vec();
        if ps.len() != 2 || targets.shape() != ps.as_slice() {
            return Err(Error::usage(format!(
                "class targets {:?} do not match probabilities {ps:?}",
                targets.shape()
            )));
        }
        for (r, row) in targets.data().chunks(ps[1]).enumerate() {
            let ones = row.iter().filter(|&&t| t == 1.0).count();
            let zeros = row.iter().filter(|&&t| t == 0.0).count();
            if ones != 1 || ones + zeros != row.len() {
                return Err(Error::usage(format!("class target row {r} is not one-hot: {row:?}")));
            }
        }
        let p = self.value(probs).data();
        let total: f64 = p
            .iter()
            .zip(targets.data())
            .filter(|(_, &t)| t != 0.0)
            .map(|(&pv, &t)| -t * pv.max(floor).ln())
            .sum();
        let value = Tensor::scalar(total / ps[0] as f64);
        Ok(self.push(
            value,
            Op::NllClamped {
                probs,
                targets: targets.clone(),
                floor,
            },
            &[probs],
        ))
    }

    /// `sum_i c_i * x_i` over equally shaped inputs.
    pub fn linear_combination(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let (first, _) = terms
            .first()
            .ok_or_else(|| Error::usage("linear_combination needs at least one term"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut out = vec![0.0; self.value(*first).numel()];
        for &(id, c) in terms {
            let v = self.value(id);
            if v.shape() != shape.as_slice() {
                return Err(Error::usage(format!(
                    "linear_combination shape mismatch: {shape:?} vs {:?}",
                    v.shape()
                )));
            }
            for (o, x) in out.iter_mut().zip(v.data()) {
                *o += c * x;
            }
        }
        let ids: Vec<NodeId> = terms.iter().map(|t| t.0).collect();
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::LinearCombination {
                terms: terms.to_vec(),
            },
            &ids,
        ))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).sum();
        self.push(Tensor::scalar(s), Op::Sum { input }, &[input])
    }

    // ---- reverse pass -----------------------------------------------------

    /// Propagates d(loss)/d(node) back through the tape and adds the result
    /// to every parameter's gradient buffer.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn accumulate<'g>(&self, grads: &'g mut [Option<Vec<f64>>], id: NodeId) -> Option<&'g mut [f64]> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        let n = self.value(id).numel();
        Some(grads[id.0].get_or_insert_with(|| vec![0.0; n]).as_mut_slice())
    }

    fn backprop_node(&mut self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[idx].op.clone();
        match op {
            Op::Input => {}
            Op::Param(p) => {
                let scale = match self.grad_fault {
                    Some((fp, f)) if fp == p => f,
                    _ => 1.0,
                };
                let dst = self.params[p.0].value.grad_mut().expect("parameters carry gradients");
                for (d, v) in dst.iter_mut().zip(g) {
                    *d += v * scale;
                }
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                geom,
            } => {
                let mut dinput = self.accumulate(grads, input).map(|s| s.to_vec());
                let mut dkernel = self.accumulate(grads, kernel).map(|s| s.to_vec());
                let mut dbias = self.accumulate(grads, bias).map(|s| s.to_vec());
                kernels::conv2d_backward(
                    &geom,
                    self.value(input).data(),
                    self.value(kernel).data(),
                    g,
                    dinput.as_deref_mut(),
                    dkernel.as_deref_mut(),
                    dbias.as_deref_mut(),
                );
                for (id, d) in [(input, dinput), (kernel, dkernel), (bias, dbias)] {
                    if let Some(d) = d {
                        grads[id.0] = Some(d);
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                if let Some(d) = self.accumulate(grads, input) {
                    for (&a, &v) in argmax.iter().zip(g) {
                        d[a] += v;
                    }
                }
            }
            Op::AvgPool {
                input,
                planes,
                h,
                w,
                factor,
            } => {
                if let Some(d) = self.accumulate(grads, input) {
                    kernels::avgpool_backward(planes, h, w, factor, g, d);
                }
            }
            Op::Dense {
                input,
                weight,
                bias,
                n,
                d,
                u,
            } => {
                let x = self.value(input).data().to_vec();
                let wv = self.value(weight).data().to_vec();
                if let Some(db) = self.accumulate(grads, bias) {
                    for row in g.chunks(u) {
                        for (a, b) in db.iter_mut().zip(row) {
                            *a += b;
                        }
                    }
                }
                if let Some(dw) = self.accumulate(grads, weight) {
                    for i in 0..n {
                        let grow = &g[i * u..(i + 1) * u];
                        for k in 0..d {
                            let xv = x[i * d + k];
                            for (a, b) in dw[k * u..(k + 1) * u].iter_mut().zip(grow) {
                                *a += xv * b;
                            }
                        }
                    }
                }
                if let Some(dx) = self.accumulate(grads, input) {
                    for i in 0..n {
                        let grow = &g[i * u..(i + 1) * u];
                        for k in 0..d {
                            dx[i * d + k] += wv[k * u..(k + 1) * u].iter().zip(grow).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            Op::Relu { input } => {
                let x = self.value(input).data().to_vec();
                if let Some(d) = self.accumulate(grads, input) {
                    for ((dv, &xv), &gv) in d.iter_mut().zip(&x).zip(g) {
                        if xv > 0.0 {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Reshape { input } => {
                if let Some(d) = self.accumulate(grads, input) {
                    for (a, b) in d.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            Op::ConcatChannels { inputs } => {
                let out_shape = self.value(NodeId(idx)).shape().to_vec();
                let (n, total_c, plane) = (out_shape[0], out_shape[1], out_shape[2] * out_shape[3]);
                let mut offset = 0;
                for &i in &inputs {
                    let c = self.value(i).shape()[1];
                    if let Some(d) = self.accumulate(grads, i) {
                        for s in 0..n {
                            let src = &g[(s * total_c + offset) * plane..(s * total_c + offset + c) * plane];
                            for (a, b) in d[s * c * plane..(s + 1) * c * plane].iter_mut().zip(src) {
                                *a += b;
                            }
                        }
                    }
                    offset += c;
                }
            }
            Op::Upsample { input, planes, h, w } => {
                let s = self.value(NodeId(idx)).shape().to_vec();
                let (th, tw) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(d) = self.accumulate(grads, input) {
                    kernels::upsample_backward(planes, h, w, th, tw, g, d);
                }
            }
            Op::Softmax { input, tau } => {
                let p = self.value(NodeId(idx)).data().to_vec();
                let k = self.value(NodeId(idx)).shape()[1];
                if let Some(d) = self.accumulate(grads, input) {
                    for ((drow, prow), grow) in d.chunks_mut(k).zip(p.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            drow[j] += prow[j] * (grow[j] - dot) / tau;
                        }
                    }
                }
            }
            Op::MulBroadcastBatch { maps, factor } => {
                let m = self.value(maps).data().to_vec();
                let f = self.value(factor).data().to_vec();
                let inner = f.len();
                if let Some(d) = self.accumulate(grads, maps) {
                    for (dc, gc) in d.chunks_mut(inner).zip(g.chunks(inner)) {
                        for ((a, gv), fv) in dc.iter_mut().zip(gc).zip(&f) {
                            *a += gv * fv;
                        }
                    }
                }
                if let Some(d) = self.accumulate(grads, factor) {
                    for (gc, mc) in g.chunks(inner).zip(m.chunks(inner)) {
                        for ((a, gv), mv) in d.iter_mut().zip(gc).zip(mc) {
                            *a += gv * mv;
                        }
                    }
                }
            }
            Op::WeightedChannelSum { weights, maps } => {
                let ms = self.value(maps).shape().to_vec();
                let (n, k, plane) = (ms[0], ms[1], ms[2] * ms[3]);
                let w = self.value(weights).data().to_vec();
                let m = self.value(maps).data().to_vec();
                if let Some(dw) = self.accumulate(grads, weights) {
                    for i in 0..n {
                        let gi = &g[i * plane..(i + 1) * plane];
                        for c in 0..k {
                            let mc = &m[(i * k + c) * plane..(i * k + c + 1) * plane];
                            dw[i * k + c] += gi.iter().zip(mc).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
                if let Some(dm) = self.accumulate(grads, maps) {
                    for i in 0..n {
                        let gi = &g[i * plane..(i + 1) * plane];
                        for c in 0..k {
                            let wv = w[i * k + c];
                            for (a, b) in dm[(i * k + c) * plane..(i * k + c + 1) * plane].iter_mut().zip(gi) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
            Op::MaxNormSqError {
                pred,
                target,
                alpha,
                norms,
            } => {
                let p = self.value(pred).data().to_vec();
                let n = norms.len();
                let per = p.len() / n;
                let y = target.data();
                if let Some(d) = self.accumulate(grads, pred) {
                    let scale = g[0] / (n * per) as f64;
                    for (s, &(m, arg)) in norms.iter().enumerate() {
                        let mut dm = 0.0;
                        for i in s * per..(s + 1) * per {
                            let c = scale * 2.0 * (p[i] / m - y[i]) / (alpha - y[i]);
                            d[i] += c / m;
                            dm -= c * p[i] / (m * m);
                        }
                        if let Some(a) = arg {
                            d[a] += dm;
                        }
                    }
                }
            }
            Op::MeanSqFromOne { input } => {
                let x = self.value(input).data().to_vec();
                let scale = g[0] / x.len() as f64;
                if let Some(d) = self.accumulate(grads, input) {
                    for (a, xv) in d.iter_mut().zip(&x) {
                        *a += -2.0 * (1.0 - xv) * scale;
                    }
                }
            }
            Op::NllClamped { probs, targets, floor } => {
                let p = self.value(probs).data().to_vec();
                let n = self.value(probs).shape()[0];
                if let Some(d) = self.accumulate(grads, probs) {
                    for ((a, &pv), &t) in d.iter_mut().zip(&p).zip(targets.data()) {
                        if t != 0.0 && pv > floor {
                            *a += -g[0] * t / (pv * n as f64);
                        }
                    }
                }
            }
            Op::LinearCombination { terms } => {
                for (id, c) in terms {
                    if let Some(d) = self.accumulate(grads, id) {
                        for (a, b) in d.iter_mut().zip(g) {
                            *a += c * b;
                        }
                    }
                }
            }
            Op::Sum { input } => {
                if let Some(d) = self.accumulate(grads, input) {
                    d.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}
