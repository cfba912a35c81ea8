use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{LayerKind, LayerPlan, ModelConfig, PoolSpec, Section};
use super::loss::{total_loss, LossWeights};
use crate::autodiff::{grad_check, GradCheckReport, Graph, NodeId, ParamId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct ConvParams {
    kernel: ParamId,
    bias: ParamId,
    padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct DenseParams {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct TrunkStageParams {
    convs: Vec<ConvParams>,
    pool: Option<PoolSpec>,
}

#[derive(Clone, Copy, Debug)]
struct HeadParams {
    hidden: ConvParams,
    out: ConvParams,
}

#[derive(Clone, Debug)]
struct GatingConvParams {
    conv: ConvParams,
    pool: Option<PoolSpec>,
}

/// Which parameter group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Trunk,
    Expert(usize),
    Gating,
    CenterBias,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::Trunk => write!(f, "trunk"),
            ParamGroup::Expert(k) => write!(f, "expert{k}"),
            ParamGroup::Gating => write!(f, "gating"),
            ParamGroup::CenterBias => write!(f, "center_bias"),
        }
    }
}

/// Node handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// Mixture prediction `[N,1,h,w]`, raw (may be negative).
    pub saliency: NodeId,
    /// Expert maps before center-bias modulation, `[N,K,h,w]`.
    pub expert_maps: NodeId,
    /// Expert maps times the upscaled center bias, `[N,K,h,w]`.
    pub biased_expert_maps: NodeId,
    /// Gating logits `[N,K]`.
    pub logits: NodeId,
    /// Gate weights at the configured temperature, `[N,K]`.
    pub gate_probs_tau: NodeId,
    /// Gate probabilities at temperature 1, used by the class loss.
    pub gate_probs_1: NodeId,
    /// Center-bias grid upscaled to the saliency resolution, `[K,h,w]`.
    pub center_bias: NodeId,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    /// Skip the center-bias multiplication.
    pub bypass_center_bias: bool,
}

/// Owned copies of the forward-pass tensors for one batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub saliency: Tensor,
    pub expert_maps: Tensor,
    pub biased_expert_maps: Tensor,
    pub gate_probs_tau: Tensor,
    pub gate_probs_1: Tensor,
}

impl Prediction {
    /// Saliency with negative values clamped to zero, for export and scoring.
    pub fn saliency_clamped(&self) -> Tensor {
        self.saliency.map(|v| v.max(0.0))
    }
}

/// Architecture of the network: configuration plus the parameter handles of
/// every layer. Forward passes are recorded onto any graph holding the
/// matching parameters.
#[derive(Clone, Debug)]
pub struct Network {
    config: ModelConfig,
    plan: LayerPlan,
    trunk: Vec<TrunkStageParams>,
    heads: Vec<HeadParams>,
    gating_convs: Vec<GatingConvParams>,
    gating_dense: Vec<DenseParams>,
    center_bias: ParamId,
    groups: Vec<ParamGroup>,
}

/// Mixture-of-experts saliency network: architecture plus parameters and tape.
#[derive(Clone, Debug)]
pub struct SaliencyModel {
    net: Network,
    graph: Graph,
}

struct Builder<'a> {
    graph: Graph,
    rng: ChaCha8Rng,
    groups: Vec<ParamGroup>,
    group: ParamGroup,
    _cfg: &'a ModelConfig,
}

impl Builder<'_> {
    fn glorot(&mut self, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-limit..limit)).collect();
        Tensor::new(shape, data).expect("shape and data agree")
    }

    fn param(&mut self, name: String, value: Tensor) -> ParamId {
        self.groups.push(self.group);
        self.graph.add_param(name, value)
    }

    fn conv(&mut self, prefix: &str, name: &str, in_c: usize, filters: usize, kernel: usize) -> ConvParams {
        let area = kernel * kernel;
        let k = self.glorot(&[filters, in_c, kernel, kernel], in_c * area, filters * area);
        let kernel_id = self.param(format!("{prefix}.{name}.kernel"), k);
        let bias = self.param(format!("{prefix}.{name}.bias"), Tensor::zeros(&[filters]));
        ConvParams {
            kernel: kernel_id,
            bias,
            padding: kernel / 2,
        }
    }

    fn dense(&mut self, prefix: &str, name: &str, inputs: usize, units: usize) -> DenseParams {
        let w = self.glorot(&[inputs, units], inputs, units);
        let weight = self.param(format!("{prefix}.{name}.weight"), w);
        let bias = self.param(format!("{prefix}.{name}.bias"), Tensor::zeros(&[units]));
        DenseParams { weight, bias }
    }
}

impl Network {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.plan.output_hw
    }

    fn conv(g: &mut Graph, x: NodeId, p: ConvParams) -> Result<NodeId> {
        let k = g.param_node(p.kernel);
        let b = g.param_node(p.bias);
        g.conv2d(x, k, b, 1, p.padding)
    }

    fn pool(g: &mut Graph, x: NodeId, p: PoolSpec) -> Result<NodeId> {
        let s = g.value(x).shape();
        let pad = p.pad_end(s[2]).max(p.pad_end(s[3]));
        g.maxpool2d_padded(x, p.window, p.stride, pad)
    }

    /// Resets `g` and records a forward pass for images `[N,C,H,W]`.
    pub fn forward(&self, g: &mut Graph, images: &Tensor, opts: ForwardOptions) -> Result<ModelOutput> {
        let s = images.shape();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != cfg.input_channels || s[2] != cfg.input_h || s[3] != cfg.input_w {
            return Err(Error::usage(format!(
                "images have shape {s:?}, model expects [N, {}, {}, {}]",
                cfg.input_channels, cfg.input_h, cfg.input_w
            )));
        }
        let n = s[0];
        let k_experts = cfg.num_experts;
        let (tau, ds) = (cfg.tau, cfg.gating_downsample);
        let concat_stages = cfg.concat_stages.clone();
        let (oh, ow) = self.plan.output_hw;
        let out_filters = cfg.expert_head.out_filters;

        g.reset();
        let x = g.input(images.clone());

        // shared trunk
        let mut h = x;
        let mut stage_outputs = Vec::new();
        for si in 0..self.trunk.len() {
            for ci in 0..self.trunk[si].convs.len() {
                let p = self.trunk[si].convs[ci];
                let c = Self::conv(g, h, p)?;
                h = g.relu(c);
            }
            if let Some(p) = self.trunk[si].pool {
                h = Self::pool(g, h, p)?;
            }
            stage_outputs.push(h);
        }
        let picked: Vec<NodeId> = concat_stages.iter().map(|&i| stage_outputs[i]).collect();
        let features = g.concat_channels(&picked)?;

        // expert heads
        let mut maps = Vec::with_capacity(k_experts);
        for k in 0..k_experts {
            let hp = self.heads[k];
            let hidden = Self::conv(g, features, hp.hidden)?;
            let hidden = g.relu(hidden);
            let mut m = Self::conv(g, hidden, hp.out)?;
            if out_filters > 1 {
                let avg = g.input(Tensor::full(&[n, out_filters], 1.0 / out_filters as f64));
                m = g.weighted_channel_sum(avg, m)?;
            }
            maps.push(m);
        }
        let expert_maps = g.concat_channels(&maps)?;

        // center bias
        let bias_grid = g.param_node(self.center_bias);
        let center_bias = g.upsample_bilinear(bias_grid, oh, ow)?;
        let biased_expert_maps = if opts.bypass_center_bias {
            expert_maps
        } else {
            g.mul_broadcast_batch(expert_maps, center_bias)?
        };

        // gating branch
        let mut gate = if ds > 1 { g.avgpool2d(x, ds)? } else { x };
        for gi in 0..self.gating_convs.len() {
            let gc = self.gating_convs[gi].clone();
            let c = Self::conv(g, gate, gc.conv)?;
            gate = g.relu(c);
            if let Some(p) = gc.pool {
                gate = Self::pool(g, gate, p)?;
            }
        }
        let flat_len = g.value(gate).numel() / n;
        gate = g.reshape(gate, &[n, flat_len])?;
        let last = self.gating_dense.len() - 1;
        for di in 0..self.gating_dense.len() {
            let dp = self.gating_dense[di];
            let w = g.param_node(dp.weight);
            let b = g.param_node(dp.bias);
            gate = g.dense(gate, w, b)?;
            if di < last {
                gate = g.relu(gate);
            }
        }
        let logits = gate;
        let gate_probs_tau = g.softmax_tempered(logits, tau)?;
        let gate_probs_1 = g.softmax_tempered(logits, 1.0)?;

        let saliency = g.weighted_channel_sum(gate_probs_tau, biased_expert_maps)?;
        Ok(ModelOutput {
            saliency,
            expert_maps,
            biased_expert_maps,
            logits,
            gate_probs_tau,
            gate_probs_1,
            center_bias,
        })
    }

}

impl SaliencyModel {
    /// Builds the network with Glorot-uniform weights drawn from `seed`,
    /// zero biases and an all-ones center bias.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        let plan = config.layer_plan()?;
        let mut b = Builder {
            graph: Graph::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            groups: Vec::new(),
            group: ParamGroup::Trunk,
            _cfg: config,
        };

        let mut trunk = Vec::new();
        let mut in_c = config.input_channels;
        for (si, stage) in config.trunk_stages.iter().enumerate() {
            let mut convs = Vec::new();
            for (ci, &f) in stage.filters.iter().enumerate() {
                convs.push(b.conv("trunk", &format!("Conv{}-{}", si + 1, ci + 1), in_c, f, stage.kernel));
                in_c = f;
            }
            trunk.push(TrunkStageParams { convs, pool: stage.pool });
        }

        let head = config.expert_head;
        let mut heads = Vec::new();
        for k in 0..config.num_experts {
            b.group = ParamGroup::Expert(k);
            let prefix = format!("expert{k}");
            let hidden = b.conv(&prefix, "Conv-E-1", plan.concat_channels, head.filters, head.kernel);
            let out = b.conv(&prefix, "Conv-E-2", head.filters, head.out_filters, 1);
            heads.push(HeadParams { hidden, out });
        }

        b.group = ParamGroup::Gating;
        let mut gating_convs = Vec::new();
        let mut gating_dense = Vec::new();
        let mut c = config.input_channels;
        for layer in plan.layers.iter().filter(|l| l.section == Section::Gating) {
            match &layer.kind {
                LayerKind::Conv { filters, kernel, .. } => {
                    let conv = b.conv("gating", &layer.name, c, *filters, *kernel);
                    gating_convs.push(GatingConvParams { conv, pool: None });
                    c = *filters;
                }
                LayerKind::MaxPool(p) => {
                    gating_convs.last_mut().expect("pool follows a conv").pool = Some(*p);
                }
                LayerKind::Dense { inputs, units } => {
                    gating_dense.push(b.dense("gating", &layer.name, *inputs, *units));
                }
                LayerKind::Input | LayerKind::CenterBias => {}
            }
        }

        b.group = ParamGroup::CenterBias;
        let center_bias = b.param(
            "center_bias".into(),
            Tensor::ones(&[config.num_experts, config.cb_h, config.cb_w]),
        );

        Ok(Self {
            net: Network {
                config: config.clone(),
                plan,
                trunk,
                heads,
                gating_convs,
                gating_dense,
                center_bias,
                groups: b.groups,
            },
            graph: b.graph,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn output_size(&self) -> (usize, usize) {
        self.net.plan.output_hw
    }

    pub fn num_experts(&self) -> usize {
        self.net.config.num_experts
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn center_bias_param(&self) -> ParamId {
        self.net.center_bias
    }

    /// Group of every parameter, in graph order.
    pub fn param_groups(&self) -> &[ParamGroup] {
        &self.net.groups
    }

    pub fn params_in_group(&self, group: ParamGroup) -> Vec<ParamId> {
        self.graph
            .param_ids()
            .zip(&self.net.groups)
            .filter(|(_, g)| **g == group)
            .map(|(p, _)| p)
            .collect()
    }

    /// Flat copy of every parameter in graph order.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.graph.params().iter().map(|p| p.value().data().to_vec()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        let ids: Vec<ParamId> = self.graph.param_ids().collect();
        if snapshot.len() != ids.len() {
            return Err(Error::usage(format!(
                "snapshot has {} parameters, model has {}",
                snapshot.len(),
                ids.len()
            )));
        }
        for (&id, values) in ids.iter().zip(snapshot) {
            if values.len() != self.graph.param_value(id).numel() {
                return Err(Error::usage(format!(
                    "snapshot size mismatch for {}",
                    self.graph.param(id).name()
                )));
            }
        }
        for (&id, values) in ids.iter().zip(snapshot) {
            self.graph.param_data_mut(id).copy_from_slice(values);
        }
        self.graph.reset();
        Ok(())
    }

    /// Records a full forward pass for images `[N,C,H,W]` on a fresh tape.
    pub fn forward(&mut self, images: &Tensor) -> Result<ModelOutput> {
        self.net.forward(&mut self.graph, images, ForwardOptions::default())
    }

    pub fn forward_with(&mut self, images: &Tensor, opts: ForwardOptions) -> Result<ModelOutput> {
        self.net.forward(&mut self.graph, images, opts)
    }

    /// Compares the analytic gradient of the total loss on one batch against
    /// central finite differences for every parameter scalar.
    pub fn grad_check(
        &mut self,
        images: &Tensor,
        target: &Tensor,
        classes: &[usize],
        epsilon: f64,
        tolerance: f64,
    ) -> Result<GradCheckReport> {
        let net = self.net.clone();
        let weights = LossWeights::from_config(&net.config);
        grad_check(&mut self.graph, epsilon, tolerance, |g| {
            let out = net.forward(g, images, ForwardOptions::default())?;
            Ok(total_loss(g, &out, target, classes, &weights)?.total)
        })
    }

    /// Copies the tensors named by `out` off the tape.
    pub fn collect(&self, out: &ModelOutput) -> Prediction {
        let v = |id| self.graph.value(id).clone();
        Prediction {
            saliency: v(out.saliency),
            expert_maps: v(out.expert_maps),
            biased_expert_maps: v(out.biased_expert_maps),
            gate_probs_tau: v(out.gate_probs_tau),
            gate_probs_1: v(out.gate_probs_1),
        }
    }

    /// Forward pass without keeping handles; the tape is cleared afterwards.
    pub fn predict(&mut self, images: &Tensor) -> Result<Prediction> {
        let out = self.forward(images)?;
        let p = self.collect(&out);
        self.graph.reset();
        Ok(p)
    }
}
