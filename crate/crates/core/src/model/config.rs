use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    /// Pad the bottom/right edge so the output extent is `ceil(extent / stride)`.
    #[serde(default)]
    pub same_padding: bool,
}

impl PoolSpec {
    pub const fn halve() -> Self {
        Self {
            window: 2,
            stride: 2,
            same_padding: false,
        }
    }

    pub const fn stride_one() -> Self {
        Self {
            window: 2,
            stride: 1,
            same_padding: true,
        }
    }

    /// Padding appended at the end of an axis of length `extent`.
    pub fn pad_end(&self, extent: usize) -> usize {
        if !self.same_padding {
            return 0;
        }
        let out = extent.div_ceil(self.stride);
        ((out - 1) * self.stride + self.window).saturating_sub(extent)
    }

    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let padded = extent + self.pad_end(extent);
        (padded >= self.window).then(|| (padded - self.window) / self.stride + 1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrunkStage {
    /// Filter count of each 3x3 ("same"-padded) convolution in the stage.
    pub filters: Vec<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

/// Per-expert head: `kernel x kernel` conv, ReLU, then a 1x1 conv whose
/// `out_filters` channels are averaged into the single expert map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertHead {
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "one")]
    pub out_filters: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingConv {
    pub filters: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingLayers {
    pub convs: Vec<GatingConv>,
    /// Hidden fully connected widths; the final `K`-unit layer is implied.
    pub dense: Vec<usize>,
}

fn default_kernel() -> usize {
    3
}

fn one() -> usize {
    1
}

/// Declarative description of the whole network and its loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    pub trunk_stages: Vec<TrunkStage>,
    /// Indices into `trunk_stages` whose outputs feed the expert heads.
    pub concat_stages: Vec<usize>,
    pub num_experts: usize,
    pub expert_head: ExpertHead,
    pub gating_downsample: usize,
    pub gating: GatingLayers,
    pub tau: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    pub lambda_cb: f64,
    pub alpha: f64,
    pub cb_h: usize,
    pub cb_w: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    /// Full-size layout: VGG16 trunk on 480x640 RGB input, 20 experts.
    pub fn paper_scale() -> Self {
        let conv = |filters: Vec<usize>, pool| TrunkStage {
            filters,
            kernel: 3,
            pool,
        };
        let gconv = |filters| GatingConv {
            filters,
            kernel: 3,
            pool: Some(PoolSpec::halve()),
        };
        Self {
            input_h: 480,
            input_w: 640,
            input_channels: 3,
            trunk_stages: vec![
                conv(vec![64, 64], Some(PoolSpec::halve())),
                conv(vec![128, 128], Some(PoolSpec::halve())),
                conv(vec![256, 256, 256], Some(PoolSpec::halve())),
                conv(vec![512, 512, 512], Some(PoolSpec::stride_one())),
                conv(vec![512, 512, 512], None),
            ],
            concat_stages: vec![2, 3, 4],
            num_experts: 20,
            expert_head: ExpertHead {
                filters: 64,
                kernel: 3,
                out_filters: 16,
            },
            gating_downsample: 4,
            gating: GatingLayers {
                convs: vec![gconv(32), gconv(64), gconv(128), gconv(128)],
                dense: vec![128],
            },
            tau: 10.0,
            lambda_s: 10.0,
            lambda_c: 1.0,
            lambda_cb: 1.0,
            alpha: 1.1,
            cb_h: 6,
            cb_w: 8,
        }
    }

    /// Shrunken layout for single-core experiments: 48x64 grayscale input,
    /// saliency at 12x16, four experts.
    pub fn desk_scale() -> Self {
        let gconv = |filters| GatingConv {
            filters,
            kernel: 3,
            pool: Some(PoolSpec::halve()),
        };
        Self {
            input_h: 48,
            input_w: 64,
            input_channels: 1,
            trunk_stages: vec![
                TrunkStage {
                    filters: vec![8],
                    kernel: 3,
                    pool: Some(PoolSpec::halve()),
                },
                TrunkStage {
                    filters: vec![16],
                    kernel: 3,
                    pool: Some(PoolSpec::halve()),
                },
                TrunkStage {
                    filters: vec![16],
                    kernel: 3,
                    pool: Some(PoolSpec::stride_one()),
                },
                TrunkStage {
                    filters: vec![16],
                    kernel: 3,
                    pool: None,
                },
            ],
            concat_stages: vec![1, 2, 3],
            num_experts: 4,
            expert_head: ExpertHead {
                filters: 8,
                kernel: 3,
                out_filters: 1,
            },
            gating_downsample: 4,
            gating: GatingLayers {
                convs: vec![gconv(8), gconv(8)],
                dense: vec![16],
            },
            tau: 10.0,
            lambda_s: 10.0,
            lambda_c: 1.0,
            lambda_cb: 1.0,
            alpha: 1.1,
            cb_h: 3,
            cb_w: 4,
        }
    }

    /// Layout for the 32x32 grayscale synthetic data: saliency at 8x8, four
    /// experts, small enough to train an ensemble in minutes on one core.
    pub fn compact() -> Self {
        let stage = |filters, pool| TrunkStage {
            filters: vec![filters],
            kernel: 3,
            pool,
        };
        let gconv = |filters| GatingConv {
            filters,
            kernel: 3,
            pool: Some(PoolSpec::halve()),
        };
        Self {
            input_h: 32,
            input_w: 32,
            input_channels: 1,
            trunk_stages: vec![
                stage(8, Some(PoolSpec::halve())),
                stage(16, Some(PoolSpec::halve())),
                stage(16, Some(PoolSpec::stride_one())),
            ],
            concat_stages: vec![1, 2],
            num_experts: 4,
            expert_head: ExpertHead {
                filters: 8,
                kernel: 3,
                out_filters: 1,
            },
            gating_downsample: 2,
            gating: GatingLayers {
                convs: vec![gconv(8), gconv(16)],
                dense: vec![32],
            },
            tau: 10.0,
            lambda_s: 10.0,
            lambda_c: 1.0,
            lambda_cb: 1.0,
            alpha: 1.1,
            cb_h: 4,
            cb_w: 4,
        }
    }

    /// Smallest layout exercising every layer type, for gradient checks.
    pub fn miniature() -> Self {
        Self {
            input_h: 8,
            input_w: 8,
            input_channels: 1,
            trunk_stages: vec![
                TrunkStage {
                    filters: vec![2],
                    kernel: 3,
                    pool: Some(PoolSpec::halve()),
                },
                TrunkStage {
                    filters: vec![2],
                    kernel: 3,
                    pool: Some(PoolSpec::stride_one()),
                },
            ],
            concat_stages: vec![0, 1],
            num_experts: 2,
            expert_head: ExpertHead {
                filters: 2,
                kernel: 3,
                out_filters: 2,
            },
            gating_downsample: 2,
            gating: GatingLayers {
                convs: vec![GatingConv {
                    filters: 2,
                    kernel: 3,
                    pool: Some(PoolSpec::halve()),
                }],
                dense: vec![3],
            },
            tau: 10.0,
            lambda_s: 10.0,
            lambda_c: 1.0,
            lambda_cb: 1.0,
            alpha: 1.1,
            cb_h: 2,
            cb_w: 2,
        }
    }

    /// Same network with a single expert: the non-mixture baseline. The class
    /// loss is switched off because a one-class cross entropy is always zero.
    pub fn single_expert(&self) -> Self {
        Self {
            num_experts: 1,
            lambda_c: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.layer_plan().map(|_| ())
    }

    /// Saliency map extent `(h, w)`.
    pub fn output_size(&self) -> Result<(usize, usize)> {
        Ok(self.layer_plan()?.output_hw)
    }

    /// Walks the configuration, checking every constraint and computing the
    /// shape of every layer. Model building and the census both consume this.
    pub fn layer_plan(&self) -> Result<LayerPlan> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_h == 0 || self.input_w == 0 || self.input_channels == 0 {
            return bad("input extents must be positive".into());
        }
        if self.num_experts == 0 {
            return bad("num_experts must be at least 1".into());
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
            ("lambda_cb", self.lambda_cb),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a nonnegative number, got {v}"));
            }
        }
        if !(self.alpha > 1.0) || !self.alpha.is_finite() {
            return bad(format!(
                "alpha must exceed 1 (the ground-truth maximum), got {}",
                self.alpha
            ));
        }
        if self.trunk_stages.is_empty() {
            return bad("trunk needs at least one stage".into());
        }
        if self.concat_stages.is_empty() {
            return bad("concat_stages must not be empty".into());
        }
        let last = self.trunk_stages.len() - 1;
        for &s in &self.concat_stages {
            if s > last {
                return bad(format!("concat stage {s} out of range (trunk has {} stages)", last + 1));
            }
        }
        if self.concat_stages.windows(2).any(|w| w[0] >= w[1]) {
            return bad("concat_stages must be strictly increasing".into());
        }
        if *self.concat_stages.last().unwrap() != last {
            return bad("the last trunk stage must be concatenated (later stages would be unused)".into());
        }

        let mut layers = Vec::new();
        layers.push(LayerSpec {
            section: Section::Trunk,
            name: "Input".into(),
            kind: LayerKind::Input,
            out: (self.input_channels, self.input_h, self.input_w),
        });
        let (mut c, mut h, mut w) = (self.input_channels, self.input_h, self.input_w);
        let mut stage_out = Vec::with_capacity(self.trunk_stages.len());
        for (si, stage) in self.trunk_stages.iter().enumerate() {
            if stage.filters.is_empty() {
                return bad(format!("trunk stage {si} has no convolutions"));
            }
            for (ci, &f) in stage.filters.iter().enumerate() {
                check_conv(f, stage.kernel, &format!("trunk stage {si}"))?;
                layers.push(LayerSpec {
                    section: Section::Trunk,
                    name: format!("Conv{}-{}", si + 1, ci + 1),
                    kind: LayerKind::Conv {
                        in_channels: c,
                        filters: f,
                        kernel: stage.kernel,
                    },
                    out: (f, h, w),
                });
                c = f;
            }
            if let Some(p) = stage.pool {
                (h, w) = pool_out(&p, h, w, &format!("trunk stage {si}"))?;
                layers.push(LayerSpec {
                    section: Section::Trunk,
                    name: format!("Pool{}", si + 1),
                    kind: LayerKind::MaxPool(p),
                    out: (c, h, w),
                });
            }
            stage_out.push((c, h, w));
        }
        let (_, oh, ow) = stage_out[self.concat_stages[0]];
        let mut concat_c = 0;
        for &s in &self.concat_stages {
            let (sc, sh, sw) = stage_out[s];
            if (sh, sw) != (oh, ow) {
                return bad(format!(
                    "concat stages disagree on spatial extent: stage {} is {oh}x{ow}, stage {s} is {sh}x{sw}",
                    self.concat_stages[0]
                ));
            }
            concat_c += sc;
        }
        if self.input_h % oh != 0 || self.input_w % ow != 0 {
            return bad(format!(
                "saliency map {oh}x{ow} must divide the input {}x{}",
                self.input_h, self.input_w
            ));
        }

        let head = self.expert_head;
        check_conv(head.filters, head.kernel, "expert head")?;
        check_conv(head.out_filters, 1, "expert head output")?;
        layers.push(LayerSpec {
            section: Section::Experts,
            name: "Conv-E-1".into(),
            kind: LayerKind::Conv {
                in_channels: concat_c,
                filters: head.filters,
                kernel: head.kernel,
            },
            out: (head.filters, oh, ow),
        });
        layers.push(LayerSpec {
            section: Section::Experts,
            name: "Conv-E-2".into(),
            kind: LayerKind::Conv {
                in_channels: head.filters,
                filters: head.out_filters,
                kernel: 1,
            },
            out: (head.out_filters, oh, ow),
        });
        if self.cb_h == 0 || self.cb_w == 0 || self.cb_h > oh || self.cb_w > ow {
            return bad(format!(
                "center-bias grid {}x{} must be nonempty and no larger than the {oh}x{ow} saliency map",
                self.cb_h, self.cb_w
            ));
        }
        layers.push(LayerSpec {
            section: Section::Experts,
            name: "Center bias".into(),
            kind: LayerKind::CenterBias,
            out: (self.num_experts, self.cb_h, self.cb_w),
        });

        let ds = self.gating_downsample;
        if ds == 0 || self.input_h % ds != 0 || self.input_w % ds != 0 {
            return bad(format!(
                "gating_downsample {ds} must divide the input {}x{}",
                self.input_h, self.input_w
            ));
        }
        let (mut c, mut h, mut w) = (self.input_channels, self.input_h / ds, self.input_w / ds);
        layers.push(LayerSpec {
            section: Section::Gating,
            name: "Input".into(),
            kind: LayerKind::Input,
            out: (c, h, w),
        });
        for (gi, gc) in self.gating.convs.iter().enumerate() {
            check_conv(gc.filters, gc.kernel, &format!("gating conv {gi}"))?;
            layers.push(LayerSpec {
                section: Section::Gating,
                name: format!("Conv-G-{}", gi + 1),
                kind: LayerKind::Conv {
                    in_channels: c,
                    filters: gc.filters,
                    kernel: gc.kernel,
                },
                out: (gc.filters, h, w),
            });
            c = gc.filters;
            if let Some(p) = gc.pool {
                (h, w) = pool_out(&p, h, w, &format!("gating conv {gi}"))?;
                layers.push(LayerSpec {
                    section: Section::Gating,
                    name: format!("Pool-G-{}", gi + 1),
                    kind: LayerKind::MaxPool(p),
                    out: (c, h, w),
                });
            }
        }
        let mut units_in = c * h * w;
        let widths: Vec<usize> = self.gating.dense.iter().copied().chain([self.num_experts]).collect();
        for (di, &u) in widths.iter().enumerate() {
            if u == 0 {
                return bad(format!("gating dense layer {di} has zero units"));
            }
            layers.push(LayerSpec {
                section: Section::Gating,
                name: format!("Full{}", di + 1),
                kind: LayerKind::Dense { inputs: units_in, units: u },
                out: (u, 1, 1),
            });
            units_in = u;
        }

        Ok(LayerPlan {
            layers,
            stage_out,
            concat_channels: concat_c,
            output_hw: (oh, ow),
        })
    }

    /// Human-readable layer table; one row per layer.
    pub fn census(&self) -> Result<Census> {
        let plan = self.layer_plan()?;
        let rows = plan
            .layers
            .iter()
            .map(|l| {
                let hyper = match &l.kind {
                    LayerKind::Input => format!("{} x {} pixels", l.out.1, l.out.2),
                    LayerKind::Conv { filters, kernel, .. } => format!("{filters} ({kernel} x {kernel}) filters"),
                    LayerKind::MaxPool(p) if p.stride == p.window => {
                        format!("{} x {} max pooling", p.window, p.window)
                    }
                    LayerKind::MaxPool(p) => {
                        format!("{} x {} max pooling (stride {})", p.window, p.window, p.stride)
                    }
                    LayerKind::CenterBias => format!("{} x {} parameters", self.cb_w, self.cb_h),
                    LayerKind::Dense { units, .. } => format!("{units} units"),
                };
                CensusRow {
                    section: l.section,
                    layer: l.name.clone(),
                    hyper,
                }
            })
            .collect();
        Ok(Census { rows })
    }
}

fn check_conv(filters: usize, kernel: usize, what: &str) -> Result<()> {
    if filters == 0 {
        return Err(Error::Config(format!("{what}: filter count must be positive")));
    }
    if kernel % 2 == 0 {
        return Err(Error::Config(format!("{what}: kernel size {kernel} must be odd")));
    }
    Ok(())
}

fn pool_out(p: &PoolSpec, h: usize, w: usize, what: &str) -> Result<(usize, usize)> {
    if p.window == 0 || p.stride == 0 {
        return Err(Error::Config(format!("{what}: pool window and stride must be positive")));
    }
    match (p.output_extent(h), p.output_extent(w)) {
        (Some(oh), Some(ow)) => Ok((oh, ow)),
        _ => Err(Error::Config(format!(
            "{what}: pool window {} larger than the {h}x{w} input",
            p.window
        ))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Section {
    Trunk,
    Experts,
    Gating,
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Section::Trunk => "VGG16",
            Section::Experts => "Experts",
            Section::Gating => "Gating Network",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Input,
    Conv {
        in_channels: usize,
        filters: usize,
        kernel: usize,
    },
    MaxPool(PoolSpec),
    CenterBias,
    Dense {
        inputs: usize,
        units: usize,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub section: Section,
    pub name: String,
    pub kind: LayerKind,
    /// Output `(channels, h, w)`; dense layers report `(units, 1, 1)`.
    pub out: (usize, usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerPlan {
    pub layers: Vec<LayerSpec>,
    /// `(channels, h, w)` after each trunk stage.
    pub stage_out: Vec<(usize, usize, usize)>,
    pub concat_channels: usize,
    pub output_hw: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CensusRow {
    pub section: Section,
    pub layer: String,
    pub hyper: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Census {
    pub rows: Vec<CensusRow>,
}

impl fmt::Display for Census {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{} | {} | {}", r.section, r.layer, r.hyper)?;
        }
        Ok(())
    }
}
