//! Executable model graphs.
//!
//! A model is a four-stage backbone (three-conv stem, then per stage one
//! stride-2 downsampling conv followed by multi-scale blocks), spatial
//! pyramid pooling after the third stage, an optional path-aggregation neck
//! over the last three stage taps at halved widths, and an optional
//! per-level head. Depthwise kernel sizes follow a [`KernelProtocol`]: one
//! kernel per stage, reused by the neck and head at the matching feature
//! level.
//!
//! On a 640x640 input the stages see 320/160/80/40 inputs and emit
//! 160/80/40/20 feature maps (strides 4/8/16/32); the neck taps stages 2-4.

use std::collections::HashSet;

use crate::blocks::{BranchKind, GlobalQuery, MsBlock, MsBlockConfig, QUERY_DIM_DEFAULT};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvBnAct, Mode, StateSink};
use crate::tensor::{concat_channels, Element, Tensor};

/// Head output channels: 80 class scores plus 4 box offsets per position.
pub const HEAD_CLASSES: usize = 80;
pub const HEAD_BOX: usize = 4;

/// Pool window sizes of the spatial-pyramid-pooling block.
pub const SPP_POOLS: [usize; 3] = [5, 9, 13];

// ── Kernel protocol ─────────────────────────────────────────────────────

/// Depthwise kernel size per stage (all odd, at least 3).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelProtocol(pub [usize; 4]);

impl KernelProtocol {
    /// The heterogeneous default: kernels grow with depth.
    pub fn hks() -> Self {
        KernelProtocol([3, 5, 7, 9])
    }

    pub fn homogeneous(k: usize) -> Self {
        KernelProtocol([k; 4])
    }

    pub fn validate(&self) -> Result<()> {
        for &k in &self.0 {
            if k < 3 || k % 2 == 0 {
                return Err(Error::InvalidArgument {
                    op: "kernel_protocol",
                    detail: format!("kernel sizes must be odd and >= 3, got {:?}", self.0),
                });
            }
        }
        Ok(())
    }

    /// Kernel for a 1-based stage index.
    pub fn stage(&self, stage: usize) -> usize {
        self.0[stage - 1]
    }

    /// Parse a comma-separated list like "3,5,7,9".
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').collect();
        if parts.len() != 4 {
            return Err(Error::InvalidArgument {
                op: "kernel_protocol",
                detail: format!("expected 4 comma-separated kernel sizes, got `{text}`"),
            });
        }
        let mut kernels = [0usize; 4];
        for (i, p) in parts.iter().enumerate() {
            kernels[i] = p.trim().parse().map_err(|_| Error::InvalidArgument {
                op: "kernel_protocol",
                detail: format!("invalid kernel size `{p}`"),
            })?;
        }
        let proto = KernelProtocol(kernels);
        proto.validate()?;
        Ok(proto)
    }
}

impl std::fmt::Display for KernelProtocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{},{},{},{}", self.0[0], self.0[1], self.0[2], self.0[3])
    }
}

// ── Variants ────────────────────────────────────────────────────────────

/// Declarative model configuration. The named presets follow the published
/// XS/S/M scaling; custom variants may shrink everything for experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVariant {
    pub name: String,
    /// Channel width multiplier.
    pub widen: f64,
    /// Base channels [stem, stage1, stage2, stage3, stage4] before widening.
    pub base_channels: [usize; 5],
    /// Branch-operator family for the first and second half of each stage's
    /// blocks.
    pub block_kinds: [BranchKind; 2],
    pub blocks_per_stage: [usize; 4],
    /// Channel expansion ratio inside branch operators.
    pub expansion: usize,
    /// Branch count N of every block.
    pub branches: usize,
    /// 1-based backbone stages whose blocks are gated.
    pub gql_stages: Vec<usize>,
    /// Feature dimension of the shared query.
    pub query_dim: usize,
}

pub const BASE_CHANNELS: [usize; 5] = [32, 64, 128, 256, 512];

impl ModelVariant {
    fn preset(name: &str, widen: f64, second_kind: BranchKind) -> Self {
        ModelVariant {
            name: name.to_string(),
            widen,
            base_channels: BASE_CHANNELS,
            block_kinds: [BranchKind::Sibm, second_kind],
            blocks_per_stage: [2, 2, 2, 2],
            expansion: 2,
            branches: 3,
            gql_stages: vec![2, 3, 4],
            query_dim: QUERY_DIM_DEFAULT,
        }
    }

    pub fn xs() -> Self {
        Self::preset("xs", 1.050, BranchKind::Sibm)
    }

    pub fn s() -> Self {
        Self::preset("s", 1.375, BranchKind::Sibm)
    }

    pub fn m() -> Self {
        Self::preset("m", 2.175, BranchKind::Ibm)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "xs" => Ok(Self::xs()),
            "s" => Ok(Self::s()),
            "m" => Ok(Self::m()),
            other => Err(Error::InvalidArgument {
                op: "variant",
                detail: format!("unknown variant `{other}` (expected xs, s or m)"),
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widen <= 0.0 {
            return Err(Error::InvalidArgument {
                op: "variant",
                detail: format!("widen factor must be positive, got {}", self.widen),
            });
        }
        if self.branches < 2 {
            return Err(Error::InvalidArgument {
                op: "variant",
                detail: format!("branch count must be >= 2, got {}", self.branches),
            });
        }
        if self.expansion < 1 {
            return Err(Error::InvalidArgument {
                op: "variant",
                detail: "expansion ratio must be >= 1".into(),
            });
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::InvalidArgument {
                op: "variant",
                detail: "every stage needs at least one block".into(),
            });
        }
        if self.gql_stages.iter().any(|&s| !(1..=4).contains(&s)) {
            return Err(Error::InvalidArgument {
                op: "variant",
                detail: format!("gql stages must be within 1..=4, got {:?}", self.gql_stages),
            });
        }
        Ok(())
    }

    /// Kind of the j-th block (0-based) in a stage with `total` blocks:
    /// first half uses `block_kinds[0]`, second half `block_kinds[1]`.
    fn kind_for_block(&self, j: usize, total: usize) -> BranchKind {
        self.block_kinds[j * 2 / total.max(1)]
    }
}

/// Which parts of the graph to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parts {
    Backbone,
    BackboneNeck,
    Full,
}

impl Parts {
    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "backbone" => Ok(Parts::Backbone),
            "backbone+neck" => Ok(Parts::BackboneNeck),
            "full" => Ok(Parts::Full),
            other => Err(Error::InvalidArgument {
                op: "parts",
                detail: format!(
                    "unknown parts `{other}` (expected backbone, backbone+neck or full)"
                ),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Parts::Backbone => "backbone",
            Parts::BackboneNeck => "backbone+neck",
            Parts::Full => "full",
        }
    }

    pub fn has_neck(self) -> bool {
        !matches!(self, Parts::Backbone)
    }

    pub fn has_head(self) -> bool {
        matches!(self, Parts::Full)
    }
}

/// Round to the nearest multiple of 8, at least 8.
pub fn round8(x: f64) -> usize {
    (((x / 8.0).round() as usize) * 8).max(8)
}

/// Channel widths resolved from a variant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedWidths {
    pub stem: usize,
    pub stages: [usize; 4],
    /// Split-group width of the backbone blocks per stage.
    pub branch: [usize; 4],
    /// Neck (and head) widths per level P3/P4/P5: half the stage tap width.
    pub neck: [usize; 3],
}

impl ResolvedWidths {
    pub fn resolve(v: &ModelVariant) -> Self {
        let stem = round8(v.base_channels[0] as f64 * v.widen);
        let mut stages = [0usize; 4];
        let mut branch = [0usize; 4];
        for i in 0..4 {
            let widened = v.base_channels[i + 1] as f64 * v.widen;
            stages[i] = round8(widened);
            branch[i] = round8(widened / v.branches as f64);
        }
        let neck = [stages[1] / 2, stages[2] / 2, stages[3] / 2];
        ResolvedWidths { stem, stages, branch, neck }
    }
}

// ── Graph description ───────────────────────────────────────────────────

/// Region a layer belongs to; neck and head carry the 1-based stage index
/// of their feature level (P3 -> 2, P4 -> 3, P5 -> 4).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    Stem,
    Stage(usize),
    Neck(usize),
    Head(usize),
}

impl Region {
    pub fn label(self) -> String {
        match self {
            Region::Stem => "stem".into(),
            Region::Stage(i) => format!("stage{i}"),
            Region::Neck(i) => format!("neck.p{}", i + 1),
            Region::Head(i) => format!("head.p{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerOp {
    Conv { kernel: usize, stride: usize, groups: usize, c_in: usize, c_out: usize, bias: bool },
    BatchNorm { channels: usize },
    Linear { f_in: usize, f_out: usize, bias: bool },
    /// Per-block gate logits against the shared query; the weights are
    /// counted once by `QueryParam`.
    GateMatVec { branches: usize, dim: usize },
    /// The shared query parameter itself (no compute of its own).
    QueryParam { branches: usize, dim: usize },
    MaxPool { kernel: usize },
    Upsample,
}

/// One entry of the flattened graph description, in forward order.
#[derive(Debug, Clone)]
pub struct LayerDesc {
    pub name: String,
    pub op: LayerOp,
    pub region: Region,
    /// Total downsampling factor at the layer OUTPUT (input H over output H).
    pub out_scale: usize,
}

impl LayerDesc {
    pub fn is_depthwise_conv(&self) -> bool {
        matches!(&self.op, LayerOp::Conv { groups, c_in, c_out, .. }
            if *groups == *c_in && *groups == *c_out && *groups > 1)
    }
}

struct DescCollector {
    layers: Vec<LayerDesc>,
    region: Region,
    scale: usize,
}

impl DescCollector {
    fn push(&mut self, name: String, op: LayerOp) {
        if let LayerOp::Conv { stride, .. } = &op {
            self.scale *= stride;
        }
        self.layers.push(LayerDesc { name, op, region: self.region, out_scale: self.scale });
    }

    fn conv_bn<T: Element>(&mut self, name: &str, unit: &ConvBnAct<T>) {
        let c = &unit.conv;
        self.push(
            format!("{name}.conv"),
            LayerOp::Conv {
                kernel: c.kernel,
                stride: c.stride,
                groups: c.groups,
                c_in: c.in_channels,
                c_out: c.out_channels,
                bias: c.bias.is_some(),
            },
        );
        self.push(format!("{name}.bn"), LayerOp::BatchNorm { channels: unit.bn.channels });
    }

    fn ms_block<T: Element>(&mut self, name: &str, block: &MsBlock<T>) {
        self.conv_bn(&format!("{name}.entry"), &block.entry);
        if let Some(g) = &block.gql {
            self.push(
                format!("{name}.gql.linear"),
                LayerOp::Linear {
                    f_in: g.linear.in_features,
                    f_out: g.linear.out_features,
                    bias: g.linear.bias.is_some(),
                },
            );
            self.push(
                format!("{name}.gql.gate"),
                LayerOp::GateMatVec { branches: block.cfg.branches, dim: g.linear.out_features },
            );
        }
        for (i, op) in block.operators.iter().enumerate() {
            let p = format!("{name}.branch{}", i + 1);
            match op {
                crate::blocks::BranchOperator::Identity => {}
                crate::blocks::BranchOperator::Ibm { expand, dw, project } => {
                    self.conv_bn(&format!("{p}.expand"), expand);
                    self.conv_bn(&format!("{p}.dw"), dw);
                    self.conv_bn(&format!("{p}.project"), project);
                }
                crate::blocks::BranchOperator::Sibm { expand, dw } => {
                    self.conv_bn(&format!("{p}.expand"), expand);
                    self.conv_bn(&format!("{p}.dw"), dw);
                }
            }
        }
        self.conv_bn(&format!("{name}.exit"), &block.exit);
    }
}

// ── Modules ─────────────────────────────────────────────────────────────

pub struct Spp<T: Element> {
    pub fuse: ConvBnAct<T>,
}

impl<T: Element> Spp<T> {
    fn new(name: &str, seed: u64, channels: usize) -> Result<Self> {
        Ok(Spp {
            fuse: ConvBnAct::new(
                &format!("{name}.fuse"),
                seed,
                channels * (1 + SPP_POOLS.len()),
                channels,
                1,
                1,
                1,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut parts = vec![x.clone()];
        for k in SPP_POOLS {
            parts.push(x.max_pool2d(k, 1, (k - 1) / 2)?);
        }
        self.fuse.forward(&concat_channels(&parts)?, mode)
    }
}

pub struct Stage<T: Element> {
    pub downsample: ConvBnAct<T>,
    pub blocks: Vec<MsBlock<T>>,
    pub spp: Option<Spp<T>>,
}

pub struct Neck<T: Element> {
    pub reduce: Vec<ConvBnAct<T>>, // P3, P4, P5 lateral 1x1 convs
    pub td_p4: MsBlock<T>,
    pub td_p3: MsBlock<T>,
    pub down_p3: ConvBnAct<T>,
    pub bu_p4: MsBlock<T>,
    pub down_p4: ConvBnAct<T>,
    pub bu_p5: MsBlock<T>,
}

pub struct HeadLevel<T: Element> {
    pub units: Vec<(ConvBnAct<T>, ConvBnAct<T>)>, // (depthwise, pointwise)
    pub pred: Conv2d<T>,
}

pub struct Head<T: Element> {
    pub levels: Vec<HeadLevel<T>>,
}

/// Per-level feature maps produced by [`ModelGraph::forward_features`].
pub struct Features<T: Element> {
    /// Stage outputs 1..4.
    pub stages: Vec<Tensor<T>>,
    /// Neck outputs at levels P3/P4/P5 when built.
    pub neck: Option<Vec<Tensor<T>>>,
    /// Head outputs per level when built.
    pub head: Option<Vec<Tensor<T>>>,
}

/// Branch features of one block captured during a forward pass.
pub struct BlockBranches<T: Element> {
    pub block: String,
    pub branches: Vec<Tensor<T>>,
}

// ── ModelGraph ──────────────────────────────────────────────────────────

pub struct ModelGraph<T: Element> {
    pub variant: ModelVariant,
    pub protocol: KernelProtocol,
    pub parts: Parts,
    pub seed: u64,
    pub widths: ResolvedWidths,
    pub stem: Vec<ConvBnAct<T>>,
    pub stages: Vec<Stage<T>>,
    pub neck: Option<Neck<T>>,
    pub head: Option<Head<T>>,
    pub query: Option<GlobalQuery<T>>,
}

/// Construct a model graph. Deterministic for a given seed: every parameter
/// is initialized from a stream derived from (seed, parameter name).
pub fn build_model<T: Element>(
    variant: &ModelVariant,
    protocol: KernelProtocol,
    parts: Parts,
    seed: u64,
) -> Result<ModelGraph<T>> {
    variant.validate()?;
    protocol.validate()?;
    let widths = ResolvedWidths::resolve(variant);

    // Stem: three 3x3 convs, the first with stride 2.
    let stem = vec![
        ConvBnAct::new("backbone.stem.0", seed, 3, widths.stem, 3, 2, 1)?,
        ConvBnAct::new("backbone.stem.1", seed, widths.stem, widths.stem, 3, 1, 1)?,
        ConvBnAct::new("backbone.stem.2", seed, widths.stem, widths.stem, 3, 1, 1)?,
    ];

    let mut stages = Vec::with_capacity(4);
    let mut prev = widths.stem;
    for i in 0..4 {
        let stage_no = i + 1;
        let c = widths.stages[i];
        let name = format!("backbone.stage{stage_no}");
        let downsample = ConvBnAct::new(&format!("{name}.down"), seed, prev, c, 3, 2, 1)?;
        let nblocks = variant.blocks_per_stage[i];
        let gated = variant.gql_stages.contains(&stage_no);
        let mut blocks = Vec::with_capacity(nblocks);
        for j in 0..nblocks {
            blocks.push(MsBlock::new(
                &format!("{name}.block{j}"),
                seed,
                MsBlockConfig {
                    in_channels: c,
                    out_channels: c,
                    branches: variant.branches,
                    width: widths.branch[i],
                    kernel: protocol.stage(stage_no),
                    kind: variant.kind_for_block(j, nblocks),
                    expansion: variant.expansion,
                    gql_dim: if gated { Some(variant.query_dim) } else { None },
                },
            )?);
        }
        let spp =
            if stage_no == 3 { Some(Spp::new(&format!("{name}.spp"), seed, c)?) } else { None };
        stages.push(Stage { downsample, blocks, spp });
        prev = c;
    }

    let query = if variant.gql_stages.is_empty() {
        None
    } else {
        Some(GlobalQuery::new(seed, variant.branches, variant.query_dim)?)
    };

    let neck =
        if parts.has_neck() { Some(build_neck(variant, protocol, seed, &widths)?) } else { None };
    let head =
        if parts.has_head() { Some(build_head(variant, protocol, seed, &widths)?) } else { None };

    let model = ModelGraph {
        variant: variant.clone(),
        protocol,
        parts,
        seed,
        widths,
        stem,
        stages,
        neck,
        head,
        query,
    };
    model.validate()?;
    Ok(model)
}

fn neck_block_cfg(
    variant: &ModelVariant,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
) -> MsBlockConfig {
    MsBlockConfig {
        in_channels,
        out_channels,
        branches: variant.branches,
        width: round8(out_channels as f64 / variant.branches as f64),
        kernel,
        kind: variant.block_kinds[1],
        expansion: variant.expansion,
        gql_dim: None, // gating is scoped to the backbone
    }
}

fn build_neck<T: Element>(
    variant: &ModelVariant,
    protocol: KernelProtocol,
    seed: u64,
    widths: &ResolvedWidths,
) -> Result<Neck<T>> {
    let [c3, c4, c5] = widths.neck;
    let taps = [widths.stages[1], widths.stages[2], widths.stages[3]];
    let reduce = vec![
        ConvBnAct::new("neck.reduce_p3", seed, taps[0], c3, 1, 1, 1)?,
        ConvBnAct::new("neck.reduce_p4", seed, taps[1], c4, 1, 1, 1)?,
        ConvBnAct::new("neck.reduce_p5", seed, taps[2], c5, 1, 1, 1)?,
    ];
    // Kernels by feature level: P3 matches stage 2, P4 stage 3, P5 stage 4.
    let (k3, k4, k5) = (protocol.stage(2), protocol.stage(3), protocol.stage(4));
    Ok(Neck {
        reduce,
        td_p4: MsBlock::new("neck.td_p4", seed, neck_block_cfg(variant, c5 + c4, c4, k4))?,
        td_p3: MsBlock::new("neck.td_p3", seed, neck_block_cfg(variant, c4 + c3, c3, k3))?,
        down_p3: ConvBnAct::new("neck.down_p3", seed, c3, c3, 3, 2, 1)?,
        bu_p4: MsBlock::new("neck.bu_p4", seed, neck_block_cfg(variant, c3 + c4, c4, k4))?,
        down_p4: ConvBnAct::new("neck.down_p4", seed, c4, c4, 3, 2, 1)?,
        bu_p5: MsBlock::new("neck.bu_p5", seed, neck_block_cfg(variant, c4 + c5, c5, k5))?,
    })
}

fn build_head<T: Element>(
    _variant: &ModelVariant,
    protocol: KernelProtocol,
    seed: u64,
    widths: &ResolvedWidths,
) -> Result<Head<T>> {
    let mut levels = Vec::with_capacity(3);
    for (l, &c) in widths.neck.iter().enumerate() {
        let stage_no = l + 2;
        let k = protocol.stage(stage_no);
        let name = format!("head.p{}", l + 3);
        let mut units = Vec::with_capacity(2);
        for u in 0..2 {
            units.push((
                ConvBnAct::new(&format!("{name}.unit{u}.dw"), seed, c, c, k, 1, c)?,
                ConvBnAct::new(&format!("{name}.unit{u}.pw"), seed, c, c, 1, 1, 1)?,
            ));
        }
        let pred =
            Conv2d::new(&format!("{name}.pred"), seed, c, HEAD_CLASSES + HEAD_BOX, 1, 1, 1, true)?;
        levels.push(HeadLevel { units, pred });
    }
    Ok(Head { levels })
}

impl<T: Element> ModelGraph<T> {
    /// Forward pass returning per-level feature maps (and head outputs when
    /// built). Input must be (B, 3, H, W) with H, W divisible by 32.
    pub fn forward_features(&self, image: &Tensor<T>, mode: Mode) -> Result<Features<T>> {
        self.forward_impl(image, mode, None)
    }

    /// Forward pass capturing every block's post-gate branch features
    /// (backbone and neck), for the diversity analysis.
    pub fn forward_with_branches(
        &self,
        image: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Features<T>, Vec<BlockBranches<T>>)> {
        let mut captured = Vec::new();
        let feats = self.forward_impl(image, mode, Some(&mut captured))?;
        Ok((feats, captured))
    }

    fn forward_impl(
        &self,
        image: &Tensor<T>,
        mode: Mode,
        mut capture: Option<&mut Vec<BlockBranches<T>>>,
    ) -> Result<Features<T>> {
        if image.rank() != 4 || image.shape()[1] != 3 {
            return Err(Error::ShapeMismatch {
                op: "forward_features",
                expected: "(B, 3, H, W)".into(),
                got: format!("{:?}", image.shape()),
            });
        }
        let (h, w) = (image.shape()[2], image.shape()[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidArgument {
                op: "forward_features",
                detail: format!("input extents must be divisible by 32, got {h}x{w}"),
            });
        }

        let mut x = image.clone();
        for unit in &self.stem {
            x = unit.forward(&x, mode)?;
        }

        let query = self.query.as_ref();
        let mut stage_outs = Vec::with_capacity(4);
        for (si, stage) in self.stages.iter().enumerate() {
            x = stage.downsample.forward(&x, mode)?;
            for (bi, block) in stage.blocks.iter().enumerate() {
                let q = if block.gql.is_some() { query } else { None };
                x = match capture.as_deref_mut() {
                    Some(store) => {
                        let (out, branches) = block.forward_detailed(&x, q, mode)?;
                        store.push(BlockBranches {
                            block: format!("backbone.stage{}.block{bi}", si + 1),
                            branches,
                        });
                        out
                    }
                    None => block.forward(&x, q, mode)?,
                };
            }
            if let Some(spp) = &stage.spp {
                x = spp.forward(&x, mode)?;
            }
            stage_outs.push(x.clone());
        }

        let mut neck_outs = None;
        if let Some(neck) = &self.neck {
            let r3 = neck.reduce[0].forward(&stage_outs[1], mode)?;
            let r4 = neck.reduce[1].forward(&stage_outs[2], mode)?;
            let r5 = neck.reduce[2].forward(&stage_outs[3], mode)?;

            let run_block = |block: &MsBlock<T>,
                                 name: &str,
                                 input: &Tensor<T>,
                                 capture: &mut Option<&mut Vec<BlockBranches<T>>>|
             -> Result<Tensor<T>> {
                match capture.as_deref_mut() {
                    Some(store) => {
                        let (out, branches) = block.forward_detailed(input, None, mode)?;
                        store.push(BlockBranches { block: name.to_string(), branches });
                        Ok(out)
                    }
                    None => block.forward(input, None, mode),
                }
            };

            let t4_in = concat_channels(&[r5.upsample_nearest_2x()?, r4.clone()])?;
            let t4 = run_block(&neck.td_p4, "neck.td_p4", &t4_in, &mut capture)?;
            let t3_in = concat_channels(&[t4.upsample_nearest_2x()?, r3])?;
            let t3 = run_block(&neck.td_p3, "neck.td_p3", &t3_in, &mut capture)?;
            let b4_in = concat_channels(&[neck.down_p3.forward(&t3, mode)?, t4])?;
            let b4 = run_block(&neck.bu_p4, "neck.bu_p4", &b4_in, &mut capture)?;
            let b5_in = concat_channels(&[neck.down_p4.forward(&b4, mode)?, r5])?;
            let b5 = run_block(&neck.bu_p5, "neck.bu_p5", &b5_in, &mut capture)?;
            neck_outs = Some(vec![t3, b4, b5]);
        }

        let mut head_outs = None;
        if let Some(head) = &self.head {
            let inputs = neck_outs.as_ref().expect("head requires the neck");
            let mut outs = Vec::with_capacity(3);
            for (level, x) in head.levels.iter().zip(inputs) {
                let mut t = x.clone();
                for (dw, pw) in &level.units {
                    t = pw.forward(&dw.forward(&t, mode)?, mode)?;
                }
                outs.push(level.pred.forward(&t, mode)?);
            }
            head_outs = Some(outs);
        }

        Ok(Features { stages: stage_outs, neck: neck_outs, head: head_outs })
    }

    /// Absorb batch statistics into the running buffers with one
    /// calibration forward on seeded noise. Eval-mode analyses of randomly
    /// initialized models (receptive fields, feature diversity) need this:
    /// the init-time running statistics do not match the activations the
    /// random weights actually produce.
    pub fn calibrate_norms(&self, input_size: usize, batch: usize, seed: u64) -> Result<()> {
        let mut rng = crate::rng::Rng::derive(seed, "calibration");
        let noise = Tensor::randn(&[batch.max(1), 3, input_size, input_size], &mut rng)?;
        self.forward_features(&noise, Mode::Calibrate)?;
        Ok(())
    }

    /// Stage tap for the receptive-field analysis (stages 2, 3 or 4).
    pub fn stage_tap(&self, features: &Features<T>, stage: usize) -> Result<Tensor<T>> {
        if !(2..=4).contains(&stage) {
            return Err(Error::InvalidArgument {
                op: "stage_tap",
                detail: format!("stage must be 2, 3 or 4, got {stage}"),
            });
        }
        Ok(features.stages[stage - 1].clone())
    }

    /// Flattened description of every layer in forward order.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let mut c = DescCollector { layers: Vec::new(), region: Region::Stem, scale: 1 };
        for (i, unit) in self.stem.iter().enumerate() {
            c.conv_bn(&format!("backbone.stem.{i}"), unit);
        }
        for (si, stage) in self.stages.iter().enumerate() {
            let stage_no = si + 1;
            c.region = Region::Stage(stage_no);
            let name = format!("backbone.stage{stage_no}");
            c.conv_bn(&format!("{name}.down"), &stage.downsample);
            for (bi, block) in stage.blocks.iter().enumerate() {
                c.ms_block(&format!("{name}.block{bi}"), block);
            }
            if let Some(spp) = &stage.spp {
                for k in SPP_POOLS {
                    c.push(format!("{name}.spp.pool{k}"), LayerOp::MaxPool { kernel: k });
                }
                c.conv_bn(&format!("{name}.spp.fuse"), &spp.fuse);
            }
        }
        if let Some(q) = &self.query {
            c.region = Region::Stage(2);
            c.push("gql".into(), LayerOp::QueryParam { branches: q.branches, dim: q.dim });
        }
        if let Some(neck) = &self.neck {
            for (i, unit) in neck.reduce.iter().enumerate() {
                c.region = Region::Neck(i + 2);
                c.scale = [8, 16, 32][i];
                c.conv_bn(&format!("neck.reduce_p{}", i + 3), unit);
            }
            c.region = Region::Neck(3);
            c.scale = 16;
            c.push("neck.up_p5".into(), LayerOp::Upsample);
            c.ms_block("neck.td_p4", &neck.td_p4);
            c.region = Region::Neck(2);
            c.scale = 8;
            c.push("neck.up_p4".into(), LayerOp::Upsample);
            c.ms_block("neck.td_p3", &neck.td_p3);
            c.conv_bn("neck.down_p3", &neck.down_p3); // stride 2: scale 8 -> 16
            c.region = Region::Neck(3);
            c.ms_block("neck.bu_p4", &neck.bu_p4);
            c.conv_bn("neck.down_p4", &neck.down_p4); // stride 2: scale 16 -> 32
            c.region = Region::Neck(4);
            c.ms_block("neck.bu_p5", &neck.bu_p5);
        }
        if let Some(head) = &self.head {
            for (l, level) in head.levels.iter().enumerate() {
                c.region = Region::Head(l + 2);
                c.scale = [8, 16, 32][l];
                let name = format!("head.p{}", l + 3);
                for (u, (dw, pw)) in level.units.iter().enumerate() {
                    c.conv_bn(&format!("{name}.unit{u}.dw"), dw);
                    c.conv_bn(&format!("{name}.unit{u}.pw"), pw);
                }
                let p = &level.pred;
                c.push(
                    format!("{name}.pred"),
                    LayerOp::Conv {
                        kernel: p.kernel,
                        stride: p.stride,
                        groups: p.groups,
                        c_in: p.in_channels,
                        c_out: p.out_channels,
                        bias: p.bias.is_some(),
                    },
                );
            }
        }
        c.layers
    }

    /// Visit every named parameter and buffer in deterministic order.
    pub fn visit_state(&self, sink: &mut dyn StateSink<T>) {
        for (i, unit) in self.stem.iter().enumerate() {
            unit.visit_state(&format!("backbone.stem.{i}"), sink);
        }
        for (si, stage) in self.stages.iter().enumerate() {
            let name = format!("backbone.stage{}", si + 1);
            stage.downsample.visit_state(&format!("{name}.down"), sink);
            for (bi, block) in stage.blocks.iter().enumerate() {
                block.visit_state(&format!("{name}.block{bi}"), sink);
            }
            if let Some(spp) = &stage.spp {
                spp.fuse.visit_state(&format!("{name}.spp.fuse"), sink);
            }
        }
        if let Some(q) = &self.query {
            q.visit_state("gql", sink);
        }
        if let Some(neck) = &self.neck {
            for (i, unit) in neck.reduce.iter().enumerate() {
                unit.visit_state(&format!("neck.reduce_p{}", i + 3), sink);
            }
            neck.td_p4.visit_state("neck.td_p4", sink);
            neck.td_p3.visit_state("neck.td_p3", sink);
            neck.down_p3.visit_state("neck.down_p3", sink);
            neck.bu_p4.visit_state("neck.bu_p4", sink);
            neck.down_p4.visit_state("neck.down_p4", sink);
            neck.bu_p5.visit_state("neck.bu_p5", sink);
        }
        if let Some(head) = &self.head {
            for (l, level) in head.levels.iter().enumerate() {
                let name = format!("head.p{}", l + 3);
                for (u, (dw, pw)) in level.units.iter().enumerate() {
                    dw.visit_state(&format!("{name}.unit{u}.dw"), sink);
                    pw.visit_state(&format!("{name}.unit{u}.pw"), sink);
                }
                level.pred.visit_state(&format!("{name}.pred"), sink);
            }
        }
    }

    /// Visit every learnable parameter mutably (optimizer, weight loading).
    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, unit) in self.stem.iter_mut().enumerate() {
            unit.visit_params_mut(&format!("backbone.stem.{i}"), f);
        }
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let name = format!("backbone.stage{}", si + 1);
            stage.downsample.visit_params_mut(&format!("{name}.down"), f);
            for (bi, block) in stage.blocks.iter_mut().enumerate() {
                block.visit_params_mut(&format!("{name}.block{bi}"), f);
            }
            if let Some(spp) = &mut stage.spp {
                spp.fuse.visit_params_mut(&format!("{name}.spp.fuse"), f);
            }
        }
        if let Some(q) = &mut self.query {
            q.visit_params_mut("gql", f);
        }
        if let Some(neck) = &mut self.neck {
            for (i, unit) in neck.reduce.iter_mut().enumerate() {
                unit.visit_params_mut(&format!("neck.reduce_p{}", i + 3), f);
            }
            neck.td_p4.visit_params_mut("neck.td_p4", f);
            neck.td_p3.visit_params_mut("neck.td_p3", f);
            neck.down_p3.visit_params_mut("neck.down_p3", f);
            neck.bu_p4.visit_params_mut("neck.bu_p4", f);
            neck.down_p4.visit_params_mut("neck.down_p4", f);
            neck.bu_p5.visit_params_mut("neck.bu_p5", f);
        }
        if let Some(head) = &mut self.head {
            for (l, level) in head.levels.iter_mut().enumerate() {
                let name = format!("head.p{}", l + 3);
                for (u, (dw, pw)) in level.units.iter_mut().enumerate() {
                    dw.visit_params_mut(&format!("{name}.unit{u}.dw"), f);
                    pw.visit_params_mut(&format!("{name}.unit{u}.pw"), f);
                }
                level.pred.visit_params_mut(&format!("{name}.pred"), f);
            }
        }
    }

    /// Channel bookkeeping and name uniqueness, checked at construction.
    pub fn validate(&self) -> Result<()> {
        struct NameCheck {
            seen: HashSet<String>,
            duplicate: Option<String>,
        }
        impl<T: Element> StateSink<T> for NameCheck {
            fn param(&mut self, name: &str, _t: &Tensor<T>) {
                if !self.seen.insert(name.to_string()) {
                    self.duplicate.get_or_insert_with(|| name.to_string());
                }
            }
            fn buffer(&mut self, name: &str, _s: &[usize], _d: &std::cell::RefCell<Vec<T>>) {
                if !self.seen.insert(name.to_string()) {
                    self.duplicate.get_or_insert_with(|| name.to_string());
                }
            }
        }
        let mut check = NameCheck { seen: HashSet::new(), duplicate: None };
        self.visit_state(&mut check);
        if let Some(name) = check.duplicate {
            return Err(Error::InvalidArgument {
                op: "model",
                detail: format!("duplicate parameter name `{name}`"),
            });
        }

        // Declared block interface widths must chain: each block consumes
        // its predecessor's output and its exit conv consumes the concat.
        for stage in &self.stages {
            let mut prev = stage.downsample.conv.out_channels;
            for block in &stage.blocks {
                if block.cfg.in_channels != prev {
                    return Err(Error::ShapeMismatch {
                        op: "model",
                        expected: format!("block input {prev}"),
                        got: format!("{}", block.cfg.in_channels),
                    });
                }
                if block.exit.conv.in_channels != block.cfg.concat_width() {
                    return Err(Error::ShapeMismatch {
                        op: "model",
                        expected: format!("exit conv input {}", block.cfg.concat_width()),
                        got: format!("{}", block.exit.conv.in_channels),
                    });
                }
                prev = block.cfg.out_channels;
            }
        }
        Ok(())
    }

    /// Parameter and buffer names in visit order.
    pub fn param_names(&self) -> Vec<String> {
        struct Collect(Vec<String>);
        impl<T: Element> StateSink<T> for Collect {
            fn param(&mut self, name: &str, _t: &Tensor<T>) {
                self.0.push(name.to_string());
            }
            fn buffer(&mut self, name: &str, _s: &[usize], _d: &std::cell::RefCell<Vec<T>>) {
                self.0.push(name.to_string());
            }
        }
        let mut c = Collect(Vec::new());
        self.visit_state(&mut c);
        c.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    pub(crate) fn tiny_variant() -> ModelVariant {
        ModelVariant {
            name: "tiny-test".into(),
            widen: 1.0,
            base_channels: [8, 8, 16, 16, 16],
            block_kinds: [BranchKind::Sibm, BranchKind::Ibm],
            blocks_per_stage: [1, 1, 1, 1],
            expansion: 2,
            branches: 3,
            gql_stages: vec![2, 3, 4],
            query_dim: 16,
        }
    }

    #[test]
    fn stage_feature_sizes_follow_strides() {
        let model =
            build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Full, 0).unwrap();
        let mut rng = Rng::new(0);
        let img = Tensor::randn(&[1, 3, 64, 64], &mut rng).unwrap();
        let feats = model.forward_features(&img, Mode::Eval).unwrap();
        let sizes: Vec<usize> = feats.stages.iter().map(|t| t.shape()[2]).collect();
        assert_eq!(sizes, vec![16, 8, 4, 2]);
        let neck = feats.neck.unwrap();
        assert_eq!(neck[0].shape()[2], 8);
        assert_eq!(neck[1].shape()[2], 4);
        assert_eq!(neck[2].shape()[2], 2);
        let head = feats.head.unwrap();
        for h in &head {
            assert_eq!(h.shape()[1], HEAD_CLASSES + HEAD_BOX);
            assert!(h.all_finite());
        }
    }

    #[test]
    fn doubling_input_doubles_feature_extents() {
        let model =
            build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Backbone, 1).unwrap();
        let mut rng = Rng::new(1);
        let a = Tensor::randn(&[1, 3, 64, 64], &mut rng).unwrap();
        let b = Tensor::randn(&[1, 3, 128, 128], &mut rng).unwrap();
        let fa = model.forward_features(&a, Mode::Eval).unwrap();
        let fb = model.forward_features(&b, Mode::Eval).unwrap();
        for (ta, tb) in fa.stages.iter().zip(&fb.stages) {
            assert_eq!(2 * ta.shape()[2], tb.shape()[2]);
            assert_eq!(2 * ta.shape()[3], tb.shape()[3]);
        }
    }

    #[test]
    fn zero_image_stays_finite() {
        let model =
            build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Full, 2).unwrap();
        let img = Tensor::zeros(&[1, 3, 64, 64]).unwrap();
        let feats = model.forward_features(&img, Mode::Eval).unwrap();
        assert!(feats.stages.iter().all(|t| t.all_finite()));
        assert!(feats.head.unwrap().iter().all(|t| t.all_finite()));
    }

    #[test]
    fn indivisible_input_rejected() {
        let model =
            build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Backbone, 3).unwrap();
        let img = Tensor::zeros(&[1, 3, 60, 64]).unwrap();
        assert!(model.forward_features(&img, Mode::Eval).is_err());
    }

    #[test]
    fn protocol_placement_by_introspection() {
        let protocol = KernelProtocol([3, 5, 7, 9]);
        let model = build_model::<f32>(&ModelVariant::xs(), protocol, Parts::Full, 4).unwrap();
        let mut seen = 0;
        for layer in model.layers() {
            if !layer.is_depthwise_conv() {
                continue;
            }
            let expected = match layer.region {
                Region::Stage(i) | Region::Neck(i) | Region::Head(i) => protocol.stage(i),
                Region::Stem => unreachable!("no depthwise convs in the stem"),
            };
            if let LayerOp::Conv { kernel, .. } = layer.op {
                assert_eq!(kernel, expected, "layer {} has kernel {kernel}", layer.name);
                seen += 1;
            }
        }
        // 2 per SIBM block x (8 backbone + 4 neck) + 2 per head level x 3.
        assert!(seen >= 30, "only {seen} depthwise convs inspected");
    }

    #[test]
    fn parameter_names_are_unique_and_stable() {
        let model =
            build_model::<f32>(&ModelVariant::xs(), KernelProtocol::hks(), Parts::Full, 5).unwrap();
        let names = model.param_names();
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        let again =
            build_model::<f32>(&ModelVariant::xs(), KernelProtocol::hks(), Parts::Full, 99)
                .unwrap();
        assert_eq!(names, again.param_names(), "names must not depend on the seed");
    }

    #[test]
    fn construction_is_deterministic_per_seed() {
        let a = build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Full, 7).unwrap();
        let b = build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Full, 7).unwrap();
        let c = build_model::<f32>(&tiny_variant(), KernelProtocol::hks(), Parts::Full, 8).unwrap();
        assert_eq!(a.stem[0].conv.weight.data(), b.stem[0].conv.weight.data());
        assert_ne!(a.stem[0].conv.weight.data(), c.stem[0].conv.weight.data());
    }

    #[test]
    fn resolved_widths_round_to_multiples_of_eight() {
        let w = ResolvedWidths::resolve(&ModelVariant::xs());
        assert_eq!(w.stem, 32);
        assert_eq!(w.stages, [64, 136, 272, 536]);
        assert_eq!(w.branch, [24, 48, 88, 176]);
        for v in w.stages.iter().chain([w.stem].iter()) {
            assert_eq!(v % 8, 0);
        }
    }

    #[test]
    fn replay_oracle_matches_forward() {
        // Orchestrate the layer sequence manually and compare bit for bit.
        let model =
            build_model::<f64>(&tiny_variant(), KernelProtocol::hks(), Parts::Backbone, 9).unwrap();
        let mut rng = Rng::new(9);
        let img = Tensor::randn(&[1, 3, 64, 64], &mut rng).unwrap();
        let feats = model.forward_features(&img, Mode::Eval).unwrap();

        let mut x = img;
        for unit in &model.stem {
            x = unit.forward(&x, Mode::Eval).unwrap();
        }
        for stage in &model.stages {
            x = stage.downsample.forward(&x, Mode::Eval).unwrap();
            for block in &stage.blocks {
                let q = if block.gql.is_some() { model.query.as_ref() } else { None };
                x = block.forward(&x, q, Mode::Eval).unwrap();
            }
            if let Some(spp) = &stage.spp {
                x = spp.forward(&x, Mode::Eval).unwrap();
            }
        }
        assert_eq!(x.data(), feats.stages[3].data());
    }
}
