//! The sub-networks: content encoder, style encoders, depth decoder,
//! generator and the three discriminators, plus gradient reversal.

use lfda_autograd::{Array, Ctx, Param, Var};
use rand::Rng;

use crate::error::{LfdaError, Result};
use crate::layers::{Conv2d, FeatureShape, LayerCost, Module};
use crate::normalization::{BatchStats, Mode, SeparateBatchNorm};

/// Branch indices of the content encoder normalization.
pub const BN_SOURCE: usize = 0;
pub const BN_TARGET: usize = 1;

/// Branch indices of the depth decoder normalization.
pub const BN_SOURCE_CONTENT: usize = 0;
pub const BN_TARGET_CONTENT: usize = 1;
pub const BN_TARGET_STYLE: usize = 2;

/// Running-stat updates collected during one train-mode pass:
/// (stage index, branch, statistics).
type StatLog = Vec<(usize, usize, BatchStats)>;

/// Identity forward; backward multiplies the incoming gradient by `-lambda`.
pub fn gradient_reverse(x: &Var, lambda: f64) -> Var {
    Var::from_op(x.value().clone(), vec![x.clone()], move |g, _, _| {
        vec![Some(g.map(|v| -lambda * v))]
    })
}

fn check_image(op: &str, image: &Var, stride: usize) -> Result<()> {
    let (_, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(LfdaError::Shape(format!("{op}: expected 3 channels, got {c}")));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(LfdaError::Shape(format!(
            "{op}: {h}x{w} is not divisible by the total stride {stride}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug)]
struct NormStage {
    conv: Conv2d,
    norm: SeparateBatchNorm,
}

impl NormStage {
    fn run(
        &self,
        ctx: &Ctx,
        x: &Var,
        index: usize,
        branch: usize,
        mode: Mode,
        log: &mut StatLog,
    ) -> Result<Var> {
        let h = self.conv.forward(ctx, x)?;
        let (h, stats) = self.norm.normalize(ctx, &h, branch, mode)?;
        if let Some(stats) = stats {
            log.push((index, branch, stats));
        }
        Ok(h.relu())
    }

    fn params(&self) -> Vec<&Param> {
        let mut p = self.conv.params();
        p.extend(self.norm.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = self.conv.params_mut();
        p.extend(self.norm.params_mut());
        p
    }

    fn cost(&self, input: FeatureShape) -> Result<(Vec<LayerCost>, FeatureShape)> {
        let (conv, out) = self.conv.cost(input)?;
        let norm = LayerCost {
            name: format!("{}.bn", self.conv.name().trim_end_matches(".conv")),
            params: self.norm.params().iter().map(|p| p.len() as u64).sum(),
            macs: 0,
        };
        Ok((vec![conv, norm], out))
    }
}

/// Strided conv -> routed normalization -> ReLU stages.
#[derive(Clone, Debug)]
struct ConvNormStack {
    stages: Vec<NormStage>,
}

impl ConvNormStack {
    #[allow(clippy::too_many_arguments)]
    fn new(
        name: &str,
        in_channels: usize,
        channels: &[usize],
        strides: &[usize],
        branches: usize,
        momentum: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert_eq!(channels.len(), strides.len(), "one stride per stage");
        let mut c_in = in_channels;
        let stages = channels
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(i, (&c, &s))| {
                let stage = NormStage {
                    conv: Conv2d::new(&format!("{name}.stage{i}.conv"), c_in, c, 3, s, 1, false, rng),
                    norm: SeparateBatchNorm::with_hyper(&format!("{name}.stage{i}.bn"), c, branches, momentum, eps),
                };
                c_in = c;
                stage
            })
            .collect();
        Self { stages }
    }

    fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.conv.stride).product()
    }

    fn out_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.conv.c_out())
    }

    fn run(&self, ctx: &Ctx, x: &Var, branch: usize, mode: Mode, log: &mut StatLog) -> Result<Var> {
        let mut h = x.clone();
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.run(ctx, &h, i, branch, mode, log)?;
        }
        Ok(h)
    }

    fn commit(&mut self, log: StatLog) {
        for (i, branch, stats) in log {
            self.stages[i].norm.commit(branch, &stats);
        }
    }

    fn params(&self) -> Vec<&Param> {
        self.stages.iter().flat_map(NormStage::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages.iter_mut().flat_map(NormStage::params_mut).collect()
    }

    fn norms(&self) -> Vec<&SeparateBatchNorm> {
        self.stages.iter().map(|s| &s.norm).collect()
    }

    fn norms_mut(&mut self) -> Vec<&mut SeparateBatchNorm> {
        self.stages.iter_mut().map(|s| &mut s.norm).collect()
    }

    fn costs(&self, input: FeatureShape) -> Result<(Vec<LayerCost>, FeatureShape)> {
        let mut shape = input;
        let mut out = Vec::new();
        for stage in &self.stages {
            let (c, next) = stage.cost(shape)?;
            out.extend(c);
            shape = next;
        }
        Ok((out, shape))
    }
}

/// Shared content encoder with one normalization branch per domain.
#[derive(Clone, Debug)]
pub struct ContentEncoder {
    stack: ConvNormStack,
}

impl ContentEncoder {
    pub fn new(
        name: &str,
        channels: &[usize],
        strides: &[usize],
        momentum: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            stack: ConvNormStack::new(name, 3, channels, strides, 2, momentum, eps, rng),
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stack.total_stride()
    }

    pub fn out_channels(&self) -> usize {
        self.stack.out_channels()
    }

    /// [B,3,H,W] image -> [B,C_con,H/s,W/s] with every normalization routed
    /// to `branch`.
    pub fn forward(&mut self, ctx: &Ctx, image: &Var, branch: usize, mode: Mode) -> Result<Var> {
        let mut log = StatLog::new();
        let z = self.run(ctx, image, branch, mode, &mut log)?;
        self.stack.commit(log);
        Ok(z)
    }

    /// Eval-mode forward; never mutates.
    pub fn forward_eval(&self, ctx: &Ctx, image: &Var, branch: usize) -> Result<Var> {
        self.run(ctx, image, branch, Mode::Eval, &mut StatLog::new())
    }

    fn run(&self, ctx: &Ctx, image: &Var, branch: usize, mode: Mode, log: &mut StatLog) -> Result<Var> {
        check_image("encode_content", image, self.total_stride())?;
        self.stack.run(ctx, image, branch, mode, log)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stack.params_mut()
    }

    pub fn norms(&self) -> Vec<&SeparateBatchNorm> {
        self.stack.norms()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut SeparateBatchNorm> {
        self.stack.norms_mut()
    }

    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        Ok(self.stack.costs(input)?.1)
    }
}

impl Module for ContentEncoder {
    fn params(&self) -> Vec<&Param> {
        self.stack.params()
    }

    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        Ok(self.stack.costs(input)?.0)
    }
}

/// Domain-specific style encoder with ordinary (single-branch) normalization.
#[derive(Clone, Debug)]
pub struct StyleEncoder {
    stack: ConvNormStack,
}

impl StyleEncoder {
    pub fn new(
        name: &str,
        channels: &[usize],
        strides: &[usize],
        momentum: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            stack: ConvNormStack::new(name, 3, channels, strides, 1, momentum, eps, rng),
        }
    }

    pub fn total_stride(&self) -> usize {
        self.stack.total_stride()
    }

    pub fn out_channels(&self) -> usize {
        self.stack.out_channels()
    }

    pub fn forward(&mut self, ctx: &Ctx, image: &Var, mode: Mode) -> Result<Var> {
        let mut log = StatLog::new();
        let z = self.run(ctx, image, mode, &mut log)?;
        self.stack.commit(log);
        Ok(z)
    }

    pub fn forward_eval(&self, ctx: &Ctx, image: &Var) -> Result<Var> {
        self.run(ctx, image, Mode::Eval, &mut StatLog::new())
    }

    fn run(&self, ctx: &Ctx, image: &Var, mode: Mode, log: &mut StatLog) -> Result<Var> {
        check_image("encode_style", image, self.total_stride())?;
        self.stack.run(ctx, image, 0, mode, log)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stack.params_mut()
    }

    pub fn norms(&self) -> Vec<&SeparateBatchNorm> {
        self.stack.norms()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut SeparateBatchNorm> {
        self.stack.norms_mut()
    }
}

impl Module for StyleEncoder {
    fn params(&self) -> Vec<&Param> {
        self.stack.params()
    }

    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        Ok(self.stack.costs(input)?.0)
    }
}

/// Which normalization branches a decoder pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecoderRoute {
    /// Source content branch; no style input allowed.
    Source,
    /// Target content branch; style, when given, uses its own branch.
    Target,
    /// Target content branch; style, when given, shares the content branch.
    TargetSharedStyleNorm,
}

impl DecoderRoute {
    fn branches(self) -> (usize, usize) {
        match self {
            DecoderRoute::Source => (BN_SOURCE_CONTENT, BN_SOURCE_CONTENT),
            DecoderRoute::Target => (BN_TARGET_CONTENT, BN_TARGET_STYLE),
            DecoderRoute::TargetSharedStyleNorm => (BN_TARGET_CONTENT, BN_TARGET_CONTENT),
        }
    }
}

/// Depth decoder. Content and (optionally) style features run through the
/// same upsampling stages under their own normalization branches, then
/// `fused = content + Conv1x1([content, style])` feeds the output head.
#[derive(Clone, Debug)]
pub struct DepthDecoder {
    stages: Vec<NormStage>,
    fusion: Conv2d,
    head: Conv2d,
    d_min: f64,
    d_max: f64,
}

impl DepthDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_channels: usize,
        channels: &[usize],
        d_min: f64,
        d_max: f64,
        momentum: f64,
        eps: f64,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!channels.is_empty(), "decoder needs at least one stage");
        assert!(d_min > 0.0 && d_max > d_min, "invalid depth range");
        let mut c_in = in_channels;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let stage = NormStage {
                    conv: Conv2d::new(&format!("{name}.stage{i}.conv"), c_in, c, 3, 1, 1, false, rng),
                    norm: SeparateBatchNorm::with_hyper(&format!("{name}.stage{i}.bn"), c, 3, momentum, eps),
                };
                c_in = c;
                stage
            })
            .collect();
        let last = *channels.last().expect("non-empty");
        Self {
            stages,
            fusion: Conv2d::new(&format!("{name}.fusion"), 2 * last, last, 1, 1, 0, true, rng),
            head: Conv2d::new(&format!("{name}.head"), last, 1, 3, 1, 1, true, rng),
            d_min,
            d_max,
        }
    }

    pub fn depth_range(&self) -> (f64, f64) {
        (self.d_min, self.d_max)
    }

    /// Spatial upsampling factor from feature to depth map.
    pub fn upsampling(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    pub fn in_channels(&self) -> usize {
        self.stages[0].conv.c_in()
    }

    pub fn forward(
        &mut self,
        ctx: &Ctx,
        content: &Var,
        style: Option<&Var>,
        route: DecoderRoute,
        mode: Mode,
    ) -> Result<Var> {
        let mut log = StatLog::new();
        let depth = self.run(ctx, content, style, route, mode, &mut log)?;
        for (i, branch, stats) in log {
            self.stages[i].norm.commit(branch, &stats);
        }
        Ok(depth)
    }

    pub fn forward_eval(
        &self,
        ctx: &Ctx,
        content: &Var,
        style: Option<&Var>,
        route: DecoderRoute,
    ) -> Result<Var> {
        self.run(ctx, content, style, route, Mode::Eval, &mut StatLog::new())
    }

    fn path(&self, ctx: &Ctx, x: &Var, branch: usize, mode: Mode, log: &mut StatLog) -> Result<Var> {
        let mut h = x.clone();
        let last = self.stages.len() - 1;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.run(ctx, &h, i, branch, mode, log)?;
            if i < last {
                h = h.upsample_nearest(2)?;
            }
        }
        Ok(h)
    }

    fn run(
        &self,
        ctx: &Ctx,
        content: &Var,
        style: Option<&Var>,
        route: DecoderRoute,
        mode: Mode,
        log: &mut StatLog,
    ) -> Result<Var> {
        let (n, c, h, w) = content.dims4()?;
        if c != self.in_channels() {
            return Err(LfdaError::Shape(format!(
                "decoder expects {} content channels, got {c}",
                self.in_channels()
            )));
        }
        if let Some(style) = style {
            if route == DecoderRoute::Source {
                return Err(LfdaError::Routing(
                    "style features cannot be decoded on the source route".into(),
                ));
            }
            let (sn, sc, sh, sw) = style.dims4()?;
            if (sn, sc, sh, sw) != (n, c, h, w) {
                return Err(LfdaError::Shape(format!(
                    "style feature {:?} does not match content feature {:?}",
                    style.shape(),
                    content.shape()
                )));
            }
        }
        let (content_branch, style_branch) = route.branches();
        let content_path = self.path(ctx, content, content_branch, mode, log)?;
        let fused = match style {
            Some(style) => {
                let style_path = self.path(ctx, style, style_branch, mode, log)?;
                let both = Var::concat(&[content_path.clone(), style_path], 1)?;
                content_path.add(&self.fusion.forward(ctx, &both)?)?
            }
            None => content_path,
        };
        let logits = self.head.forward(ctx, &fused)?;
        Ok(logits
            .sigmoid()
            .mul_scalar(self.d_max - self.d_min)
            .add_scalar(self.d_min))
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.stages.iter_mut().flat_map(NormStage::params_mut).collect();
        p.extend(self.fusion.params_mut());
        p.extend(self.head.params_mut());
        p
    }

    pub fn norms(&self) -> Vec<&SeparateBatchNorm> {
        self.stages.iter().map(|s| &s.norm).collect()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut SeparateBatchNorm> {
        self.stages.iter_mut().map(|s| &mut s.norm).collect()
    }

    /// Costs of a decode with or without the style path.
    pub fn costs_with_style(&self, input: FeatureShape, with_style: bool) -> Result<Vec<LayerCost>> {
        let mut out = Vec::new();
        let passes = if with_style { 2 } else { 1 };
        let mut shape = input;
        for pass in 0..passes {
            shape = input;
            let last = self.stages.len() - 1;
            for (i, stage) in self.stages.iter().enumerate() {
                let (mut c, next) = stage.cost(shape)?;
                if pass == 1 {
                    // Shared weights: the second path adds compute, not parameters.
                    c.iter_mut().for_each(|l| {
                        l.name.push_str(" (style path)");
                        l.params = 0;
                    });
                }
                out.extend(c);
                shape = next;
                if i < last {
                    shape.height *= 2;
                    shape.width *= 2;
                }
            }
        }
        if with_style {
            let cat = FeatureShape {
                channels: 2 * shape.channels,
                ..shape
            };
            let (fusion, fused) = self.fusion.cost(cat)?;
            out.push(fusion);
            out.push(LayerCost {
                name: "decoder.residual_add".into(),
                params: 0,
                macs: (fused.channels * fused.height * fused.width) as u64,
            });
        }
        let (head, _) = self.head.cost(shape)?;
        out.push(head);
        Ok(out)
    }
}

impl Module for DepthDecoder {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.stages.iter().flat_map(NormStage::params).collect();
        p.extend(self.fusion.params());
        p.extend(self.head.params());
        p
    }

    /// Full target route: content and style paths plus fusion.
    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        self.costs_with_style(input, true)
    }
}

/// Image generator: content feature plus the channel means of a style
/// feature, upsampled back to image resolution.
#[derive(Clone, Debug)]
pub struct Generator {
    stages: Vec<Conv2d>,
    head: Conv2d,
}

impl Generator {
    pub fn new(
        name: &str,
        content_channels: usize,
        style_channels: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!channels.is_empty(), "generator needs at least one stage");
        let mut c_in = content_channels + style_channels;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&format!("{name}.stage{i}.conv"), c_in, c, 3, 1, 1, true, rng);
                c_in = c;
                conv
            })
            .collect();
        Self {
            stages,
            head: Conv2d::new(&format!("{name}.head"), c_in, 3, 3, 1, 1, true, rng),
        }
    }

    /// Image in [0, 1] at `upsampling()` times the feature resolution.
    pub fn forward(&self, ctx: &Ctx, content: &Var, style: &Var) -> Result<Var> {
        let (n, _, h, w) = content.dims4()?;
        let (sn, _, sh, sw) = style.dims4()?;
        if (sn, sh, sw) != (n, h, w) {
            return Err(LfdaError::Shape(format!(
                "generator: content {:?} and style {:?} disagree",
                content.shape(),
                style.shape()
            )));
        }
        let style_code = style.spatial_mean()?.broadcast_spatial(h, w)?;
        let mut x = Var::concat(&[content.clone(), style_code], 1)?;
        let last = self.stages.len() - 1;
        for (i, conv) in self.stages.iter().enumerate() {
            x = conv.forward(ctx, &x)?.relu();
            if i < last {
                x = x.upsample_nearest(2)?;
            }
        }
        Ok(self.head.forward(ctx, &x)?.sigmoid())
    }

    pub fn upsampling(&self) -> usize {
        1 << (self.stages.len() - 1)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p: Vec<&mut Param> = self.stages.iter_mut().flat_map(Conv2d::params_mut).collect();
        p.extend(self.head.params_mut());
        p
    }
}

impl Module for Generator {
    fn params(&self) -> Vec<&Param> {
        let mut p: Vec<&Param> = self.stages.iter().flat_map(Conv2d::params).collect();
        p.extend(self.head.params());
        p
    }

    /// `input` is the concatenated content + style code.
    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        let mut shape = input;
        let mut out = Vec::new();
        let last = self.stages.len() - 1;
        for (i, conv) in self.stages.iter().enumerate() {
            let (c, next) = conv.cost(shape)?;
            out.push(c);
            shape = next;
            if i < last {
                shape.height *= 2;
                shape.width *= 2;
            }
        }
        out.push(self.head.cost(shape)?.0);
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscKind {
    /// Sees content features.
    Feature,
    /// Sees images claimed to be target-domain.
    SourceToTarget,
    /// Sees images claimed to be source-domain.
    TargetToSource,
}

/// Patch discriminator: strided LeakyReLU convs ending in a one-channel
/// map of unbounded scores.
#[derive(Clone, Debug)]
pub struct Discriminator {
    kind: DiscKind,
    layers: Vec<Conv2d>,
}

impl Discriminator {
    pub fn new(
        name: &str,
        kind: DiscKind,
        in_channels: usize,
        channels: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let mut c_in = in_channels;
        let mut layers: Vec<Conv2d> = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(&format!("{name}.layer{i}"), c_in, c, 3, 2, 1, true, rng);
                c_in = c;
                conv
            })
            .collect();
        layers.push(Conv2d::new(&format!("{name}.score"), c_in, 1, 3, 1, 1, true, rng));
        Self { kind, layers }
    }

    pub fn kind(&self) -> DiscKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].c_in()
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.in_channels() {
            return Err(LfdaError::Shape(format!(
                "{:?} discriminator expects {} channels, got {c}",
                self.kind,
                self.in_channels()
            )));
        }
        let last = self.layers.len() - 1;
        let mut h = x.clone();
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(ctx, &h)?;
            if i < last {
                h = h.leaky_relu(0.2);
            }
        }
        Ok(h)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Conv2d::params_mut).collect()
    }

    /// Overwrite every weight with `value` and every bias with `bias`.
    pub fn fill(&mut self, value: f64, bias: f64) {
        for conv in &mut self.layers {
            let shape = conv.weight.value().shape().to_vec();
            *conv.weight.value_mut() = Array::full(&shape, value);
            if let Some(b) = conv.bias.as_mut() {
                let shape = b.value().shape().to_vec();
                *b.value_mut() = Array::full(&shape, bias);
            }
        }
    }
}

impl Module for Discriminator {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Conv2d::params).collect()
    }

    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        self.layers.costs(input)
    }
}
