//! The assembled model: eight sub-networks under stable parameter names.

use lfda_autograd::{Ctx, Param, ParamId, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LfdaError, Result};
use crate::layers::{seeded_rng, FeatureShape, LayerCost, Module};
use crate::networks::{
    ContentEncoder, DecoderRoute, DepthDecoder, DiscKind, Discriminator, Generator, StyleEncoder,
    BN_SOURCE, BN_TARGET,
};
use crate::normalization::{SeparateBatchNorm, DEFAULT_EPS, DEFAULT_MOMENTUM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Output channels per content-encoder stage.
    pub encoder_channels: Vec<usize>,
    /// Stride per encoder stage; the product is the feature stride.
    pub encoder_strides: Vec<usize>,
    /// Output channels per style-encoder stage (strides shared with the
    /// content encoder). The last entry must equal the content width.
    pub style_channels: Vec<usize>,
    /// Decoder stage widths; one stage per factor-2 upsampling plus one.
    pub decoder_channels: Vec<usize>,
    /// Generator stage widths, same stage count as the decoder.
    pub generator_channels: Vec<usize>,
    /// Widths of the strided discriminator layers before the score layer.
    pub disc_channels: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![32, 64, 128, 128],
            encoder_strides: vec![1, 2, 2, 1],
            style_channels: vec![32, 64, 128, 128],
            decoder_channels: vec![128, 64, 32],
            generator_channels: vec![128, 64, 32],
            disc_channels: vec![64, 128],
            bn_momentum: DEFAULT_MOMENTUM,
            bn_eps: DEFAULT_EPS,
        }
    }
}

impl NetworkConfig {
    pub fn feature_stride(&self) -> usize {
        self.encoder_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(LfdaError::Config(m));
        if self.encoder_channels.is_empty() || self.encoder_channels.len() != self.encoder_strides.len() {
            return err("net.encoder_channels and net.encoder_strides must be non-empty and equally long".into());
        }
        if self.style_channels.len() != self.encoder_strides.len() {
            return err("net.style_channels needs one entry per encoder stage".into());
        }
        if self.style_channels.last() != self.encoder_channels.last() {
            return err("style and content features must have the same width".into());
        }
        let all = [
            &self.encoder_channels,
            &self.style_channels,
            &self.decoder_channels,
            &self.generator_channels,
            &self.disc_channels,
        ];
        if all.iter().any(|v| v.contains(&0)) || self.encoder_strides.contains(&0) {
            return err("network widths and strides must be positive".into());
        }
        let stride = self.feature_stride();
        if !stride.is_power_of_two() {
            return err(format!("feature stride {stride} is not a power of two"));
        }
        let stages = stride.trailing_zeros() as usize + 1;
        if self.decoder_channels.len() != stages || self.generator_channels.len() != stages {
            return err(format!(
                "feature stride {stride} needs {stages} decoder and generator stages"
            ));
        }
        if self.disc_channels.is_empty() {
            return err("net.disc_channels must be non-empty".into());
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) || self.bn_eps <= 0.0 {
            return err("bn_momentum must lie in (0, 1) and bn_eps must be positive".into());
        }
        Ok(())
    }
}

/// Sub-network identifiers, in parameter-name order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum SubNet {
    ContentEncoder,
    StyleSource,
    StyleTarget,
    Decoder,
    Generator,
    DiscFeature,
    DiscS2t,
    DiscT2s,
}

impl SubNet {
    pub const ALL: [SubNet; 8] = [
        SubNet::ContentEncoder,
        SubNet::StyleSource,
        SubNet::StyleTarget,
        SubNet::Decoder,
        SubNet::Generator,
        SubNet::DiscFeature,
        SubNet::DiscS2t,
        SubNet::DiscT2s,
    ];

    /// Sub-networks retained for target-domain inference.
    pub const INFERENCE: [SubNet; 3] = [SubNet::ContentEncoder, SubNet::StyleTarget, SubNet::Decoder];

    pub const DISCRIMINATORS: [SubNet; 3] = [SubNet::DiscFeature, SubNet::DiscS2t, SubNet::DiscT2s];

    pub fn prefix(self) -> &'static str {
        match self {
            SubNet::ContentEncoder => "content",
            SubNet::StyleSource => "style_source",
            SubNet::StyleTarget => "style_target",
            SubNet::Decoder => "decoder",
            SubNet::Generator => "generator",
            SubNet::DiscFeature => "disc_feature",
            SubNet::DiscS2t => "disc_s2t",
            SubNet::DiscT2s => "disc_t2s",
        }
    }
}

/// How an image travels through E_con / E_sty / D at inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferenceRoute {
    pub content_branch: usize,
    pub use_style: bool,
    pub decoder: DecoderRoute,
}

impl InferenceRoute {
    /// E_con target branch + E^t_sty + D target route.
    pub const TARGET: InferenceRoute = InferenceRoute {
        content_branch: BN_TARGET,
        use_style: true,
        decoder: DecoderRoute::Target,
    };

    /// Source branches only, no style.
    pub const SOURCE: InferenceRoute = InferenceRoute {
        content_branch: BN_SOURCE,
        use_style: false,
        decoder: DecoderRoute::Source,
    };
}

#[derive(Clone, Debug)]
pub struct LfdaModel {
    pub config: NetworkConfig,
    pub content: ContentEncoder,
    pub style_source: StyleEncoder,
    pub style_target: StyleEncoder,
    pub decoder: DepthDecoder,
    pub generator: Generator,
    pub disc_feature: Discriminator,
    pub disc_s2t: Discriminator,
    pub disc_t2s: Discriminator,
}

impl LfdaModel {
    /// Every sub-network draws its initial weights from its own stream
    /// under `seed`.
    pub fn new(config: &NetworkConfig, d_min: f64, d_max: f64, seed: u64) -> Result<Self> {
        config.validate()?;
        if !(d_min > 0.0 && d_max > d_min) {
            return Err(LfdaError::Config(format!("invalid depth range [{d_min}, {d_max}]")));
        }
        let c = config;
        let (m, e) = (c.bn_momentum, c.bn_eps);
        let width = *c.encoder_channels.last().expect("validated");
        let rng = |net: SubNet| seeded_rng(seed, net.prefix());
        let name = |net: SubNet| net.prefix();
        Ok(Self {
            content: ContentEncoder::new(
                name(SubNet::ContentEncoder),
                &c.encoder_channels,
                &c.encoder_strides,
                m,
                e,
                &mut rng(SubNet::ContentEncoder),
            ),
            style_source: StyleEncoder::new(
                name(SubNet::StyleSource),
                &c.style_channels,
                &c.encoder_strides,
                m,
                e,
                &mut rng(SubNet::StyleSource),
            ),
            style_target: StyleEncoder::new(
                name(SubNet::StyleTarget),
                &c.style_channels,
                &c.encoder_strides,
                m,
                e,
                &mut rng(SubNet::StyleTarget),
            ),
            decoder: DepthDecoder::new(
                name(SubNet::Decoder),
                width,
                &c.decoder_channels,
                d_min,
                d_max,
                m,
                e,
                &mut rng(SubNet::Decoder),
            ),
            generator: Generator::new(
                name(SubNet::Generator),
                width,
                width,
                &c.generator_channels,
                &mut rng(SubNet::Generator),
            ),
            disc_feature: Discriminator::new(
                name(SubNet::DiscFeature),
                DiscKind::Feature,
                width,
                &c.disc_channels,
                &mut rng(SubNet::DiscFeature),
            ),
            disc_s2t: Discriminator::new(
                name(SubNet::DiscS2t),
                DiscKind::SourceToTarget,
                3,
                &c.disc_channels,
                &mut rng(SubNet::DiscS2t),
            ),
            disc_t2s: Discriminator::new(
                name(SubNet::DiscT2s),
                DiscKind::TargetToSource,
                3,
                &c.disc_channels,
                &mut rng(SubNet::DiscT2s),
            ),
            config: config.clone(),
        })
    }

    pub fn params_of(&self, net: SubNet) -> Vec<&Param> {
        match net {
            SubNet::ContentEncoder => self.content.params(),
            SubNet::StyleSource => self.style_source.params(),
            SubNet::StyleTarget => self.style_target.params(),
            SubNet::Decoder => self.decoder.params(),
            SubNet::Generator => self.generator.params(),
            SubNet::DiscFeature => self.disc_feature.params(),
            SubNet::DiscS2t => self.disc_s2t.params(),
            SubNet::DiscT2s => self.disc_t2s.params(),
        }
    }

    pub fn params_mut_of(&mut self, net: SubNet) -> Vec<&mut Param> {
        match net {
            SubNet::ContentEncoder => self.content.params_mut(),
            SubNet::StyleSource => self.style_source.params_mut(),
            SubNet::StyleTarget => self.style_target.params_mut(),
            SubNet::Decoder => self.decoder.params_mut(),
            SubNet::Generator => self.generator.params_mut(),
            SubNet::DiscFeature => self.disc_feature.params_mut(),
            SubNet::DiscS2t => self.disc_s2t.params_mut(),
            SubNet::DiscT2s => self.disc_t2s.params_mut(),
        }
    }

    pub fn all_params(&self) -> Vec<&Param> {
        SubNet::ALL.iter().flat_map(|&n| self.params_of(n)).collect()
    }

    pub fn all_params_mut(&mut self) -> Vec<&mut Param> {
        let Self {
            content,
            style_source,
            style_target,
            decoder,
            generator,
            disc_feature,
            disc_s2t,
            disc_t2s,
            ..
        } = self;
        let mut out = content.params_mut();
        out.extend(style_source.params_mut());
        out.extend(style_target.params_mut());
        out.extend(decoder.params_mut());
        out.extend(generator.params_mut());
        out.extend(disc_feature.params_mut());
        out.extend(disc_s2t.params_mut());
        out.extend(disc_t2s.params_mut());
        out
    }

    /// Which sub-network owns a parameter id.
    pub fn owner(&self, id: ParamId) -> Option<SubNet> {
        SubNet::ALL
            .into_iter()
            .find(|&n| self.params_of(n).iter().any(|p| p.id() == id))
    }

    /// Every separate-BN layer, named by its parameter prefix.
    pub fn norms(&self) -> Vec<&SeparateBatchNorm> {
        let mut out = self.content.norms();
        out.extend(self.style_source.norms());
        out.extend(self.style_target.norms());
        out.extend(self.decoder.norms());
        out
    }

    pub fn norms_mut(&mut self) -> Vec<&mut SeparateBatchNorm> {
        let Self {
            content,
            style_source,
            style_target,
            decoder,
            ..
        } = self;
        let mut out = content.norms_mut();
        out.extend(style_source.norms_mut());
        out.extend(style_target.norms_mut());
        out.extend(decoder.norms_mut());
        out
    }

    /// Eval-mode depth prediction along `route`.
    pub fn predict(&self, ctx: &Ctx, image: &Var, route: InferenceRoute) -> Result<Var> {
        let content = self.content.forward_eval(ctx, image, route.content_branch)?;
        let style = if route.use_style {
            Some(self.style_target.forward_eval(ctx, image)?)
        } else {
            None
        };
        self.decoder.forward_eval(ctx, &content, style.as_ref(), route.decoder)
    }

    /// Learnable scalars over the given sub-networks.
    pub fn count_params(&self, nets: &[SubNet]) -> u64 {
        nets.iter()
            .flat_map(|&n| self.params_of(n))
            .map(|p| p.len() as u64)
            .sum()
    }

    /// Per-layer costs of one target-route prediction on a `height x width`
    /// image: E_con, E^t_sty and D (content + style paths and fusion).
    pub fn inference_costs(&self, height: usize, width: usize, route: InferenceRoute) -> Result<Vec<LayerCost>> {
        let image = FeatureShape::new(3, height, width);
        let stride = self.content.total_stride();
        if !height.is_multiple_of(stride) || !width.is_multiple_of(stride) {
            return Err(LfdaError::Shape(format!(
                "{height}x{width} is not divisible by the feature stride {stride}"
            )));
        }
        let mut costs = self.content.costs(image)?;
        let feature = self.content.output_shape(image)?;
        if route.use_style {
            costs.extend(self.style_target.costs(image)?);
        }
        costs.extend(self.decoder.costs_with_style(feature, route.use_style)?);
        Ok(costs)
    }
}
