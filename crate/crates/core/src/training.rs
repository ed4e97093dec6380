//! End-to-end training: the per-step objective for each ablation variant,
//! Adam updates with polynomial decay, and the step loop.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;

use lfda_autograd::{Array, Ctx, Gradients, Param, Var};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::Config;
use crate::datagen::{SourceBatch, TargetBatch, TrainSet};
use crate::error::{LfdaError, Result};
use crate::layers::seeded_rng;
use crate::losses::{
    alignment_loss, depth_l1, geometry_loss, inverse_warp, lsgan_disc_loss, reconstruction_loss_from_features,
    smoothness_loss, total_loss, total_loss_var, translation_loss_from_features, AlignLabels, LossReport, Term,
};
use crate::model::{InferenceRoute, LfdaModel, SubNet};
use crate::networks::{DecoderRoute, BN_SOURCE, BN_TARGET};
use crate::normalization::Mode;
use crate::perceptual::PerceptualExtractor;

/// The five ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "src_only")]
    SrcOnly,
    #[serde(rename = "tgt_al")]
    TgtAl,
    #[serde(rename = "tgt_con_2bn")]
    TgtCon2bn,
    #[serde(rename = "tgt_con_2bn_sty")]
    TgtCon2bnSty,
    #[serde(rename = "lfda_full")]
    LfdaFull,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SrcOnly,
        Variant::TgtAl,
        Variant::TgtCon2bn,
        Variant::TgtCon2bnSty,
        Variant::LfdaFull,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Variant::SrcOnly => "src_only",
            Variant::TgtAl => "tgt_al",
            Variant::TgtCon2bn => "tgt_con_2bn",
            Variant::TgtCon2bnSty => "tgt_con_2bn_sty",
            Variant::LfdaFull => "lfda_full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::SrcOnly => "Src-Only",
            Variant::TgtAl => "+Tgt+AL",
            Variant::TgtCon2bn => "+Tgt+Con+2BN",
            Variant::TgtCon2bnSty => "+Tgt+Con+2BN+Sty",
            Variant::LfdaFull => "LFDA (full)",
        }
    }

    pub fn uses_target(self) -> bool {
        self != Variant::SrcOnly
    }

    /// Content decomposition with style encoders and the generator.
    pub fn decomposes(self) -> bool {
        matches!(self, Variant::TgtCon2bn | Variant::TgtCon2bnSty | Variant::LfdaFull)
    }

    /// Content-encoder branch for target images.
    pub fn target_branch(self) -> usize {
        match self {
            Variant::SrcOnly | Variant::TgtAl => BN_SOURCE,
            _ => BN_TARGET,
        }
    }

    /// Decoder route when the style feature is fused, if it is.
    pub fn style_route(self) -> Option<DecoderRoute> {
        match self {
            Variant::TgtCon2bnSty => Some(DecoderRoute::TargetSharedStyleNorm),
            Variant::LfdaFull => Some(DecoderRoute::Target),
            _ => None,
        }
    }

    /// Decoder route for target content features.
    pub fn target_route(self) -> DecoderRoute {
        match self {
            Variant::SrcOnly | Variant::TgtAl => DecoderRoute::Source,
            v => v.style_route().unwrap_or(DecoderRoute::Target),
        }
    }

    /// Eval-time path for target images.
    pub fn inference_route(self) -> InferenceRoute {
        InferenceRoute {
            content_branch: self.target_branch(),
            use_style: self.style_route().is_some(),
            decoder: self.target_route(),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Variant {
    type Err = LfdaError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.key() == s)
            .ok_or_else(|| LfdaError::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Initial learning rate of E_con and D.
    pub lr_task: f64,
    /// Initial learning rate of every other sub-network.
    pub lr_other: f64,
    pub decay_power: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    /// Seeds weight initialization and batch sampling.
    pub seed: u64,
    /// Fraction of the run over which the reversal strength ramps 0 -> 1.
    pub grl_warmup: f64,
    pub align_labels: AlignLabels,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::LfdaFull,
            lr_task: 1e-4,
            lr_other: 2e-5,
            decay_power: 0.9,
            total_steps: 2000,
            batch_size: 4,
            seed: 1,
            grl_warmup: 0.2,
            align_labels: AlignLabels::SourceReal,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(LfdaError::Config(m.into()));
        if !(self.lr_task >= 0.0 && self.lr_other >= 0.0 && self.lr_task.is_finite() && self.lr_other.is_finite()) {
            return err("learning rates must be finite and non-negative");
        }
        if self.batch_size < 2 {
            return err("train.batch_size must be at least 2 for batch normalization");
        }
        if !(self.decay_power >= 0.0) || !(0.0..=1.0).contains(&self.grl_warmup) {
            return err("train.decay_power must be >= 0 and train.grl_warmup in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return err("invalid Adam hyper-parameters");
        }
        Ok(())
    }

    /// Gradient-reversal strength at `step`.
    pub fn grl_lambda(&self, step: usize) -> f64 {
        let ramp = self.grl_warmup * self.total_steps as f64;
        if ramp <= 0.0 {
            1.0
        } else {
            (step as f64 / ramp).min(1.0)
        }
    }
}

/// lr0 * (1 - step/total)^power, reaching 0 at and beyond `total_steps`.
pub fn poly_decay(lr0: f64, step: usize, total_steps: usize, power: f64) -> f64 {
    if step >= total_steps {
        return 0.0;
    }
    lr0 * (1.0 - step as f64 / total_steps as f64).powf(power)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Array,
    pub v: Array,
    pub t: u64,
}

/// Adam with per-parameter state keyed by parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            state: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, param: &mut Param, grad: &Array, lr: f64) {
        let shape = param.value().shape().to_vec();
        let s = self.state.entry(param.name().to_string()).or_insert_with(|| Moments {
            m: Array::zeros(&shape),
            v: Array::zeros(&shape),
            t: 0,
        });
        s.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(s.t as i32);
        let c2 = 1.0 - b2.powi(s.t as i32);
        let value = param.value_mut().data_mut();
        let (m, v) = (s.m.data_mut(), s.v.data_mut());
        for i in 0..value.len() {
            let g = grad.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            value[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Batch indices for `step`, a pure function of (seed, step).
pub fn batch_indices(seed: u64, step: usize, domain: &str, len: usize, batch: usize) -> Result<Vec<usize>> {
    if len < batch {
        return Err(LfdaError::Invalid(format!(
            "{domain} training split has {len} samples, fewer than the batch size {batch}"
        )));
    }
    let mut rng = seeded_rng(seed, &format!("batch/{domain}/{step}"));
    Ok(index::sample(&mut rng, len, batch).into_vec())
}

/// Images produced during one step, kept for inspection.
#[derive(Clone, Debug, Default)]
pub struct StepImages {
    pub recon_s: Option<Array>,
    pub recon_t: Option<Array>,
    pub s2t: Option<Array>,
    pub t2s: Option<Array>,
}

pub struct Trainer {
    pub config: Config,
    pub model: LfdaModel,
    pub extractor: PerceptualExtractor,
    pub adam: Adam,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let model = LfdaModel::new(&config.net, config.data.d_min, config.data.d_max, config.train.seed)?;
        let extractor = config.extractor()?;
        config.loss.validate(extractor.num_stages())?;
        let t = &config.train;
        Ok(Self {
            adam: Adam::new(t.adam_beta1, t.adam_beta2, t.adam_eps),
            model,
            extractor,
            step: 0,
            config,
        })
    }

    pub fn learning_rates(&self, step: usize) -> (f64, f64) {
        let t = &self.config.train;
        (
            poly_decay(t.lr_task, step, t.total_steps, t.decay_power),
            poly_decay(t.lr_other, step, t.total_steps, t.decay_power),
        )
    }

    /// One optimizer step on the full objective plus one discriminator step.
    pub fn train_step(&mut self, source: &SourceBatch, target: Option<&TargetBatch>) -> Result<LossReport> {
        self.train_step_with_images(source, target).map(|(r, _)| r)
    }

    pub fn train_step_with_images(
        &mut self,
        source: &SourceBatch,
        target: Option<&TargetBatch>,
    ) -> Result<(LossReport, StepImages)> {
        let variant = self.config.train.variant;
        let step = self.step;
        let weights = self.config.loss.clone();
        let grl = self.config.train.grl_lambda(step);
        let (lr_task, lr_other) = self.learning_rates(step);
        let target = match (variant.uses_target(), target) {
            (true, Some(t)) => Some(t),
            (true, None) => return Err(LfdaError::Invalid(format!("variant {variant} needs a target batch"))),
            (false, _) => None,
        };

        let ctx = Ctx::new();
        let m = &mut self.model;
        let mut terms: Vec<(Term, Var)> = Vec::new();
        let mut disc_terms: Vec<(&'static str, Var)> = Vec::new();
        let mut images = StepImages::default();

        let src = Var::constant(source.image.clone());
        let all_valid = Array::ones(source.depth.shape());
        let z_s = m.content.forward(&ctx, &src, BN_SOURCE, Mode::Train)?;
        let y_s = m.decoder.forward(&ctx, &z_s, None, DecoderRoute::Source, Mode::Train)?;
        terms.push((Term::DeS, depth_l1(&y_s, &source.depth, &all_valid)?));

        if let Some(tb) = target {
            let tgt = Var::constant(tb.left.clone());
            let z_t = m.content.forward(&ctx, &tgt, variant.target_branch(), Mode::Train)?;
            let styles = if variant.decomposes() {
                Some((
                    m.style_source.forward(&ctx, &src, Mode::Train)?,
                    m.style_target.forward(&ctx, &tgt, Mode::Train)?,
                ))
            } else {
                None
            };
            let fused_style = match (variant.style_route(), &styles) {
                (Some(_), Some((_, sty_t))) => Some(sty_t),
                _ => None,
            };
            let y_t = m.decoder.forward(&ctx, &z_t, fused_style, variant.target_route(), Mode::Train)?;
            let d = &self.config.data;
            let right = Var::constant(tb.right.clone());
            let (warped, mask) = inverse_warp(&right, &y_t, d.focal, d.baseline)?;
            terms.push((Term::Geo, geometry_loss(&tb.left, &warped, &mask, &weights)?));
            terms.push((Term::Sm, smoothness_loss(&y_t, &tb.left)?));
            let align = alignment_loss(&ctx, &z_s, &z_t, &m.disc_feature, grl, self.config.train.align_labels)?;
            terms.push((Term::Align, align.encoder));
            disc_terms.push(("disc_feature", align.disc));

            if let Some((sty_s, sty_t)) = &styles {
                let p = &self.extractor;
                let f_s = p.features(&src)?;
                let f_t = p.features(&tgt)?;
                let g = &m.generator;
                let i_ss = g.forward(&ctx, &z_s, sty_s)?;
                let i_tt = g.forward(&ctx, &z_t, sty_t)?;
                let i_st = g.forward(&ctx, &z_s, sty_t)?;
                let i_ts = g.forward(&ctx, &z_t, sty_s)?;
                terms.push((Term::ReconS, reconstruction_loss_from_features(&f_s, &p.features(&i_ss)?, &weights)?));
                terms.push((Term::ReconT, reconstruction_loss_from_features(&f_t, &p.features(&i_tt)?, &weights)?));
                let score_st = m.disc_s2t.forward(&ctx, &i_st)?;
                let score_ts = m.disc_t2s.forward(&ctx, &i_ts)?;
                terms.push((
                    Term::TransS2t,
                    translation_loss_from_features(&f_s, &f_t, &p.features(&i_st)?, &score_st, &weights)?,
                ));
                terms.push((
                    Term::TransT2s,
                    translation_loss_from_features(&f_t, &f_s, &p.features(&i_ts)?, &score_ts, &weights)?,
                ));
                let fake_st = i_st.detach();
                let fake_ts = i_ts.detach();
                disc_terms.push((
                    "disc_s2t",
                    lsgan_disc_loss(&m.disc_s2t.forward(&ctx, &tgt)?, &m.disc_s2t.forward(&ctx, &fake_st)?),
                ));
                disc_terms.push((
                    "disc_t2s",
                    lsgan_disc_loss(&m.disc_t2s.forward(&ctx, &src)?, &m.disc_t2s.forward(&ctx, &fake_ts)?),
                ));

                // The translated image re-enters through the target branches.
                let z_st = m.content.forward(&ctx, &fake_st, BN_TARGET, Mode::Train)?;
                let sty_st = match variant.style_route() {
                    Some(_) => Some(m.style_target.forward(&ctx, &fake_st, Mode::Train)?),
                    None => None,
                };
                let y_st = m.decoder.forward(&ctx, &z_st, sty_st.as_ref(), variant.target_route(), Mode::Train)?;
                terms.push((Term::DeS2t, depth_l1(&y_st, &source.depth, &all_valid)?));

                images = StepImages {
                    recon_s: Some(i_ss.value().clone()),
                    recon_t: Some(i_tt.value().clone()),
                    s2t: Some(fake_st.value().clone()),
                    t2s: Some(fake_ts.value().clone()),
                };
            }
        }

        let mut report = LossReport {
            step,
            lr_task,
            lr_other,
            grl_lambda: grl,
            ..LossReport::default()
        };
        for (term, v) in &terms {
            let value = v.item();
            if !value.is_finite() {
                return Err(LfdaError::NonFinite {
                    term: term.name().into(),
                    step,
                });
            }
            report.set(*term, value);
        }
        for (name, v) in &disc_terms {
            let value = v.item();
            if !value.is_finite() {
                return Err(LfdaError::NonFinite {
                    term: (*name).into(),
                    step,
                });
            }
            match *name {
                "disc_feature" => report.disc_feature = Some(value),
                "disc_s2t" => report.disc_s2t = Some(value),
                _ => report.disc_t2s = Some(value),
            }
        }
        let total = total_loss_var(&terms, &weights)?;
        report.total = total_loss(&report, &weights)?;
        if !report.total.is_finite() {
            return Err(LfdaError::NonFinite {
                term: "total".into(),
                step,
            });
        }

        let main_grads = total.backward()?;
        let disc_grads = match disc_terms.into_iter().map(|(_, v)| v).reduce(|a, b| a.add(&b).expect("scalars")) {
            Some(d) => Some(d.backward()?),
            None => None,
        };
        let groups = [
            (SubNet::ContentEncoder, lr_task),
            (SubNet::Decoder, lr_task),
            (SubNet::StyleSource, lr_other),
            (SubNet::StyleTarget, lr_other),
            (SubNet::Generator, lr_other),
        ];
        for (net, lr) in groups {
            apply(&mut self.adam, &ctx, &main_grads, self.model.params_mut_of(net), lr, net, step)?;
        }
        if let Some(grads) = disc_grads {
            for net in SubNet::DISCRIMINATORS {
                apply(&mut self.adam, &ctx, &grads, self.model.params_mut_of(net), lr_other, net, step)?;
            }
        }
        self.step += 1;
        Ok((report, images))
    }

    pub fn batches(&self, data: &TrainSet, step: usize) -> Result<(SourceBatch, Option<TargetBatch>)> {
        let t = &self.config.train;
        let s = batch_indices(t.seed, step, "source", data.source.len(), t.batch_size)?;
        let source = data.source_batch(&s)?;
        let target = if t.variant.uses_target() {
            let i = batch_indices(t.seed, step, "target", data.target.len(), t.batch_size)?;
            Some(data.target_batch(&i)?)
        } else {
            None
        };
        Ok((source, target))
    }

    /// Run steps until `total_steps` (or `options.stop_at`), emitting one
    /// JSON record per step.
    pub fn run(&mut self, data: &TrainSet, options: &mut RunOptions<'_>) -> Result<Vec<LossReport>> {
        let expected = self.config.data.hash();
        if data.data_hash != expected {
            return Err(LfdaError::Mismatch(format!(
                "dataset hash {} does not match the configured data ({expected})",
                data.data_hash
            )));
        }
        let end = options
            .stop_at
            .unwrap_or(self.config.train.total_steps)
            .min(self.config.train.total_steps);
        let mut reports = Vec::new();
        while self.step < end {
            let (source, target) = self.batches(data, self.step)?;
            let report = self.train_step(&source, target.as_ref())?;
            if let Some(log) = options.log.as_mut() {
                let line = serde_json::to_string(&report).expect("serializable");
                writeln!(log, "{line}").map_err(|e| LfdaError::io("<step log>", e))?;
            }
            reports.push(report);
            let every = self.config.train.checkpoint_every;
            if let Some(dir) = &options.checkpoint_dir {
                if every > 0 && self.step.is_multiple_of(every) && self.step < end {
                    checkpoint::save(self, &dir.join(format!("step{:06}.ckpt", self.step)))?;
                }
            }
        }
        Ok(reports)
    }
}

#[derive(Default)]
pub struct RunOptions<'a> {
    /// Stop before this step even if `total_steps` is larger.
    pub stop_at: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    pub log: Option<&'a mut dyn Write>,
}

fn apply(
    adam: &mut Adam,
    ctx: &Ctx,
    grads: &Gradients,
    params: Vec<&mut Param>,
    lr: f64,
    net: SubNet,
    step: usize,
) -> Result<()> {
    for p in params {
        if let Some(g) = ctx.grad(grads, p) {
            if !g.all_finite() {
                return Err(LfdaError::NonFinite {
                    term: format!("gradient of {} ({:?})", p.name(), net),
                    step,
                });
            }
            adam.update(p, &g, lr);
        }
    }
    Ok(())
}

/// Reconstructions and translations of one source / target pair, each
/// [N, 3, H, W].
#[derive(Clone, Debug, PartialEq)]
pub struct Translation {
    pub source: Array,
    pub target: Array,
    pub recon_s: Array,
    pub recon_t: Array,
    pub s2t: Array,
    pub t2s: Array,
}

/// Eval-mode G(z_con, z_sty) for every content/style pairing, with the
/// target content taken from the variant's target branch.
pub fn translate(model: &LfdaModel, variant: Variant, source: &Array, target: &Array) -> Result<Translation> {
    let ctx = Ctx::no_grad();
    let src = Var::constant(source.clone());
    let tgt = Var::constant(target.clone());
    let z_s = model.content.forward_eval(&ctx, &src, BN_SOURCE)?;
    let z_t = model.content.forward_eval(&ctx, &tgt, variant.target_branch())?;
    let sty_s = model.style_source.forward_eval(&ctx, &src)?;
    let sty_t = model.style_target.forward_eval(&ctx, &tgt)?;
    let g = &model.generator;
    Ok(Translation {
        source: source.clone(),
        target: target.clone(),
        recon_s: g.forward(&ctx, &z_s, &sty_s)?.value().clone(),
        recon_t: g.forward(&ctx, &z_t, &sty_t)?.value().clone(),
        s2t: g.forward(&ctx, &z_s, &sty_t)?.value().clone(),
        t2s: g.forward(&ctx, &z_t, &sty_s)?.value().clone(),
    })
}
