//! Objective terms: depth supervision, smoothness, stereo geometry,
//! perceptual translation/reconstruction, adversarial alignment and the
//! weighted total.

use lfda_autograd::{Array, Ctx, Var};
use serde::{Deserialize, Serialize};

use crate::error::{LfdaError, Result};
use crate::networks::{gradient_reverse, Discriminator};
use crate::perceptual::{channel_mean, PerceptualExtractor};

pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Sub-pixel tolerance for samples landing just outside the image.
const WARP_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub w_trans_con: Vec<f64>,
    pub w_trans_sty: Vec<f64>,
    pub w_recon: Vec<f64>,
    pub eta: f64,
    pub lambda_geo: f64,
    pub lambda_sm: f64,
    pub lambda_align: f64,
    pub lambda_recon: f64,
    pub lambda_trans: f64,
    pub alpha_geo: f64,
    pub beta_geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_trans_con: vec![0.0, 0.0, 0.0, 0.25, 1.0],
            w_trans_sty: vec![1.0, 1.0, 1.0, 0.0, 0.0],
            w_recon: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0, 0.25, 1.0],
            eta: 0.2,
            lambda_geo: 1.0,
            lambda_sm: 0.01,
            lambda_align: 0.01,
            lambda_recon: 0.5,
            lambda_trans: 0.05,
            alpha_geo: 0.425,
            beta_geo: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self, stages: usize) -> Result<()> {
        for (name, v) in [
            ("w_trans_con", &self.w_trans_con),
            ("w_trans_sty", &self.w_trans_sty),
            ("w_recon", &self.w_recon),
        ] {
            if v.len() != stages {
                return Err(LfdaError::Config(format!(
                    "loss.{name} has {} entries, the extractor has {stages} stages",
                    v.len()
                )));
            }
        }
        let scalars = [
            self.eta,
            self.lambda_geo,
            self.lambda_sm,
            self.lambda_align,
            self.lambda_recon,
            self.lambda_trans,
            self.alpha_geo,
            self.beta_geo,
        ];
        let vectors = self.w_trans_con.iter().chain(&self.w_trans_sty).chain(&self.w_recon);
        if scalars.iter().chain(vectors).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LfdaError::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The weighted terms of the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    DeS,
    DeS2t,
    Geo,
    Sm,
    Align,
    ReconS,
    ReconT,
    TransS2t,
    TransT2s,
}

impl Term {
    pub const ALL: [Term; 9] = [
        Term::DeS,
        Term::DeS2t,
        Term::Geo,
        Term::Sm,
        Term::Align,
        Term::ReconS,
        Term::ReconT,
        Term::TransS2t,
        Term::TransT2s,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::DeS => "de_s",
            Term::DeS2t => "de_s2t",
            Term::Geo => "geo",
            Term::Sm => "sm",
            Term::Align => "align",
            Term::ReconS => "recon_s",
            Term::ReconT => "recon_t",
            Term::TransS2t => "trans_s2t",
            Term::TransT2s => "trans_t2s",
        }
    }

    pub fn coefficient(self, w: &LossWeights) -> f64 {
        match self {
            Term::DeS | Term::DeS2t => 1.0,
            Term::Geo => w.lambda_geo,
            Term::Sm => w.lambda_sm,
            Term::Align => w.lambda_align,
            Term::ReconS | Term::ReconT => w.lambda_recon,
            Term::TransS2t | Term::TransT2s => w.lambda_trans,
        }
    }
}

/// Every named value of one training step. Absent terms are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub de_s: Option<f64>,
    pub de_s2t: Option<f64>,
    pub geo: Option<f64>,
    pub sm: Option<f64>,
    pub align: Option<f64>,
    pub recon_s: Option<f64>,
    pub recon_t: Option<f64>,
    pub trans_s2t: Option<f64>,
    pub trans_t2s: Option<f64>,
    pub disc_feature: Option<f64>,
    pub disc_s2t: Option<f64>,
    pub disc_t2s: Option<f64>,
    pub total: f64,
    pub lr_task: f64,
    pub lr_other: f64,
    pub grl_lambda: f64,
}

impl LossReport {
    pub fn get(&self, term: Term) -> Option<f64> {
        match term {
            Term::DeS => self.de_s,
            Term::DeS2t => self.de_s2t,
            Term::Geo => self.geo,
            Term::Sm => self.sm,
            Term::Align => self.align,
            Term::ReconS => self.recon_s,
            Term::ReconT => self.recon_t,
            Term::TransS2t => self.trans_s2t,
            Term::TransT2s => self.trans_t2s,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        let slot = match term {
            Term::DeS => &mut self.de_s,
            Term::DeS2t => &mut self.de_s2t,
            Term::Geo => &mut self.geo,
            Term::Sm => &mut self.sm,
            Term::Align => &mut self.align,
            Term::ReconS => &mut self.recon_s,
            Term::ReconT => &mut self.recon_t,
            Term::TransS2t => &mut self.trans_s2t,
            Term::TransT2s => &mut self.trans_t2s,
        };
        *slot = Some(value);
    }

    /// Terms present in this report.
    pub fn terms(&self) -> Vec<(Term, f64)> {
        Term::ALL
            .iter()
            .filter_map(|&t| self.get(t).map(|v| (t, v)))
            .collect()
    }
}

/// Weighted sum of the present terms; absent terms contribute nothing.
pub fn total_loss(report: &LossReport, weights: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for (term, value) in report.terms() {
        if value < 0.0 {
            return Err(LfdaError::NegativeComponent {
                name: term.name().into(),
                value,
            });
        }
        total += term.coefficient(weights) * value;
    }
    Ok(total)
}

/// Differentiable counterpart of [`total_loss`] over live terms.
pub fn total_loss_var(terms: &[(Term, Var)], weights: &LossWeights) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (term, v) in terms {
        let scaled = v.mul_scalar(term.coefficient(weights));
        total = Some(match total {
            Some(t) => t.add(&scaled)?,
            None => scaled,
        });
    }
    total.ok_or_else(|| LfdaError::Invalid("objective has no terms".into()))
}

fn same_shape(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(LfdaError::Shape(format!("{op}: shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

/// Element mean of |a - b|.
pub fn l1_mean(a: &Var, b: &Var) -> Result<Var> {
    same_shape("l1", a.shape(), b.shape())?;
    Ok(a.sub(b)?.abs().mean())
}

/// Mean |pred - gt| over pixels where `mask` is 1.
pub fn depth_l1(pred: &Var, gt: &Array, mask: &Array) -> Result<Var> {
    same_shape("depth_l1", pred.shape(), gt.shape())?;
    same_shape("depth_l1", pred.shape(), mask.shape())?;
    if !mask.data().iter().any(|&m| m > 0.0) {
        return Err(LfdaError::Invalid("depth_l1: empty valid mask".into()));
    }
    Ok(pred.sub(&Var::constant(gt.clone()))?.abs().masked_mean(mask)?)
}

/// Edge-aware smoothness: for each axis, the mean of
/// exp(-|dI|) * |dY| with forward differences and |dI| averaged over color
/// channels; the two axis means are summed.
pub fn smoothness_loss(depth: &Var, image: &Array) -> Result<Var> {
    let (n, c, h, w) = depth.dims4()?;
    let (ni, _, hi, wi) = image.dims4()?;
    if c != 1 || (ni, hi, wi) != (n, h, w) {
        return Err(LfdaError::Shape(format!(
            "smoothness: depth {:?} and image {:?} disagree",
            depth.shape(),
            image.shape()
        )));
    }
    let img = Var::constant(image.clone());
    let mut total: Option<Var> = None;
    for (axis, len) in [(3, w), (2, h)] {
        if len < 2 {
            continue;
        }
        let dy = depth.narrow(axis, 1, len - 1)?.sub(&depth.narrow(axis, 0, len - 1)?)?.abs();
        let di = img.narrow(axis, 1, len - 1)?.sub(&img.narrow(axis, 0, len - 1)?)?.abs();
        let weight = di.mean_channels()?.value().map(|g| (-g).exp());
        let term = dy.mul_const(&weight)?.mean();
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.unwrap_or_else(|| Var::constant(Array::scalar(0.0))))
}

/// Local SSIM map over valid 3x3 windows: [N,C,H-2,W-2].
pub fn ssim_map(a: &Var, b: &Var) -> Result<Var> {
    same_shape("ssim", a.shape(), b.shape())?;
    let mu_a = a.box_filter(3)?;
    let mu_b = b.box_filter(3)?;
    let var_a = a.sqr().box_filter(3)?.sub(&mu_a.sqr())?;
    let var_b = b.sqr().box_filter(3)?.sub(&mu_b.sqr())?;
    let cov = a.mul(b)?.box_filter(3)?.sub(&mu_a.mul(&mu_b)?)?;
    let num = mu_a
        .mul(&mu_b)?
        .mul_scalar(2.0)
        .add_scalar(SSIM_C1)
        .mul(&cov.mul_scalar(2.0).add_scalar(SSIM_C2))?;
    let den = mu_a
        .sqr()
        .add(&mu_b.sqr())?
        .add_scalar(SSIM_C1)
        .mul(&var_a.add(&var_b)?.add_scalar(SSIM_C2))?;
    Ok(num.div(&den)?)
}

/// Mean local SSIM.
pub fn ssim(a: &Var, b: &Var) -> Result<Var> {
    Ok(ssim_map(a, b)?.mean())
}

/// Synthesize the left view by sampling `right` at x - f*B/depth with
/// linear interpolation. Returns the warped image and a [N,1,H,W] mask of
/// in-bounds samples; out-of-bounds pixels are 0 and carry no gradient.
pub fn inverse_warp(right: &Var, depth: &Var, focal: f64, baseline: f64) -> Result<(Var, Array)> {
    let (n, c, h, w) = right.dims4()?;
    let (dn, dc, dh, dw) = depth.dims4()?;
    if dc != 1 || (dn, dh, dw) != (n, h, w) {
        return Err(LfdaError::Shape(format!(
            "inverse_warp: depth {:?} does not match image {:?}",
            depth.shape(),
            right.shape()
        )));
    }
    if depth.value().data().iter().any(|&d| !(d > 0.0)) {
        return Err(LfdaError::Invalid("inverse_warp: depth must be positive".into()));
    }
    let fb = focal * baseline;
    let hw = h * w;
    // Per pixel: (x0, x1, t) or None when out of bounds.
    let mut taps: Vec<Option<(usize, usize, f64)>> = Vec::with_capacity(n * hw);
    for (i, &d) in depth.value().data().iter().enumerate() {
        let x = (i % w) as f64;
        let xs = x - fb / d;
        let last = (w - 1) as f64;
        if xs < -WARP_SLACK || xs > last + WARP_SLACK {
            taps.push(None);
        } else {
            let xs = xs.clamp(0.0, last);
            let x0 = xs.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            taps.push(Some((x0, x1, xs - x0 as f64)));
        }
    }
    let rd = right.value().data();
    let mut out = vec![0.0; n * c * hw];
    let mut mask = vec![0.0; n * hw];
    for b in 0..n {
        for p in 0..hw {
            let Some((x0, x1, t)) = taps[b * hw + p] else { continue };
            mask[b * hw + p] = 1.0;
            let row = p / w * w;
            for ch in 0..c {
                let base = (b * c + ch) * hw + row;
                out[(b * c + ch) * hw + p] = (1.0 - t) * rd[base + x0] + t * rd[base + x1];
            }
        }
    }
    let value = Array::from_vec(&[n, c, h, w], out)?;
    let warped = Var::from_op(value, vec![right.clone(), depth.clone()], move |g, _, parents| {
        let gd = g.data();
        let rd = parents[0].value().data();
        let dd = parents[1].value().data();
        let mut d_right = parents[0].requires_grad().then(|| vec![0.0; n * c * hw]);
        let mut d_depth = parents[1].requires_grad().then(|| vec![0.0; n * hw]);
        for b in 0..n {
            for p in 0..hw {
                let Some((x0, x1, t)) = taps[b * hw + p] else { continue };
                let row = p / w * w;
                let mut dxs = 0.0;
                for ch in 0..c {
                    let base = (b * c + ch) * hw + row;
                    let go = gd[(b * c + ch) * hw + p];
                    if let Some(dr) = d_right.as_mut() {
                        dr[base + x0] += (1.0 - t) * go;
                        dr[base + x1] += t * go;
                    }
                    if x1 != x0 {
                        dxs += go * (rd[base + x1] - rd[base + x0]);
                    }
                }
                if let Some(dd_out) = d_depth.as_mut() {
                    let d = dd[b * hw + p];
                    // xs = x - fb/d  =>  dxs/dd = fb/d^2
                    dd_out[b * hw + p] = dxs * fb / (d * d);
                }
            }
        }
        vec![
            d_right.map(|v| Array::from_vec(&[n, c, h, w], v).expect("shape")),
            d_depth.map(|v| Array::from_vec(&[n, 1, h, w], v).expect("shape")),
        ]
    });
    Ok((warped, Array::from_vec(&[n, 1, h, w], mask)?))
}

fn expand_channels(mask: &Array, c: usize) -> Result<Array> {
    let (n, _, h, w) = mask.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        for _ in 0..c {
            out.extend_from_slice(&mask.data()[b * hw..(b + 1) * hw]);
        }
    }
    Ok(Array::from_vec(&[n, c, h, w], out)?)
}

/// Mask of 3x3 windows lying entirely inside `mask`.
fn erode3(mask: &Array) -> Result<Array> {
    let m = Var::constant(mask.clone()).box_filter(3)?;
    Ok(m.value().map(|v| if v > 1.0 - 1e-9 { 1.0 } else { 0.0 }))
}

/// alpha * (1 - SSIM) + beta * L1 over valid-mask pixels. SSIM is averaged
/// over windows fully inside the mask.
pub fn geometry_loss(target: &Array, warped: &Var, mask: &Array, weights: &LossWeights) -> Result<Var> {
    same_shape("geometry", target.shape(), warped.shape())?;
    let (n, c, h, w) = target.dims4()?;
    same_shape("geometry", mask.shape(), &[n, 1, h, w])?;
    if !mask.data().iter().any(|&m| m > 0.0) {
        return Err(LfdaError::Invalid("geometry: empty valid mask".into()));
    }
    let eroded = erode3(mask)?;
    if !eroded.data().iter().any(|&m| m > 0.0) {
        return Err(LfdaError::Invalid("geometry: no complete SSIM window inside the mask".into()));
    }
    let t = Var::constant(target.clone());
    let s = ssim_map(&t, warped)?.masked_mean(&expand_channels(&eroded, c)?)?;
    let l1 = t.sub(warped)?.abs().masked_mean(&expand_channels(mask, c)?)?;
    Ok(s
        .neg()
        .add_scalar(1.0)
        .mul_scalar(weights.alpha_geo)
        .add(&l1.mul_scalar(weights.beta_geo))?)
}

/// mean((real - 1)^2) + mean(fake^2).
pub fn lsgan_disc_loss(real: &Var, fake: &Var) -> Var {
    real.add_scalar(-1.0).sqr().mean().add(&fake.sqr().mean()).expect("scalars")
}

/// mean((scores - 1)^2): the generator wants its output judged real.
pub fn lsgan_gen_loss(scores: &Var) -> Var {
    scores.add_scalar(-1.0).sqr().mean()
}

fn weighted_feature_l1(weights: &[f64], a: &[Var], b: &[Var]) -> Result<Option<Var>> {
    if a.len() != weights.len() || b.len() != weights.len() {
        return Err(LfdaError::Shape("feature list length differs from weight vector".into()));
    }
    let mut total: Option<Var> = None;
    for ((&wt, fa), fb) in weights.iter().zip(a).zip(b) {
        if wt == 0.0 {
            continue;
        }
        let term = l1_mean(fa, fb)?.mul_scalar(wt);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total)
}

fn weighted_style_l1(weights: &[f64], a: &[Var], b: &[Var]) -> Result<Option<Var>> {
    let ma: Vec<Var> = a.iter().map(channel_mean).collect::<Result<_>>()?;
    let mb: Vec<Var> = b.iter().map(channel_mean).collect::<Result<_>>()?;
    weighted_feature_l1(weights, &ma, &mb)
}

fn sum_terms(parts: Vec<Option<Var>>) -> Result<Var> {
    let mut total = Var::constant(Array::scalar(0.0));
    for p in parts.into_iter().flatten() {
        total = total.add(&p)?;
    }
    Ok(total)
}

/// Translation loss from precomputed extractor features and the image
/// discriminator's scores on the translated image.
pub fn translation_loss_from_features(
    content_ref: &[Var],
    style_ref: &[Var],
    translated: &[Var],
    scores: &Var,
    weights: &LossWeights,
) -> Result<Var> {
    let content = weighted_feature_l1(&weights.w_trans_con, content_ref, translated)?;
    let style = weighted_style_l1(&weights.w_trans_sty, style_ref, translated)?;
    let adv = lsgan_gen_loss(scores).mul_scalar(weights.eta);
    sum_terms(vec![content, style, Some(adv)])
}

/// Content term against `content_ref`, style term against `style_ref`, and
/// the least-squares adversarial term from `disc`.
pub fn translation_loss(
    ctx: &Ctx,
    extractor: &PerceptualExtractor,
    content_ref: &Var,
    style_ref: &Var,
    translated: &Var,
    disc: &Discriminator,
    weights: &LossWeights,
) -> Result<Var> {
    same_shape("translation", content_ref.shape(), translated.shape())?;
    same_shape("translation", style_ref.shape(), translated.shape())?;
    let fc = extractor.features(content_ref)?;
    let fs = extractor.features(style_ref)?;
    let ft = extractor.features(translated)?;
    let scores = disc.forward(ctx, translated)?;
    translation_loss_from_features(&fc, &fs, &ft, &scores, weights)
}

pub fn reconstruction_loss_from_features(image: &[Var], reconstructed: &[Var], weights: &LossWeights) -> Result<Var> {
    sum_terms(vec![weighted_feature_l1(&weights.w_recon, image, reconstructed)?])
}

pub fn reconstruction_loss(
    extractor: &PerceptualExtractor,
    image: &Var,
    reconstructed: &Var,
    weights: &LossWeights,
) -> Result<Var> {
    same_shape("reconstruction", image.shape(), reconstructed.shape())?;
    reconstruction_loss_from_features(
        &extractor.features(image)?,
        &extractor.features(reconstructed)?,
        weights,
    )
}

/// Which domain the feature discriminator labels 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlignLabels {
    /// Source 1, target 0.
    #[default]
    SourceReal,
    /// Source 0, target 1.
    TargetReal,
}

#[derive(Clone, Debug)]
pub struct AlignmentLoss {
    /// Discriminator objective evaluated through gradient reversal: its
    /// value equals `disc`, its gradient pushes the encoder to confuse.
    pub encoder: Var,
    /// Discriminator objective on detached features.
    pub disc: Var,
}

pub fn alignment_loss(
    ctx: &Ctx,
    z_source: &Var,
    z_target: &Var,
    disc: &Discriminator,
    grl_lambda: f64,
    labels: AlignLabels,
) -> Result<AlignmentLoss> {
    if z_source.shape()[1..] != z_target.shape()[1..] {
        return Err(LfdaError::Shape(format!(
            "alignment: features {:?} and {:?} differ",
            z_source.shape(),
            z_target.shape()
        )));
    }
    let objective = |s: &Var, t: &Var| -> Result<Var> {
        let ds = disc.forward(ctx, s)?;
        let dt = disc.forward(ctx, t)?;
        Ok(match labels {
            AlignLabels::SourceReal => lsgan_disc_loss(&ds, &dt),
            AlignLabels::TargetReal => lsgan_disc_loss(&dt, &ds),
        })
    };
    Ok(AlignmentLoss {
        encoder: objective(
            &gradient_reverse(z_source, grl_lambda),
            &gradient_reverse(z_target, grl_lambda),
        )?,
        disc: objective(&z_source.detach(), &z_target.detach())?,
    })
}
