//! Depth metrics with a depth cap, split evaluation, and parameter / MAC
//! accounting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use lfda_autograd::{Array, Ctx, Var};
use serde::Serialize;

use crate::datagen::SceneSample;
use crate::error::{LfdaError, Result};
use crate::layers::{seeded_rng, Conv2d, LayerCost, Module};
use crate::model::{InferenceRoute, LfdaModel, SubNet};

/// Predictions are clamped to at least this before any metric.
pub const EVAL_DEPTH_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub valid_pixels: u64,
    pub cap: f64,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}", "abs_rel", "sq_rel", "rmse", "rmse_log", "d<1.25", "d<1.25^2", "d<1.25^3");
        let _ = writeln!(
            s,
            "{:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3
        );
        s
    }
}

/// Metrics over pixels with 0 < gt <= cap; predictions clamped to
/// [EVAL_DEPTH_FLOOR, cap]. Accuracy thresholds use a strict `<`.
pub fn depth_metrics(pred: &Array, gt: &Array, cap: f64) -> Result<MetricReport> {
    if pred.shape() != gt.shape() {
        return Err(LfdaError::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            pred.shape(),
            gt.shape()
        )));
    }
    if !(cap > EVAL_DEPTH_FLOOR) {
        return Err(LfdaError::Invalid(format!("depth cap {cap} is too small")));
    }
    let (mut n, mut abs_rel, mut sq_rel, mut se, mut sle) = (0u64, 0.0, 0.0, 0.0, 0.0);
    let mut deltas = [0u64; 3];
    let thresholds = [1.25f64, 1.25f64.powi(2), 1.25f64.powi(3)];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if !(g > 0.0 && g <= cap) {
            continue;
        }
        let p = p.clamp(EVAL_DEPTH_FLOOR, cap);
        n += 1;
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        sle += (p.ln() - g.ln()).powi(2);
        let ratio = (p / g).max(g / p);
        for (count, t) in deltas.iter_mut().zip(thresholds) {
            if ratio < t {
                *count += 1;
            }
        }
    }
    if n == 0 {
        return Err(LfdaError::Invalid("no valid ground-truth pixels".into()));
    }
    let k = n as f64;
    Ok(MetricReport {
        abs_rel: abs_rel / k,
        sq_rel: sq_rel / k,
        rmse: (se / k).sqrt(),
        rmse_log: (sle / k).sqrt(),
        delta1: deltas[0] as f64 / k,
        delta2: deltas[1] as f64 / k,
        delta3: deltas[2] as f64 / k,
        valid_pixels: n,
        cap,
    })
}

/// Unweighted mean over images; valid pixel counts are summed.
pub fn mean_report(reports: &[MetricReport]) -> Result<MetricReport> {
    let first = reports
        .first()
        .ok_or_else(|| LfdaError::Invalid("no images to average".into()))?;
    let k = reports.len() as f64;
    let avg = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Ok(MetricReport {
        abs_rel: avg(|r| r.abs_rel),
        sq_rel: avg(|r| r.sq_rel),
        rmse: avg(|r| r.rmse),
        rmse_log: avg(|r| r.rmse_log),
        delta1: avg(|r| r.delta1),
        delta2: avg(|r| r.delta2),
        delta3: avg(|r| r.delta3),
        valid_pixels: reports.iter().map(|r| r.valid_pixels).sum(),
        cap: first.cap,
    })
}

/// Bilinear resize of a [1, h, w] map (pixel-center aligned).
pub fn resize_bilinear(map: &Array, height: usize, width: usize) -> Result<Array> {
    let (h, w) = match map.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(LfdaError::Shape(format!("resize expects [1,H,W], got {s:?}"))),
    };
    if (h, w) == (height, width) {
        return Ok(map.clone());
    }
    let d = map.data();
    let mut out = Vec::with_capacity(height * width);
    let coord = |i: usize, n: usize, m: usize| ((i as f64 + 0.5) * m as f64 / n as f64 - 0.5).clamp(0.0, (m - 1) as f64);
    for y in 0..height {
        let sy = coord(y, height, h);
        let (y0, ty) = (sy.floor() as usize, sy - sy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..width {
            let sx = coord(x, width, w);
            let (x0, tx) = (sx.floor() as usize, sx - sx.floor());
            let x1 = (x0 + 1).min(w - 1);
            let top = d[y0 * w + x0] * (1.0 - tx) + d[y0 * w + x1] * tx;
            let bottom = d[y1 * w + x0] * (1.0 - tx) + d[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(Array::from_vec(&[1, height, width], out)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub index: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub summary: MetricReport,
    pub images: Vec<ImageRecord>,
}

impl Evaluation {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("index,seed,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3,valid_pixels\n");
        for r in &self.images {
            let m = &r.metrics;
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{}",
                r.index, r.seed, m.abs_rel, m.sq_rel, m.rmse, m.rmse_log, m.delta1, m.delta2, m.delta3, m.valid_pixels
            );
        }
        fs::write(path, s).map_err(|e| LfdaError::io(path, e))
    }
}

/// Eval-mode prediction for one [3, H, W] image, resized to `gt_shape`.
pub fn predict_depth(model: &LfdaModel, image: &Array, route: InferenceRoute) -> Result<Array> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => return Err(LfdaError::Shape(format!("expected [3,H,W], got {s:?}"))),
    };
    let x = Var::constant(image.clone().reshape(&[1, c, h, w])?);
    let y = model.predict(&Ctx::no_grad(), &x, route)?;
    let (_, _, ph, pw) = y.dims4()?;
    Ok(y.value().clone().reshape(&[1, ph, pw])?)
}

/// Per-image metrics along `route`, averaged per image.
pub fn evaluate(model: &LfdaModel, samples: &[SceneSample], route: InferenceRoute, cap: f64) -> Result<Evaluation> {
    let mut images = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let pred = predict_depth(model, &s.left, route)?;
        let gt_shape = s.depth.shape();
        let pred = resize_bilinear(&pred, gt_shape[1], gt_shape[2])?;
        images.push(ImageRecord {
            index,
            seed: s.seed,
            metrics: depth_metrics(&pred, &s.depth, cap)?,
        });
    }
    let summary = mean_report(&images.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>())?;
    Ok(Evaluation { summary, images })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComplexityReport {
    pub height: usize,
    pub width: usize,
    /// Learnable scalars of E_con, E^t_sty and D.
    pub inference_params: u64,
    /// Learnable scalars of all eight sub-networks.
    pub total_params: u64,
    /// Multiply-accumulates of one inference pass.
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

impl ComplexityReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<44} {:>10} {:>14}", "layer", "params", "MACs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<44} {:>10} {:>14}", l.name, l.params, l.macs);
        }
        let _ = writeln!(s, "input {}x{}", self.height, self.width);
        let _ = writeln!(s, "inference params {}", self.inference_params);
        let _ = writeln!(s, "all params       {}", self.total_params);
        let _ = writeln!(s, "inference MACs   {}", self.macs);
        s
    }
}

pub fn count_params(model: &LfdaModel, inference_only: bool) -> u64 {
    if inference_only {
        model.count_params(&SubNet::INFERENCE)
    } else {
        model.count_params(&SubNet::ALL)
    }
}

/// Sum of per-layer MACs on the given inference route.
pub fn count_macs(model: &LfdaModel, height: usize, width: usize, route: InferenceRoute) -> Result<u64> {
    Ok(model.inference_costs(height, width, route)?.iter().map(|l| l.macs).sum())
}

pub fn complexity(model: &LfdaModel, height: usize, width: usize) -> Result<ComplexityReport> {
    let layers = model.inference_costs(height, width, InferenceRoute::TARGET)?;
    Ok(ComplexityReport {
        height,
        width,
        inference_params: count_params(model, true),
        total_params: count_params(model, false),
        macs: layers.iter().map(|l| l.macs).sum(),
        layers,
    })
}

/// Two-layer reference network with closed-form costs on a 16x16 RGB
/// input: conv3x3 3->8 (stride 1, pad 1) then conv3x3 8->4 (stride 2,
/// pad 1), both with bias.
pub fn toy_network() -> Vec<Conv2d> {
    let mut rng = seeded_rng(0, "toy");
    vec![
        Conv2d::new("toy.conv1", 3, 8, 3, 1, 1, true, &mut rng),
        Conv2d::new("toy.conv2", 8, 4, 3, 2, 1, true, &mut rng),
    ]
}

pub fn module_costs(module: &dyn Module, input: crate::layers::FeatureShape) -> Result<(u64, u64)> {
    let costs = module.costs(input)?;
    Ok((module.num_params(), costs.iter().map(|c| c.macs).sum()))
}
