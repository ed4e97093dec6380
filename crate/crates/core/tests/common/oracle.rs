//! Independent references for the acceptance oracles.

/// Straight per-pixel depth metrics: [abs_rel, sq_rel, rmse, rmse_log,
/// delta1, delta2, delta3].
pub fn naive_metrics(pred: &[f64], gt: &[f64], cap: f64) -> [f64; 7] {
    let mut rows = Vec::new();
    for i in 0..gt.len() {
        if gt[i] > 0.0 && gt[i] <= cap {
            let p = if pred[i] < 1e-3 { 1e-3 } else if pred[i] > cap { cap } else { pred[i] };
            rows.push((p, gt[i]));
        }
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| rows.iter().map(|&(p, g)| f(p, g)).sum::<f64>() / n;
    let delta = |t: f64| mean(&|p, g| if f64::max(p / g, g / p) < t { 1.0 } else { 0.0 });
    [
        mean(&|p, g| (p - g).abs() / g),
        mean(&|p, g| (p - g) * (p - g) / g),
        mean(&|p, g| (p - g) * (p - g)).sqrt(),
        mean(&|p, g| (p.ln() - g.ln()).powi(2)).sqrt(),
        delta(1.25),
        delta(1.5625),
        delta(1.953125),
    ]
}

