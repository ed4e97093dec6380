//! Domain-routed batch normalization.
//!
//! One layer holds several independent branches. Each branch owns its affine
//! parameters and running statistics, and a forward pass names the branch it
//! uses explicitly:
//!
//! `y = gamma_b * (x - mu_b) / sqrt(sigma_b^2 + k) + beta_b`
//!
//! In train mode `mu_b`/`sigma_b^2` are the (biased) batch statistics of `x`
//! and branch `b`'s running statistics move towards them by an exponential
//! moving average. In eval mode the stored running statistics are used.
//! Nothing outside branch `b` is read or written.

use lfda_autograd::{Array, Ctx, Param, Var};

use crate::error::{LfdaError, Result};

pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine parameters and running statistics of one branch.
#[derive(Clone, Debug)]
pub struct BranchState {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

/// Per-channel statistics of one train-mode batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SeparateBatchNorm {
    channels: usize,
    momentum: f64,
    eps: f64,
    branches: Vec<BranchState>,
}

impl SeparateBatchNorm {
    pub fn new(name: &str, channels: usize, num_branches: usize) -> Self {
        Self::with_hyper(name, channels, num_branches, DEFAULT_MOMENTUM, DEFAULT_EPS)
    }

    pub fn with_hyper(
        name: &str,
        channels: usize,
        num_branches: usize,
        momentum: f64,
        eps: f64,
    ) -> Self {
        assert!(num_branches >= 1, "separate BN needs at least one branch");
        assert!(momentum > 0.0 && momentum < 1.0, "momentum must lie in (0, 1)");
        assert!(eps > 0.0, "eps must be positive");
        let branches = (0..num_branches)
            .map(|b| BranchState {
                gamma: Param::new(format!("{name}.b{b}.gamma"), Array::ones(&[channels])),
                beta: Param::new(format!("{name}.b{b}.beta"), Array::zeros(&[channels])),
                running_mean: vec![0.0; channels],
                running_var: vec![1.0; channels],
            })
            .collect();
        Self {
            channels,
            momentum,
            eps,
            branches,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn branch(&self, b: usize) -> &BranchState {
        &self.branches[b]
    }

    pub fn branch_mut(&mut self, b: usize) -> &mut BranchState {
        &mut self.branches[b]
    }

    pub fn branches(&self) -> &[BranchState] {
        &self.branches
    }

    pub fn params(&self) -> Vec<&Param> {
        self.branches
            .iter()
            .flat_map(|b| [&b.gamma, &b.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branches
            .iter_mut()
            .flat_map(|b| [&mut b.gamma, &mut b.beta])
            .collect()
    }

    /// Normalize `x` through `branch`, committing the running-stat update
    /// immediately in train mode.
    pub fn forward(&mut self, ctx: &Ctx, x: &Var, branch: usize, mode: Mode) -> Result<Var> {
        let (y, stats) = self.normalize(ctx, x, branch, mode)?;
        if let Some(stats) = stats {
            self.commit(branch, &stats);
        }
        Ok(y)
    }

    /// Normalize without touching state; train mode also returns the batch
    /// statistics that [`commit`](Self::commit) folds into the branch.
    pub fn normalize(
        &self,
        ctx: &Ctx,
        x: &Var,
        branch: usize,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (n, c, h, w) = x.dims4()?;
        if branch >= self.branches.len() {
            return Err(LfdaError::Routing(format!(
                "branch {branch} requested from a {}-branch normalization",
                self.branches.len()
            )));
        }
        if c != self.channels {
            return Err(LfdaError::Shape(format!(
                "normalization expects {} channels, input has {c}",
                self.channels
            )));
        }
        let state = &self.branches[branch];
        let gamma = ctx.param(&state.gamma);
        let beta = ctx.param(&state.beta);
        match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(LfdaError::DegenerateBatch(n));
                }
                let stats = batch_stats(x.value(), n, c, h * w);
                let y = affine_normalize(x, &gamma, &beta, &stats, self.eps, true);
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let stats = BatchStats {
                    mean: state.running_mean.clone(),
                    var: state.running_var.clone(),
                };
                Ok((affine_normalize(x, &gamma, &beta, &stats, self.eps, false), None))
            }
        }
    }

    /// Exponential moving average of `stats` into branch `branch` only.
    pub fn commit(&mut self, branch: usize, stats: &BatchStats) {
        let m = self.momentum;
        let state = &mut self.branches[branch];
        for (r, &b) in state.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in state.running_var.iter_mut().zip(&stats.var) {
            *r = ((1.0 - m) * *r + m * b).max(0.0);
        }
    }
}

fn batch_stats(x: &Array, n: usize, c: usize, hw: usize) -> BatchStats {
    let data = x.data();
    let count = (n * hw) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            s += data[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
        }
        let mu = s / count;
        let mut ss = 0.0;
        for b in 0..n {
            ss += data[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                .iter()
                .map(|v| (v - mu) * (v - mu))
                .sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count;
    }
    BatchStats { mean, var }
}

/// Fused normalization op. With `batch_dependent` the statistics are
/// functions of `x` and the backward pass differentiates through them.
fn affine_normalize(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    stats: &BatchStats,
    eps: f64,
    batch_dependent: bool,
) -> Var {
    let (n, c, h, w) = x.dims4().expect("checked by caller");
    let hw = h * w;
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mean = stats.mean.clone();
    let xd = x.value().data();
    let g = gamma.value().data();
    let bt = beta.value().data();
    let mut out = vec![0.0; xd.len()];
    for b in 0..n {
        for ch in 0..c {
            let s = (b * c + ch) * hw;
            let (mu, inv, ga, be) = (mean[ch], inv_std[ch], g[ch], bt[ch]);
            for (o, &v) in out[s..s + hw].iter_mut().zip(&xd[s..s + hw]) {
                *o = ga * (v - mu) * inv + be;
            }
        }
    }
    let value = Array::from_vec(&[n, c, h, w], out).expect("same shape");
    Var::from_op(
        value,
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |grad, _, parents| {
            let xd = parents[0].value().data();
            let g = parents[1].value().data();
            let gd = grad.data();
            let count = (n * hw) as f64;
            let mut dgamma = vec![0.0; c];
            let mut dbeta = vec![0.0; c];
            for b in 0..n {
                for ch in 0..c {
                    let s = (b * c + ch) * hw;
                    let (mu, inv) = (mean[ch], inv_std[ch]);
                    for (&dy, &v) in gd[s..s + hw].iter().zip(&xd[s..s + hw]) {
                        dgamma[ch] += dy * (v - mu) * inv;
                        dbeta[ch] += dy;
                    }
                }
            }
            let dx = parents[0].requires_grad().then(|| {
                let mut dx = vec![0.0; xd.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let s = (b * c + ch) * hw;
                        let (mu, inv, ga) = (mean[ch], inv_std[ch], g[ch]);
                        let dst = &mut dx[s..s + hw];
                        if batch_dependent {
                            // d/dx of gamma * xhat with xhat built from batch moments.
                            let k = ga * inv / count;
                            for ((d, &dy), &v) in dst.iter_mut().zip(&gd[s..s + hw]).zip(&xd[s..s + hw]) {
                                let xhat = (v - mu) * inv;
                                *d = k * (count * dy - dbeta[ch] - xhat * dgamma[ch]);
                            }
                        } else {
                            for (d, &dy) in dst.iter_mut().zip(&gd[s..s + hw]) {
                                *d = dy * ga * inv;
                            }
                        }
                    }
                }
                Array::from_vec(&[n, c, h, w], dx).expect("same shape")
            });
            vec![
                dx,
                parents[1]
                    .requires_grad()
                    .then(|| Array::from_vec(&[c], dgamma).expect("shape")),
                parents[2]
                    .requires_grad()
                    .then(|| Array::from_vec(&[c], dbeta).expect("shape")),
            ]
        },
    )
}
