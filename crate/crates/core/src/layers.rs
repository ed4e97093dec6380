//! Convolution layer, seeded initialization and complexity bookkeeping.

use lfda_autograd::{conv_output_size, Array, Ctx, Param, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LfdaError, Result};

/// Deterministic generator for a named component under a master seed.
pub fn seeded_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Zero-mean normal samples with the given standard deviation.
pub fn normal_array(shape: &[usize], std: f64, rng: &mut impl Rng) -> Array {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Array::from_vec(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Channels x height x width of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FeatureShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FeatureShape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }
}

/// Learnable scalars and multiply-accumulates of one layer on one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = normal_array(&[c_out, c_in, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: bias.then(|| Param::new(format!("{name}.bias"), Array::zeros(&[c_out]))),
            stride,
            pad,
        }
    }

    pub fn name(&self) -> &str {
        self.weight
            .name()
            .strip_suffix(".weight")
            .unwrap_or(self.weight.name())
    }

    pub fn c_out(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().shape()[2]
    }

    pub fn forward(&self, ctx: &Ctx, x: &Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        Ok(x.conv2d(&w, b.as_ref(), self.stride, self.pad)?)
    }

    pub fn params(&self) -> Vec<&Param> {
        std::iter::once(&self.weight).chain(self.bias.as_ref()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        std::iter::once(&mut self.weight)
            .chain(self.bias.as_mut())
            .collect()
    }

    pub fn output_shape(&self, input: FeatureShape) -> Result<FeatureShape> {
        if input.channels != self.c_in() {
            return Err(LfdaError::Shape(format!(
                "{} expects {} input channels, got {}",
                self.name(),
                self.c_in(),
                input.channels
            )));
        }
        let (h, w) = conv_output_size(input.height, input.width, self.kernel(), self.stride, self.pad)?;
        Ok(FeatureShape::new(self.c_out(), h, w))
    }

    /// K_h * K_w * C_in * C_out * H_out * W_out multiply-accumulates.
    pub fn cost(&self, input: FeatureShape) -> Result<(LayerCost, FeatureShape)> {
        let out = self.output_shape(input)?;
        let k = self.kernel() as u64;
        let macs = k * k * self.c_in() as u64 * out.channels as u64 * (out.height * out.width) as u64;
        let params = self.params().iter().map(|p| p.len() as u64).sum();
        Ok((
            LayerCost {
                name: self.name().to_string(),
                params,
                macs,
            },
            out,
        ))
    }
}

/// Anything made of parameters whose inference cost can be enumerated.
pub trait Module {
    fn params(&self) -> Vec<&Param>;

    /// Per-layer costs for one sample of the given shape, in execution order.
    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>>;

    fn num_params(&self) -> u64 {
        self.params().iter().map(|p| p.len() as u64).sum()
    }
}

/// A plain chain of convolutions.
impl Module for [Conv2d] {
    fn params(&self) -> Vec<&Param> {
        self.iter().flat_map(Conv2d::params).collect()
    }

    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.len());
        for conv in self {
            let (cost, next) = conv.cost(shape)?;
            out.push(cost);
            shape = next;
        }
        Ok(out)
    }
}

impl Module for Vec<Conv2d> {
    fn params(&self) -> Vec<&Param> {
        self.as_slice().params()
    }

    fn costs(&self, input: FeatureShape) -> Result<Vec<LayerCost>> {
        self.as_slice().costs(input)
    }
}
