//! Frozen multi-stage feature extractor used by the perceptual losses.

use std::fs;
use std::path::Path;

use lfda_autograd::{Array, Var};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LfdaError, Result};
use crate::layers::seeded_rng;

const MAGIC: &[u8; 8] = b"LFDAPERC";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub channels: Vec<usize>,
    /// Per-stage strides; cumulative products give the spatial reductions.
    pub strides: Vec<usize>,
    pub seed: u64,
    /// Optional weight file replacing the seeded weights.
    pub weights: Option<String>,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64, 64],
            strides: vec![1, 2, 2, 2, 2],
            seed: 0x5eed,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    /// [C_out, C_in, 3, 3]
    weight: Array,
    bias: Array,
    stride: usize,
}

/// Fixed conv -> ReLU stages. Weights are constants: gradients reach the
/// input image but never the extractor.
#[derive(Clone, Debug, PartialEq)]
pub struct PerceptualExtractor {
    stages: Vec<Stage>,
}

impl PerceptualExtractor {
    pub fn from_config(config: &PerceptualConfig) -> Result<Self> {
        match &config.weights {
            Some(path) => Self::load(Path::new(path)),
            None => Self::seeded(&config.channels, &config.strides, config.seed),
        }
    }

    /// Rows of each stage's [C_out, C_in*9] weight matrix are orthonormal
    /// (Gram-Schmidt on Gaussian draws) scaled by sqrt(2).
    pub fn seeded(channels: &[usize], strides: &[usize], seed: u64) -> Result<Self> {
        if channels.is_empty() || channels.len() != strides.len() || strides.contains(&0) {
            return Err(LfdaError::Config(
                "perceptual channels and strides must be non-empty, positive and equally long".into(),
            ));
        }
        let mut rng = seeded_rng(seed, "perceptual");
        let mut c_in = 3;
        let mut stages = Vec::with_capacity(channels.len());
        for (&c_out, &stride) in channels.iter().zip(strides) {
            let fan_in = c_in * 9;
            let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c_out);
            while rows.len() < c_out {
                let mut v: Vec<f64> = (0..fan_in).map(|_| StandardNormal.sample(&mut rng)).collect();
                // Orthogonalize against at most fan_in previous rows.
                let start = rows.len() / fan_in * fan_in;
                for r in &rows[start..] {
                    let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
                }
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if norm < 1e-6 {
                    continue;
                }
                rows.push(v.into_iter().map(|a| a / norm).collect());
            }
            let data: Vec<f64> = rows.into_iter().flatten().map(|a| a * 2f64.sqrt()).collect();
            stages.push(Stage {
                weight: Array::from_vec(&[c_out, c_in, 3, 3], data)?,
                bias: Array::zeros(&[c_out]),
                stride,
            });
            c_in = c_out;
        }
        Ok(Self { stages })
    }

    /// Explicit stages given as ([C_out, C_in, 3, 3] weight, bias, stride).
    pub fn from_stages(stages: Vec<(Array, Array, usize)>) -> Result<Self> {
        let mut c_in = 3;
        let mut out = Vec::with_capacity(stages.len());
        for (weight, bias, stride) in stages {
            let s = weight.shape().to_vec();
            if s.len() != 4 || s[1] != c_in || s[2] != 3 || s[3] != 3 || bias.shape() != [s[0]] || stride == 0 {
                return Err(LfdaError::Shape(format!("invalid perceptual stage {s:?}")));
            }
            c_in = s[0];
            out.push(Stage { weight, bias, stride });
        }
        if out.is_empty() {
            return Err(LfdaError::Shape("perceptual extractor needs a stage".into()));
        }
        Ok(Self { stages: out })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Cumulative spatial reduction after each stage.
    pub fn reductions(&self) -> Vec<usize> {
        self.stages
            .iter()
            .scan(1, |r, s| {
                *r *= s.stride;
                Some(*r)
            })
            .collect()
    }

    /// One ReLU feature map per stage.
    pub fn features(&self, image: &Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = image.dims4()?;
        let total = *self.reductions().last().expect("non-empty");
        if c != 3 || h % total != 0 || w % total != 0 {
            return Err(LfdaError::Shape(format!(
                "perceptual features need [B,3,H,W] with H, W divisible by {total}, got {:?}",
                image.shape()
            )));
        }
        let mut x = image.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let w = Var::constant(stage.weight.clone());
            let b = Var::constant(stage.bias.clone());
            x = x.conv2d(&w, Some(&b), stage.stride, 1)?.relu();
            out.push(x.clone());
        }
        Ok(out)
    }

    /// SHA-256 over shapes and weights.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.stages {
            for d in s.weight.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update((s.stride as u64).to_le_bytes());
            for v in s.weight.data().iter().chain(s.bias.data()) {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Header `LFDAPERC`, u32 version, u32 stage count; per stage u32
    /// c_out, c_in, kernel, stride; then f32 weights and biases, all
    /// little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.stages.len() as u32).to_le_bytes());
        for s in &self.stages {
            let sh = s.weight.shape();
            for v in [sh[0], sh[1], sh[2], s.stride] {
                buf.extend_from_slice(&(v as u32).to_le_bytes());
            }
        }
        for s in &self.stages {
            for v in s.weight.data().iter().chain(s.bias.data()) {
                buf.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, buf).map_err(|e| LfdaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LfdaError::io(path, e))?;
        let bad = |m: &str| LfdaError::format(path, m);
        let mut r = Reader { bytes: &bytes, pos: 0 };
        if r.take(8).ok_or_else(|| bad("truncated header"))? != MAGIC {
            return Err(bad("not a perceptual weight file"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated header"))?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = r.u32().ok_or_else(|| bad("truncated header"))? as usize;
        if n == 0 || n > 64 {
            return Err(bad("implausible stage count"));
        }
        let mut shapes = Vec::with_capacity(n);
        for _ in 0..n {
            let v: Option<Vec<usize>> = (0..4).map(|_| r.u32().map(|x| x as usize)).collect();
            let v = v.ok_or_else(|| bad("truncated stage table"))?;
            if v[2] != 3 {
                return Err(bad("only 3x3 kernels are supported"));
            }
            shapes.push(v);
        }
        let mut stages = Vec::with_capacity(n);
        for v in shapes {
            let count = v[0] * v[1] * 9;
            let weight = r.f32s(count).ok_or_else(|| bad("truncated weights"))?;
            let bias = r.f32s(v[0]).ok_or_else(|| bad("truncated weights"))?;
            stages.push((
                Array::from_vec(&[v[0], v[1], 3, 3], weight)?,
                Array::from_vec(&[v[0]], bias)?,
                v[3],
            ));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Self::from_stages(stages).map_err(|e| bad(&e.to_string()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.bytes.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }

    fn f32s(&mut self, n: usize) -> Option<Vec<f64>> {
        let raw = self.take(n.checked_mul(4)?)?;
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
        )
    }
}

/// Spatial mean per channel: [B,C,H,W] -> [B,C].
pub fn channel_mean(feature: &Var) -> Result<Var> {
    Ok(feature.spatial_mean()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{normal_array, seeded_rng};
    use lfda_autograd::gradcheck::check_gradient;

    fn image(h: usize, w: usize, seed: u64) -> Array {
        normal_array(&[1, 3, h, w], 0.3, &mut seeded_rng(seed, "img")).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn stage_sizes() {
        let p = PerceptualExtractor::from_config(&PerceptualConfig::default()).unwrap();
        assert_eq!(p.reductions(), vec![1, 2, 4, 8, 16]);
        let f = p.features(&Var::constant(image(64, 64, 1))).unwrap();
        let sizes: Vec<_> = f.iter().map(|v| (v.shape()[1], v.shape()[2])).collect();
        assert_eq!(sizes, vec![(16, 64), (32, 32), (64, 16), (64, 8), (64, 4)]);
    }

    #[test]
    fn deterministic_and_local() {
        let cfg = PerceptualConfig::default();
        let a = PerceptualExtractor::from_config(&cfg).unwrap();
        let b = PerceptualExtractor::from_config(&cfg).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let x = image(32, 32, 2);
        let fa = a.features(&Var::constant(x.clone())).unwrap();
        let fb = b.features(&Var::constant(x.clone())).unwrap();
        for (u, v) in fa.iter().zip(&fb) {
            assert_eq!(u.value(), v.value());
        }
        let mut y = x.clone();
        y.data_mut()[100] += 0.25;
        let fy = a.features(&Var::constant(y)).unwrap();
        assert!(fy[0].value().max_abs_diff(fa[0].value()) > 0.0);
    }

    #[test]
    fn rows_are_scaled_orthonormal() {
        let p = PerceptualExtractor::seeded(&[16], &[1], 3).unwrap();
        let w = p.stages[0].weight.data();
        for i in 0..16 {
            for j in 0..16 {
                let dot: f64 = (0..27).map(|k| w[i * 27 + k] * w[j * 27 + k]).sum();
                let expected = if i == j { 2.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn indivisible_size_is_rejected() {
        let p = PerceptualExtractor::from_config(&PerceptualConfig::default()).unwrap();
        assert!(matches!(p.features(&Var::constant(image(24, 32, 4))), Err(LfdaError::Shape(_))));
    }

    #[test]
    fn channel_mean_examples() {
        let c = Var::constant(Array::full(&[1, 2, 3, 3], 1.5));
        assert_eq!(channel_mean(&c).unwrap().value().data(), &[1.5, 1.5]);
        let mut one = Array::zeros(&[1, 1, 4, 4]);
        one.data_mut()[5] = 4.0;
        assert_eq!(channel_mean(&Var::constant(one)).unwrap().value().data(), &[0.25]);
    }

    #[test]
    fn gradient_reaches_input() {
        let p = PerceptualExtractor::seeded(&[4, 6], &[1, 2], 5).unwrap();
        let x = image(4, 4, 6);
        let w = normal_array(&[1, 6, 2, 2], 1.0, &mut seeded_rng(7, "w"));
        let g = check_gradient(&x, 1e-6, |v| {
            let f = p.features(v).map_err(|e| match e {
                LfdaError::Tensor(t) => t,
                other => panic!("{other}"),
            })?;
            Ok(f[1].mul_const(&w)?.sum())
        })
        .unwrap();
        assert!(g.passes(1e-4), "{}", g.rel_error);
        assert!(g.analytic.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn weight_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let p = PerceptualExtractor::seeded(&[4, 8], &[1, 2], 9).unwrap();
        p.save(&path).unwrap();
        let q = PerceptualExtractor::load(&path).unwrap();
        assert_eq!(q.num_stages(), 2);
        assert_eq!(q.reductions(), vec![1, 2]);
        for (a, b) in p.stages.iter().zip(&q.stages) {
            assert!(a.weight.max_abs_diff(&b.weight) < 1e-6);
        }
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(PerceptualExtractor::load(&path), Err(LfdaError::Format { .. })));
        bytes[0] = b'L';
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(PerceptualExtractor::load(&path), Err(LfdaError::Format { .. })));
    }
}
