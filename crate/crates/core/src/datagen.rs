//! Procedural dual-domain stereo scenes with ground-truth depth.
//!
//! A pinhole rig looks over a ground plane dotted with upright rectangles
//! and ellipses. The layout is a function of the sample seed alone; the
//! domain only changes appearance (palette, texture strength, tint, gamma,
//! fog), so geometry statistics match across domains.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use lfda_autograd::Array;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LfdaError, Result};
use crate::layers::seeded_rng;

const DEPTH_MAGIC: &[u8; 8] = b"LFDADPT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn code(self) -> u8 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    CrossCamera,
    SyntheticToReal,
    AdverseWeather,
}

/// Appearance of one domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    /// Object base colors, indexed by the layout's palette slot.
    pub palette: Vec<[f64; 3]>,
    pub ground: [f64; 3],
    pub sky: [f64; 3],
    /// Relative strength of the world-anchored surface texture.
    pub texture_amplitude: f64,
    /// Per-channel gain applied before fog.
    pub tint: [f64; 3],
    /// Output response exponent applied last.
    pub gamma: f64,
    /// Fog attenuation exp(-density * depth), blended toward `fog_color`.
    pub fog_density: f64,
    pub fog_color: [f64; 3],
}

impl StyleSpec {
    fn synthetic() -> Self {
        Self {
            palette: vec![
                [0.85, 0.20, 0.20],
                [0.20, 0.70, 0.25],
                [0.25, 0.35, 0.90],
                [0.90, 0.80, 0.20],
                [0.70, 0.30, 0.80],
                [0.20, 0.80, 0.80],
            ],
            ground: [0.45, 0.45, 0.45],
            sky: [0.55, 0.75, 0.95],
            texture_amplitude: 0.08,
            tint: [1.0, 1.0, 1.0],
            gamma: 1.0,
            fog_density: 0.0,
            fog_color: [0.75, 0.75, 0.75],
        }
    }

    fn realistic() -> Self {
        Self {
            palette: vec![
                [0.55, 0.45, 0.35],
                [0.35, 0.42, 0.30],
                [0.50, 0.50, 0.56],
                [0.62, 0.55, 0.40],
                [0.45, 0.34, 0.34],
                [0.40, 0.46, 0.52],
            ],
            ground: [0.34, 0.31, 0.27],
            sky: [0.82, 0.82, 0.80],
            texture_amplitude: 0.3,
            tint: [1.05, 0.95, 0.85],
            gamma: 1.4,
            fog_density: 0.0,
            fog_color: [0.75, 0.75, 0.75],
        }
    }

    fn other_camera() -> Self {
        Self {
            tint: [0.85, 1.0, 1.2],
            gamma: 0.6,
            texture_amplitude: 0.15,
            ..Self::synthetic()
        }
    }

    fn foggy() -> Self {
        Self {
            fog_density: 0.12,
            ..Self::realistic()
        }
    }

    fn validate(&self, which: &str) -> Result<()> {
        let ok = !self.palette.is_empty()
            && self.texture_amplitude >= 0.0
            && self.texture_amplitude < 1.0
            && self.gamma > 0.0
            && self.fog_density >= 0.0
            && self.tint.iter().all(|t| *t >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(LfdaError::Config(format!("invalid {which} style")))
        }
    }
}

impl Scenario {
    /// Default (source, target) appearance.
    pub fn styles(self) -> (StyleSpec, StyleSpec) {
        match self {
            Scenario::SyntheticToReal => (StyleSpec::synthetic(), StyleSpec::realistic()),
            Scenario::CrossCamera => (StyleSpec::synthetic(), StyleSpec::other_camera()),
            Scenario::AdverseWeather => (StyleSpec::realistic(), StyleSpec::foggy()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// Focal length in pixels.
    pub focal: f64,
    /// Stereo baseline in depth units.
    pub baseline: f64,
    /// Camera height above the ground plane.
    pub camera_height: f64,
    /// Horizon row as a fraction of the image height.
    pub horizon: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub scenario: Scenario,
    /// Overrides the scenario's source appearance.
    pub source_style: Option<StyleSpec>,
    /// Overrides the scenario's target appearance.
    pub target_style: Option<StyleSpec>,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 96,
            d_min: 2.0,
            d_max: 20.0,
            focal: 48.0,
            baseline: 0.5,
            camera_height: 1.7,
            horizon: 0.4,
            objects_min: 3,
            objects_max: 6,
            scenario: Scenario::SyntheticToReal,
            source_style: None,
            target_style: None,
            train_count: 256,
            val_count: 32,
            test_count: 32,
            seed: 7,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(LfdaError::Config(m.into()));
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(16) || !self.width.is_multiple_of(16) {
            return err("data.height and data.width must be positive multiples of 16");
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min) {
            return err("need 0 < data.d_min < data.d_max");
        }
        if !(self.focal > 0.0 && self.baseline > 0.0 && self.camera_height > 0.0) {
            return err("focal, baseline and camera_height must be positive");
        }
        if !(self.horizon > 0.0 && self.horizon < 1.0) {
            return err("data.horizon must lie in (0, 1)");
        }
        if self.objects_min > self.objects_max {
            return err("data.objects_min exceeds data.objects_max");
        }
        self.style(Domain::Source).validate("source")?;
        self.style(Domain::Target).validate("target")?;
        Ok(())
    }

    pub fn style(&self, domain: Domain) -> StyleSpec {
        let (s, t) = self.scenario.styles();
        match domain {
            Domain::Source => self.source_style.clone().unwrap_or(s),
            Domain::Target => self.target_style.clone().unwrap_or(t),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_count,
            Split::Val => self.val_count,
            Split::Test => self.test_count,
        }
    }

    /// Largest disparity in pixels (at d_min).
    pub fn max_disparity(&self) -> f64 {
        self.focal * self.baseline / self.d_min
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("serializable");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    /// [3, H, W] in [0, 1], multiples of 1/255.
    pub left: Array,
    pub right: Array,
    /// [1, H, W] in [d_min, d_max], representable in f32.
    pub depth: Array,
    pub domain: Domain,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Rectangle,
    Ellipse,
}

/// Sum of two oriented sinusoids in surface coordinates, in [-1, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Texture {
    pub waves: [(f64, f64, f64); 2],
}

impl Texture {
    fn sample(rng: &mut impl Rng, scale: f64) -> Self {
        let mut wave = || {
            (
                rng.random_range(-1.0..1.0) * scale,
                rng.random_range(-1.0..1.0) * scale,
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        };
        Self { waves: [wave(), wave()] }
    }

    fn flat() -> Self {
        Self { waves: [(0.0, 0.0, 0.0); 2] }
    }

    fn value(&self, u: f64, v: f64) -> f64 {
        self.waves
            .iter()
            .map(|(a, b, p)| 0.5 * (std::f64::consts::TAU * (a * u + b * v) + p).sin())
            .sum()
    }
}

/// Upright planar object standing on the ground, facing the camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub shape: Shape,
    pub depth: f64,
    pub center_x: f64,
    /// Height of the lower edge above the ground plane.
    pub base: f64,
    pub width: f64,
    pub height: f64,
    pub palette_slot: usize,
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// Sorted nearest first.
    pub objects: Vec<SceneObject>,
    pub ground: bool,
    pub ground_texture: Texture,
}

impl Layout {
    pub fn sample(seed: u64, config: &DataConfig) -> Self {
        let mut rng = seeded_rng(seed, "layout");
        let n = rng.random_range(config.objects_min..=config.objects_max);
        let near = (config.d_min * 1.25).max(config.focal * config.camera_height / ((1.0 - config.horizon) * config.height as f64) * 1.15);
        let far = config.d_max * 0.8;
        let half_fov = config.width as f64 / 2.0 / config.focal;
        let mut objects: Vec<SceneObject> = (0..n)
            .map(|_| {
                let depth = rng.random_range(near..far);
                let reach = 0.9 * half_fov * depth;
                SceneObject {
                    shape: if rng.random_bool(0.5) { Shape::Rectangle } else { Shape::Ellipse },
                    depth,
                    center_x: rng.random_range(-reach..reach),
                    base: 0.0,
                    width: rng.random_range(1.0..4.0),
                    height: rng.random_range(1.0..4.0),
                    palette_slot: rng.random_range(0..64),
                    texture: Texture::sample(&mut rng, 1.5),
                }
            })
            .collect();
        objects.sort_by(|a, b| a.depth.total_cmp(&b.depth));
        Self {
            objects,
            ground: true,
            ground_texture: Texture::sample(&mut rng, 0.4),
        }
    }

    /// A single textured wall at `depth` filling the view, no ground.
    pub fn frontal_plane(depth: f64, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "plane");
        Self {
            objects: vec![SceneObject {
                shape: Shape::Rectangle,
                depth,
                center_x: 0.0,
                base: -1e6,
                width: 1e6,
                height: 2e6,
                palette_slot: 0,
                texture: Texture::sample(&mut rng, 1.0),
            }],
            ground: false,
            ground_texture: Texture::flat(),
        }
    }
}

enum Surface<'a> {
    Object(&'a SceneObject, f64, f64),
    Ground(f64, f64),
    Sky,
}

struct Rig<'a> {
    config: &'a DataConfig,
    cx: f64,
    cy: f64,
}

impl Rig<'_> {
    /// First surface hit by the ray through pixel (x, y) of a camera offset
    /// by `ox` along the baseline, with its depth.
    fn trace<'l>(&self, layout: &'l Layout, ox: f64, x: usize, y: usize) -> (Surface<'l>, f64) {
        let c = self.config;
        let px = (x as f64 + 0.5 - self.cx) / c.focal;
        let py = (y as f64 + 0.5 - self.cy) / c.focal;
        let ground = (layout.ground && py > 0.0).then(|| c.camera_height / py);
        for obj in &layout.objects {
            if ground.is_some_and(|z| z < obj.depth) {
                break;
            }
            let u = ox + px * obj.depth - obj.center_x;
            let v = c.camera_height - py * obj.depth - obj.base;
            let (hu, hv) = (obj.width / 2.0, obj.height / 2.0);
            let inside = match obj.shape {
                Shape::Rectangle => u.abs() <= hu && (0.0..=obj.height).contains(&v),
                Shape::Ellipse => (u / hu).powi(2) + ((v - hv) / hv).powi(2) <= 1.0,
            };
            if inside {
                return (Surface::Object(obj, u, v), obj.depth);
            }
        }
        match ground {
            Some(z) => (Surface::Ground(ox + px * z, z), z),
            None => (Surface::Sky, f64::INFINITY),
        }
    }

    fn shade(&self, layout: &Layout, surface: &Surface, depth: f64, y: usize, style: &StyleSpec) -> [f64; 3] {
        let c = self.config;
        let (base, tex) = match surface {
            Surface::Object(obj, u, v) => (style.palette[obj.palette_slot % style.palette.len()], obj.texture.value(*u, *v)),
            Surface::Ground(gx, gz) => {
                // Texture fades with distance so far ground stays smooth.
                let fade = 1.0 / (1.0 + (gz / 6.0).powi(2));
                (style.ground, fade * layout.ground_texture.value(*gx, *gz))
            }
            Surface::Sky => {
                let t = y as f64 / (self.cy.max(1.0));
                let s = style.sky;
                return self.finish([s[0] * (0.85 + 0.15 * t), s[1] * (0.85 + 0.15 * t), s[2] * (0.9 + 0.1 * t)], c.d_max, style);
            }
        };
        let k = 1.0 + style.texture_amplitude * tex;
        self.finish([base[0] * k, base[1] * k, base[2] * k], depth.min(c.d_max), style)
    }

    fn finish(&self, rgb: [f64; 3], depth: f64, style: &StyleSpec) -> [f64; 3] {
        let fog = (-style.fog_density * depth).exp();
        let mut out = [0.0; 3];
        for ch in 0..3 {
            let lit = (rgb[ch] * style.tint[ch]).clamp(0.0, 1.0);
            let fogged = lit * fog + style.fog_color[ch] * (1.0 - fog);
            out[ch] = fogged.clamp(0.0, 1.0).powf(style.gamma);
        }
        out
    }
}

fn quantize(v: f64) -> f64 {
    (v * 255.0).round() / 255.0
}

/// Render both views and left-view depth of `layout` in `domain`'s style.
pub fn render(layout: &Layout, domain: Domain, seed: u64, config: &DataConfig) -> SceneSample {
    let (h, w) = (config.height, config.width);
    let rig = Rig {
        config,
        cx: w as f64 / 2.0,
        cy: config.horizon * h as f64,
    };
    let style = config.style(domain);
    let mut left = vec![0.0; 3 * h * w];
    let mut right = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    for (ox, img) in [(0.0, &mut left), (config.baseline, &mut right)] {
        for y in 0..h {
            for x in 0..w {
                let (surface, z) = rig.trace(layout, ox, x, y);
                let rgb = rig.shade(layout, &surface, z, y, &style);
                for ch in 0..3 {
                    img[(ch * h + y) * w + x] = quantize(rgb[ch]);
                }
                if ox == 0.0 {
                    depth[y * w + x] = z.clamp(config.d_min, config.d_max) as f32 as f64;
                }
            }
        }
    }
    SceneSample {
        left: Array::from_vec(&[3, h, w], left).expect("shape"),
        right: Array::from_vec(&[3, h, w], right).expect("shape"),
        depth: Array::from_vec(&[1, h, w], depth).expect("shape"),
        domain,
        seed,
    }
}

/// Deterministic in (seed, domain, config).
pub fn gen_scene(seed: u64, domain: Domain, config: &DataConfig) -> Result<SceneSample> {
    config.validate()?;
    Ok(render(&Layout::sample(seed, config), domain, seed, config))
}

/// Per-sample seed of `index` in a split.
pub fn sample_seed(master: u64, domain: Domain, split: Split, index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(domain.name().as_bytes());
    h.update(split.name().as_bytes());
    h.update((index as u64).to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn gen_split(config: &DataConfig, domain: Domain, split: Split) -> Result<Vec<SceneSample>> {
    config.validate()?;
    (0..config.count(split))
        .map(|i| gen_scene(sample_seed(config.seed, domain, split, i), domain, config))
        .collect()
}

/// A target-domain training pair; depth is deliberately absent.
#[derive(Clone, Debug, PartialEq)]
pub struct StereoPair {
    pub left: Array,
    pub right: Array,
}

impl From<SceneSample> for StereoPair {
    fn from(s: SceneSample) -> Self {
        Self {
            left: s.left,
            right: s.right,
        }
    }
}

/// Labeled source training data and unlabeled target stereo pairs.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub source: Vec<SceneSample>,
    pub target: Vec<StereoPair>,
    pub data_hash: String,
}

#[derive(Clone, Debug)]
pub struct SourceBatch {
    /// [B, 3, H, W]
    pub image: Array,
    /// [B, 1, H, W]
    pub depth: Array,
}

#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub left: Array,
    pub right: Array,
}

impl TrainSet {
    pub fn generate(config: &DataConfig) -> Result<Self> {
        Ok(Self {
            source: gen_split(config, Domain::Source, Split::Train)?,
            target: gen_split(config, Domain::Target, Split::Train)?
                .into_iter()
                .map(StereoPair::from)
                .collect(),
            data_hash: config.hash(),
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::read(root)?;
        Ok(Self {
            source: read_split(root, Domain::Source, Split::Train)?,
            target: read_split(root, Domain::Target, Split::Train)?
                .into_iter()
                .map(StereoPair::from)
                .collect(),
            data_hash: manifest.config_hash,
        })
    }

    pub fn source_batch(&self, indices: &[usize]) -> Result<SourceBatch> {
        let pick = |i: &usize| self.source.get(*i).ok_or_else(|| LfdaError::Invalid(format!("source index {i}")));
        let items: Vec<&SceneSample> = indices.iter().map(pick).collect::<Result<_>>()?;
        Ok(SourceBatch {
            image: Array::stack(&items.iter().map(|s| &s.left).collect::<Vec<_>>())?,
            depth: Array::stack(&items.iter().map(|s| &s.depth).collect::<Vec<_>>())?,
        })
    }

    pub fn target_batch(&self, indices: &[usize]) -> Result<TargetBatch> {
        let pick = |i: &usize| self.target.get(*i).ok_or_else(|| LfdaError::Invalid(format!("target index {i}")));
        let items: Vec<&StereoPair> = indices.iter().map(pick).collect::<Result<_>>()?;
        Ok(TargetBatch {
            left: Array::stack(&items.iter().map(|s| &s.left).collect::<Vec<_>>())?,
            right: Array::stack(&items.iter().map(|s| &s.right).collect::<Vec<_>>())?,
        })
    }
}

// ---------------------------------------------------------------- I/O

/// Write a [3, H, W] image in [0, 1] as 8-bit RGB.
pub fn write_png(path: &Path, image: &Array) -> Result<()> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        s => return Err(LfdaError::Shape(format!("write_png: expected [3,H,W], got {s:?}"))),
    };
    if c != 3 {
        return Err(LfdaError::Shape(format!("write_png: expected 3 channels, got {c}")));
    }
    let d = image.data();
    let mut bytes = vec![0u8; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                bytes[(y * w + x) * 3 + ch] = (d[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    let file = File::create(path).map_err(|e| LfdaError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| LfdaError::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

/// Read an 8-bit RGB PNG into [3, H, W] with values k/255.
pub fn read_png(path: &Path) -> Result<Array> {
    let file = File::open(path).map_err(|e| LfdaError::io(path, e))?;
    let fmt = |e: png::DecodingError| LfdaError::format(path, e.to_string());
    let mut reader = png::Decoder::new(BufReader::new(file)).read_info().map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| LfdaError::format(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(fmt)?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(LfdaError::format(path, "expected 8-bit RGB"));
    }
    let (h, w) = (info.height as usize, info.width as usize);
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                out[(ch * h + y) * w + x] = buf[y * info.line_size + x * 3 + ch] as f64 / 255.0;
            }
        }
    }
    Ok(Array::from_vec(&[3, h, w], out)?)
}

/// `LFDADPT1`, domain u8, seed u64, height u32, width u32, then f32 depth,
/// all little-endian.
pub fn write_depth(path: &Path, depth: &Array, domain: Domain, seed: u64) -> Result<()> {
    let (h, w) = match depth.shape() {
        [1, h, w] => (*h, *w),
        s => return Err(LfdaError::Shape(format!("write_depth: expected [1,H,W], got {s:?}"))),
    };
    let mut buf = Vec::with_capacity(25 + 4 * h * w);
    buf.extend_from_slice(DEPTH_MAGIC);
    buf.push(domain.code());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in depth.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| LfdaError::io(path, e))
}

pub fn read_depth(path: &Path) -> Result<(Array, Domain, u64)> {
    let bytes = fs::read(path).map_err(|e| LfdaError::io(path, e))?;
    let bad = |m: &str| LfdaError::format(path, m);
    if bytes.len() < 25 || &bytes[..8] != DEPTH_MAGIC {
        return Err(bad("not a depth file"));
    }
    let domain = match bytes[8] {
        0 => Domain::Source,
        1 => Domain::Target,
        _ => return Err(bad("unknown domain tag")),
    };
    let seed = u64::from_le_bytes(bytes[9..17].try_into().expect("8 bytes"));
    let h = u32::from_le_bytes(bytes[17..21].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[21..25].try_into().expect("4 bytes")) as usize;
    let expected = h.checked_mul(w).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(25));
    if expected != Some(bytes.len()) || h == 0 || w == 0 {
        return Err(bad("depth payload does not match its header"));
    }
    let data = bytes[25..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((Array::from_vec(&[1, h, w], data)?, domain, seed))
}

fn sample_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("{index}.left.png")),
        dir.join(format!("{index}.right.png")),
        dir.join(format!("{index}.depth.f32")),
    )
}

pub fn write_sample(dir: &Path, index: usize, sample: &SceneSample) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LfdaError::io(dir, e))?;
    let (l, r, d) = sample_paths(dir, index);
    write_png(&l, &sample.left)?;
    write_png(&r, &sample.right)?;
    write_depth(&d, &sample.depth, sample.domain, sample.seed)
}

pub fn read_sample(dir: &Path, index: usize) -> Result<SceneSample> {
    let (l, r, d) = sample_paths(dir, index);
    let left = read_png(&l)?;
    let right = read_png(&r)?;
    let (depth, domain, seed) = read_depth(&d)?;
    if left.shape() != right.shape() || left.shape()[1..] != depth.shape()[1..] {
        return Err(LfdaError::format(&d, "image and depth sizes disagree"));
    }
    Ok(SceneSample {
        left,
        right,
        depth,
        domain,
        seed,
    })
}

pub fn split_dir(root: &Path, domain: Domain, split: Split) -> PathBuf {
    root.join(domain.name()).join(split.name())
}

pub fn read_split(root: &Path, domain: Domain, split: Split) -> Result<Vec<SceneSample>> {
    let manifest = DatasetManifest::read(root)?;
    let count = manifest.count(domain, split);
    let dir = split_dir(root, domain, split);
    if !dir.is_dir() {
        return Err(LfdaError::io(&dir, std::io::Error::new(std::io::ErrorKind::NotFound, "split missing")));
    }
    (0..count).map(|i| read_sample(&dir, i)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub config: DataConfig,
    /// (domain, split, count)
    pub counts: Vec<(Domain, Split, usize)>,
}

impl DatasetManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn count(&self, domain: Domain, split: Split) -> usize {
        self.counts
            .iter()
            .find(|(d, s, _)| *d == domain && *s == split)
            .map_or(0, |c| c.2)
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| LfdaError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| LfdaError::format(&path, e.to_string()))
    }
}

/// Generate every split of both domains under `root`.
pub fn write_dataset(root: &Path, config: &DataConfig) -> Result<DatasetManifest> {
    config.validate()?;
    let mut counts = Vec::new();
    for domain in [Domain::Source, Domain::Target] {
        for split in Split::ALL {
            let dir = split_dir(root, domain, split);
            fs::create_dir_all(&dir).map_err(|e| LfdaError::io(&dir, e))?;
            for i in 0..config.count(split) {
                let sample = gen_scene(sample_seed(config.seed, domain, split, i), domain, config)?;
                write_sample(&dir, i, &sample)?;
            }
            counts.push((domain, split, config.count(split)));
        }
    }
    let manifest = DatasetManifest {
        config_hash: config.hash(),
        config: config.clone(),
        counts,
    };
    let path = root.join(DatasetManifest::FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable");
    fs::write(&path, text).map_err(|e| LfdaError::io(&path, e))?;
    Ok(manifest)
}
