//! Deterministic synthetic RGB-X datasets: layered primitive scenes, a
//! modality renderer per sensor, training augmentation, sensor degradations,
//! a joint multi-dataset sampler and a lossless on-disk cache.

use std::f32::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::error::{config, validation, Error, Result};
use crate::labels::{LabelSpace, IGNORE};
use crate::modality::Modality;

pub const SIZE: usize = 64;

/// Dense float image, row-major `H × W × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        Self { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_fn(height: usize, width: usize, channels: usize, f: impl Fn(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    fn clamped(&self, y: isize, x: isize, c: usize) -> f32 {
        let y = y.clamp(0, self.height as isize - 1) as usize;
        let x = x.clamp(0, self.width as isize - 1) as usize;
        self.at(y, x, c)
    }

    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Snaps every value to the nearest `k/255` in `[0, 1]`.
    pub fn quantized(&self) -> Self {
        self.map(|v| to_unit(to_byte(v)))
    }

    pub fn luminance(&self) -> Image {
        assert_eq!(self.channels, 3);
        Image::from_fn(self.height, self.width, 1, |y, x, _| 0.299 * self.at(y, x, 0) + 0.587 * self.at(y, x, 1) + 0.114 * self.at(y, x, 2))
    }

    /// `C × H × W` values, channel-major.
    pub fn to_chw(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for y in 0..self.height {
                for x in 0..self.width {
                    out.push(self.at(y, x, c));
                }
            }
        }
        out
    }
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn to_unit(b: u8) -> f32 {
    b as f32 / 255.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Rect { x0: f32, y0: f32, x1: f32, y1: f32 },
    Disk { cx: f32, cy: f32, r: f32 },
    /// Full-width horizontal band.
    Stripe { y0: f32, y1: f32 },
}

impl Shape {
    /// Containment of the point `(x, y)` in pixel units.
    pub fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) < r * r,
            Shape::Stripe { y0, y1 } => y >= y0 && y < y1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    /// Unified class id.
    pub class: u8,
    pub color: [f32; 3],
    pub temperature: f32,
    pub pol_angle: f32,
    pub pol_degree: f32,
}

/// Background plus primitives; later primitives occlude earlier ones and sit
/// one depth layer closer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub size: usize,
    pub background: Primitive,
    pub primitives: Vec<Primitive>,
}

/// Per-class appearance.
#[derive(Clone, Copy, Debug)]
pub struct ClassProfile {
    pub color: [f32; 3],
    pub temperature: f32,
    pub pol_angle: f32,
    pub pol_degree: f32,
}

pub fn class_profile(name: &str) -> ClassProfile {
    let (color, temperature, pol_angle, pol_degree) = match name {
        "background" => ([0.5, 0.5, 0.5], 0.2, 0.0, 0.05),
        "road" => ([0.2, 0.2, 0.2], 0.45, 0.3, 0.2),
        "car" => ([0.1, 0.2, 0.8], 0.7, 0.8, 0.6),
        "building" => ([0.6, 0.3, 0.2], 0.4, 1.2, 0.15),
        "person" => ([0.9, 0.2, 0.5], 0.9, 0.5, 0.1),
        "bicycle" => ([0.9, 0.9, 0.1], 0.6, 2.0, 0.4),
        "wall" => ([0.8, 0.8, 0.7], 0.35, 1.6, 0.1),
        "vegetation" => ([0.1, 0.6, 0.1], 0.3, 0.9, 0.05),
        "chair" => ([0.9, 0.5, 0.1], 0.5, 2.4, 0.3),
        "table" => ([0.5, 0.2, 0.6], 0.55, 2.8, 0.35),
        "glass" => ([0.5, 0.8, 0.9], 0.25, 0.0, 0.9),
        "pole" => ([0.8, 0.1, 0.1], 0.5, 1.9, 0.25),
        "sky" => ([0.4, 0.6, 1.0], 0.05, 0.0, 0.0),
        _ => ([0.3, 0.7, 0.7], 0.5, 1.0, 0.2),
    };
    ClassProfile { color, temperature, pol_angle, pol_degree }
}

/// One synthetic dataset: a modality and its class list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub modality: Modality,
    pub classes: Vec<String>,
}

pub fn default_datasets() -> Vec<DatasetSpec> {
    let ds = |name: &str, modality, classes: &[&str]| DatasetSpec {
        name: name.into(),
        modality,
        classes: classes.iter().map(|c| c.to_string()).collect(),
    };
    vec![
        ds("deliver", Modality::Event, &["background", "road", "car", "building", "person"]),
        ds("mfnet", Modality::Thermal, &["background", "road", "car", "person", "bicycle"]),
        ds("nyu", Modality::Depth, &["background", "road", "wall", "chair", "table"]),
        ds("rgbp", Modality::Polarization, &["background", "road", "car", "building", "glass"]),
        ds("urbanlf", Modality::Lightfield, &["background", "road", "building", "vegetation", "pole", "sky"]),
    ]
}

pub fn label_space(datasets: &[DatasetSpec]) -> Result<LabelSpace> {
    let lists: Vec<(String, Vec<String>)> = datasets.iter().map(|d| (d.name.clone(), d.classes.clone())).collect();
    crate::labels::build_unified_space(&lists)
}

fn jittered(rng: &mut ChaCha8Rng, p: &ClassProfile, amount: f32) -> [f32; 3] {
    let mut c = p.color;
    for v in &mut c {
        *v = (*v + rng.random_range(-amount..=amount)).clamp(0.0, 1.0);
    }
    c
}

fn sample_shape(rng: &mut ChaCha8Rng, class: &str, s: f32) -> Shape {
    let mut r = |a: f32, b: f32| rng.random_range(a..b) * s;
    match class {
        "road" => Shape::Stripe { y0: r(0.6, 0.8), y1: s },
        "sky" => Shape::Stripe { y0: 0.0, y1: r(0.15, 0.3) },
        "building" => {
            let (w, x0) = (r(0.25, 0.45), r(0.0, 0.6));
            Shape::Rect { x0, y0: r(0.05, 0.3), x1: x0 + w, y1: r(0.55, 0.75) }
        }
        "wall" => Shape::Rect { x0: r(0.0, 0.3), y0: r(0.0, 0.2), x1: r(0.6, 1.0), y1: r(0.4, 0.6) },
        "vegetation" => Shape::Disk { cx: r(0.15, 0.85), cy: r(0.2, 0.6), r: r(0.12, 0.2) },
        "bicycle" => Shape::Disk { cx: r(0.15, 0.85), cy: r(0.45, 0.8), r: r(0.08, 0.13) },
        _ => {
            let (w, h) = match class {
                "car" => (r(0.25, 0.4), r(0.12, 0.2)),
                "person" => (r(0.08, 0.14), r(0.25, 0.4)),
                "pole" => (r(0.04, 0.06), r(0.4, 0.6)),
                "chair" => (r(0.12, 0.2), r(0.15, 0.25)),
                "table" => (r(0.3, 0.45), r(0.1, 0.16)),
                "glass" => (r(0.2, 0.3), r(0.2, 0.3)),
                _ => (r(0.15, 0.3), r(0.15, 0.3)),
            };
            let x0 = r(0.0, 1.0) * (1.0 - w / s);
            let y0 = r(0.1, 0.95) * (1.0 - h / s);
            Shape::Rect { x0, y0, x1: x0 + w, y1: y0 + h }
        }
    }
}

/// Draw order puts large structures first so small objects stay visible.
fn draw_rank(class: &str) -> u8 {
    match class {
        "sky" => 0,
        "road" => 1,
        "wall" | "building" => 2,
        "vegetation" | "glass" => 3,
        _ => 4,
    }
}

/// Random scene using the dataset's classes; the first class is the background.
pub fn generate_scene(dataset: &DatasetSpec, space: &LabelSpace, seed: u64) -> Result<SceneSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uid = |name: &str| space.id(name).map(|i| i as u8).ok_or_else(|| Error::Data(format!("class `{name}` not in label space")));
    let make = |rng: &mut ChaCha8Rng, name: &str, shape: Shape| -> Result<Primitive> {
        let p = class_profile(name);
        Ok(Primitive {
            shape,
            class: uid(name)?,
            color: jittered(rng, &p, 0.06),
            temperature: (p.temperature + rng.random_range(-0.05..=0.05f32)).clamp(0.0, 1.0),
            pol_angle: p.pol_angle + rng.random_range(-0.1..=0.1f32),
            pol_degree: p.pol_degree,
        })
    };
    let s = SIZE as f32;
    let bg_name = &dataset.classes[0];
    let background = make(&mut rng, bg_name, Shape::Rect { x0: 0.0, y0: 0.0, x1: s, y1: s })?;
    let mut chosen: Vec<&String> = dataset.classes[1..].iter().filter(|_| rng.random_bool(0.7)).collect();
    if chosen.len() < 2 {
        chosen = dataset.classes[1..].iter().collect();
        let keep = rng.random_range(0..chosen.len());
        let other = (keep + 1 + rng.random_range(0..chosen.len() - 1)) % chosen.len();
        chosen = vec![chosen[keep], chosen[other]];
    }
    chosen.sort_by_key(|c| draw_rank(c));
    let mut primitives = Vec::new();
    for name in chosen {
        let instances = if draw_rank(name) >= 3 && rng.random_bool(0.3) { 2 } else { 1 };
        for _ in 0..instances {
            let shape = sample_shape(&mut rng, name, s);
            primitives.push(make(&mut rng, name, shape)?);
        }
    }
    Ok(SceneSpec { seed, size: SIZE, background, primitives })
}

/// RGB, unified labels, and per-pixel index of the visible primitive
/// (0 = background, `i + 1` = `primitives[i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub rgb: Image,
    pub labels: Vec<u8>,
    pub owner: Vec<usize>,
}

pub fn render_scene(spec: &SceneSpec) -> Rendered {
    let n = spec.size;
    let mut owner = vec![0usize; n * n];
    for (i, p) in spec.primitives.iter().enumerate() {
        for y in 0..n {
            for x in 0..n {
                if p.shape.contains(x as f32 + 0.5, y as f32 + 0.5) {
                    owner[y * n + x] = i + 1;
                }
            }
        }
    }
    let prim = |o: usize| if o == 0 { &spec.background } else { &spec.primitives[o - 1] };
    let rgb = Image::from_fn(n, n, 3, |y, x, c| prim(owner[y * n + x]).color[c]).quantized();
    let labels = owner.iter().map(|&o| prim(o).class).collect();
    Rendered { rgb, labels, owner }
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 1e-3 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f32> = (-r..=r).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with edge clamping; `horizontal_only` skips the vertical pass.
fn convolve(img: &Image, k: &[f32], horizontal_only: bool) -> Image {
    let r = (k.len() / 2) as isize;
    let h = Image::from_fn(img.height, img.width, img.channels, |y, x, c| {
        k.iter().enumerate().map(|(i, w)| w * img.clamped(y as isize, x as isize + i as isize - r, c)).sum()
    });
    if horizontal_only {
        return h;
    }
    Image::from_fn(img.height, img.width, img.channels, |y, x, c| {
        k.iter().enumerate().map(|(i, w)| w * h.clamped(y as isize + i as isize - r, x as isize, c)).sum()
    })
}

pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.clone();
    }
    convolve(img, &k, false)
}

/// Central-difference gradient magnitude of the luminance.
pub fn edge_map(rgb: &Image) -> Image {
    let l = rgb.luminance();
    Image::from_fn(l.height, l.width, 1, |y, x, _| {
        let (y, x) = (y as isize, x as isize);
        let gx = l.clamped(y, x + 1, 0) - l.clamped(y, x - 1, 0);
        let gy = l.clamped(y + 1, x, 0) - l.clamped(y - 1, x, 0);
        (gx * gx + gy * gy).sqrt()
    })
}

pub const EVENT_THRESHOLD: f32 = 0.05;

/// Sensor image for `modality`, unquantised. `seed` drives thermal noise.
pub fn derive_modality(rendered: &Rendered, spec: &SceneSpec, modality: Modality, seed: u64) -> Image {
    let n = rendered.rgb.height;
    let prim = |y: usize, x: usize| {
        let o = rendered.owner[y * n + x];
        if o == 0 {
            &spec.background
        } else {
            &spec.primitives[o - 1]
        }
    };
    match modality {
        Modality::Event => {
            let l = rendered.rgb.luminance();
            Image::from_fn(n, n, 2, |y, x, c| {
                let (yi, xi) = (y as isize, x as isize);
                let g = (l.clamped(yi, xi + 1, 0) - l.clamped(yi, xi - 1, 0)) + (l.clamped(yi + 1, xi, 0) - l.clamped(yi - 1, xi, 0));
                let fire = if c == 0 { g > EVENT_THRESHOLD } else { g < -EVENT_THRESHOLD };
                if fire { 1.0 } else { 0.0 }
            })
        }
        Modality::Thermal => {
            let base = Image::from_fn(n, n, 1, |y, x, _| prim(y, x).temperature);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0f32, 0.02).unwrap();
            gaussian_blur(&base, 1.0).map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0))
        }
        Modality::Depth => {
            let layers = spec.primitives.len() + 1;
            Image::from_fn(n, n, 1, |y, x, _| 1.0 - rendered.owner[y * n + x] as f32 / layers as f32)
        }
        Modality::Polarization => {
            let l = rendered.rgb.luminance();
            Image::from_fn(n, n, 4, |y, x, c| {
                let p = prim(y, x);
                let theta = c as f32 * PI / 4.0;
                l.at(y, x, 0) / 2.0 * (1.0 + p.pol_degree * (2.0 * (theta - p.pol_angle)).cos())
            })
        }
        Modality::Lightfield => {
            let rgb = &rendered.rgb;
            Image::from_fn(n, n, 3, |y, x, c| {
                let shift = 0.35 * rendered.owner[y * n + x] as f32;
                let sx = x as f32 + shift;
                let x0 = sx.floor();
                let t = sx - x0;
                let a = rgb.clamped(y as isize, x0 as isize, c);
                let b = rgb.clamped(y as isize, x0 as isize + 1, c);
                a * (1.0 - t) + b * t
            })
        }
    }
}

/// Fixed 3-channel view of a modality image for the encoders.
pub fn to_three_channels(img: &Image, modality: Modality) -> Result<Image> {
    if img.channels != modality.channels() {
        return validation(format!("{modality} image has {} channels, expected {}", img.channels, modality.channels()));
    }
    Ok(match modality {
        Modality::Event => Image::from_fn(img.height, img.width, 3, |y, x, c| if c < 2 { img.at(y, x, c) } else { 0.0 }),
        Modality::Thermal | Modality::Depth => Image::from_fn(img.height, img.width, 3, |y, x, _| img.at(y, x, 0)),
        Modality::Polarization => Image::from_fn(img.height, img.width, 3, |y, x, c| img.at(y, x, c)),
        Modality::Lightfield => img.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSample {
    pub rgb: Image,
    pub modality_image: Image,
    pub modality: Modality,
    pub dataset: String,
    /// Unified ids, [`IGNORE`] allowed.
    pub labels: Vec<u8>,
    pub caption: String,
}

impl MultiModalSample {
    pub fn size(&self) -> (usize, usize) {
        (self.rgb.height, self.rgb.width)
    }
}

/// `"a scene containing road, car"` from the classes present in `labels`.
pub fn caption_for(labels: &[u8], space: &LabelSpace) -> String {
    let mut present: Vec<u8> = labels.iter().copied().filter(|&l| l != IGNORE).collect();
    present.sort_unstable();
    present.dedup();
    let names: Vec<&str> = present.iter().map(|&l| space.names()[l as usize].as_str()).collect();
    format!("a scene containing {}", names.join(", "))
}

pub fn make_sample(dataset: &DatasetSpec, space: &LabelSpace, seed: u64) -> Result<MultiModalSample> {
    let spec = generate_scene(dataset, space, seed)?;
    let r = render_scene(&spec);
    let modality_image = derive_modality(&r, &spec, dataset.modality, seed ^ 0x9e37_79b9_7f4a_7c15).quantized();
    Ok(MultiModalSample {
        caption: caption_for(&r.labels, space),
        rgb: r.rgb,
        modality_image,
        modality: dataset.modality,
        dataset: dataset.name.clone(),
        labels: r.labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(base: u64, dataset_index: usize, split: Split, index: usize) -> u64 {
    let split = match split {
        Split::Train => 0u64,
        Split::Eval => 1,
    };
    splitmix(splitmix(base ^ ((dataset_index as u64) << 40) ^ (split << 32)) ^ index as u64)
}

pub fn generate_split(dataset: &DatasetSpec, dataset_index: usize, space: &LabelSpace, split: Split, count: usize, base_seed: u64) -> Result<Vec<MultiModalSample>> {
    (0..count).map(|i| make_sample(dataset, space, sample_seed(base_seed, dataset_index, split, i))).collect()
}

fn resize_bilinear(img: &Image, oh: usize, ow: usize) -> Image {
    let src = |o: usize, n_in: usize, n_out: usize| ((o as f32 + 0.5) * n_in as f32 / n_out as f32 - 0.5).clamp(0.0, n_in as f32 - 1.0);
    Image::from_fn(oh, ow, img.channels, |y, x, c| {
        let (sy, sx) = (src(y, img.height, oh), src(x, img.width, ow));
        let (y0, x0) = (sy.floor() as isize, sx.floor() as isize);
        let (ty, tx) = (sy - y0 as f32, sx - x0 as f32);
        let p = |dy: isize, dx: isize| img.clamped(y0 + dy, x0 + dx, c);
        (p(0, 0) * (1.0 - tx) + p(0, 1) * tx) * (1.0 - ty) + (p(1, 0) * (1.0 - tx) + p(1, 1) * tx) * ty
    })
}

fn resize_nearest(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = (((y as f32 + 0.5) * h as f32 / oh as f32) as usize).min(h - 1);
        for x in 0..ow {
            let sx = (((x as f32 + 0.5) * w as f32 / ow as f32) as usize).min(w - 1);
            out.push(labels[sy * w + sx]);
        }
    }
    out
}

fn flip_image(img: &Image) -> Image {
    Image::from_fn(img.height, img.width, img.channels, |y, x, c| img.at(y, img.width - 1 - x, c))
}

fn flip_labels(labels: &[u8], w: usize) -> Vec<u8> {
    labels.chunks(w).flat_map(|row| row.iter().rev().copied()).collect()
}

pub fn hflip(s: &MultiModalSample) -> MultiModalSample {
    MultiModalSample {
        rgb: flip_image(&s.rgb),
        modality_image: flip_image(&s.modality_image),
        labels: flip_labels(&s.labels, s.rgb.width),
        ..s.clone()
    }
}

/// Window `[top, top+out) × [left, left+out)` of a possibly smaller image;
/// outside pixels are 0 (images) or ignore (labels).
fn crop_or_pad(s: &MultiModalSample, top: isize, left: isize, out: usize) -> MultiModalSample {
    let (h, w) = s.size();
    let inside = |y: usize, x: usize| {
        let (sy, sx) = (y as isize + top, x as isize + left);
        (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w).then_some((sy as usize, sx as usize))
    };
    let crop = |img: &Image| Image::from_fn(out, out, img.channels, |y, x, c| inside(y, x).map_or(0.0, |(sy, sx)| img.at(sy, sx, c)));
    let mut labels = Vec::with_capacity(out * out);
    for y in 0..out {
        for x in 0..out {
            labels.push(inside(y, x).map_or(IGNORE, |(sy, sx)| s.labels[sy * w + sx]));
        }
    }
    MultiModalSample { rgb: crop(&s.rgb), modality_image: crop(&s.modality_image), labels, ..s.clone() }
}

fn color_jitter(img: &Image, brightness: f32, contrast: f32, saturation: f32) -> Image {
    let mean = img.mean() as f32;
    let mut out = img.map(|v| ((v * brightness - mean) * contrast + mean).clamp(0.0, 1.0));
    for p in out.data.chunks_mut(3) {
        let g = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        for v in p.iter_mut() {
            *v = (g + (*v - g) * saturation).clamp(0.0, 1.0);
        }
    }
    out
}

/// Random resize, crop/pad, flip (shared by all three maps), then colour
/// jitter and blur on RGB only. Output is `SIZE × SIZE`.
pub fn augment(s: &MultiModalSample, seed: u64) -> MultiModalSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = s.size();
    let scale: f32 = rng.random_range(0.5..=2.0);
    let (oh, ow) = (((h as f32 * scale).round() as usize).max(1), ((w as f32 * scale).round() as usize).max(1));
    let resized = MultiModalSample {
        rgb: resize_bilinear(&s.rgb, oh, ow),
        modality_image: resize_bilinear(&s.modality_image, oh, ow),
        labels: resize_nearest(&s.labels, h, w, oh, ow),
        ..s.clone()
    };
    let pick = |rng: &mut ChaCha8Rng, n: usize| -> isize {
        if n >= SIZE {
            rng.random_range(0..=(n - SIZE)) as isize
        } else {
            -(rng.random_range(0..=(SIZE - n)) as isize)
        }
    };
    let top = pick(&mut rng, oh);
    let left = pick(&mut rng, ow);
    let mut out = crop_or_pad(&resized, top, left, SIZE);
    if rng.random_bool(0.5) {
        out = hflip(&out);
    }
    let b = rng.random_range(0.8..=1.2f32);
    let c = rng.random_range(0.8..=1.2f32);
    let sat = rng.random_range(0.8..=1.2f32);
    let sigma = rng.random_range(0.0..=1.0f32);
    out.rgb = gaussian_blur(&color_jitter(&out.rgb, b, c, sat), sigma);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    OverExposure,
    UnderExposure,
    MotionBlur,
    EventLowRes,
}

impl Degradation {
    pub const ALL: [Degradation; 4] = [Degradation::OverExposure, Degradation::UnderExposure, Degradation::MotionBlur, Degradation::EventLowRes];

    pub fn as_str(self) -> &'static str {
        match self {
            Degradation::OverExposure => "over_exposure",
            Degradation::UnderExposure => "under_exposure",
            Degradation::MotionBlur => "motion_blur",
            Degradation::EventLowRes => "event_low_res",
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|d| d.as_str() == s).ok_or_else(|| Error::Config(format!("unknown degradation `{s}`")))
    }
}

pub const MOTION_BLUR_WIDTH: usize = 7;

pub fn motion_blur(img: &Image) -> Image {
    convolve(img, &[1.0 / MOTION_BLUR_WIDTH as f32; MOTION_BLUR_WIDTH], true)
}

pub fn degrade(s: &MultiModalSample, kind: Degradation) -> Result<MultiModalSample> {
    let mut out = s.clone();
    match kind {
        Degradation::OverExposure => out.rgb = s.rgb.map(|v| (v * 1.5 + 0.15).min(1.0)),
        Degradation::UnderExposure => out.rgb = s.rgb.map(|v| v * 0.35),
        Degradation::MotionBlur => out.rgb = motion_blur(&s.rgb),
        Degradation::EventLowRes => {
            if s.modality != Modality::Event {
                return validation(format!("event_low_res needs an event sample, got {}", s.modality));
            }
            let m = &s.modality_image;
            out.modality_image = Image::from_fn(m.height, m.width, m.channels, |y, x, c| {
                let (y0, x0) = (y / 2 * 2, x / 2 * 2);
                let mut v = f32::INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        v = v.min(m.clamped((y0 + dy) as isize, (x0 + dx) as isize, c));
                    }
                }
                v
            });
        }
    }
    Ok(out)
}

/// Chooses one dataset per batch with probability proportional to its weight.
pub struct JointSampler {
    dist: WeightedIndex<f64>,
    sizes: Vec<usize>,
    rng: ChaCha8Rng,
}

impl JointSampler {
    pub fn new(sizes: &[usize], weights: &[f64], seed: u64) -> Result<Self> {
        if sizes.len() != weights.len() || sizes.is_empty() {
            return validation("one weight per dataset is required");
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || weights.iter().all(|w| *w == 0.0) {
            return validation(format!("dataset weights must be nonnegative and not all zero: {weights:?}"));
        }
        if let Some(i) = sizes.iter().zip(weights).position(|(&n, &w)| n == 0 && w > 0.0) {
            return Err(Error::Data(format!("dataset {i} is empty")));
        }
        let dist = WeightedIndex::new(weights).map_err(|e| Error::Validation(e.to_string()))?;
        Ok(Self { dist, sizes: sizes.to_vec(), rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_dataset(&mut self) -> usize {
        self.dist.sample(&mut self.rng)
    }

    /// `(dataset index, sample indices)`, drawn with replacement.
    pub fn next_batch(&mut self, batch: usize) -> (usize, Vec<usize>) {
        let d = self.next_dataset();
        let n = self.sizes[d];
        (d, (0..batch).map(|_| self.rng.random_range(0..n)).collect())
    }

    /// Seed for per-sample augmentation drawn from the sampler stream.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Stacks samples into `(RGB, modality as 3 channels)` tensors of shape
/// `B × 3 × H × W`, plus concatenated labels.
pub fn batch_tensors(samples: &[&MultiModalSample], dtype: DType) -> Result<(Tensor, Tensor, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Validation("empty batch".into()))?;
    let (h, w) = first.size();
    let mut rgb = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut m = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.size() != (h, w) || s.modality != first.modality {
            return validation("batch samples must share size and modality");
        }
        rgb.extend(s.rgb.to_chw());
        m.extend(to_three_channels(&s.modality_image, s.modality)?.to_chw());
        labels.extend_from_slice(&s.labels);
    }
    let b = samples.len();
    let t = |v: Vec<f32>| -> Result<Tensor> { Ok(Tensor::from_vec(v, (b, 3, h, w), &Device::Cpu)?.to_dtype(dtype)?) };
    Ok((t(rgb)?, t(m)?, labels))
}

/// Generated train and eval splits for every dataset.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub datasets: Vec<DatasetSpec>,
    pub space: LabelSpace,
    pub train: Vec<Vec<MultiModalSample>>,
    pub eval: Vec<Vec<MultiModalSample>>,
    pub seed: u64,
}

impl SynthCorpus {
    pub fn generate(datasets: Vec<DatasetSpec>, train: usize, eval: usize, seed: u64) -> Result<Self> {
        let space = label_space(&datasets)?;
        let mut tr = Vec::new();
        let mut ev = Vec::new();
        for (i, d) in datasets.iter().enumerate() {
            tr.push(generate_split(d, i, &space, Split::Train, train, seed)?);
            ev.push(generate_split(d, i, &space, Split::Eval, eval, seed)?);
        }
        Ok(Self { datasets, space, train: tr, eval: ev, seed })
    }

    pub fn index_of(&self, dataset: &str) -> Result<usize> {
        self.datasets.iter().position(|d| d.name == dataset).ok_or_else(|| Error::Data(format!("unknown dataset `{dataset}`")))
    }

    /// Loads from `root` if a matching cache exists, otherwise generates and writes it.
    pub fn cached(root: &Path, datasets: Vec<DatasetSpec>, train: usize, eval: usize, seed: u64) -> Result<Self> {
        let dir = root.join(format!("synth-s{seed}-t{train}-e{eval}"));
        if dir.join("labels.txt").exists() {
            if let Ok(c) = read_cache(&dir) {
                if c.datasets == datasets && c.train.iter().all(|t| t.len() == train) && c.eval.iter().all(|e| e.len() == eval) {
                    return Ok(c);
                }
            }
            log::warn!("ignoring stale dataset cache at {}", dir.display());
        }
        let c = Self::generate(datasets, train, eval, seed)?;
        write_cache(&c, &dir)?;
        Ok(c)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    seed: u64,
    dataset: DatasetSpec,
    train: Vec<String>,
    eval: Vec<String>,
}

const CACHE_FORMAT: &str = "rgbx-synth-v1";

fn save_png(img: &Image, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = img.data.iter().map(|&v| to_byte(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    match img.channels {
        1 => image::GrayImage::from_raw(w, h, bytes).unwrap().save(path)?,
        2 => {
            let rgb: Vec<u8> = bytes.chunks(2).flat_map(|p| [p[0], p[1], 0]).collect();
            image::RgbImage::from_raw(w, h, rgb).unwrap().save(path)?
        }
        3 => image::RgbImage::from_raw(w, h, bytes).unwrap().save(path)?,
        4 => image::RgbaImage::from_raw(w, h, bytes).unwrap().save(path)?,
        c => return validation(format!("cannot store a {c}-channel image")),
    }
    Ok(())
}

fn load_png(path: &Path, channels: usize) -> Result<Image> {
    let dynimg = image::open(path)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let raw: Vec<u8> = match channels {
        1 => dynimg.to_luma8().into_raw(),
        2 => dynimg.to_rgb8().into_raw().chunks(3).flat_map(|p| [p[0], p[1]]).collect(),
        3 => dynimg.to_rgb8().into_raw(),
        4 => dynimg.to_rgba8().into_raw(),
        c => return validation(format!("cannot load a {c}-channel image")),
    };
    Ok(Image { height: h, width: w, channels, data: raw.into_iter().map(to_unit).collect() })
}

fn save_labels(labels: &[u8], size: (usize, usize), path: &Path) -> Result<()> {
    image::GrayImage::from_raw(size.1 as u32, size.0 as u32, labels.to_vec()).unwrap().save(path)?;
    Ok(())
}

pub fn write_cache(corpus: &SynthCorpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    corpus.space.save(&dir.join("labels.txt"))?;
    for (i, d) in corpus.datasets.iter().enumerate() {
        let ddir = dir.join(&d.name);
        std::fs::create_dir_all(&ddir)?;
        let mut captions = [Vec::new(), Vec::new()];
        for (k, (split, samples)) in [("train", &corpus.train[i]), ("eval", &corpus.eval[i])].into_iter().enumerate() {
            for (j, s) in samples.iter().enumerate() {
                let stem = ddir.join(format!("{split}_{j:04}"));
                save_png(&s.rgb, &stem.with_extension("rgb.png"))?;
                save_png(&s.modality_image, &stem.with_extension("x.png"))?;
                save_labels(&s.labels, s.size(), &stem.with_extension("label.png"))?;
                captions[k].push(s.caption.clone());
            }
        }
        let [train, eval] = captions;
        let m = Manifest { format: CACHE_FORMAT.into(), seed: corpus.seed, dataset: d.clone(), train, eval };
        std::fs::write(ddir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
    }
    Ok(())
}

pub fn read_cache(dir: &Path) -> Result<SynthCorpus> {
    let space = LabelSpace::load(&dir.join("labels.txt"))?;
    let mut datasets = Vec::new();
    let mut train = Vec::new();
    let mut eval = Vec::new();
    let mut seed = 0;
    for name in space.dataset_names() {
        let ddir = dir.join(name);
        let m: Manifest = serde_json::from_str(&std::fs::read_to_string(ddir.join("manifest.json"))?)?;
        if m.format != CACHE_FORMAT {
            return Err(Error::Data(format!("unsupported cache format `{}`", m.format)));
        }
        seed = m.seed;
        let load = |split: &str, captions: &[String]| -> Result<Vec<MultiModalSample>> {
            captions
                .iter()
                .enumerate()
                .map(|(j, caption)| {
                    let stem: PathBuf = ddir.join(format!("{split}_{j:04}"));
                    let rgb = load_png(&stem.with_extension("rgb.png"), 3)?;
                    let labels = image::open(stem.with_extension("label.png"))?.to_luma8().into_raw();
                    Ok(MultiModalSample {
                        modality_image: load_png(&stem.with_extension("x.png"), m.dataset.modality.channels())?,
                        rgb,
                        modality: m.dataset.modality,
                        dataset: m.dataset.name.clone(),
                        labels,
                        caption: caption.clone(),
                    })
                })
                .collect()
        };
        train.push(load("train", &m.train)?);
        eval.push(load("eval", &m.eval)?);
        datasets.push(m.dataset);
    }
    Ok(SynthCorpus { datasets, space, train, eval, seed })
}

/// Cache root from `RGBX_CACHE_DIR`, if set.
pub fn cache_dir_from_env() -> Option<PathBuf> {
    std::env::var_os("RGBX_CACHE_DIR").map(PathBuf::from)
}

/// Rejects sizes that the stage layout cannot handle.
pub fn check_size(size: usize) -> Result<()> {
    if size != SIZE {
        return config(format!("synthetic data is rendered at {SIZE}×{SIZE}, not {size}"));
    }
    Ok(())
}
