//! Procedural datasets with exact ground truth.
//!
//! Four families echo technical segmentation domains: `blobs` (polyp-like
//! rounded regions), `ribs` (thin parallel bands), `cracks` (thin random walks)
//! and `patches` (irregular corrosion-like regions). A fifth family, `shapes`,
//! holds generic coloured shapes and is used to pretrain the fixture decoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::finetune::{LabeledExample, Origin};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, ImageRgb};

pub const FAMILIES: [&str; 4] = ["blobs", "ribs", "cracks", "patches"];
pub const PRETRAIN_FAMILY: &str = "shapes";
pub const DEFAULT_IMAGE_SIZE: usize = 128;

/// Largest foreground fraction a generated mask may have.
pub const MAX_COVERAGE: f64 = 0.6;

/// Every mask covers at least half of one cell of this size, so any example
/// can serve as a matcher reference.
const REFERENCE_STRIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub family: String,
    pub n: usize,
    pub size: usize,
}

impl DatasetSpec {
    pub fn new(family: impl Into<String>, n: usize) -> Self {
        Self { family: family.into(), n, size: DEFAULT_IMAGE_SIZE }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.size = size;
        self
    }
}

type Rgb = [f32; 3];

struct Canvas {
    size: usize,
    pixels: Vec<Rgb>,
    mask: Vec<bool>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self { size, pixels: vec![[0.0; 3]; size * size], mask: vec![false; size * size] }
    }

    fn coverage(&self) -> f64 {
        self.mask.iter().filter(|b| **b).count() as f64 / self.mask.len() as f64
    }

    fn has_solid_cell(&self, stride: usize) -> bool {
        let cells = self.size / stride;
        (0..cells).any(|r| {
            (0..cells).any(|c| {
                let hits = (0..stride)
                    .flat_map(|dy| (0..stride).map(move |dx| (r * stride + dy) * self.size + c * stride + dx))
                    .filter(|i| self.mask[*i])
                    .count();
                2 * hits >= stride * stride
            })
        })
    }

    fn fill_background(&mut self, base: Rgb, noise: &[f32], amp: f32) {
        for (px, n) in self.pixels.iter_mut().zip(noise) {
            *px = base.map(|c| c + amp * (n - 0.5));
        }
    }

    /// Paints every pixel where `inside` holds and marks it when `label` is set.
    fn paint(&mut self, color: Rgb, texture: &[f32], amp: f32, label: bool, inside: impl Fn(f32, f32) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(x as f32 + 0.5, y as f32 + 0.5) {
                    let i = y * self.size + x;
                    let n = texture[i] - 0.5;
                    self.pixels[i] = color.map(|c| c + amp * n);
                    if label {
                        self.mask[i] = true;
                    }
                }
            }
        }
    }

    fn finish(self, id: String) -> Result<(ImageRgb, BinaryMask)> {
        let pixels = self.pixels.iter().flat_map(|p| p.map(|c| c.clamp(0.0, 1.0))).collect();
        let img = ImageRgb::new(id, self.size, self.size, pixels)?;
        let mask = BinaryMask::new(self.size, self.size, self.mask)?;
        Ok((img, mask))
    }
}

/// Bilinearly interpolated lattice noise in `[0, 1]` with `cells` lattice
/// cells per side.
fn value_noise(rng: &mut ChaCha8Rng, size: usize, cells: usize) -> Vec<f32> {
    let n = cells + 1;
    let lattice: Vec<f32> = (0..n * n).map(|_| rng.random::<f32>()).collect();
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let fy = y as f32 / size as f32 * cells as f32;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..size {
            let fx = x as f32 / size as f32 * cells as f32;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| lattice[yy.min(cells) * n + xx.min(cells)];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bottom = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Two octaves of lattice noise.
fn texture(rng: &mut ChaCha8Rng, size: usize, coarse: usize, fine: usize) -> Vec<f32> {
    let a = value_noise(rng, size, coarse);
    let b = value_noise(rng, size, fine);
    a.iter().zip(&b).map(|(a, b)| 0.6 * a + 0.4 * b).collect()
}

fn jitter(rng: &mut ChaCha8Rng, base: Rgb, amp: f32) -> Rgb {
    base.map(|c| (c + rng.random_range(-amp..=amp)).clamp(0.0, 1.0))
}

fn color_distance(a: Rgb, b: Rgb) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f32>().sqrt()
}

/// Radius function of a wobbly closed curve around the origin.
fn wobble(rng: &mut ChaCha8Rng, radius: f32, amount: f32) -> impl Fn(f32) -> f32 {
    let harmonics: Vec<(f32, f32)> =
        (2..5).map(|_| (rng.random_range(-amount..=amount), rng.random_range(0.0..std::f32::consts::TAU))).collect();
    move |theta: f32| {
        radius * (1.0 + harmonics.iter().enumerate().map(|(k, (a, p))| a * ((k as f32 + 2.0) * theta + p).sin()).sum::<f32>())
    }
}

fn blob_inside(cx: f32, cy: f32, r: impl Fn(f32) -> f32, sx: f32, sy: f32) -> impl Fn(f32, f32) -> bool {
    move |x, y| {
        let (dx, dy) = ((x - cx) / sx, (y - cy) / sy);
        (dx * dx + dy * dy).sqrt() <= r(dy.atan2(dx))
    }
}

/// One labelled appearance (colour and texture) painted as 1–3 instances of
/// mixed geometry, plus up to two unlabelled distractors of other colours.
fn gen_shapes(rng: &mut ChaCha8Rng, s: usize) -> Canvas {
    let mut c = Canvas::new(s);
    let bg = [rng.random(), rng.random(), rng.random()];
    let noise = texture(rng, s, 4, 16);
    c.fill_background(bg, &noise, rng.random_range(0.05..0.3));
    let target = pick_color(rng, &[bg]);
    let distractors: Vec<Rgb> = (0..rng.random_range(0..=2)).map(|_| pick_color(rng, &[bg, target])).collect();
    let mut layers: Vec<(Rgb, bool)> = distractors.into_iter().map(|col| (col, false)).collect();
    layers.extend((0..rng.random_range(1..=3)).map(|_| (target, true)));
    layers.shuffle(rng);
    let amp = rng.random_range(0.0..0.25);
    let target_tex = texture(rng, s, 3, 12);
    for (color, label) in layers {
        let tex = if label { target_tex.clone() } else { texture(rng, s, 3, 12) };
        let inside = random_shape(rng, s as f32);
        c.paint(color, &tex, amp, label, inside);
    }
    c
}

fn pick_color(rng: &mut ChaCha8Rng, avoid: &[Rgb]) -> Rgb {
    loop {
        let col: Rgb = [rng.random(), rng.random(), rng.random()];
        if avoid.iter().all(|a| color_distance(col, *a) > 0.3) {
            return col;
        }
    }
}

fn random_shape(rng: &mut ChaCha8Rng, sf: f32) -> Box<dyn Fn(f32, f32) -> bool> {
    let cx = rng.random_range(0.15..0.85) * sf;
    let cy = rng.random_range(0.15..0.85) * sf;
    let rx = rng.random_range(0.06..0.2) * sf;
    let ry = rng.random_range(0.06..0.2) * sf;
    match rng.random_range(0..5) {
        0 => Box::new(move |x, y| ((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2) <= 1.0),
        1 => Box::new(move |x, y| (x - cx).abs() <= rx && (y - cy).abs() <= ry),
        2 => Box::new(blob_inside(cx, cy, wobble(rng, 1.0, 0.25), rx, ry)),
        3 => {
            // A gently curved band across the image.
            let half = rng.random_range(2.5..6.0);
            let (amp, period, phase) =
                (rng.random_range(0.0..0.1) * sf, rng.random_range(1.0..2.5) * sf, rng.random_range(0.0..std::f32::consts::TAU));
            let tilt = rng.random_range(-0.4..0.4);
            let vertical = rng.random_bool(0.5);
            Box::new(move |x, y| {
                let (u, v, c) = if vertical { (y, x, cx) } else { (x, y, cy) };
                let centre = c + tilt * (u - sf / 2.0) + amp * (std::f32::consts::TAU * u / period + phase).sin();
                (v - centre).abs() <= half
            })
        }
        _ => {
            // A thick segment.
            let half = rng.random_range(3.0..6.0);
            let angle = rng.random_range(0.0..std::f32::consts::PI);
            let len = rng.random_range(0.2..0.45) * sf;
            let (dx, dy) = (angle.cos(), angle.sin());
            Box::new(move |x, y| {
                let (px, py) = (x - cx, y - cy);
                let along = px * dx + py * dy;
                let across = -px * dy + py * dx;
                along.abs() <= len && across.abs() <= half
            })
        }
    }
}

fn gen_blobs(rng: &mut ChaCha8Rng, s: usize) -> Canvas {
    let sf = s as f32;
    let mut c = Canvas::new(s);
    let bg = jitter(rng, [0.72, 0.33, 0.25], 0.08);
    let shade = texture(rng, s, 3, 10);
    c.fill_background(bg, &shade, 0.35);
    let target = jitter(rng, [0.93, 0.62, 0.58], 0.06);
    let n = if rng.random_bool(0.25) { 2 } else { 1 };
    for _ in 0..n {
        let color = target;
        let tex = texture(rng, s, 4, 14);
        let r = rng.random_range(0.1..0.2) * sf;
        let cx = rng.random_range(0.25..0.75) * sf;
        let cy = rng.random_range(0.25..0.75) * sf;
        let aspect = rng.random_range(0.75..1.3);
        let radius = wobble(rng, r, 0.12);
        c.paint(color, &tex, 0.25, true, blob_inside(cx, cy, radius, aspect, 1.0));
    }
    c
}

fn gen_ribs(rng: &mut ChaCha8Rng, s: usize) -> Canvas {
    let sf = s as f32;
    let mut c = Canvas::new(s);
    let bg = jitter(rng, [0.16, 0.16, 0.19], 0.04);
    let noise = texture(rng, s, 4, 20);
    c.fill_background(bg, &noise, 0.2);
    let color = jitter(rng, [0.78, 0.8, 0.82], 0.05);
    let n = rng.random_range(3..=5);
    let spacing = sf / (n as f32 + 1.0);
    let period = rng.random_range(1.2..2.5) * sf;
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let amp = rng.random_range(0.04..0.1) * sf;
    let tilt = rng.random_range(-0.2..0.2);
    let tex = texture(rng, s, 6, 24);
    for k in 0..n {
        let y0 = spacing * (k as f32 + 1.0);
        let half = rng.random_range(5.0..7.0);
        c.paint(color, &tex, 0.2, true, move |x, y| {
            let centre = y0 + tilt * (x - sf / 2.0) + amp * (std::f32::consts::TAU * x / period + phase).sin();
            (y - centre).abs() <= half
        });
    }
    c
}

fn gen_cracks(rng: &mut ChaCha8Rng, s: usize) -> Canvas {
    let sf = s as f32;
    let mut c = Canvas::new(s);
    let bg = jitter(rng, [0.68, 0.67, 0.63], 0.05);
    let noise = texture(rng, s, 8, 32);
    c.fill_background(bg, &noise, 0.3);
    let color = jitter(rng, [0.18, 0.17, 0.16], 0.04);
    let tex = texture(rng, s, 8, 32);
    let path: Vec<_> = (0..rng.random_range(1..=2)).flat_map(|_| walk(rng, sf)).collect();
    c.paint(color, &tex, 0.15, true, |x, y| {
        path.iter().any(|(px, py, w)| (x - px).powi(2) + (y - py).powi(2) <= w * w)
    });
    c
}

/// A random walk entering from the top or left edge, as `(x, y, half width)` stamps.
fn walk(rng: &mut ChaCha8Rng, sf: f32) -> Vec<(f32, f32, f32)> {
    let mut path = Vec::new();
    let (mut x, mut y) = (rng.random_range(0.1..0.9) * sf, 0.0f32);
    let mut heading = std::f32::consts::FRAC_PI_2 + rng.random_range(-0.4..0.4);
    let horizontal = rng.random_bool(0.5);
    if horizontal {
        (x, y) = (0.0, rng.random_range(0.1..0.9) * sf);
        heading = rng.random_range(-0.4..0.4);
    }
    let width = rng.random_range(6.5..7.5);
    while (0.0..sf).contains(&x) && (0.0..sf).contains(&y) {
        path.push((x, y, width));
        heading += rng.random_range(-0.35..0.35);
        let base = if horizontal { 0.0 } else { std::f32::consts::FRAC_PI_2 };
        heading = base + (heading - base).clamp(-0.9, 0.9);
        x += heading.cos() * 1.5;
        y += heading.sin() * 1.5;
    }
    path
}

fn gen_patches(rng: &mut ChaCha8Rng, s: usize) -> Canvas {
    let sf = s as f32;
    let mut c = Canvas::new(s);
    let bg = jitter(rng, [0.46, 0.5, 0.58], 0.05);
    let noise = texture(rng, s, 5, 24);
    c.fill_background(bg, &noise, 0.15);
    let color = jitter(rng, [0.58, 0.32, 0.12], 0.05);
    let field = value_noise(rng, s, 6);
    let n = rng.random_range(1..=3);
    let regions: Vec<(f32, f32, f32)> = (0..n)
        .map(|_| (rng.random_range(0.2..0.8) * sf, rng.random_range(0.2..0.8) * sf, rng.random_range(0.16..0.3) * sf))
        .collect();
    let tex = texture(rng, s, 6, 28);
    c.paint(color, &tex, 0.35, true, |x, y| {
        let i = (y as usize) * s + x as usize;
        regions.iter().any(|(cx, cy, r)| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() / r;
            d + 0.8 * (field[i] - 0.5) <= 1.0
        })
    });
    c
}

fn example_rng(family: &str, seed: u64, index: usize, attempt: u32) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(family.as_bytes());
    h.update(seed.to_le_bytes());
    h.update((index as u64).to_le_bytes());
    h.update(attempt.to_le_bytes());
    let d = h.finalize();
    ChaCha8Rng::seed_from_u64(u64::from_le_bytes(d[..8].try_into().expect("8 bytes")))
}

fn generator(family: &str) -> Result<fn(&mut ChaCha8Rng, usize) -> Canvas> {
    Ok(match family {
        "shapes" => gen_shapes,
        "blobs" => gen_blobs,
        "ribs" => gen_ribs,
        "cracks" => gen_cracks,
        "patches" => gen_patches,
        other => {
            return Err(Error::Spec(format!(
                "unknown family `{other}`; expected one of {}, {PRETRAIN_FAMILY}",
                FAMILIES.join(", ")
            )))
        }
    })
}

/// `spec.n` examples of one family; identical for identical `(spec, seed)`,
/// and example `i` does not depend on `spec.n`.
pub fn make_synthetic_dataset(spec: &DatasetSpec, seed: u64) -> Result<Vec<LabeledExample>> {
    let gen = generator(&spec.family)?;
    if spec.size < crate::image::MIN_SIDE || spec.size % 8 != 0 {
        return Err(Error::Spec(format!("image size {} must be a multiple of 8 and at least 32", spec.size)));
    }
    (0..spec.n)
        .map(|i| {
            let mut attempt = 0u32;
            let canvas = loop {
                let c = gen(&mut example_rng(&spec.family, seed, i, attempt), spec.size);
                let cov = c.coverage();
                if cov > 0.0 && cov < MAX_COVERAGE && c.has_solid_cell(REFERENCE_STRIDE) {
                    break c;
                }
                attempt += 1;
            };
            let (image, gt_mask) = canvas.finish(format!("{}-{seed}-{i}", spec.family))?;
            Ok(LabeledExample { image, gt_mask, origin: Origin::Synthetic, prompts: None })
        })
        .collect()
}
