use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};
use crate::losses::{LabelMap, IGNORE};
use crate::model::ClassId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Flat,
    Stripes { period: usize },
    Checker { period: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Circle,
    Bar,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderKind {
    Background(Texture),
    Shape(ShapeKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassRender {
    pub id: ClassId,
    pub kind: RenderKind,
    pub color: [u8; 3],
}

/// How scenes are drawn: two background bands split by a slanted boundary,
/// then a random number of shapes painted in order (later shapes occlude).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ClassRender>,
    /// Inclusive range of foreground shapes per image.
    pub shapes_per_image: (usize, usize),
    /// Inclusive range of the shape radius in pixels.
    pub shape_radius: (usize, usize),
    /// Standard deviation of additive per-channel noise, in 8-bit levels.
    pub noise_level: f64,
    /// Maximum per-shape colour jitter, in 8-bit levels.
    pub color_jitter: u8,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_classes(9)
    }
}

const TEXTURES: [Texture; 3] = [
    Texture::Stripes { period: 8 },
    Texture::Checker { period: 8 },
    Texture::Flat,
];
const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Bar, ShapeKind::Triangle];

impl SceneSpec {
    /// Every third class (ids 0, 3, 6, ...) is a background texture, the rest
    /// are shapes. Shapes spread evenly around the hue circle in id order, so
    /// hue neighbours always differ in shape kind. Backgrounds are darker and
    /// sit on their own evenly spaced hues.
    pub fn with_classes(count: usize) -> Self {
        let count = count.min(IGNORE as usize);
        let bg_total = count.div_ceil(3);
        let fg_total = (count - bg_total).max(1);
        let mut classes = Vec::with_capacity(count);
        let (mut bg, mut fg) = (0usize, 0usize);
        for id in 0..count {
            let (kind, hue, value) = if id % 3 == 0 {
                bg += 1;
                let hue = (bg as f64 - 0.5) / bg_total as f64;
                (RenderKind::Background(TEXTURES[(bg - 1) % TEXTURES.len()]), hue, 0.55)
            } else {
                fg += 1;
                let hue = (fg - 1) as f64 / fg_total as f64;
                (RenderKind::Shape(SHAPES[(fg - 1) % SHAPES.len()]), hue, 0.95)
            };
            classes.push(ClassRender {
                id: id as ClassId,
                kind,
                color: hsv_to_rgb(hue, 0.8, value),
            });
        }
        Self {
            height: 64,
            width: 64,
            classes,
            shapes_per_image: (5, 8),
            shape_radius: (7, 14),
            noise_level: 8.0,
            color_jitter: 16,
        }
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Config("scene extents must be positive".into()));
        }
        let mut ids: Vec<ClassId> = self.class_ids();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate class id in scene spec".into()));
        }
        if ids.contains(&IGNORE) {
            return Err(Error::Config(format!("class id {IGNORE} is reserved for IGNORE")));
        }
        if !self.classes.iter().any(|c| matches!(c.kind, RenderKind::Background(_))) {
            return Err(Error::Config("scene spec needs at least one background class".into()));
        }
        let (lo, hi) = self.shapes_per_image;
        let (rlo, rhi) = self.shape_radius;
        if lo > hi || rlo > rhi || rlo == 0 {
            return Err(Error::Config("empty shape count or radius range".into()));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return Err(Error::Config("noise level must be finite and nonnegative".into()));
        }
        Ok(())
    }

    pub(crate) fn render(&self, seed: u64) -> (Image, LabelMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (self.height, self.width);
        let backgrounds: Vec<&ClassRender> = self
            .classes
            .iter()
            .filter(|c| matches!(c.kind, RenderKind::Background(_)))
            .collect();
        let shapes: Vec<&ClassRender> = self
            .classes
            .iter()
            .filter(|c| matches!(c.kind, RenderKind::Shape(_)))
            .collect();

        let top = backgrounds[rng.random_range(0..backgrounds.len())];
        let bottom = if backgrounds.len() > 1 {
            let mut j = rng.random_range(0..backgrounds.len() - 1);
            if std::ptr::eq(backgrounds[j], top) {
                j = backgrounds.len() - 1;
            }
            backgrounds[j]
        } else {
            top
        };
        let boundary = rng.random_range(0.3..0.7) * h as f64;
        let slope = rng.random_range(-0.4..0.4);
        let phase = rng.random_range(0..8usize);

        let mut pixels = vec![0u8; h * w * 3];
        let mut labels = vec![0 as ClassId; h * w];
        for y in 0..h {
            for x in 0..w {
                let edge = boundary + slope * (x as f64 - w as f64 / 2.0);
                let class = if (y as f64) < edge { top } else { bottom };
                let shade = match class.kind {
                    RenderKind::Background(t) => texture_shade(t, x + phase, y),
                    RenderKind::Shape(_) => 0,
                };
                let p = y * w + x;
                labels[p] = class.id;
                for c in 0..3 {
                    pixels[p * 3 + c] = (class.color[c] as i32 + shade).clamp(0, 255) as u8;
                }
            }
        }

        if !shapes.is_empty() {
            let count = rng.random_range(self.shapes_per_image.0..=self.shapes_per_image.1);
            for _ in 0..count {
                let class = shapes[rng.random_range(0..shapes.len())];
                let RenderKind::Shape(kind) = class.kind else { unreachable!() };
                let r = rng.random_range(self.shape_radius.0..=self.shape_radius.1) as f64;
                let cy = rng.random_range(0.0..h as f64);
                let cx = rng.random_range(0.0..w as f64);
                let vertical = rng.random_bool(0.5);
                let j = self.color_jitter as i32;
                let jitter: [i32; 3] = std::array::from_fn(|_| rng.random_range(-j..=j));
                for y in 0..h {
                    for x in 0..w {
                        let dy = y as f64 + 0.5 - cy;
                        let dx = x as f64 + 0.5 - cx;
                        if !inside(kind, dx, dy, r, vertical) {
                            continue;
                        }
                        let p = y * w + x;
                        labels[p] = class.id;
                        for c in 0..3 {
                            pixels[p * 3 + c] =
                                (class.color[c] as i32 + jitter[c]).clamp(0, 255) as u8;
                        }
                    }
                }
            }
        }

        if self.noise_level > 0.0 {
            let noise = Normal::new(0.0, self.noise_level).expect("validated noise level");
            for v in &mut pixels {
                *v = (*v as f64 + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8;
            }
        }
        let image = Image {
            height: h,
            width: w,
            pixels,
        };
        let labels = LabelMap::new(h, w, labels).expect("extents match by construction");
        (image, labels)
    }
}

fn texture_shade(t: Texture, x: usize, y: usize) -> i32 {
    match t {
        Texture::Flat => 0,
        Texture::Stripes { period } => {
            if (x / period.max(1)).is_multiple_of(2) {
                35
            } else {
                -35
            }
        }
        Texture::Checker { period } => {
            let p = period.max(1);
            if (x / p + y / p).is_multiple_of(2) {
                35
            } else {
                -35
            }
        }
    }
}

fn inside(kind: ShapeKind, dx: f64, dy: f64, r: f64, vertical: bool) -> bool {
    match kind {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Bar => {
            let (along, across) = if vertical { (dy, dx) } else { (dx, dy) };
            along.abs() <= 1.4 * r && across.abs() <= 0.6 * r
        }
        ShapeKind::Triangle => {
            // apex up, base 3r wide at dy = r
            let t = (dy + r) / (2.0 * r);
            (0.0..=1.0).contains(&t) && dx.abs() <= 1.5 * r * t
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [r, g, b].map(|c| (c * 255.0).round() as u8)
}
