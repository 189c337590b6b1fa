//! Procedural scenes of flat-coloured shapes at different depths.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Circle, Shape::Square, Shape::Triangle];

    /// Index among thing classes, `0..3`.
    pub fn thing_class(self) -> usize {
        self as usize
    }

    /// Index among semantic classes, where 0 is background.
    pub fn semantic_class(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    fn hue(self) -> f64 {
        match self {
            Shape::Circle => 0.0,
            Shape::Square => 120.0,
            Shape::Triangle => 240.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneKind {
    /// 1..=max_instances shapes of any class.
    Shapes,
    /// Exactly one large triangle.
    Figure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub size: usize,
    pub max_instances: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub kind: SceneKind,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::Scene(format!("size {} not a positive multiple of 16", self.size)));
        }
        if self.max_instances == 0 {
            return Err(Error::Scene("max_instances must be at least 1".into()));
        }
        if !(self.d_min > 0.0 && self.d_min < self.d_max) {
            return Err(Error::Scene(format!("need 0 < d_min < d_max, got {} and {}", self.d_min, self.d_max)));
        }
        Ok(())
    }
}

/// Geometry of one shape in pixel units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub shape: Shape,
    pub cx: f64,
    pub cy: f64,
    /// Circumradius.
    pub radius: f64,
    pub angle: f64,
    pub depth: f64,
    pub color: [f32; 3],
}

impl ShapeSpec {
    fn vertices(&self) -> Vec<(f64, f64)> {
        let (n, r) = match self.shape {
            Shape::Circle => return vec![],
            Shape::Square => (4, self.radius),
            Shape::Triangle => (3, self.radius),
        };
        let mut v: Vec<(f64, f64)> = (0..n)
            .map(|k| {
                let a = self.angle + 2.0 * PI * k as f64 / n as f64;
                (self.cx + r * a.cos(), self.cy + r * a.sin())
            })
            .collect();
        // topmost first, then clockwise on screen (y points down)
        v.sort_by(|a, b| {
            let ta = (a.1 - self.cy).atan2(a.0 - self.cx);
            let tb = (b.1 - self.cy).atan2(b.0 - self.cx);
            ta.total_cmp(&tb)
        });
        let top = (0..n)
            .min_by(|&i, &j| v[i].1.total_cmp(&v[j].1).then(v[i].0.total_cmp(&v[j].0)))
            .unwrap();
        v.rotate_left(top);
        v
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        match self.shape {
            Shape::Circle => (x - self.cx).powi(2) + (y - self.cy).powi(2) <= self.radius * self.radius,
            _ => {
                let v = self.vertices();
                // convex, clockwise on screen: every edge cross product ≥ 0
                (0..v.len()).all(|i| {
                    let (a, b) = (v[i], v[(i + 1) % v.len()]);
                    (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0) >= 0.0
                })
            }
        }
    }

    /// Canonical points in `(x, y)` pixels: circle centre; square corners
    /// and centre; triangle vertices and centroid. Polygon corners start at
    /// the topmost and run clockwise.
    pub fn keypoints(&self) -> Vec<(f64, f64)> {
        let mut k = self.vertices();
        k.push((self.cx, self.cy));
        k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub shape: Shape,
    /// Normalised `(cx, cy, w, h)` of the visible mask.
    pub bbox: [f64; 4],
    /// Visible pixels, row-major `S×S`.
    #[serde(skip)]
    pub mask: Vec<bool>,
    pub area: usize,
    pub depth: f64,
    pub keypoints: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    /// Row-major `S×S×3` in `[0, 1]`.
    pub image: Vec<f32>,
    /// Back to front.
    pub instances: Vec<Instance>,
    /// Per-pixel depth of the topmost covering instance, else `d_max`.
    pub depth: Vec<f32>,
    /// Per-pixel index of the topmost covering instance.
    pub owner: Vec<Option<usize>>,
    pub d_min: f64,
    pub d_max: f64,
}

fn hsv(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}

const MIN_VISIBLE_AREA: usize = 24;

impl Scene {
    /// Renders `shapes` far to near over a flat background. Instances hidden
    /// entirely by nearer ones are left out of the labels.
    pub fn compose(size: usize, shapes: &[ShapeSpec], background: [f32; 3], d_min: f64, d_max: f64) -> Scene {
        let mut order: Vec<&ShapeSpec> = shapes.iter().collect();
        order.sort_by(|a, b| b.depth.total_cmp(&a.depth));
        let n = size * size;
        let mut image: Vec<f32> = (0..n).flat_map(|_| background).collect();
        let mut depth = vec![d_max as f32; n];
        let mut owner: Vec<Option<usize>> = vec![None; n];
        let mut fog = [0.0f32; 3];
        for (i, s) in order.iter().enumerate() {
            let t = ((s.depth - d_min) / (d_max - d_min)).clamp(0.0, 1.0) as f32;
            for c in 0..3 {
                fog[c] = s.color[c] * (1.0 - 0.5 * t) + background[c] * 0.5 * t;
            }
            for y in 0..size {
                for x in 0..size {
                    if s.contains(x as f64 + 0.5, y as f64 + 0.5) {
                        let p = y * size + x;
                        image[p * 3..p * 3 + 3].copy_from_slice(&fog);
                        depth[p] = s.depth as f32;
                        owner[p] = Some(i);
                    }
                }
            }
        }
        let mut instances = Vec::new();
        let mut remap = vec![None; order.len()];
        for (i, s) in order.iter().enumerate() {
            let mask: Vec<bool> = owner.iter().map(|&o| o == Some(i)).collect();
            let area = mask.iter().filter(|&&m| m).count();
            if area == 0 {
                continue;
            }
            remap[i] = Some(instances.len());
            instances.push(Instance {
                shape: s.shape,
                bbox: bbox_of(&mask, size),
                mask,
                area,
                depth: s.depth,
                keypoints: s.keypoints(),
            });
        }
        let owner = owner.into_iter().map(|o| o.and_then(|i| remap[i])).collect();
        Scene {
            size,
            image,
            instances,
            depth,
            owner,
            d_min,
            d_max,
        }
    }
}

/// Normalised `(cx, cy, w, h)` of the pixel extent of `mask`.
pub fn bbox_of(mask: &[bool], size: usize) -> [f64; 4] {
    let (mut x0, mut y0, mut x1, mut y1) = (size, size, 0, 0);
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = (p / size, p % size);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    if x1 == 0 {
        return [0.0; 4];
    }
    let s = size as f64;
    [
        (x0 + x1) as f64 / 2.0 / s,
        (y0 + y1) as f64 / 2.0 / s,
        (x1 - x0) as f64 / s,
        (y1 - y0) as f64 / s,
    ]
}

fn random_shape(rng: &mut ChaCha8Rng, cfg: &SceneConfig, shape: Shape, figure: bool) -> ShapeSpec {
    let s = cfg.size as f64;
    let span = cfg.d_max - cfg.d_min;
    let depth = if figure {
        cfg.d_min + span * rng.random_range(0.05..0.25)
    } else {
        cfg.d_min + span * rng.random_range(0.05..0.55)
    };
    // nearer is larger; radius ≈ s/16 at the far end, s/5 at the near end
    let closeness = 1.0 - (depth - cfg.d_min) / span;
    let radius = if figure {
        s * (0.22 + 0.1 * rng.random_range(0.0..1.0))
    } else {
        s * (0.06 + 0.16 * closeness) * rng.random_range(0.9..1.1)
    };
    let margin = if figure { radius } else { radius * 0.6 };
    let hue = shape.hue() + rng.random_range(-40.0..40.0);
    ShapeSpec {
        shape,
        cx: rng.random_range(margin..s - margin),
        cy: rng.random_range(margin..s - margin),
        radius,
        angle: rng.random_range(0.0..2.0 * PI),
        depth,
        color: hsv(hue, rng.random_range(0.5..0.9), rng.random_range(0.6..1.0)),
    }
}

/// Deterministic scene for `seed`.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = hsv(
        rng.random_range(0.0..360.0),
        rng.random_range(0.3..0.7),
        rng.random_range(0.25..0.55),
    );
    let mut shapes = match cfg.kind {
        SceneKind::Figure => vec![random_shape(&mut rng, cfg, Shape::Triangle, true)],
        SceneKind::Shapes => {
            let n = rng.random_range(1..=cfg.max_instances);
            (0..n)
                .map(|_| {
                    let shape = Shape::ALL[rng.random_range(0..3)];
                    random_shape(&mut rng, cfg, shape, false)
                })
                .collect()
        }
    };
    let mut scene = Scene::compose(cfg.size, &shapes, background, cfg.d_min, cfg.d_max);
    // Drop nearly hidden shapes entirely; others only gain visibility.
    if scene.instances.len() < shapes.len() || scene.instances.iter().any(|i| i.area < MIN_VISIBLE_AREA) {
        let keep: Vec<ShapeSpec> = shapes
            .iter()
            .filter(|s| {
                scene
                    .instances
                    .iter()
                    .any(|i| i.depth == s.depth && i.shape == s.shape && i.area >= MIN_VISIBLE_AREA)
            })
            .cloned()
            .collect();
        shapes = keep;
        scene = Scene::compose(cfg.size, &shapes, background, cfg.d_min, cfg.d_max);
    }
    Ok(scene)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of scene `index` in the stream of `seed`.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(index))
}
