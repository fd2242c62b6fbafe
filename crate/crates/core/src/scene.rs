//! Object specs and the deterministic scene rasterizer.
//!
//! Scenes hold one object (optionally two instances of the same object) on a
//! dark background. Rendering is a pure function of the sampled placement:
//! the same [`SceneSample`] always rasterizes to bit-identical pixels, which
//! keeps whole training runs replayable from their seeds.

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::rng;
use crate::tensor::TensorValue;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Color {
    Blue,
    Red,
    White,
    Gray,
    Yellow,
    Green,
    Cyan,
    Magenta,
}

pub const COLORS: [Color; 8] = [
    Color::Blue,
    Color::Red,
    Color::White,
    Color::Gray,
    Color::Yellow,
    Color::Green,
    Color::Cyan,
    Color::Magenta,
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Shape {
    Box,
    Sphere,
    Cylinder,
    Capsule,
    Ellipsoid,
}

pub const SHAPES: [Shape; 5] = [Shape::Box, Shape::Sphere, Shape::Cylinder, Shape::Capsule, Shape::Ellipsoid];

impl Color {
    pub fn name(self) -> &'static str {
        match self {
            Color::Blue => "blue",
            Color::Red => "red",
            Color::White => "white",
            Color::Gray => "gray",
            Color::Yellow => "yellow",
            Color::Green => "green",
            Color::Cyan => "cyan",
            Color::Magenta => "magenta",
        }
    }

    pub fn from_name(s: &str) -> Option<Color> {
        COLORS.iter().copied().find(|c| c.name() == s)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Blue => [0.10, 0.20, 0.90],
            Color::Red => [0.90, 0.10, 0.10],
            Color::White => [0.95, 0.95, 0.95],
            Color::Gray => [0.50, 0.50, 0.50],
            Color::Yellow => [0.92, 0.88, 0.10],
            Color::Green => [0.10, 0.75, 0.20],
            Color::Cyan => [0.10, 0.85, 0.85],
            Color::Magenta => [0.85, 0.15, 0.80],
        }
    }
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Sphere => "sphere",
            Shape::Cylinder => "cylinder",
            Shape::Capsule => "capsule",
            Shape::Ellipsoid => "ellipsoid",
        }
    }

    pub fn from_name(s: &str) -> Option<Shape> {
        SHAPES.iter().copied().find(|h| h.name() == s)
    }

    /// Circumradius of the canonical (unit-box-scaled) silhouette. Placement
    /// keeps `center ± scale * radius` inside the frame.
    fn circumradius(self) -> f32 {
        match self {
            Shape::Box => std::f32::consts::SQRT_2 / 2.0,
            Shape::Sphere => 0.5,
            Shape::Cylinder => 0.6,
            Shape::Capsule => 0.6,
            Shape::Ellipsoid => 0.5,
        }
    }

    /// Canonical silhouette test in object space (origin-centered, unrotated).
    fn inside(self, x: f32, y: f32) -> bool {
        #[inline]
        fn ellipse(x: f32, y: f32, a: f32, b: f32) -> bool {
            let u = x / a;
            let v = y / b;
            u * u + v * v <= 1.0
        }
        match self {
            Shape::Box => x.abs() <= 0.5 && y.abs() <= 0.5,
            Shape::Sphere => x * x + y * y <= 0.25,
            Shape::Cylinder => {
                // Lying cylinder: rectangular body with elliptical end caps.
                (x.abs() <= 0.5 && y.abs() <= 0.26)
                    || ellipse(x - 0.5, y, 0.10, 0.26)
                    || ellipse(x + 0.5, y, 0.10, 0.26)
            }
            Shape::Capsule => {
                // Stadium: all points within 0.34 of the segment |x| <= 0.26.
                let dx = x - x.clamp(-0.26, 0.26);
                dx * dx + y * y <= 0.34 * 0.34
            }
            Shape::Ellipsoid => ellipse(x, y, 0.5, 0.28),
        }
    }
}

/// What kind of object a scene shows. `count` is 1 unless the two-instance
/// factor is enabled in the generator configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ObjectSpec {
    pub color: Color,
    pub shape: Shape,
    pub count: u8,
}

impl ObjectSpec {
    pub fn new(color: Color, shape: Shape) -> Self {
        ObjectSpec { color, shape, count: 1 }
    }

    pub fn with_count(color: Color, shape: Shape, count: u8) -> Self {
        ObjectSpec { color, shape, count }
    }

    /// "blue_box" or "blue_box_x2".
    pub fn slug(&self) -> String {
        if self.count == 1 {
            format!("{}_{}", self.color.name(), self.shape.name())
        } else {
            format!("{}_{}_x{}", self.color.name(), self.shape.name(), self.count)
        }
    }

    pub fn from_slug(s: &str) -> Option<ObjectSpec> {
        let (head, count) = match s.rsplit_once("_x") {
            Some((h, c)) => (h, c.parse::<u8>().ok()?),
            None => (s, 1),
        };
        let (color_s, shape_s) = head.split_once('_')?;
        Some(ObjectSpec { color: Color::from_name(color_s)?, shape: Shape::from_name(shape_s)?, count })
    }
}

pub const BACKGROUND: [f32; 3] = [0.08, 0.08, 0.10];

/// Placement of one object instance, in unit-square coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub center: (f32, f32),
    /// Object size as a fraction of the frame width.
    pub scale: f32,
    /// Radians in [0, pi); silhouettes are symmetric under half turns.
    pub orientation: f32,
}

/// A concrete sampled scene: the spec plus the placements drawn for it.
/// `seed` is the draw that produced the poses, so any scene can be
/// regenerated from its index line alone.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub spec: ObjectSpec,
    pub instances: Vec<Pose>,
    pub seed: u64,
}

pub const SCALE_RANGE_SINGLE: (f32, f32) = (0.25, 0.45);
/// Two instances must both fit without touching; keep them smaller.
pub const SCALE_RANGE_PAIR: (f32, f32) = (0.25, 0.35);
const PLACEMENT_PAD: f32 = 0.02;

impl SceneSample {
    /// Draws placements for `spec` deterministically from `seed`.
    pub fn from_seed(spec: ObjectSpec, seed: u64) -> Result<SceneSample> {
        if spec.count == 0 || spec.count > 2 {
            return Err(CoreError::invalid("SceneSample", format!("count {} not in {{1,2}}", spec.count)));
        }
        let mut r = rng::stream(seed, "scene-pose", &[]);
        let range = if spec.count == 1 { SCALE_RANGE_SINGLE } else { SCALE_RANGE_PAIR };
        let radius = spec.shape.circumradius();
        let draw_pose = |r: &mut rand_chacha::ChaCha8Rng| {
            let scale = r.gen_range(range.0..range.1);
            let margin = scale * radius + PLACEMENT_PAD;
            let cx = r.gen_range(margin..1.0 - margin);
            let cy = r.gen_range(margin..1.0 - margin);
            let orientation = r.gen_range(0.0..std::f32::consts::PI);
            Pose { center: (cx, cy), scale, orientation }
        };
        let mut instances = vec![draw_pose(&mut r)];
        if spec.count == 2 {
            loop {
                let p = draw_pose(&mut r);
                let a = instances[0];
                let dx = p.center.0 - a.center.0;
                let dy = p.center.1 - a.center.1;
                let min_gap = (p.scale + a.scale) * radius * 1.05;
                if dx * dx + dy * dy > min_gap * min_gap {
                    instances.push(p);
                    break;
                }
                // Re-draw the anchor too so a cornered first placement
                // cannot stall the loop.
                instances[0] = draw_pose(&mut r);
            }
        }
        Ok(SceneSample { spec, instances, seed })
    }
}

/// Rasterizes a scene to an [res, res, 3] tensor with values in [0, 1].
/// Pixels are classified by their centers against rotated silhouettes;
/// covered pixels get the palette color under a top-left-bright shading
/// ramp, everything else is the exact background constant.
pub fn render(sample: &SceneSample, resolution: usize) -> TensorValue {
    let res = resolution;
    let mut data = vec![0.0f32; res * res * 3];
    let rgb = sample.spec.color.rgb();
    let shape = sample.spec.shape;
    let insts: Vec<(f32, f32, f32, f32, f32)> = sample
        .instances
        .iter()
        .map(|p| (p.center.0, p.center.1, p.scale, p.orientation.cos(), p.orientation.sin()))
        .collect();
    for py in 0..res {
        let v = (py as f32 + 0.5) / res as f32;
        for px in 0..res {
            let u = (px as f32 + 0.5) / res as f32;
            let mut covered = false;
            for &(cx, cy, scale, cos, sin) in &insts {
                let dx = u - cx;
                let dy = v - cy;
                let xo = (cos * dx + sin * dy) / scale;
                let yo = (-sin * dx + cos * dy) / scale;
                if shape.inside(xo, yo) {
                    covered = true;
                    break;
                }
            }
            let o = (py * res + px) * 3;
            if covered {
                let shade = 1.0 - 0.3 * ((u + v) * 0.5);
                data[o] = rgb[0] * shade;
                data[o + 1] = rgb[1] * shade;
                data[o + 2] = rgb[2] * shade;
            } else {
                data[o] = BACKGROUND[0];
                data[o + 1] = BACKGROUND[1];
                data[o + 2] = BACKGROUND[2];
            }
        }
    }
    TensorValue { shape: vec![res, res, 3], data, grad: None }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_sample_renders_bit_identically() {
        let spec = ObjectSpec::new(Color::Green, Shape::Capsule);
        let s = SceneSample::from_seed(spec, 99).unwrap();
        let a = render(&s, 64);
        let b = render(&s, 64);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn different_seeds_move_pixels() {
        let spec = ObjectSpec::new(Color::Red, Shape::Sphere);
        let mut differing = 0;
        for seed in 0..200u64 {
            let a = render(&SceneSample::from_seed(spec, seed).unwrap(), 48);
            let b = render(&SceneSample::from_seed(spec, seed + 10_000).unwrap(), 48);
            if a.data != b.data {
                differing += 1;
            }
        }
        assert_eq!(differing, 200);
    }

    #[test]
    fn corner_pixel_is_exact_background() {
        for &shape in &SHAPES {
            let s = SceneSample::from_seed(ObjectSpec::new(Color::White, shape), 7).unwrap();
            let img = render(&s, 128);
            assert_eq!(&img.data[0..3], &BACKGROUND);
            let last = img.data.len() - 3;
            assert_eq!(&img.data[last..], &BACKGROUND);
        }
    }

    #[test]
    fn centered_blue_box_center_pixel_near_palette() {
        let s = SceneSample {
            spec: ObjectSpec::new(Color::Blue, Shape::Box),
            instances: vec![Pose { center: (0.5, 0.5), scale: 0.45, orientation: 0.0 }],
            seed: 0,
        };
        let img = render(&s, 128);
        let o = (64 * 128 + 64) * 3;
        let px = &img.data[o..o + 3];
        let blue = Color::Blue.rgb();
        for c in 0..3 {
            assert!((px[c] - blue[c]).abs() <= 0.15, "channel {}: {} vs {}", c, px[c], blue[c]);
        }
        assert_ne!(&px[..], &BACKGROUND, "center pixel must be covered");
    }

    #[test]
    fn values_stay_in_unit_range() {
        for seed in 0..20u64 {
            let spec = ObjectSpec::new(COLORS[(seed % 8) as usize], SHAPES[(seed % 5) as usize]);
            let img = render(&SceneSample::from_seed(spec, seed).unwrap(), 32);
            assert!(img.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn two_instances_do_not_touch() {
        let spec = ObjectSpec::with_count(Color::Cyan, Shape::Sphere, 2);
        for seed in 0..50u64 {
            let s = SceneSample::from_seed(spec, seed).unwrap();
            assert_eq!(s.instances.len(), 2);
            let (a, b) = (s.instances[0], s.instances[1]);
            let d = ((a.center.0 - b.center.0).powi(2) + (a.center.1 - b.center.1).powi(2)).sqrt();
            assert!(d > (a.scale + b.scale) * 0.5, "seed {}: {}", seed, d);
        }
    }

    #[test]
    fn slug_roundtrip() {
        let spec = ObjectSpec::with_count(Color::Magenta, Shape::Ellipsoid, 2);
        assert_eq!(spec.slug(), "magenta_ellipsoid_x2");
        assert_eq!(ObjectSpec::from_slug("magenta_ellipsoid_x2"), Some(spec));
        assert_eq!(
            ObjectSpec::from_slug("blue_box"),
            Some(ObjectSpec::new(Color::Blue, Shape::Box))
        );
        assert_eq!(ObjectSpec::from_slug("teal_box"), None);
    }

    #[test]
    fn object_fits_fully_inside_frame() {
        // No covered pixel on any border row/column.
        for seed in 0..30u64 {
            let spec = ObjectSpec::new(Color::Yellow, SHAPES[(seed % 5) as usize]);
            let img = render(&SceneSample::from_seed(spec, seed).unwrap(), 96);
            let res = 96;
            let is_bg = |y: usize, x: usize| {
                let o = (y * res + x) * 3;
                img.data[o..o + 3] == BACKGROUND
            };
            for i in 0..res {
                assert!(is_bg(0, i) && is_bg(res - 1, i) && is_bg(i, 0) && is_bg(i, res - 1));
            }
        }
    }
}
