//! Training-pair sampling: object-type enumeration, holdouts, and the
//! four-category batch composer.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::scene::{render, Color, ObjectSpec, SceneSample, Shape, COLORS, SHAPES};
use crate::tensor::TensorValue;

/// Object types excluded from training draws. Exclusions union three forms:
/// whole colors, whole shapes, and explicit specs (the zero-shot diagonals).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HoldoutSet {
    specs: BTreeSet<ObjectSpec>,
    colors: BTreeSet<Color>,
    shapes: BTreeSet<Shape>,
}

impl HoldoutSet {
    pub fn none() -> Self {
        HoldoutSet::default()
    }

    /// The five color-i/shape-i pairs: blue box, red sphere, white cylinder,
    /// gray capsule, yellow ellipsoid.
    pub fn diagonal() -> Self {
        let mut h = HoldoutSet::default();
        for i in 0..SHAPES.len() {
            h.specs.insert(ObjectSpec::new(COLORS[i], SHAPES[i]));
        }
        h
    }

    pub fn without_color(color: Color) -> Self {
        let mut h = HoldoutSet::default();
        h.colors.insert(color);
        h
    }

    pub fn without_shape(shape: Shape) -> Self {
        let mut h = HoldoutSet::default();
        h.shapes.insert(shape);
        h
    }

    pub fn from_specs(specs: impl IntoIterator<Item = ObjectSpec>) -> Self {
        let mut h = HoldoutSet::default();
        h.specs.extend(specs);
        h
    }

    pub fn union(mut self, other: HoldoutSet) -> Self {
        self.specs.extend(other.specs);
        self.colors.extend(other.colors);
        self.shapes.extend(other.shapes);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty() && self.colors.is_empty() && self.shapes.is_empty()
    }

    pub fn excludes(&self, spec: &ObjectSpec) -> bool {
        self.colors.contains(&spec.color)
            || self.shapes.contains(&spec.shape)
            || self.specs.contains(spec)
    }

    /// The excluded object types themselves, in enumeration order.
    pub fn held_out_types(&self, count_factor: bool) -> Vec<ObjectSpec> {
        all_types(count_factor).into_iter().filter(|s| self.excludes(s)).collect()
    }
}

fn all_types(count_factor: bool) -> Vec<ObjectSpec> {
    let mut out = Vec::new();
    for &color in &COLORS {
        for &shape in &SHAPES {
            if count_factor {
                out.push(ObjectSpec::with_count(color, shape, 1));
                out.push(ObjectSpec::with_count(color, shape, 2));
            } else {
                out.push(ObjectSpec::new(color, shape));
            }
        }
    }
    out
}

/// In-scope object types in fixed order: colors outermost, then shapes,
/// then (when the two-instance factor is on) counts.
pub fn enumerate_types(holdout: &HoldoutSet, count_factor: bool) -> Vec<ObjectSpec> {
    all_types(count_factor).into_iter().filter(|s| !holdout.excludes(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairCategory {
    SameType,
    SameShapeDiffColor,
    SameColorDiffShape,
    Random,
}

impl PairCategory {
    pub fn name(self) -> &'static str {
        match self {
            PairCategory::SameType => "same_type",
            PairCategory::SameShapeDiffColor => "same_shape_diff_color",
            PairCategory::SameColorDiffShape => "same_color_diff_shape",
            PairCategory::Random => "random",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRatios {
    pub same_type: f64,
    pub same_shape_diff_color: f64,
    pub same_color_diff_shape: f64,
    pub random: f64,
}

impl Default for PairRatios {
    fn default() -> Self {
        PairRatios {
            same_type: 0.25,
            same_shape_diff_color: 0.30,
            same_color_diff_shape: 0.20,
            random: 0.25,
        }
    }
}

impl PairRatios {
    pub fn validate(&self) -> Result<()> {
        let vals =
            [self.same_type, self.same_shape_diff_color, self.same_color_diff_shape, self.random];
        if vals.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(CoreError::invalid("PairRatios", "ratios must lie in [0, 1]"));
        }
        let sum: f64 = vals.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(CoreError::invalid("PairRatios", format!("ratios sum to {}, expected 1", sum)));
        }
        Ok(())
    }

    /// Deterministic split of a batch: same-type rounds up, the two
    /// contrast categories round down, random takes the remainder.
    pub fn counts(&self, n: usize) -> [usize; 4] {
        let c0 = (n as f64 * self.same_type).ceil() as usize;
        let c1 = (n as f64 * self.same_shape_diff_color).floor() as usize;
        let c2 = (n as f64 * self.same_color_diff_shape).floor() as usize;
        let used = (c0 + c1 + c2).min(n);
        [c0.min(n), c1, c2, n - used]
    }
}

/// One sampled pair of object types plus its category tag.
pub type SpecPair = (ObjectSpec, ObjectSpec, PairCategory);

/// Draws `n` spec pairs by category without rendering. Within each category
/// every eligible combination is uniform. Errors if a requested category has
/// no eligible combinations under the holdout.
pub fn sample_pair_specs(
    n: usize,
    ratios: &PairRatios,
    holdout: &HoldoutSet,
    count_factor: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<SpecPair>> {
    ratios.validate()?;
    let eligible = enumerate_types(holdout, count_factor);
    let distinct_colors: BTreeSet<Color> = eligible.iter().map(|s| s.color).collect();
    let distinct_shapes: BTreeSet<Shape> = eligible.iter().map(|s| s.shape).collect();
    if distinct_colors.len() < 2 || distinct_shapes.len() < 2 {
        return Err(CoreError::InfeasibleCategory(format!(
            "pair sampling needs >= 2 colors and >= 2 shapes in scope, found {} color(s), {} shape(s)",
            distinct_colors.len(),
            distinct_shapes.len()
        )));
    }
    let mut same_shape: Vec<(ObjectSpec, ObjectSpec)> = Vec::new();
    let mut same_color: Vec<(ObjectSpec, ObjectSpec)> = Vec::new();
    for a in &eligible {
        for b in &eligible {
            if a.count != b.count {
                continue;
            }
            if a.shape == b.shape && a.color != b.color {
                same_shape.push((*a, *b));
            }
            if a.color == b.color && a.shape != b.shape {
                same_color.push((*a, *b));
            }
        }
    }
    let counts = ratios.counts(n);
    if counts[1] > 0 && same_shape.is_empty() {
        return Err(CoreError::InfeasibleCategory("same_shape_diff_color".into()));
    }
    if counts[2] > 0 && same_color.is_empty() {
        return Err(CoreError::InfeasibleCategory("same_color_diff_shape".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..counts[0] {
        let s = eligible[rng.gen_range(0..eligible.len())];
        out.push((s, s, PairCategory::SameType));
    }
    for _ in 0..counts[1] {
        let (a, b) = same_shape[rng.gen_range(0..same_shape.len())];
        out.push((a, b, PairCategory::SameShapeDiffColor));
    }
    for _ in 0..counts[2] {
        let (a, b) = same_color[rng.gen_range(0..same_color.len())];
        out.push((a, b, PairCategory::SameColorDiffShape));
    }
    for _ in 0..counts[3] {
        let a = eligible[rng.gen_range(0..eligible.len())];
        let b = eligible[rng.gen_range(0..eligible.len())];
        out.push((a, b, PairCategory::Random));
    }
    Ok(out)
}

/// A rendered batch of speaker/listener image pairs. `labels[i]` is 1 when
/// both sides drew the identical object type.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub speaker_images: Vec<TensorValue>,
    pub listener_images: Vec<TensorValue>,
    pub speaker_specs: Vec<ObjectSpec>,
    pub listener_specs: Vec<ObjectSpec>,
    pub labels: Vec<f32>,
    pub categories: Vec<PairCategory>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Renders one fresh scene of the given type.
pub fn render_fresh(spec: ObjectSpec, resolution: usize, rng: &mut ChaCha8Rng) -> Result<TensorValue> {
    let sample = SceneSample::from_seed(spec, rng.gen())?;
    Ok(render(&sample, resolution))
}

/// Draws spec pairs and renders both sides with fresh placements.
pub fn sample_pair_batch(
    n: usize,
    ratios: &PairRatios,
    holdout: &HoldoutSet,
    count_factor: bool,
    resolution: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    let pairs = sample_pair_specs(n, ratios, holdout, count_factor, rng)?;
    let mut batch = PairBatch {
        speaker_images: Vec::with_capacity(n),
        listener_images: Vec::with_capacity(n),
        speaker_specs: Vec::with_capacity(n),
        listener_specs: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        categories: Vec::with_capacity(n),
    };
    for (a, b, cat) in pairs {
        batch.speaker_images.push(render_fresh(a, resolution, rng)?);
        batch.listener_images.push(render_fresh(b, resolution, rng)?);
        batch.speaker_specs.push(a);
        batch.listener_specs.push(b);
        batch.labels.push(if a == b { 1.0 } else { 0.0 });
        batch.categories.push(cat);
    }
    Ok(batch)
}
