//! Template-based synthetic scenes: a floor plane with colored boxes and
//! cylinders, captions describing them, and QA / situated-QA records whose
//! answers are computed from the object annotations.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    quat_from_yaw, AxisAlignedBox, ObjectAnnotation, PointCloud, QARecord, SceneSample,
    SituationRecord, Vec3,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Box,
    Cylinder,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Box => "box",
            Shape::Cylinder => "cylinder",
        }
    }

    pub fn plural(self) -> &'static str {
        match self {
            Shape::Box => "boxes",
            Shape::Cylinder => "cylinders",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedColor {
    pub name: String,
    pub rgb: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneTypeSpec {
    pub name: String,
    pub floor_rgb: Vec3,
    /// Relative sampling weight per entry of `GeneratorConfig::shapes`.
    pub shape_weights: Vec<f64>,
    /// Relative sampling weight per entry of `GeneratorConfig::colors`.
    pub color_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub min_objects: usize,
    pub max_objects: usize,
    pub shapes: Vec<Shape>,
    pub colors: Vec<NamedColor>,
    pub scene_types: Vec<SceneTypeSpec>,
    /// Floor extent along x and y, centered on the origin (meters).
    pub room_extent: [f64; 2],
    pub points_per_object: usize,
    /// Total point budget; the floor receives whatever the objects leave.
    pub num_points: usize,
    /// Minimum number of floor points regardless of the budget.
    pub min_floor_points: usize,
    pub color_jitter: f64,
    pub situations_per_scene: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let color = |name: &str, rgb: Vec3| NamedColor {
            name: name.into(),
            rgb,
        };
        Self {
            min_objects: 3,
            max_objects: 5,
            shapes: vec![Shape::Box, Shape::Cylinder],
            colors: vec![
                color("red", [0.85, 0.15, 0.15]),
                color("green", [0.15, 0.7, 0.2]),
                color("blue", [0.15, 0.25, 0.85]),
                color("yellow", [0.9, 0.85, 0.15]),
            ],
            scene_types: vec![
                SceneTypeSpec {
                    name: "bedroom".into(),
                    floor_rgb: [0.72, 0.6, 0.45],
                    shape_weights: vec![3.0, 1.0],
                    color_weights: vec![3.0, 1.0, 3.0, 1.0],
                },
                SceneTypeSpec {
                    name: "kitchen".into(),
                    floor_rgb: [0.55, 0.55, 0.58],
                    shape_weights: vec![1.0, 3.0],
                    color_weights: vec![1.0, 3.0, 1.0, 3.0],
                },
            ],
            room_extent: [4.0, 4.0],
            points_per_object: 400,
            num_points: 4096,
            min_floor_points: 256,
            color_jitter: 0.03,
            situations_per_scene: 2,
        }
    }
}

impl GeneratorConfig {
    pub fn num_classes(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn class_id(&self, shape_idx: usize, color_idx: usize) -> usize {
        shape_idx * self.colors.len() + color_idx
    }

    /// `(shape, color name)` of a class id.
    pub fn class_parts(&self, class_id: usize) -> (Shape, &str) {
        let shape = self.shapes[class_id / self.colors.len()];
        let color = &self.colors[class_id % self.colors.len()].name;
        (shape, color)
    }

    /// Class names such as `"red box"`, indexed by class id.
    pub fn class_names(&self) -> Vec<String> {
        (0..self.num_classes())
            .map(|c| {
                let (s, col) = self.class_parts(c);
                format!("{col} {}", s.name())
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("generator: {m}")));
        if self.min_objects == 0 || self.max_objects == 0 {
            return bad("object count range must be at least 1");
        }
        if self.min_objects > self.max_objects {
            return bad("min_objects exceeds max_objects");
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return bad("empty class palette");
        }
        if self.scene_types.is_empty() {
            return bad("no scene types");
        }
        for t in &self.scene_types {
            if t.shape_weights.len() != self.shapes.len() || t.color_weights.len() != self.colors.len() {
                return bad(&format!("scene type {} weight lengths do not match the palette", t.name));
            }
            if t.shape_weights.iter().chain(&t.color_weights).any(|w| !(*w >= 0.0))
                || t.shape_weights.iter().sum::<f64>() <= 0.0
                || t.color_weights.iter().sum::<f64>() <= 0.0
            {
                return bad(&format!("scene type {} has invalid weights", t.name));
            }
        }
        if self.points_per_object == 0 {
            return bad("points_per_object must be positive");
        }
        if !(self.room_extent[0] > 1.0 && self.room_extent[1] > 1.0) {
            return bad("room extent must exceed 1 m per axis");
        }
        if self.colors.iter().flat_map(|c| c.rgb).any(|v| !(0.0..=1.0).contains(&v)) {
            return bad("palette colors must lie in [0, 1]");
        }
        Ok(())
    }
}

const NUMBER_WORDS: [&str; 11] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

/// Word form for small counts, digits beyond ten.
pub fn number_word(n: usize) -> String {
    NUMBER_WORDS
        .get(n)
        .map(|s| s.to_string())
        .unwrap_or_else(|| n.to_string())
}

/// Both accepted spellings of a count answer.
pub fn count_answers(n: usize) -> Vec<String> {
    let w = number_word(n);
    let d = n.to_string();
    if w == d {
        vec![w]
    } else {
        vec![w, d]
    }
}

struct PlacedObject {
    shape: Shape,
    shape_idx: usize,
    color_idx: usize,
    bbox: AxisAlignedBox,
}

/// Generates one scene with its QA and situation records. The scene type is
/// drawn from the seeded stream.
pub fn generate_synthetic_scene(
    seed: u64,
    config: &GeneratorConfig,
) -> Result<(SceneSample, Vec<QARecord>, Vec<SituationRecord>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let type_idx = rng.gen_range(0..config.scene_types.len());
    generate_with_rng(seed, type_idx, config, &mut rng)
}

/// Like [`generate_synthetic_scene`] but with the scene type fixed.
pub fn generate_scene_of_type(
    seed: u64,
    type_idx: usize,
    config: &GeneratorConfig,
) -> Result<(SceneSample, Vec<QARecord>, Vec<SituationRecord>)> {
    config.validate()?;
    if type_idx >= config.scene_types.len() {
        return Err(Error::Config(format!("scene type index {type_idx} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Keep the stream aligned with generate_synthetic_scene.
    let _: usize = rng.gen_range(0..config.scene_types.len());
    generate_with_rng(seed, type_idx, config, &mut rng)
}

fn weighted_index<R: Rng>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn generate_with_rng(
    seed: u64,
    type_idx: usize,
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SceneSample, Vec<QARecord>, Vec<SituationRecord>)> {
    let scene_type = &config.scene_types[type_idx];
    let scene_id = format!("synth{seed:08}");
    let n_objects = rng.gen_range(config.min_objects..=config.max_objects);
    let half = [config.room_extent[0] / 2.0, config.room_extent[1] / 2.0];

    let mut objects: Vec<PlacedObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let shape_idx = weighted_index(&scene_type.shape_weights, rng);
        let color_idx = weighted_index(&scene_type.color_weights, rng);
        let shape = config.shapes[shape_idx];
        let size = match shape {
            Shape::Box => [
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.7),
                rng.gen_range(0.3..0.9),
            ],
            Shape::Cylinder => {
                let d = rng.gen_range(0.3..0.6);
                [d, d, rng.gen_range(0.4..1.0)]
            }
        };
        // Rejection sampling for non-overlapping footprints; fall back to the
        // last candidate when the room is crowded.
        let mut center = [0.0; 3];
        for _attempt in 0..100 {
            let margin_x = half[0] - size[0] / 2.0 - 0.05;
            let margin_y = half[1] - size[1] / 2.0 - 0.05;
            center = [
                rng.gen_range(-margin_x..margin_x),
                rng.gen_range(-margin_y..margin_y),
                size[2] / 2.0,
            ];
            let clear = objects.iter().all(|o| {
                let gap_x = (o.bbox.center[0] - center[0]).abs() - (o.bbox.size[0] + size[0]) / 2.0;
                let gap_y = (o.bbox.center[1] - center[1]).abs() - (o.bbox.size[1] + size[1]) / 2.0;
                gap_x > 0.15 || gap_y > 0.15
            });
            if clear {
                break;
            }
        }
        objects.push(PlacedObject {
            shape,
            shape_idx,
            color_idx,
            bbox: AxisAlignedBox::new(center, size)?,
        });
    }

    // Points: objects first, then the floor.
    let mut points = Vec::with_capacity(config.num_points);
    let mut colors = Vec::with_capacity(config.num_points);
    let jitter = config.color_jitter;
    let jittered = |base: Vec3, rng: &mut ChaCha8Rng| -> Vec3 {
        base.map(|c| (c + rng.gen_range(-jitter..=jitter)).clamp(0.0, 1.0))
    };
    for o in &objects {
        let base = config.colors[o.color_idx].rgb;
        for _ in 0..config.points_per_object {
            points.push(sample_surface(o.shape, &o.bbox, rng));
            colors.push(jittered(base, rng));
        }
    }
    let floor_n = config
        .num_points
        .saturating_sub(points.len())
        .max(config.min_floor_points);
    for _ in 0..floor_n {
        points.push([rng.gen_range(-half[0]..half[0]), rng.gen_range(-half[1]..half[1]), 0.0]);
        colors.push(jittered(scene_type.floor_rgb, rng));
    }
    let cloud = PointCloud::new(points, colors)?;

    let annotations: Vec<ObjectAnnotation> = objects
        .iter()
        .enumerate()
        .map(|(i, o)| ObjectAnnotation {
            instance_id: i as u32,
            class_id: config.class_id(o.shape_idx, o.color_idx),
            bbox: o.bbox,
        })
        .collect();

    let describe = |i: usize| -> String {
        let o = &objects[i];
        format!("{} {}", config.colors[o.color_idx].name, o.shape.name())
    };

    let captions = make_captions(&scene_type.name, &objects, config, rng, &describe);
    let qa = make_qa(&scene_id, &annotations, config, &describe);
    let sqa = make_situations(&scene_id, &annotations, config, rng, &describe);

    let sample = SceneSample {
        scene_id,
        scene_type: scene_type.name.clone(),
        cloud,
        annotations,
        captions,
    };
    Ok((sample, qa, sqa))
}

fn sample_surface<R: Rng>(shape: Shape, b: &AxisAlignedBox, rng: &mut R) -> Vec3 {
    let [sx, sy, sz] = b.size;
    let lo = b.min();
    match shape {
        Shape::Box => {
            // Four walls and the top, area weighted.
            let areas = [sy * sz, sy * sz, sx * sz, sx * sz, sx * sy];
            let face = weighted_index(&areas, rng);
            let (u, v) = (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
            match face {
                0 => [lo[0], lo[1] + u * sy, lo[2] + v * sz],
                1 => [lo[0] + sx, lo[1] + u * sy, lo[2] + v * sz],
                2 => [lo[0] + u * sx, lo[1], lo[2] + v * sz],
                3 => [lo[0] + u * sx, lo[1] + sy, lo[2] + v * sz],
                _ => [lo[0] + u * sx, lo[1] + v * sy, lo[2] + sz],
            }
        }
        Shape::Cylinder => {
            let r = sx / 2.0;
            let side = 2.0 * PI * r * sz;
            let top = PI * r * r;
            let theta = rng.gen_range(0.0..2.0 * PI);
            if rng.gen_range(0.0..side + top) < side {
                [
                    b.center[0] + r * theta.cos(),
                    b.center[1] + r * theta.sin(),
                    lo[2] + rng.gen_range(0.0..1.0) * sz,
                ]
            } else {
                let rr = r * rng.gen_range(0.0f64..1.0).sqrt();
                [
                    b.center[0] + rr * theta.cos(),
                    b.center[1] + rr * theta.sin(),
                    lo[2] + sz,
                ]
            }
        }
    }
}

fn planar_dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Index of the object nearest to `i` in the floor plane; ties go to the
/// lower index.
fn nearest_other(centers: &[Vec3], i: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in centers.iter().enumerate() {
        if j == i {
            continue;
        }
        let d = planar_dist(&centers[i], c);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}

fn make_captions(
    scene_type: &str,
    objects: &[PlacedObject],
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    describe: &dyn Fn(usize) -> String,
) -> Vec<String> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for o in objects {
        *counts.entry(config.class_id(o.shape_idx, o.color_idx)).or_default() += 1;
    }
    let parts: Vec<String> = counts
        .iter()
        .map(|(&class, &n)| {
            let (shape, color) = config.class_parts(class);
            if n == 1 {
                format!("a {color} {}", shape.name())
            } else {
                format!("{} {color} {}", number_word(n), shape.plural())
            }
        })
        .collect();
    let listing = match parts.len() {
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    };
    let mut captions = vec![format!("a {scene_type} with {listing}")];

    let centers: Vec<Vec3> = objects.iter().map(|o| o.bbox.center).collect();
    let i = rng.gen_range(0..objects.len());
    match nearest_other(&centers, i) {
        Some(j) => captions.push(format!(
            "a {} near a {} in the {scene_type}",
            describe(i),
            describe(j)
        )),
        None => captions.push(format!("a {scene_type} with only a {}", describe(i))),
    }
    captions
}

fn make_qa(
    scene_id: &str,
    annotations: &[ObjectAnnotation],
    config: &GeneratorConfig,
    describe: &dyn Fn(usize) -> String,
) -> Vec<QARecord> {
    let mut out = Vec::new();
    let mut next_id = 0usize;
    let mut push = |question: String, answers: Vec<String>, inst: Vec<u32>, classes: Vec<usize>| {
        out.push(QARecord {
            question_id: format!("{scene_id}_q{next_id:03}"),
            scene_id: scene_id.to_string(),
            question,
            answers,
            referred_instance_ids: inst,
            referred_class_ids: classes,
        });
        next_id += 1;
    };

    // Counting: one question per class present; refers to all its instances.
    let mut by_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for a in annotations {
        by_class.entry(a.class_id).or_default().push(a.instance_id);
    }
    for (&class, instances) in &by_class {
        let (shape, color) = config.class_parts(class);
        push(
            format!("how many {color} {} are there", shape.plural()),
            count_answers(instances.len()),
            instances.clone(),
            vec![class],
        );
    }

    // Relations anchored on objects whose class is unique in the scene.
    let centers: Vec<Vec3> = annotations.iter().map(|a| a.bbox.center).collect();
    for (i, a) in annotations.iter().enumerate() {
        if by_class[&a.class_id].len() != 1 {
            continue;
        }
        let Some(j) = nearest_other(&centers, i) else { continue };
        let target = &annotations[j];
        let (target_shape, target_color) = config.class_parts(target.class_id);
        push(
            format!("what is next to the {}", describe(i)),
            vec![describe(j)],
            vec![target.instance_id, a.instance_id],
            vec![target.class_id, a.class_id],
        );
        push(
            format!("what color is the {} next to the {}", target_shape.name(), describe(i)),
            vec![target_color.to_string()],
            vec![target.instance_id, a.instance_id],
            vec![target.class_id, a.class_id],
        );
    }
    out
}

/// Frame of an agent at `position` facing yaw `theta`: returns
/// `(forward, left)` coordinates of `p`.
pub fn agent_frame(position: &Vec3, theta: f64, p: &Vec3) -> (f64, f64) {
    let dx = p[0] - position[0];
    let dy = p[1] - position[1];
    let forward = dx * theta.cos() + dy * theta.sin();
    let left = -dx * theta.sin() + dy * theta.cos();
    (forward, left)
}

fn make_situations(
    scene_id: &str,
    annotations: &[ObjectAnnotation],
    config: &GeneratorConfig,
    rng: &mut ChaCha8Rng,
    describe: &dyn Fn(usize) -> String,
) -> Vec<SituationRecord> {
    let mut out = Vec::new();
    if annotations.len() < 2 {
        return out;
    }
    let mut next_id = 0usize;
    let idx: Vec<usize> = (0..annotations.len()).collect();
    for _ in 0..config.situations_per_scene {
        let pair: Vec<usize> = idx.choose_multiple(rng, 2).copied().collect();
        let (anchor, target) = (pair[0], pair[1]);
        let ac = annotations[anchor].bbox.center;
        let tc = annotations[target].bbox.center;
        // Stand 0.6 m from the anchor, on the side facing the target.
        let base_yaw = (tc[1] - ac[1]).atan2(tc[0] - ac[0]);
        let offset_yaw = base_yaw + rng.gen_range(-0.6..0.6);
        let reach = annotations[anchor].bbox.size[0].max(annotations[anchor].bbox.size[1]) / 2.0 + 0.3;
        let half = [config.room_extent[0] / 2.0, config.room_extent[1] / 2.0];
        let position = [
            (ac[0] + reach * offset_yaw.cos()).clamp(-half[0], half[0]),
            (ac[1] + reach * offset_yaw.sin()).clamp(-half[1], half[1]),
            0.0,
        ];
        let theta = (tc[1] - position[1]).atan2(tc[0] - position[0]);
        let rotation = quat_from_yaw(theta);
        let situation_text = format!(
            "i am standing next to the {} facing the {}",
            describe(anchor),
            describe(target)
        );

        let frames: Vec<(f64, f64)> = annotations
            .iter()
            .map(|a| agent_frame(&position, theta, &a.bbox.center))
            .collect();
        let left_count = frames.iter().filter(|(_, l)| *l > 0.0).count();
        let mut questions = vec![(
            "how many objects are on my left".to_string(),
            count_answers(left_count),
        )];
        let behind = frames
            .iter()
            .enumerate()
            .filter(|(_, (f, _))| *f < 0.0)
            .map(|(i, _)| (i, planar_dist(&position, &annotations[i].bbox.center)))
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, bd)) if bd <= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = behind {
            let (_, color) = config.class_parts(annotations[i].class_id);
            questions.push((
                "what color is the nearest object behind me".to_string(),
                vec![color.to_string()],
            ));
        }
        for (question, answers) in questions {
            out.push(SituationRecord {
                question_id: format!("{scene_id}_s{next_id:03}"),
                scene_id: scene_id.to_string(),
                situation_text: situation_text.clone(),
                position,
                rotation,
                question,
                answers,
            });
            next_id += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut c = GeneratorConfig::default();
        c.min_objects = 0;
        assert!(matches!(generate_synthetic_scene(1, &c), Err(Error::Config(_))));
        let mut c = GeneratorConfig::default();
        c.colors.clear();
        assert!(matches!(generate_synthetic_scene(1, &c), Err(Error::Config(_))));
        let mut c = GeneratorConfig::default();
        c.shapes.clear();
        assert!(generate_synthetic_scene(1, &c).is_err());
    }

    #[test]
    fn same_seed_same_scene() {
        let c = GeneratorConfig::default();
        let a = generate_synthetic_scene(7, &c).unwrap();
        let b = generate_synthetic_scene(7, &c).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic_scene(8, &c).unwrap();
        assert_ne!(a.0.cloud, other.0.cloud);
    }

    #[test]
    fn point_budget_and_palette() {
        let c = GeneratorConfig::default();
        let (s, _, _) = generate_synthetic_scene(3, &c).unwrap();
        assert_eq!(s.cloud.len(), c.num_points);
        assert!(s.annotations.iter().all(|a| a.class_id < c.num_classes()));
        assert_eq!(s.captions.len(), 2);
        assert!(s.captions[0].starts_with(&format!("a {} with", s.scene_type)));
    }

    #[test]
    fn situations_have_unit_quaternions() {
        let c = GeneratorConfig::default();
        for seed in 0..10 {
            let (_, _, sqa) = generate_synthetic_scene(seed, &c).unwrap();
            for s in sqa {
                assert!((super::super::quat_norm(&s.rotation) - 1.0).abs() < 1e-12);
                assert!(!s.answers.is_empty());
            }
        }
    }

    #[test]
    fn agent_frame_axes() {
        let (f, l) = agent_frame(&[0.0; 3], 0.0, &[1.0, 2.0, 0.0]);
        assert!((f - 1.0).abs() < 1e-12 && (l - 2.0).abs() < 1e-12);
        let (f, l) = agent_frame(&[0.0; 3], PI / 2.0, &[1.0, 0.0, 0.0]);
        assert!(f.abs() < 1e-12 && (l + 1.0).abs() < 1e-12);
    }
}
