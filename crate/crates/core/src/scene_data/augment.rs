//! Point-cloud augmentations (small rotations, translations, random cuboid
//! crops) and fixed-size subsampling.
//!
//! Each random augmentation is split into a sampling step and a deterministic
//! apply step so the sampled parameters can be inspected.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    quat_from_axis_angle, quat_mul, AxisAlignedBox, ObjectAnnotation, PointCloud, SceneSample,
    SituationRecord, Vec3,
};

/// Per-axis rotation limit, degrees.
pub const MAX_ROTATION_DEG: f64 = 5.0;
/// Per-axis translation limit, meters.
pub const MAX_TRANSLATION_M: f64 = 0.5;
pub const CUBOID_RETRIES: usize = 100;

pub type Mat3 = [[f64; 3]; 3];

/// Independent uniform angles (radians) about x, y, z in `[-5°, 5°]`.
pub fn sample_rotation_angles<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let lim = MAX_ROTATION_DEG.to_radians();
    [
        rng.gen_range(-lim..=lim),
        rng.gen_range(-lim..=lim),
        rng.gen_range(-lim..=lim),
    ]
}

/// `Rz · Ry · Rx` for angles `(ax, ay, az)`.
pub fn rotation_matrix(angles: Vec3) -> Mat3 {
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat3_mul(&rz, &mat3_mul(&ry, &rx))
}

pub fn mat3_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn apply3(m: &Mat3, p: &Vec3) -> Vec3 {
    [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

/// Rotation quaternion matching [`rotation_matrix`].
pub fn rotation_quaternion(angles: Vec3) -> [f64; 4] {
    let qx = quat_from_axis_angle([1.0, 0.0, 0.0], angles[0]);
    let qy = quat_from_axis_angle([0.0, 1.0, 0.0], angles[1]);
    let qz = quat_from_axis_angle([0.0, 0.0, 1.0], angles[2]);
    quat_mul(&qz, &quat_mul(&qy, &qx))
}

/// Rotates every point about the origin; colors unchanged.
pub fn rotate(cloud: &PointCloud, rotation: &Mat3) -> PointCloud {
    PointCloud::from_parts_unchecked(
        cloud.points().iter().map(|p| apply3(rotation, p)).collect(),
        cloud.colors().to_vec(),
    )
}

pub fn augment_rotate<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    rotate(cloud, &rotation_matrix(sample_rotation_angles(rng)))
}

/// Independent uniform offsets in `[-0.5, 0.5]` m per axis.
pub fn sample_translation<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    [
        rng.gen_range(-MAX_TRANSLATION_M..=MAX_TRANSLATION_M),
        rng.gen_range(-MAX_TRANSLATION_M..=MAX_TRANSLATION_M),
        rng.gen_range(-MAX_TRANSLATION_M..=MAX_TRANSLATION_M),
    ]
}

pub fn translate(cloud: &PointCloud, offset: Vec3) -> PointCloud {
    PointCloud::from_parts_unchecked(
        cloud
            .points()
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect(),
        cloud.colors().to_vec(),
    )
}

pub fn augment_translate<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> PointCloud {
    translate(cloud, sample_translation(rng))
}

/// Points inside `bbox` (inclusive bounds), in input order. `None` when no
/// point survives.
pub fn crop_to_box(cloud: &PointCloud, bbox: &AxisAlignedBox) -> Option<PointCloud> {
    let idx: Vec<usize> = (0..cloud.len())
        .filter(|&i| bbox.contains(&cloud.points()[i]))
        .collect();
    (!idx.is_empty()).then(|| cloud.select(&idx))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CuboidConfig {
    /// Fraction of the input points the crop must keep.
    pub min_ratio: f64,
    /// Clouds with fewer points are returned unchanged.
    pub min_points: usize,
    /// Per-axis crop extent is drawn from `[min_crop, max_crop]` times the
    /// cloud's extent on that axis.
    pub min_crop: f64,
    pub max_crop: f64,
}

impl Default for CuboidConfig {
    fn default() -> Self {
        Self {
            min_ratio: 0.75,
            min_points: 1024,
            min_crop: 0.5,
            max_crop: 1.0,
        }
    }
}

/// Random cuboid crop. Each attempt centers an axis-aligned cuboid on a
/// random input point; the first crop keeping at least `min_ratio` of the
/// points is returned together with the cuboid. After
/// [`CUBOID_RETRIES`] failures, or when the cloud is below `min_points`, the
/// input comes back unchanged with `None`.
pub fn random_cuboid<R: Rng + ?Sized>(
    cloud: &PointCloud,
    rng: &mut R,
    config: &CuboidConfig,
) -> (PointCloud, Option<AxisAlignedBox>) {
    if cloud.len() < config.min_points {
        return (cloud.clone(), None);
    }
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in cloud.points() {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let needed = (config.min_ratio * cloud.len() as f64).ceil() as usize;
    for _ in 0..CUBOID_RETRIES {
        let size = [0, 1, 2].map(|k| {
            let extent = (hi[k] - lo[k]).max(1e-6);
            extent * rng.gen_range(config.min_crop..=config.max_crop)
        });
        let center = cloud.points()[rng.gen_range(0..cloud.len())];
        let Ok(bbox) = AxisAlignedBox::new(center, size) else { continue };
        if let Some(cropped) = crop_to_box(cloud, &bbox) {
            if cropped.len() >= needed {
                return (cropped, Some(bbox));
            }
        }
    }
    (cloud.clone(), None)
}

pub fn augment_random_cuboid<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R, min_ratio: f64) -> PointCloud {
    let config = CuboidConfig {
        min_ratio,
        ..CuboidConfig::default()
    };
    random_cuboid(cloud, rng, &config).0
}

/// Row indices for a fixed-size sample: without replacement when the cloud
/// is large enough, with replacement otherwise.
pub fn subsample_indices<R: Rng + ?Sized>(n: usize, target_n: usize, rng: &mut R) -> Vec<usize> {
    assert!(target_n >= 1, "target_n must be at least 1");
    if n >= target_n {
        sample(rng, n, target_n).into_vec()
    } else {
        (0..target_n).map(|_| rng.gen_range(0..n)).collect()
    }
}

pub fn subsample_points<R: Rng + ?Sized>(cloud: &PointCloud, target_n: usize, rng: &mut R) -> PointCloud {
    cloud.select(&subsample_indices(cloud.len(), target_n, rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub rotate: bool,
    pub translate: bool,
    pub random_cuboid: bool,
    pub cuboid: CuboidConfig,
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            rotate: false,
            translate: false,
            random_cuboid: false,
            cuboid: CuboidConfig::default(),
        }
    }

    pub fn is_noop(&self) -> bool {
        !(self.rotate || self.translate || self.random_cuboid)
    }
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotate: true,
            translate: true,
            random_cuboid: false,
            cuboid: CuboidConfig::default(),
        }
    }
}

/// Applies the configured augmentations to a whole scene, moving box
/// annotations (and optionally an agent situation) along with the points.
pub struct SceneAugmenter {
    pub config: AugmentConfig,
}

/// Geometry of one scene after augmentation.
#[derive(Clone, Debug)]
pub struct AugmentedScene {
    pub cloud: PointCloud,
    pub annotations: Vec<ObjectAnnotation>,
    /// Rotation quaternion and translation that were applied, in that order.
    pub rotation: [f64; 4],
    pub rotation_matrix: Mat3,
    pub offset: Vec3,
}

impl AugmentedScene {
    /// Maps an agent situation through the same rigid transform.
    pub fn transform_situation(&self, s: &SituationRecord) -> ([f64; 3], [f64; 4]) {
        let p = apply3(&self.rotation_matrix, &s.position);
        let position = [0, 1, 2].map(|k| p[k] + self.offset[k]);
        let rotation = quat_mul(&self.rotation, &s.rotation);
        (position, rotation)
    }
}

impl SceneAugmenter {
    pub fn new(config: AugmentConfig) -> Self {
        Self { config }
    }

    pub fn apply<R: Rng + ?Sized>(&self, scene: &SceneSample, rng: &mut R) -> AugmentedScene {
        let mut cloud = scene.cloud.clone();
        let mut annotations = scene.annotations.clone();
        let mut rot_q = [0.0, 0.0, 0.0, 1.0];
        let mut rot_m = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let mut offset = [0.0; 3];
        if self.config.random_cuboid {
            let (cropped, bbox) = random_cuboid(&cloud, rng, &self.config.cuboid);
            if let Some(bbox) = bbox {
                cloud = cropped;
                annotations.retain(|a| bbox.contains(&a.bbox.center));
            }
        }
        if self.config.rotate {
            let angles = sample_rotation_angles(rng);
            rot_m = rotation_matrix(angles);
            rot_q = rotation_quaternion(angles);
            cloud = rotate(&cloud, &rot_m);
            for a in &mut annotations {
                a.bbox = rotate_box(&a.bbox, &rot_m);
            }
        }
        if self.config.translate {
            offset = sample_translation(rng);
            cloud = translate(&cloud, offset);
            for a in &mut annotations {
                for k in 0..3 {
                    a.bbox.center[k] += offset[k];
                }
            }
        }
        AugmentedScene {
            cloud,
            annotations,
            rotation: rot_q,
            rotation_matrix: rot_m,
            offset,
        }
    }
}

/// Axis-aligned hull of a rotated box.
pub fn rotate_box(b: &AxisAlignedBox, r: &Mat3) -> AxisAlignedBox {
    let center = apply3(r, &b.center);
    let size = [0, 1, 2].map(|i| (0..3).map(|j| r[i][j].abs() * b.size[j]).sum());
    AxisAlignedBox { center, size }
}
