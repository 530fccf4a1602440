//! Scene and question-answering data: point clouds, box annotations, QA and
//! situated-QA records, the on-disk dataset layout, the synthetic scene
//! generator and point-cloud augmentations.

pub mod adapters;
pub mod augment;
pub mod generator;
pub mod io;
pub mod ply;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

pub use augment::{
    augment_random_cuboid, augment_rotate, augment_translate, crop_to_box, random_cuboid, rotate,
    rotation_matrix, sample_rotation_angles, sample_translation, subsample_indices, subsample_points,
    translate, AugmentConfig, SceneAugmenter,
};
pub use generator::{generate_synthetic_scene, GeneratorConfig, Shape};
pub use io::{load_dataset, write_dataset, Dataset, LabelSet, Split};

pub type Vec3 = [f64; 3];
/// Quaternion stored as `(x, y, z, w)`.
pub type Quat = [f64; 4];

/// Colored point cloud; coordinates in meters, colors in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<Vec3>,
    colors: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Input("point cloud must contain at least one point".into()));
        }
        if points.len() != colors.len() {
            return Err(Error::Input(format!(
                "{} points but {} colors",
                points.len(),
                colors.len()
            )));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite point coordinate".into()));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("color component outside [0, 1]".into()));
        }
        Ok(Self { points, colors })
    }

    /// Builds a cloud from parts already known to be valid (subsets or rigid
    /// transforms of a valid cloud).
    pub(crate) fn from_parts_unchecked(points: Vec<Vec3>, colors: Vec<Vec3>) -> Self {
        debug_assert_eq!(points.len(), colors.len());
        debug_assert!(!points.is_empty());
        Self { points, colors }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn colors(&self) -> &[Vec3] {
        &self.colors
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.points.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    /// Largest distance from the centroid to any point.
    pub fn bounding_radius(&self) -> f64 {
        let c = self.centroid();
        self.points
            .iter()
            .map(|p| dist(p, &c))
            .fold(0.0, f64::max)
    }

    /// `N × 6` matrix of `x, y, z, r, g, b`.
    pub fn features(&self) -> Mat {
        let mut data = Vec::with_capacity(self.len() * 6);
        for (p, c) in self.points.iter().zip(&self.colors) {
            data.extend_from_slice(p);
            data.extend_from_slice(c);
        }
        Mat::from_vec(self.len(), 6, data)
    }

    pub fn select(&self, idx: &[usize]) -> PointCloud {
        PointCloud::from_parts_unchecked(
            idx.iter().map(|&i| self.points[i]).collect(),
            idx.iter().map(|&i| self.colors[i]).collect(),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisAlignedBox {
    pub center: Vec3,
    pub size: Vec3,
}

impl AxisAlignedBox {
    pub fn new(center: Vec3, size: Vec3) -> Result<Self> {
        if size.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || center.iter().any(|c| !c.is_finite()) {
            return Err(Error::Input(format!(
                "invalid box: center {center:?}, size {size:?}"
            )));
        }
        Ok(Self { center, size })
    }

    pub fn min(&self) -> Vec3 {
        [0, 1, 2].map(|k| self.center[k] - 0.5 * self.size[k])
    }

    pub fn max(&self) -> Vec3 {
        [0, 1, 2].map(|k| self.center[k] + 0.5 * self.size[k])
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let (lo, hi) = (self.min(), self.max());
        (0..3).all(|k| p[k] >= lo[k] && p[k] <= hi[k])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub instance_id: u32,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: AxisAlignedBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub scene_id: String,
    pub scene_type: String,
    pub cloud: PointCloud,
    pub annotations: Vec<ObjectAnnotation>,
    pub captions: Vec<String>,
}

impl SceneSample {
    pub fn annotation(&self, instance_id: u32) -> Option<&ObjectAnnotation> {
        self.annotations.iter().find(|a| a.instance_id == instance_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QARecord {
    pub question_id: String,
    pub scene_id: String,
    pub question: String,
    pub answers: Vec<String>,
    /// The first entry is the localization target.
    pub referred_instance_ids: Vec<u32>,
    pub referred_class_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SituationRecord {
    pub question_id: String,
    pub scene_id: String,
    pub situation_text: String,
    pub position: Vec3,
    /// `(x, y, z, w)`, unit norm.
    pub rotation: Quat,
    pub question: String,
    pub answers: Vec<String>,
}

pub fn dist(a: &Vec3, b: &Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

pub fn quat_norm(q: &Quat) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Hamilton product `a ⊗ b` in `(x, y, z, w)` layout.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    let [ax, ay, az, aw] = *a;
    let [bx, by, bz, bw] = *b;
    [
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
        aw * bw - ax * bx - ay * by - az * bz,
    ]
}

pub fn quat_from_axis_angle(axis: Vec3, angle: f64) -> Quat {
    let (s, c) = (0.5 * angle).sin_cos();
    [axis[0] * s, axis[1] * s, axis[2] * s, c]
}

/// Rotation about +z by `yaw` radians.
pub fn quat_from_yaw(yaw: f64) -> Quat {
    quat_from_axis_angle([0.0, 0.0, 1.0], yaw)
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}
