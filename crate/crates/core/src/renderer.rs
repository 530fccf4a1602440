//! Point-splat rendering of colored point clouds from cameras orbiting the
//! vertical axis.
//!
//! A view at azimuth `a` shows the scene as if it had been rotated by `+a`
//! about the z-axis through the look-at point and photographed by a fixed
//! camera on the `+x` side. Equivalently the camera sits at angle `-a` around
//! the scene. With this convention, rendering `rotate_z(cloud, Δ)` at azimuth
//! `a - Δ` reproduces `cloud` at azimuth `a`.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene_data::{PointCloud, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// Degrees.
    pub azimuth: f64,
    /// Degrees above the horizontal plane; 90 looks straight down.
    pub elevation: f64,
    /// Meters from `look_at`.
    pub distance: f64,
    pub look_at: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub width: usize,
    pub height: usize,
    /// Horizontal field of view in degrees.
    #[serde(default = "default_fov")]
    pub fov: f64,
    /// Splat radius in pixels at a width of 224; scaled linearly with width.
    #[serde(default = "default_splat")]
    pub splat_radius: f64,
    #[serde(default = "default_elevation")]
    pub elevation: f64,
    /// Camera distance as a multiple of the scene's bounding radius.
    #[serde(default = "default_distance_factor")]
    pub distance_factor: f64,
}

fn default_fov() -> f64 {
    90.0
}
fn default_splat() -> f64 {
    2.0
}
fn default_elevation() -> f64 {
    45.0
}
fn default_distance_factor() -> f64 {
    1.5
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            width: 224,
            height: 224,
            fov: default_fov(),
            splat_radius: default_splat(),
            elevation: default_elevation(),
            distance_factor: default_distance_factor(),
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Config("render resolution must be positive".into()));
        }
        if !(self.fov > 0.0 && self.fov < 180.0) {
            return Err(Error::Config("field of view must lie in (0, 180) degrees".into()));
        }
        if !(self.splat_radius >= 0.0 && self.distance_factor > 0.0) {
            return Err(Error::Config("splat radius and distance factor must be positive".into()));
        }
        Ok(())
    }

    fn splat_pixels(&self) -> f64 {
        self.splat_radius * self.width as f64 / 224.0
    }
}

/// `height × width × 3` image with values in `[0, 1]`, row-major from the top row.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
    pub pose: CameraPose,
}

impl ViewImage {
    pub fn blank(width: usize, height: usize, pose: CameraPose) -> Self {
        Self {
            width,
            height,
            pixels: vec![1.0; width * height * 3],
            pose,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn max_abs_diff(&self, other: &ViewImage) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let mut w = enc
            .write_header()
            .map_err(|e| Error::Input(format!("png header: {e}")))?;
        w.write_image_data(&bytes)
            .map_err(|e| Error::Input(format!("png data: {e}")))?;
        Ok(())
    }
}

/// Equally spaced azimuths `k · 360 / num_views`.
pub fn make_view_poses(num_views: usize, elevation: f64, distance: f64, look_at: Vec3) -> Result<Vec<CameraPose>> {
    if num_views < 1 {
        return Err(Error::Config("num_views must be at least 1".into()));
    }
    if !(distance > 0.0) {
        return Err(Error::Config("camera distance must be positive".into()));
    }
    Ok((0..num_views)
        .map(|k| CameraPose {
            azimuth: k as f64 * 360.0 / num_views as f64,
            elevation,
            distance,
            look_at,
        })
        .collect())
}

struct Camera {
    eye: Vec3,
    right: Vec3,
    up: Vec3,
    forward: Vec3,
}

fn camera(pose: &CameraPose) -> Camera {
    let az = -pose.azimuth.to_radians();
    let el = pose.elevation.to_radians();
    let (sa, ca) = az.sin_cos();
    let (se, ce) = el.sin_cos();
    let dir = [ce * ca, ce * sa, se];
    Camera {
        eye: [
            pose.look_at[0] + pose.distance * dir[0],
            pose.look_at[1] + pose.distance * dir[1],
            pose.look_at[2] + pose.distance * dir[2],
        ],
        forward: [-dir[0], -dir[1], -dir[2]],
        right: [-sa, ca, 0.0],
        up: [-se * ca, -se * sa, ce],
    }
}

fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

const NEAR: f64 = 1e-3;

/// Perspective point splatting with a per-pixel depth buffer. Points behind
/// the near plane are dropped; ties in depth keep the lower point index.
pub fn render_view(cloud: &PointCloud, pose: &CameraPose, config: &RenderConfig) -> ViewImage {
    let (w, h) = (config.width, config.height);
    let mut img = ViewImage::blank(w, h, *pose);
    let mut depth = vec![f64::INFINITY; w * h];
    let cam = camera(pose);
    let focal = (w as f64 / 2.0) / (config.fov.to_radians() / 2.0).tan();
    let r = config.splat_pixels();
    let r2 = r * r;
    for (p, c) in cloud.points().iter().zip(cloud.colors()) {
        let d = [p[0] - cam.eye[0], p[1] - cam.eye[1], p[2] - cam.eye[2]];
        let z = dot(&d, &cam.forward);
        if z <= NEAR {
            continue;
        }
        let u = w as f64 / 2.0 + focal * dot(&d, &cam.right) / z;
        let v = h as f64 / 2.0 - focal * dot(&d, &cam.up) / z;
        if !(u.is_finite() && v.is_finite()) {
            continue;
        }
        let x0 = (u - r - 0.5).ceil().max(0.0);
        let x1 = (u + r - 0.5).floor().min(w as f64 - 1.0);
        let y0 = (v - r - 0.5).ceil().max(0.0);
        let y1 = (v + r - 0.5).floor().min(h as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            continue;
        }
        for iy in y0 as usize..=y1 as usize {
            let dy = iy as f64 + 0.5 - v;
            for ix in x0 as usize..=x1 as usize {
                let dx = ix as f64 + 0.5 - u;
                if dx * dx + dy * dy > r2 {
                    continue;
                }
                let k = iy * w + ix;
                if z < depth[k] {
                    depth[k] = z;
                    img.pixels[k * 3..k * 3 + 3].copy_from_slice(c);
                }
            }
        }
    }
    img
}

/// Poses used for a scene: a single top-down view when `num_views == 1`,
/// otherwise equally spaced azimuths at the configured elevation.
pub fn scene_poses(cloud: &PointCloud, num_views: usize, config: &RenderConfig) -> Result<Vec<CameraPose>> {
    let distance = config.distance_factor * cloud.bounding_radius().max(0.1);
    let elevation = if num_views == 1 { 90.0 } else { config.elevation };
    make_view_poses(num_views, elevation, distance, cloud.centroid())
}

pub fn render_multiview(cloud: &PointCloud, num_views: usize, config: &RenderConfig) -> Result<Vec<ViewImage>> {
    config.validate()?;
    let poses = scene_poses(cloud, num_views, config)?;
    Ok(poses.par_iter().map(|p| render_view(cloud, p, config)).collect())
}
