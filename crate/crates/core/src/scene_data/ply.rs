//! ASCII PLY reading and writing for colored point clouds.
//!
//! Written files use `double` properties `x y z red green blue` with colors in
//! `[0, 1]`, formatted with Rust's shortest round-trip float printing so a
//! write/read cycle is lossless. The reader also accepts `float` properties
//! and `uchar` colors (scaled by 1/255), and ignores unknown vertex
//! properties, which covers common exports of real scans.

use std::fmt::Write as _;

use super::PointCloud;
use crate::error::{Error, Result};

pub fn to_ply_string(cloud: &PointCloud) -> String {
    let mut s = String::with_capacity(cloud.len() * 64 + 200);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", cloud.len());
    for p in ["x", "y", "z", "red", "green", "blue"] {
        let _ = writeln!(s, "property double {p}");
    }
    s.push_str("end_header\n");
    for (p, c) in cloud.points().iter().zip(cloud.colors()) {
        let _ = writeln!(s, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2]);
    }
    s
}

pub fn from_ply_str(text: &str) -> Result<PointCloud> {
    let bad = |m: String| Error::Load(format!("ply: {m}"));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing 'ply' magic".into()));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut props: Vec<(String, String)> = Vec::new();
    let mut ascii = false;
    for line in lines.by_ref() {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", "ascii", _] => ascii = true,
            ["format", other, ..] => return Err(bad(format!("unsupported format {other}"))),
            ["element", "vertex", n] => {
                vertex_count = Some(n.parse::<usize>().map_err(|e| bad(e.to_string()))?);
                in_vertex = true;
            }
            ["element", ..] => in_vertex = false,
            ["property", ty, name] if in_vertex => props.push((ty.to_string(), name.to_string())),
            ["end_header"] => break,
            _ => {}
        }
    }
    if !ascii {
        return Err(bad("no ascii format line".into()));
    }
    let n = vertex_count.ok_or_else(|| bad("no vertex element".into()))?;
    let col = |name: &str| props.iter().position(|(_, p)| p == name);
    let idx = ["x", "y", "z", "red", "green", "blue"]
        .map(|p| col(p).ok_or_else(|| bad(format!("missing property {p}"))));
    let mut ids = [0usize; 6];
    for (k, r) in idx.into_iter().enumerate() {
        ids[k] = r?;
    }
    let color_scale: Vec<f64> = ids[3..]
        .iter()
        .map(|&i| if props[i].0 == "uchar" || props[i].0 == "uint8" { 1.0 / 255.0 } else { 1.0 })
        .collect();

    let mut points = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for (row, line) in lines.take(n).enumerate() {
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("row {row}: {e}")))?;
        if vals.len() < props.len() {
            return Err(bad(format!("row {row}: expected {} values", props.len())));
        }
        points.push([vals[ids[0]], vals[ids[1]], vals[ids[2]]]);
        colors.push([
            vals[ids[3]] * color_scale[0],
            vals[ids[4]] * color_scale[1],
            vals[ids[5]] * color_scale[2],
        ]);
    }
    if points.len() != n {
        return Err(bad(format!("expected {n} vertices, found {}", points.len())));
    }
    PointCloud::new(points, colors).map_err(|e| bad(e.to_string()))
}
