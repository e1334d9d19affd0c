//! Radar-to-camera projection and REVP rasterization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Points at or below this camera depth are culled.
pub const DEFAULT_Z_MIN: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::Camera(format!("{self:?}")))
        }
    }
}

/// Rigid transform from the radar frame into the camera frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsic {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Extrinsic {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Rotation about the camera x axis (pitch) then y axis (yaw), in radians.
    pub fn from_pitch_yaw(pitch: f64, yaw: f64, translation: [f64; 3]) -> Self {
        let (sp, cp) = pitch.sin_cos();
        let (sy, cy) = yaw.sin_cos();
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| ry[i][k] * rx[k][j]).sum();
            }
        }
        Self {
            rotation: r,
            translation,
        }
    }

    /// Rᵀ·R = I and det(R) = +1, both within 1e-9.
    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-9 || !dot.is_finite() {
                    return Err(Error::Extrinsic(format!("RᵀR[{i}][{j}] = {dot}")));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::Extrinsic(format!("det(R) = {det}")));
        }
        if self.translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::Extrinsic("non-finite translation".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    pub fn apply_inverse(&self, q: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let d = [
            q[0] - self.translation[0],
            q[1] - self.translation[1],
            q[2] - self.translation[2],
        ];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = r[0][j] * d[0] + r[1][j] * d[1] + r[2][j] * d[2];
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub velocity: f64,
    pub power: f64,
    pub frame_idx: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    pub range: f64,
    /// Degrees, positive above the optical axis.
    pub elevation: f64,
    pub velocity: f64,
    pub power: f64,
    /// Position in the input point list.
    pub index: usize,
}

pub fn project_points(points: &[RadarPoint], ext: &Extrinsic, cam: &CameraModel) -> Result<Vec<ProjectedPoint>> {
    project_points_with(points, ext, cam, DEFAULT_Z_MIN)
}

pub fn project_points_with(
    points: &[RadarPoint],
    ext: &Extrinsic,
    cam: &CameraModel,
    z_min: f64,
) -> Result<Vec<ProjectedPoint>> {
    ext.validate()?;
    cam.validate()?;
    let mut out = Vec::with_capacity(points.len());
    for (index, p) in points.iter().enumerate() {
        let [x, y, z] = ext.apply([p.x, p.y, p.z]);
        if z <= z_min {
            continue;
        }
        let u = cam.fx * x / z + cam.cx;
        let v = cam.fy * y / z + cam.cy;
        if !(u >= 0.0 && u < cam.width as f64 && v >= 0.0 && v < cam.height as f64) {
            continue;
        }
        let range = (x * x + y * y + z * z).sqrt();
        out.push(ProjectedPoint {
            u,
            v,
            range,
            elevation: (-y / range).asin().to_degrees(),
            velocity: p.velocity,
            power: p.power,
            index,
        });
    }
    Ok(out)
}

/// Radar-frame position of the point seen at pixel `(u, v)` with the given range.
pub fn back_project(u: f64, v: f64, range: f64, ext: &Extrinsic, cam: &CameraModel) -> [f64; 3] {
    let d = [(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0];
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    ext.apply_inverse([range * d[0] / n, range * d[1] / n, range * d[2] / n])
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormRanges {
    pub range: (f64, f64),
    pub elevation: (f64, f64),
    pub velocity: (f64, f64),
    pub power: (f64, f64),
}

impl Default for NormRanges {
    fn default() -> Self {
        Self {
            range: (0.0, 100.0),
            elevation: (-30.0, 30.0),
            velocity: (-10.0, 10.0),
            power: (0.0, 50.0),
        }
    }
}

impl NormRanges {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("range", self.range),
            ("elevation", self.elevation),
            ("velocity", self.velocity),
            ("power", self.power),
        ] {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::Config(format!("radar.norm.{name}: need finite max > min")));
            }
        }
        Ok(())
    }
}

fn normalize(v: f64, (lo, hi): (f64, f64)) -> f64 {
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Four-channel radar raster: range, elevation, velocity, power.
#[derive(Debug, Clone, PartialEq)]
pub struct RevpMap {
    pub height: usize,
    pub width: usize,
    /// Channel-major `4×H×W`, each value in [0, 1].
    pub channels: Vec<f64>,
    pub occupancy: Vec<bool>,
}

impl RevpMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            channels: vec![0.0; 4 * height * width],
            occupancy: vec![false; height * width],
        }
    }

    pub fn occupied(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 4] {
        let hw = self.height * self.width;
        let i = y * self.width + x;
        [
            self.channels[i],
            self.channels[hw + i],
            self.channels[2 * hw + i],
            self.channels[3 * hw + i],
        ]
    }
}

/// Pixel containing `(u, v)`.
pub fn pixel_of(u: f64, v: f64, cam: &CameraModel) -> (usize, usize) {
    let x = (u.floor().max(0.0) as usize).min(cam.width - 1);
    let y = (v.floor().max(0.0) as usize).min(cam.height - 1);
    (y, x)
}

/// Writes each point at its pixel; collisions keep the smallest range, then the smallest index.
pub fn rasterize_revp(projected: &[ProjectedPoint], cam: &CameraModel, norm: &NormRanges) -> RevpMap {
    let (h, w) = (cam.height, cam.width);
    let mut winner: Vec<Option<&ProjectedPoint>> = vec![None; h * w];
    for p in projected {
        let (y, x) = pixel_of(p.u, p.v, cam);
        let slot = &mut winner[y * w + x];
        let better = match slot {
            None => true,
            Some(q) => (p.range, p.index) < (q.range, q.index),
        };
        if better {
            *slot = Some(p);
        }
    }
    let mut map = RevpMap::empty(h, w);
    let hw = h * w;
    for (i, p) in winner.iter().enumerate() {
        if let Some(p) = p {
            map.occupancy[i] = true;
            map.channels[i] = normalize(p.range, norm.range);
            map.channels[hw + i] = normalize(p.elevation, norm.elevation);
            map.channels[2 * hw + i] = normalize(p.velocity, norm.velocity);
            map.channels[3 * hw + i] = normalize(p.power, norm.power);
        }
    }
    map
}

/// Concatenates the `n_frames` most recent buffers; `frames[0]` is the current frame.
pub fn accumulate_frames(frames: &[Vec<RadarPoint>], n_frames: usize) -> Vec<RadarPoint> {
    frames.iter().take(n_frames.max(1)).flatten().copied().collect()
}
