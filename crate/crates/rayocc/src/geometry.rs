//! Pinhole camera, ray sampling, scale calibration, and the frustum grid.
//!
//! Conventions: camera frame has x right, y down, z forward; integer
//! pixel (i, j) has continuous coordinates (i + 0.5, j + 0.5). The ray
//! parameter `t` is Euclidean distance along the ray (not z-depth), so
//! the valid band [d_min, d_max] is a constant-width shell around the
//! camera center.

use crate::{Error, Result};
use nalgebra::{Matrix3, Point3, Vector3};
use serde::{Deserialize, Serialize};

/// Rigid transform p -> R p + t.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rot: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            trans: [0.0; 3],
        }
    }

    pub fn from_parts(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = rot[(i, j)];
            }
        }
        RigidTransform { rot: r, trans: [trans.x, trans.y, trans.z] }
    }

    pub fn translation_of(t: Vector3<f64>) -> Self {
        RigidTransform::from_parts(Matrix3::identity(), t)
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rot[i][j])
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::new(self.trans[0], self.trans[1], self.trans[2])
    }

    pub fn apply(&self, p: Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation() * p.coords + self.translation())
    }

    pub fn apply_vector(&self, v: Vector3<f64>) -> Vector3<f64> {
        self.rotation() * v
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation()))
    }
}

/// Pinhole camera with square pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    /// Focal length in pixels.
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// World -> camera transform.
    pub pose: RigidTransform,
    /// Euclidean distance from the camera center to the object center.
    pub object_distance: f64,
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if self.f <= 0.0 {
            return Err(Error::invalid(format!("camera: focal length {} must be > 0", self.f)));
        }
        if self.object_distance <= 0.0 {
            return Err(Error::invalid("camera: object_distance must be > 0"));
        }
        let r = self.pose.rotation();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::invalid(format!(
                "camera: rotation not orthonormal (|R^T R - I| = {err:.2e})"
            )));
        }
        Ok(())
    }

    /// Camera looking from `eye` (world) toward `target`, world z-up.
    pub fn look_at(
        eye: Point3<f64>,
        target: Point3<f64>,
        f: f64,
        width: u32,
        height: u32,
    ) -> Result<Camera> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::invalid("look_at: eye coincides with target"))?;
        let up = Vector3::new(0.0, 0.0, 1.0);
        let right = forward
            .cross(&up)
            .try_normalize(1e-9)
            .ok_or_else(|| Error::invalid("look_at: viewing direction parallel to world up"))?;
        let down = forward.cross(&right); // completes the x-right / y-down / z-forward frame
        let rot = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let trans = -(rot * eye.coords);
        let cam = Camera {
            f,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            pose: RigidTransform::from_parts(rot, trans),
            object_distance: (target - eye).norm(),
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn world_to_camera(&self, p: Point3<f64>) -> Point3<f64> {
        self.pose.apply(p)
    }

    pub fn camera_to_world(&self, p: Point3<f64>) -> Point3<f64> {
        self.pose.inverse().apply(p)
    }

    /// Focal length in half-image-width units; makes the scale factor
    /// resolution-independent.
    pub fn f_normalized(&self) -> f64 {
        self.f / (self.width as f64 / 2.0)
    }

    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[0] <= self.width as f64 && p[1] >= 0.0 && p[1] <= self.height as f64
    }

    /// Project a camera-frame point to pixel coordinates. `None` when the
    /// point is not strictly in front of the camera.
    pub fn project(&self, x: Point3<f64>) -> Option<[f64; 2]> {
        if x.z <= 0.0 {
            return None;
        }
        Some([self.f * x.x / x.z + self.cx, self.f * x.y / x.z + self.cy])
    }
}

/// A back-projected viewing ray in the camera frame.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    /// Image point the ray passes through (pixels).
    pub p: [f64; 2],
    /// Camera center; (0,0,0) in the camera frame.
    pub origin: Point3<f64>,
    /// Unit direction, z > 0.
    pub dir: Vector3<f64>,
}

/// dir = normalize((px-cx)/f, (py-cy)/f, 1), origin at the camera center.
pub fn backproject(camera: &Camera, p: [f64; 2]) -> Result<Ray> {
    if !camera.in_bounds(p) {
        return Err(Error::invalid(format!(
            "backproject: point ({}, {}) outside {}x{} image",
            p[0], p[1], camera.width, camera.height
        )));
    }
    let dir = Vector3::new((p[0] - camera.cx) / camera.f, (p[1] - camera.cy) / camera.f, 1.0);
    Ok(Ray {
        p,
        origin: Point3::origin(),
        dir: dir.normalize(),
    })
}

/// M points at Euclidean distances equally spaced over [d_min, d_max],
/// endpoints included.
pub fn sample_along_ray(ray: &Ray, m: usize, d_min: f64, d_max: f64) -> Result<Vec<Point3<f64>>> {
    sample_distances(m, d_min, d_max)
        .map(|ts| ts.into_iter().map(|t| ray.origin + ray.dir * t).collect())
}

pub fn sample_distances(m: usize, d_min: f64, d_max: f64) -> Result<Vec<f64>> {
    if m < 2 {
        return Err(Error::invalid(format!("sample_along_ray: M = {m} must be >= 2")));
    }
    if !(d_max > d_min && d_min > 0.0) {
        return Err(Error::invalid(format!(
            "sample_along_ray: need d_max > d_min > 0, got [{d_min}, {d_max}]"
        )));
    }
    let step = (d_max - d_min) / (m - 1) as f64;
    Ok((0..m).map(|i| d_min + i as f64 * step).collect())
}

/// Scale calibration factor s = object_distance / f_normalized: the
/// predicted shape scale is proportional to camera-object distance and
/// inversely proportional to focal length.
pub fn scale_factor(camera: &Camera) -> f64 {
    camera.object_distance / camera.f_normalized()
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Point3<f64>, max: Point3<f64>) -> Self {
        Aabb { min: [min.x, min.y, min.z], max: [max.x, max.y, max.z] }
    }

    pub fn min_p(&self) -> Point3<f64> {
        Point3::new(self.min[0], self.min[1], self.min[2])
    }

    pub fn max_p(&self) -> Point3<f64> {
        Point3::new(self.max[0], self.max[1], self.max[2])
    }

    pub fn size(&self) -> Vector3<f64> {
        self.max_p() - self.min_p()
    }

    pub fn center(&self) -> Point3<f64> {
        nalgebra::center(&self.min_p(), &self.max_p())
    }

    pub fn contains(&self, p: Point3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        Aabb {
            min: [
                self.min[0].min(other.min[0]),
                self.min[1].min(other.min[1]),
                self.min[2].min(other.min[2]),
            ],
            max: [
                self.max[0].max(other.max[0]),
                self.max[1].max(other.max[1]),
                self.max[2].max(other.max[2]),
            ],
        }
    }

    /// Grow by `frac` of the size on every side.
    pub fn padded(&self, frac: f64) -> Aabb {
        let s = self.size() * frac;
        Aabb {
            min: [self.min[0] - s.x, self.min[1] - s.y, self.min[2] - s.z],
            max: [self.max[0] + s.x, self.max[1] + s.y, self.max[2] + s.z],
        }
    }

    pub fn diagonal(&self) -> f64 {
        self.size().norm()
    }

    pub fn volume(&self) -> f64 {
        let s = self.size();
        s.x * s.y * s.z
    }
}

/// Occupancy predictions organized by (pixel u, pixel v, ray distance t):
/// the native output shape of ray-based prediction. Values are stored
/// row-major as [v][u][t] at the centers of an s_u x s_v pixel lattice
/// and M equally spaced distances.
#[derive(Debug, Clone)]
pub struct FrustumGrid {
    pub s_u: usize,
    pub s_v: usize,
    pub m: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub f: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

/// Continuous frustum coordinates of a camera-frame point, or a marker
/// that it falls outside the frustum shell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FrustumCoord {
    Inside { u: f64, v: f64, t: f64 },
    Outside,
}

impl FrustumGrid {
    pub fn new(
        s_u: usize,
        s_v: usize,
        m: usize,
        d_min: f64,
        d_max: f64,
        camera: &Camera,
    ) -> Result<Self> {
        if m < 2 {
            return Err(Error::invalid("frustum grid: M must be >= 2"));
        }
        if !(d_max > d_min && d_min > 0.0) {
            return Err(Error::invalid("frustum grid: need d_max > d_min > 0"));
        }
        Ok(FrustumGrid {
            s_u,
            s_v,
            m,
            d_min,
            d_max,
            f: camera.f,
            cx: camera.cx,
            cy: camera.cy,
            width: camera.width,
            height: camera.height,
            values: vec![0.0; s_u * s_v * m],
        })
    }

    pub fn idx(&self, iu: usize, iv: usize, it: usize) -> usize {
        (iv * self.s_u + iu) * self.m + it
    }

    /// Pixel coordinates of lattice column/row centers.
    pub fn lattice_u(&self, iu: usize) -> f64 {
        (iu as f64 + 0.5) * self.width as f64 / self.s_u as f64
    }

    pub fn lattice_v(&self, iv: usize) -> f64 {
        (iv as f64 + 0.5) * self.height as f64 / self.s_v as f64
    }

    pub fn t_of(&self, it: usize) -> f64 {
        self.d_min + it as f64 * (self.d_max - self.d_min) / (self.m - 1) as f64
    }

    /// Trilinear interpolation at a camera-frame point; `None` outside
    /// the frustum shell. Lattice borders clamp.
    pub fn sample_at_camera_point(&self, x: Point3<f64>) -> Option<f32> {
        match world_to_frustum(self, x) {
            FrustumCoord::Outside => None,
            FrustumCoord::Inside { u, v, t } => {
                let fu = u * self.s_u as f64 / self.width as f64 - 0.5;
                let fv = v * self.s_v as f64 / self.height as f64 - 0.5;
                let ft = (t - self.d_min) * (self.m - 1) as f64 / (self.d_max - self.d_min);
                Some(self.trilinear_index(fu, fv, ft))
            }
        }
    }

    /// Trilinear interpolation in continuous index space, border-clamped.
    pub fn trilinear_index(&self, fu: f64, fv: f64, ft: f64) -> f32 {
        let (u0, u1, au) = clamp_axis(fu, self.s_u);
        let (v0, v1, av) = clamp_axis(fv, self.s_v);
        let (t0, t1, at) = clamp_axis(ft, self.m);
        let mut acc = 0.0f64;
        for (vi, wv) in [(v0, 1.0 - av), (v1, av)] {
            for (ui, wu) in [(u0, 1.0 - au), (u1, au)] {
                for (ti, wt) in [(t0, 1.0 - at), (t1, at)] {
                    let w = wv * wu * wt;
                    if w != 0.0 {
                        acc += w * self.values[self.idx(ui, vi, ti)] as f64;
                    }
                }
            }
        }
        acc as f32
    }
}

fn clamp_axis(x: f64, n: usize) -> (usize, usize, f64) {
    let c = x.clamp(0.0, (n - 1) as f64);
    let i0 = (c.floor() as usize).min(n - 1);
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

/// Map a camera-frame point to (u, v, t) frustum coordinates: (u, v) the
/// continuous pixel projection, t the Euclidean distance to the camera
/// center. A point behind the camera, outside the image, or outside
/// [d_min, d_max] is `Outside` (never an error).
pub fn world_to_frustum(grid: &FrustumGrid, x: Point3<f64>) -> FrustumCoord {
    if x.z <= 0.0 {
        return FrustumCoord::Outside;
    }
    let u = grid.f * x.x / x.z + grid.cx;
    let v = grid.f * x.y / x.z + grid.cy;
    if u < 0.0 || u > grid.width as f64 || v < 0.0 || v > grid.height as f64 {
        return FrustumCoord::Outside;
    }
    // tolerance so samples placed exactly at d_min/d_max stay inside
    let t = x.coords.norm();
    if t < grid.d_min - 1e-9 || t > grid.d_max + 1e-9 {
        return FrustumCoord::Outside;
    }
    FrustumCoord::Inside { u, v, t }
}

/// Resample the frustum grid onto a regular N^3 grid over camera-frame
/// `bounds` (grid points span the bounds inclusively, x fastest).
/// Out-of-frustum points are empty (0).
pub fn resample_frustum_to_grid(grid: &FrustumGrid, n: usize, bounds: &Aabb) -> Result<Vec<f32>> {
    if n < 2 {
        return Err(Error::invalid(format!("resample: N = {n} must be >= 2")));
    }
    use rayon::prelude::*;
    let size = bounds.size();
    let step = size / (n - 1) as f64;
    let min = bounds.min_p();
    let mut out = vec![0.0f32; n * n * n];
    let slab = n * n;
    let fill = |iz: usize, plane: &mut [f32]| {
        let z = min.z + iz as f64 * step.z;
        for iy in 0..n {
            let y = min.y + iy as f64 * step.y;
            for ix in 0..n {
                let x = min.x + ix as f64 * step.x;
                if let Some(v) = grid.sample_at_camera_point(Point3::new(x, y, z)) {
                    plane[iy * n + ix] = v;
                }
            }
        }
    };
    if rayon::current_num_threads() > 1 && n >= 32 {
        out.par_chunks_mut(slab).enumerate().for_each(|(iz, p)| fill(iz, p));
    } else {
        for (iz, p) in out.chunks_mut(slab).enumerate() {
            fill(iz, p);
        }
    }
    Ok(out)
}

// ── manifest serialization ───────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CameraJson {
    f: f64,
    cx: f64,
    cy: f64,
    #[serde(rename = "W")]
    w: u32,
    #[serde(rename = "H")]
    h: u32,
    #[serde(rename = "R")]
    r: Vec<f64>,
    t: [f64; 3],
    object_distance: f64,
}

impl Serialize for Camera {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut r = Vec::with_capacity(9);
        for row in &self.pose.rot {
            r.extend_from_slice(row);
        }
        CameraJson {
            f: self.f,
            cx: self.cx,
            cy: self.cy,
            w: self.width,
            h: self.height,
            r,
            t: self.pose.trans,
            object_distance: self.object_distance,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Camera {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = CameraJson::deserialize(d)?;
        if j.r.len() != 9 {
            return Err(serde::de::Error::custom("camera R must have 9 entries"));
        }
        let mut rot = [[0.0; 3]; 3];
        for i in 0..3 {
            for k in 0..3 {
                rot[i][k] = j.r[i * 3 + k];
            }
        }
        Ok(Camera {
            f: j.f,
            cx: j.cx,
            cy: j.cy,
            width: j.w,
            height: j.h,
            pose: RigidTransform { rot, trans: j.t },
            object_distance: j.object_distance,
        })
    }
}

#[cfg(test)]
mod tests;
