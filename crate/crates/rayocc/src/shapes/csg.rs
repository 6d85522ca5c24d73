//! Constructive solid geometry over sphere/box/cylinder primitives.
//!
//! Occupancy is decided by a signed-distance composition (union = min,
//! intersection = max, difference = max(a, -b)); a point is inside iff
//! the sdf is negative. All node transforms are rigid, so distances are
//! preserved and the composition stays exact for membership tests.

use crate::geometry::{Aabb, RigidTransform};
use nalgebra::{Point3, Vector3};
use serde::{Deserialize, Serialize};

fn default_albedo() -> [f32; 3] {
    [0.8, 0.3, 0.25]
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Csg {
    Sphere {
        center: [f64; 3],
        radius: f64,
        #[serde(default = "default_albedo")]
        albedo: [f32; 3],
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        #[serde(default = "default_albedo")]
        albedo: [f32; 3],
    },
    Cylinder {
        center: [f64; 3],
        /// Unit axis direction.
        axis: [f64; 3],
        radius: f64,
        half_height: f64,
        #[serde(default = "default_albedo")]
        albedo: [f32; 3],
    },
    Union { a: Box<Csg>, b: Box<Csg> },
    Intersection { a: Box<Csg>, b: Box<Csg> },
    Difference { a: Box<Csg>, b: Box<Csg> },
    Transformed { transform: RigidTransform, child: Box<Csg> },
}

impl Csg {
    pub fn sphere(center: [f64; 3], radius: f64) -> Csg {
        Csg::Sphere { center, radius, albedo: default_albedo() }
    }

    pub fn cuboid(center: [f64; 3], half_extents: [f64; 3]) -> Csg {
        Csg::Box { center, half_extents, albedo: default_albedo() }
    }

    pub fn cylinder(center: [f64; 3], axis: [f64; 3], radius: f64, half_height: f64) -> Csg {
        let a = Vector3::new(axis[0], axis[1], axis[2]).normalize();
        Csg::Cylinder {
            center,
            axis: [a.x, a.y, a.z],
            radius,
            half_height,
            albedo: default_albedo(),
        }
    }

    pub fn union(a: Csg, b: Csg) -> Csg {
        Csg::Union { a: a.into(), b: b.into() }
    }

    pub fn intersection(a: Csg, b: Csg) -> Csg {
        Csg::Intersection { a: a.into(), b: b.into() }
    }

    pub fn difference(a: Csg, b: Csg) -> Csg {
        Csg::Difference { a: a.into(), b: b.into() }
    }

    pub fn with_albedo(mut self, rgb: [f32; 3]) -> Csg {
        match &mut self {
            Csg::Sphere { albedo, .. } | Csg::Box { albedo, .. } | Csg::Cylinder { albedo, .. } => {
                *albedo = rgb
            }
            _ => {}
        }
        self
    }

    /// Signed distance bound; negative inside. Exact for primitives,
    /// conservative for boolean composites.
    pub fn sdf(&self, p: Point3<f64>) -> f64 {
        match self {
            Csg::Sphere { center, radius, .. } => (p - pt(center)).norm() - radius,
            Csg::Box { center, half_extents, .. } => {
                let d = p - pt(center);
                let q = Vector3::new(
                    d.x.abs() - half_extents[0],
                    d.y.abs() - half_extents[1],
                    d.z.abs() - half_extents[2],
                );
                let outside = Vector3::new(q.x.max(0.0), q.y.max(0.0), q.z.max(0.0)).norm();
                outside + q.x.max(q.y).max(q.z).min(0.0)
            }
            Csg::Cylinder { center, axis, radius, half_height, .. } => {
                let d = p - pt(center);
                let ax = vec3(axis);
                let h = d.dot(&ax);
                let radial = (d - ax * h).norm();
                let dx = radial - radius;
                let dy = h.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dy.max(0.0).powi(2)).sqrt();
                outside + dx.max(dy).min(0.0)
            }
            Csg::Union { a, b } => a.sdf(p).min(b.sdf(p)),
            Csg::Intersection { a, b } => a.sdf(p).max(b.sdf(p)),
            Csg::Difference { a, b } => a.sdf(p).max(-b.sdf(p)),
            Csg::Transformed { transform, child } => child.sdf(transform.inverse().apply(p)),
        }
    }

    /// Conservative axis-aligned bounding box in the shape's frame.
    pub fn bbox(&self) -> Aabb {
        match self {
            Csg::Sphere { center, radius, .. } => Aabb {
                min: [center[0] - radius, center[1] - radius, center[2] - radius],
                max: [center[0] + radius, center[1] + radius, center[2] + radius],
            },
            Csg::Box { center, half_extents, .. } => Aabb {
                min: [
                    center[0] - half_extents[0],
                    center[1] - half_extents[1],
                    center[2] - half_extents[2],
                ],
                max: [
                    center[0] + half_extents[0],
                    center[1] + half_extents[1],
                    center[2] + half_extents[2],
                ],
            },
            Csg::Cylinder { center, axis, radius, half_height, .. } => {
                // extent along each world axis e: |h * (a.e)| + r * |e - (a.e)a|
                let a = vec3(axis);
                let mut min = [0.0; 3];
                let mut max = [0.0; 3];
                for i in 0..3 {
                    let mut e = Vector3::zeros();
                    e[i] = 1.0;
                    let axial = (a[i] * half_height).abs();
                    let radial = radius * (e - a * a[i]).norm();
                    min[i] = center[i] - axial - radial;
                    max[i] = center[i] + axial + radial;
                }
                Aabb { min, max }
            }
            Csg::Union { a, b } => a.bbox().union(&b.bbox()),
            Csg::Intersection { a, b } => {
                let (ba, bb) = (a.bbox(), b.bbox());
                Aabb {
                    min: [
                        ba.min[0].max(bb.min[0]),
                        ba.min[1].max(bb.min[1]),
                        ba.min[2].max(bb.min[2]),
                    ],
                    max: [
                        ba.max[0].min(bb.max[0]),
                        ba.max[1].min(bb.max[1]),
                        ba.max[2].min(bb.max[2]),
                    ],
                }
            }
            Csg::Difference { a, .. } => a.bbox(),
            Csg::Transformed { transform, child } => {
                let bb = child.bbox();
                let mut min = [f64::INFINITY; 3];
                let mut max = [f64::NEG_INFINITY; 3];
                for corner in 0..8 {
                    let c = Point3::new(
                        if corner & 1 == 0 { bb.min[0] } else { bb.max[0] },
                        if corner & 2 == 0 { bb.min[1] } else { bb.max[1] },
                        if corner & 4 == 0 { bb.min[2] } else { bb.max[2] },
                    );
                    let t = transform.apply(c);
                    for i in 0..3 {
                        min[i] = min[i].min(t[i]);
                        max[i] = max[i].max(t[i]);
                    }
                }
                Aabb { min, max }
            }
        }
    }

    /// Uniformly scale the shape about the origin.
    pub fn scaled(&self, s: f64) -> Csg {
        match self {
            Csg::Sphere { center, radius, albedo } => Csg::Sphere {
                center: scale3(center, s),
                radius: radius * s,
                albedo: *albedo,
            },
            Csg::Box { center, half_extents, albedo } => Csg::Box {
                center: scale3(center, s),
                half_extents: scale3(half_extents, s),
                albedo: *albedo,
            },
            Csg::Cylinder { center, axis, radius, half_height, albedo } => Csg::Cylinder {
                center: scale3(center, s),
                axis: *axis,
                radius: radius * s,
                half_height: half_height * s,
                albedo: *albedo,
            },
            Csg::Union { a, b } => Csg::union(a.scaled(s), b.scaled(s)),
            Csg::Intersection { a, b } => Csg::intersection(a.scaled(s), b.scaled(s)),
            Csg::Difference { a, b } => Csg::difference(a.scaled(s), b.scaled(s)),
            Csg::Transformed { transform, child } => Csg::Transformed {
                transform: RigidTransform {
                    rot: transform.rot,
                    trans: scale3(&transform.trans, s),
                },
                child: child.scaled(s).into(),
            },
        }
    }

    /// Radius of the bounding sphere about the origin.
    pub fn bounding_radius(&self) -> f64 {
        let bb = self.bbox();
        let mut r: f64 = 0.0;
        for corner in 0..8 {
            let c = Vector3::new(
                if corner & 1 == 0 { bb.min[0] } else { bb.max[0] },
                if corner & 2 == 0 { bb.min[1] } else { bb.max[1] },
                if corner & 4 == 0 { bb.min[2] } else { bb.max[2] },
            );
            r = r.max(c.norm());
        }
        r
    }
}

/// 1 iff x lies inside the CSG volume.
pub fn occupancy_analytic(shape: &Csg, x: Point3<f64>) -> u8 {
    if shape.sdf(x) < 0.0 {
        1
    } else {
        0
    }
}

fn pt(a: &[f64; 3]) -> Point3<f64> {
    Point3::new(a[0], a[1], a[2])
}

fn vec3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn scale3(a: &[f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}
