//! Ray-cast renderer for CSG scenes and triangle meshes.
//!
//! CSG shapes are traced exactly: every primitive contributes a ray
//! interval with boundary normals, and booleans are evaluated by an
//! event sweep over the interval endpoints. Shading is Lambertian with
//! per-primitive albedo; misses are white.

use crate::geometry::{backproject, Camera};
use crate::shapes::csg::Csg;
use crate::shapes::mesh::TriMesh;
use crate::{Error, Result};
use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

/// RGB image with values in [0,1], row-major, channels interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(width: u32, height: u32, rgb: [f32; 3]) -> Image {
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Binary PPM (P6), 8-bit, values scaled linearly to 0-255.
    pub fn save_ppm(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        write!(w, "P6\n{} {}\n255\n", self.width, self.height).map_err(io_err)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        w.write_all(&bytes).map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load_ppm(path: &Path) -> Result<Image> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = || path.display().to_string();
        // header: "P6" whitespace W whitespace H whitespace MAX single-whitespace
        let mut pos = 0usize;
        let mut token = || -> Result<String> {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            // skip comments
            while pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        if token()? != "P6" {
            return Err(Error::format(p(), "not a binary PPM (P6)"));
        }
        let width: u32 = token()?.parse().map_err(|_| Error::format(p(), "bad width"))?;
        let height: u32 = token()?.parse().map_err(|_| Error::format(p(), "bad height"))?;
        let maxval: u32 = token()?.parse().map_err(|_| Error::format(p(), "bad maxval"))?;
        if maxval != 255 {
            return Err(Error::format(p(), "only 8-bit PPM supported"));
        }
        pos += 1; // single whitespace after maxval
        let need = (width * height * 3) as usize;
        if bytes.len() < pos + need {
            return Err(Error::format(p(), "truncated pixel data"));
        }
        let data = bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
        Ok(Image { width, height, data })
    }
}

/// What the renderer (and dataset generator) can draw.
pub enum Scene<'a> {
    Analytic(&'a Csg),
    Mesh(&'a TriMesh),
}

#[derive(Debug, Clone, Copy)]
struct Boundary {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f32; 3],
}

#[derive(Debug, Clone, Copy)]
struct Span {
    enter: Boundary,
    exit: Boundary,
}

/// Sorted disjoint ray/solid intersection spans over the full line.
fn csg_spans(shape: &Csg, origin: Point3<f64>, dir: Vector3<f64>) -> Vec<Span> {
    match shape {
        Csg::Sphere { center, radius, albedo } => {
            let oc = origin - Point3::new(center[0], center[1], center[2]);
            let b = oc.dot(&dir);
            let c = oc.norm_squared() - radius * radius;
            let disc = b * b - c;
            if disc <= 0.0 {
                return Vec::new();
            }
            let sq = disc.sqrt();
            let (t0, t1) = (-b - sq, -b + sq);
            let nrm = |t: f64| (origin + dir * t - Point3::new(center[0], center[1], center[2])) / *radius;
            vec![Span {
                enter: Boundary { t: t0, normal: nrm(t0), albedo: *albedo },
                exit: Boundary { t: t1, normal: nrm(t1), albedo: *albedo },
            }]
        }
        Csg::Box { center, half_extents, albedo } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis0 = 0usize;
            let mut axis1 = 0usize;
            for i in 0..3 {
                let lo = center[i] - half_extents[i];
                let hi = center[i] + half_extents[i];
                if dir[i].abs() < 1e-15 {
                    if origin[i] < lo || origin[i] > hi {
                        return Vec::new();
                    }
                    continue;
                }
                let inv = 1.0 / dir[i];
                let (mut near, mut far) = ((lo - origin[i]) * inv, (hi - origin[i]) * inv);
                if near > far {
                    std::mem::swap(&mut near, &mut far);
                }
                if near > t0 {
                    t0 = near;
                    axis0 = i;
                }
                if far < t1 {
                    t1 = far;
                    axis1 = i;
                }
            }
            if t0 >= t1 || !t0.is_finite() || !t1.is_finite() {
                return Vec::new();
            }
            let mut n0 = Vector3::zeros();
            n0[axis0] = -dir[axis0].signum();
            let mut n1 = Vector3::zeros();
            n1[axis1] = dir[axis1].signum();
            vec![Span {
                enter: Boundary { t: t0, normal: n0, albedo: *albedo },
                exit: Boundary { t: t1, normal: n1, albedo: *albedo },
            }]
        }
        Csg::Cylinder { center, axis, radius, half_height, albedo } => {
            let a = Vector3::new(axis[0], axis[1], axis[2]);
            let oc = origin - Point3::new(center[0], center[1], center[2]);
            let d_ax = dir.dot(&a);
            let o_ax = oc.dot(&a);
            let d_r = dir - a * d_ax;
            let o_r = oc - a * o_ax;

            // radial band
            let qa = d_r.norm_squared();
            let (r0, r1, radial_valid);
            if qa < 1e-15 {
                if o_r.norm_squared() > radius * radius {
                    return Vec::new();
                }
                r0 = f64::NEG_INFINITY;
                r1 = f64::INFINITY;
                radial_valid = false;
            } else {
                let qb = o_r.dot(&d_r);
                let qc = o_r.norm_squared() - radius * radius;
                let disc = qb * qb - qa * qc;
                if disc <= 0.0 {
                    return Vec::new();
                }
                let sq = disc.sqrt();
                r0 = (-qb - sq) / qa;
                r1 = (-qb + sq) / qa;
                radial_valid = true;
            }

            // axial slab
            let (mut h0, mut h1, axial_valid);
            if d_ax.abs() < 1e-15 {
                if o_ax.abs() > *half_height {
                    return Vec::new();
                }
                h0 = f64::NEG_INFINITY;
                h1 = f64::INFINITY;
                axial_valid = false;
            } else {
                h0 = (-half_height - o_ax) / d_ax;
                h1 = (half_height - o_ax) / d_ax;
                if h0 > h1 {
                    std::mem::swap(&mut h0, &mut h1);
                }
                axial_valid = true;
            }

            let t0 = r0.max(h0);
            let t1 = r1.min(h1);
            if t0 >= t1 || !t0.is_finite() || !t1.is_finite() {
                return Vec::new();
            }
            let normal_at = |t: f64, from_radial: bool| -> Vector3<f64> {
                if from_radial {
                    let p = oc + dir * t;
                    let q = p - a * p.dot(&a);
                    q / *radius
                } else {
                    a * (o_ax + t * d_ax).signum()
                }
            };
            let n0 = normal_at(t0, radial_valid && t0 == r0);
            let n1 = normal_at(t1, radial_valid && t1 == r1);
            let _ = axial_valid;
            vec![Span {
                enter: Boundary { t: t0, normal: n0, albedo: *albedo },
                exit: Boundary { t: t1, normal: n1, albedo: *albedo },
            }]
        }
        Csg::Union { a, b } => combine(
            csg_spans(a, origin, dir),
            csg_spans(b, origin, dir),
            |ia, ib| ia || ib,
            false,
        ),
        Csg::Intersection { a, b } => combine(
            csg_spans(a, origin, dir),
            csg_spans(b, origin, dir),
            |ia, ib| ia && ib,
            false,
        ),
        Csg::Difference { a, b } => combine(
            csg_spans(a, origin, dir),
            csg_spans(b, origin, dir),
            |ia, ib| ia && !ib,
            true,
        ),
        Csg::Transformed { transform, child } => {
            let inv = transform.inverse();
            let local = csg_spans(child, inv.apply(origin), inv.apply_vector(dir));
            local
                .into_iter()
                .map(|s| Span {
                    enter: Boundary {
                        t: s.enter.t,
                        normal: transform.apply_vector(s.enter.normal),
                        albedo: s.enter.albedo,
                    },
                    exit: Boundary {
                        t: s.exit.t,
                        normal: transform.apply_vector(s.exit.normal),
                        albedo: s.exit.albedo,
                    },
                })
                .collect()
        }
    }
}

/// Event sweep over both span lists; `flip_b` negates boundary normals
/// contributed by `b` (surfaces carved by a difference face inward).
fn combine(
    a: Vec<Span>,
    b: Vec<Span>,
    member: impl Fn(bool, bool) -> bool,
    flip_b: bool,
) -> Vec<Span> {
    struct Event {
        t: f64,
        is_b: bool,
        entering: bool,
        boundary: Boundary,
    }
    let mut events = Vec::with_capacity(2 * (a.len() + b.len()));
    for (spans, is_b) in [(&a, false), (&b, true)] {
        for s in spans.iter() {
            events.push(Event { t: s.enter.t, is_b, entering: true, boundary: s.enter });
            events.push(Event { t: s.exit.t, is_b, entering: false, boundary: s.exit });
        }
    }
    events.sort_by(|x, y| x.t.partial_cmp(&y.t).unwrap());

    let mut in_a = false;
    let mut in_b = false;
    let mut inside = member(in_a, in_b);
    let mut open: Option<Boundary> = None;
    let mut out = Vec::new();
    for ev in events {
        if ev.is_b {
            in_b = ev.entering;
        } else {
            in_a = ev.entering;
        }
        let now = member(in_a, in_b);
        if now != inside {
            let mut boundary = ev.boundary;
            if ev.is_b && flip_b {
                boundary.normal = -boundary.normal;
            }
            if now {
                open = Some(boundary);
            } else if let Some(enter) = open.take() {
                out.push(Span { enter, exit: boundary });
            }
            inside = now;
        }
    }
    out
}

/// First solid hit along a world-frame ray (t > eps), with its surface
/// normal and albedo.
pub fn first_hit(
    scene: &Scene,
    origin: Point3<f64>,
    dir: Vector3<f64>,
) -> Option<(f64, Vector3<f64>, [f32; 3])> {
    const T_EPS: f64 = 1e-9;
    match scene {
        Scene::Analytic(csg) => {
            let spans = csg_spans(csg, origin, dir);
            spans
                .iter()
                .find(|s| s.enter.t > T_EPS)
                .map(|s| (s.enter.t, s.enter.normal, s.enter.albedo))
        }
        Scene::Mesh(mesh) => {
            let mut best: Option<(f64, Vector3<f64>)> = None;
            for i in 0..mesh.triangles.len() {
                let [v0, v1, v2] = mesh.tri(i);
                if let Some(t) = moller_trumbore(origin, dir, v0, v1, v2) {
                    if t > T_EPS && best.map_or(true, |(bt, _)| t < bt) {
                        let mut n = mesh.face_normal(i).normalize();
                        if n.dot(&dir) > 0.0 {
                            n = -n;
                        }
                        best = Some((t, n));
                    }
                }
            }
            best.map(|(t, n)| (t, n, [0.8, 0.3, 0.25]))
        }
    }
}

fn moller_trumbore(
    origin: Point3<f64>,
    dir: Vector3<f64>,
    v0: Point3<f64>,
    v1: Point3<f64>,
    v2: Point3<f64>,
) -> Option<f64> {
    let e1 = v1 - v0;
    let e2 = v2 - v0;
    let pvec = dir.cross(&e2);
    let det = e1.dot(&pvec);
    if det.abs() < 1e-14 {
        return None;
    }
    let inv = 1.0 / det;
    let tvec = origin - v0;
    let u = tvec.dot(&pvec) * inv;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&e1);
    let v = dir.dot(&qvec) * inv;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&qvec) * inv)
}

/// Render one view: per-pixel back-projected rays, Lambertian shading
/// max(0, n.l) with per-primitive albedo, white background on miss.
pub fn render_view(scene: &Scene, camera: &Camera, light_dir: Vector3<f64>) -> Result<Image> {
    camera.validate()?;
    let l = light_dir.normalize();
    let inv_pose = camera.pose.inverse();
    let origin_w = inv_pose.apply(Point3::origin());
    let (w, h) = (camera.width, camera.height);
    let mut img = Image::filled(w, h, [1.0, 1.0, 1.0]);

    let render_row = |y: u32, row: &mut [f32]| {
        for x in 0..w {
            let p = [x as f64 + 0.5, y as f64 + 0.5];
            let ray = backproject(camera, p).expect("pixel center in bounds");
            let dir_w = inv_pose.apply_vector(ray.dir);
            if let Some((_t, n, albedo)) = first_hit(scene, origin_w, dir_w) {
                let lambert = n.dot(&l).max(0.0) as f32;
                let i = (x * 3) as usize;
                row[i] = albedo[0] * lambert;
                row[i + 1] = albedo[1] * lambert;
                row[i + 2] = albedo[2] * lambert;
            }
        }
    };

    let row_len = (w * 3) as usize;
    if rayon::current_num_threads() > 1 {
        img.data
            .par_chunks_mut(row_len)
            .enumerate()
            .for_each(|(y, row)| render_row(y as u32, row));
    } else {
        for (y, row) in img.data.chunks_mut(row_len).enumerate() {
            render_row(y as u32, row);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapes::mesh::icosphere;

    fn camera_at(dist: f64) -> Camera {
        Camera::look_at(Point3::new(0.0, -dist, 0.0), Point3::origin(), 76.8, 64, 64).unwrap()
    }

    #[test]
    fn empty_scene_renders_white() {
        // an intersection of disjoint spheres is empty
        let empty = Csg::intersection(
            Csg::sphere([0.0, 0.0, 0.0], 0.1),
            Csg::sphere([1.0, 0.0, 0.0], 0.1),
        );
        let img = render_view(&Scene::Analytic(&empty), &camera_at(1.4), Vector3::new(0.3, -0.5, 0.8)).unwrap();
        assert!(img.data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn sphere_silhouette_radius_matches_projection() {
        let r = 0.3;
        let d = 1.4;
        let cam = camera_at(d);
        let sphere = Csg::sphere([0.0; 3], r);
        let img = render_view(&Scene::Analytic(&sphere), &cam, Vector3::new(0.3, -0.5, 0.8)).unwrap();
        let expected = cam.f * r / (d * d - r * r).sqrt();
        let mut max_r = 0.0f64;
        let mut count = 0;
        for y in 0..64 {
            for x in 0..64 {
                let px = img.pixel(x, y);
                if px != [1.0, 1.0, 1.0] {
                    count += 1;
                    let du = x as f64 + 0.5 - 32.0;
                    let dv = y as f64 + 0.5 - 32.0;
                    max_r = max_r.max((du * du + dv * dv).sqrt());
                }
            }
        }
        assert!(count > 0, "sphere must be visible");
        assert!(
            (max_r - expected).abs() <= 1.0,
            "silhouette radius {max_r:.2} vs expected {expected:.2}"
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let shape = Csg::union(
            Csg::sphere([0.1, 0.0, 0.05], 0.16),
            Csg::cuboid([-0.08, 0.0, -0.05], [0.16, 0.13, 0.10]),
        );
        let cam = camera_at(1.3);
        let l = Vector3::new(0.3, -0.5, 0.8);
        let a = render_view(&Scene::Analytic(&shape), &cam, l).unwrap();
        let b = render_view(&Scene::Analytic(&shape), &cam, l).unwrap();
        assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn difference_carves_a_visible_dent() {
        // box with a sphere bite taken out of the face toward the camera
        let shape = Csg::difference(
            Csg::cuboid([0.0; 3], [0.2; 3]),
            Csg::sphere([0.0, -0.2, 0.0], 0.15),
        );
        let cam = camera_at(1.2);
        let img = render_view(&Scene::Analytic(&shape), &cam, Vector3::new(0.2, -0.6, 0.75)).unwrap();
        // center pixel looks into the concave dent: the carved surface
        // normal differs from the flat face elsewhere
        let center = img.pixel(32, 32);
        let face = img.pixel(20, 32);
        assert_ne!(center, [1.0, 1.0, 1.0]);
        assert_ne!(face, [1.0, 1.0, 1.0]);
        assert_ne!(center, face);
    }

    #[test]
    fn mesh_and_analytic_sphere_silhouettes_agree() {
        let cam = camera_at(1.4);
        let l = Vector3::new(0.3, -0.5, 0.8);
        let mesh = icosphere(0.3, 3);
        let csg = Csg::sphere([0.0; 3], 0.3);
        let a = render_view(&Scene::Mesh(&mesh), &cam, l).unwrap();
        let b = render_view(&Scene::Analytic(&csg), &cam, l).unwrap();
        let mut mismatched = 0;
        for y in 0..64 {
            for x in 0..64 {
                let am = a.pixel(x, y) != [1.0, 1.0, 1.0];
                let bm = b.pixel(x, y) != [1.0, 1.0, 1.0];
                if am != bm {
                    mismatched += 1;
                }
            }
        }
        assert!(mismatched < 20, "{mismatched} silhouette pixels disagree");
    }

    #[test]
    fn ppm_round_trip() {
        let shape = Csg::sphere([0.0; 3], 0.25);
        let img = render_view(&Scene::Analytic(&shape), &camera_at(1.4), Vector3::new(0.3, -0.5, 0.8)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ppm");
        img.save_ppm(&path).unwrap();
        let back = Image::load_ppm(&path).unwrap();
        assert_eq!(back.width, 64);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
