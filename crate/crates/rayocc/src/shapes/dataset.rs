//! Dataset generation: ray-sampled occupancy bundles per rendered view.
//!
//! Per view the generator renders an image, draws R distinct random
//! pixels, back-projects each, samples M equally spaced distances along
//! the ray and stores exact analytic occupancy bits. Object scale and
//! camera distance co-vary per view (the shape is scaled by the same
//! factor that moves the camera), so a single image is genuinely
//! ambiguous about scale and only the calibration factor s resolves it.

use crate::geometry::{backproject, sample_along_ray, scale_factor, Camera};
use crate::rng::substream;
use crate::shapes::csg::{occupancy_analytic, Csg};
use crate::shapes::render::{render_view, Image, Scene};
use crate::{Error, Result};
use nalgebra::{Point3, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const RAYO_MAGIC: &[u8; 4] = b"RAYO";
const RAYO_VERSION: u32 = 1;

/// One stored ray: the 2D image point and M ground-truth occupancy bits.
#[derive(Debug, Clone, PartialEq)]
pub struct RayRecord {
    pub px: f32,
    pub py: f32,
    pub bits: Vec<u8>,
}

/// Per-view bundle of rays, the depth band, and the scale factor.
#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub m: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub s: f64,
    pub rays: Vec<RayRecord>,
}

impl RaySamples {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        let io_err = |e| Error::io(path.display().to_string(), e);
        w.write_all(RAYO_MAGIC).map_err(io_err)?;
        w.write_all(&RAYO_VERSION.to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.rays.len() as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.m as u32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.d_min as f32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.d_max as f32).to_le_bytes()).map_err(io_err)?;
        w.write_all(&(self.s as f32).to_le_bytes()).map_err(io_err)?;
        for ray in &self.rays {
            w.write_all(&ray.px.to_le_bytes()).map_err(io_err)?;
            w.write_all(&ray.py.to_le_bytes()).map_err(io_err)?;
            debug_assert_eq!(ray.bits.len(), self.m);
            w.write_all(&ray.bits).map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RaySamples> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let p = || path.display().to_string();
        if bytes.len() < 24 || &bytes[0..4] != RAYO_MAGIC {
            return Err(Error::format(p(), "bad magic, expected RAYO"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u32_at(4) != RAYO_VERSION {
            return Err(Error::format(p(), format!("unsupported version {}", u32_at(4))));
        }
        let r = u32_at(8) as usize;
        let m = u32_at(12) as usize;
        let d_min = f32_at(16) as f64;
        let d_max = f32_at(20) as f64;
        let s = f32_at(24) as f64;
        let stride = 8 + m;
        let mut pos = 28;
        if bytes.len() != pos + r * stride {
            return Err(Error::format(
                p(),
                format!("expected {} bytes of ray data, found {}", r * stride, bytes.len() - pos),
            ));
        }
        let mut rays = Vec::with_capacity(r);
        for _ in 0..r {
            let px = f32_at(pos);
            let py = f32_at(pos + 4);
            let bits = bytes[pos + 8..pos + 8 + m].to_vec();
            if bits.iter().any(|&b| b > 1) {
                return Err(Error::format(p(), "occupancy bits must be 0/1"));
            }
            rays.push(RayRecord { px, py, bits });
            pos += stride;
        }
        Ok(RaySamples { m, d_min, d_max, s, rays })
    }
}

/// Scene families the generator can produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Catalog {
    /// Cycle through primitive combinations with jittered parameters.
    Mixed,
    /// The canonical sphere-union-box test scene for every index.
    SphereBox,
}

impl std::str::FromStr for Catalog {
    type Err = Error;
    fn from_str(s: &str) -> Result<Catalog> {
        match s {
            "mixed" => Ok(Catalog::Mixed),
            "sphere-box" => Ok(Catalog::SphereBox),
            other => Err(Error::invalid(format!("unknown catalog {other:?} (mixed|sphere-box)"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub scenes: usize,
    pub views_per_scene: usize,
    /// Rays stored per view.
    pub rays: usize,
    /// Occupancy samples per ray.
    pub samples: usize,
    pub image_size: u32,
    pub d_min: f64,
    pub d_max: f64,
    /// Camera-object distance range; object scale co-varies.
    pub dist_min: f64,
    pub dist_max: f64,
    /// Focal length in half-image-width units.
    pub focal_norm: f64,
    pub catalog: Catalog,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            scenes: 4,
            views_per_scene: 8,
            rays: 5000,
            samples: 128,
            image_size: 64,
            d_min: 0.63,
            d_max: 2.16,
            dist_min: 1.0,
            dist_max: 1.7,
            focal_norm: 2.4,
            catalog: Catalog::Mixed,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewEntry {
    pub scene: usize,
    pub view: usize,
    pub image_file: String,
    pub rays_file: String,
    pub camera: Camera,
    /// Scale calibration factor of this view.
    pub s: f64,
    /// Uniform scale applied to the base scene for this view.
    pub sigma: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: GenConfig,
    pub scenes: Vec<Csg>,
    pub views: Vec<ViewEntry>,
}

/// Base scene for a catalog index. Shapes stay within a bounding radius
/// that keeps every scaled view inside the [d_min, d_max] shell.
pub fn catalog_scene(catalog: Catalog, index: usize, seed: u64) -> Csg {
    let mut rng = substream(seed, &format!("data/scene/{index}"));
    let jitter = |rng: &mut rand_chacha::ChaCha12Rng, lo: f64, hi: f64| rng.gen_range(lo..hi);
    let sphere_box = |rng: &mut rand_chacha::ChaCha12Rng| {
        let r = jitter(rng, 0.10, 0.13);
        Csg::union(
            Csg::sphere([jitter(rng, 0.05, 0.09), jitter(rng, -0.03, 0.03), 0.05], r)
                .with_albedo([0.85, 0.30, 0.22]),
            Csg::cuboid(
                [jitter(rng, -0.09, -0.05), 0.0, -0.04],
                [0.12, jitter(rng, 0.08, 0.11), 0.08],
            )
            .with_albedo([0.25, 0.45, 0.80]),
        )
    };
    match catalog {
        Catalog::SphereBox => sphere_box(&mut rng),
        Catalog::Mixed => match index % 4 {
            0 => sphere_box(&mut rng),
            1 => Csg::difference(
                Csg::cuboid([0.0, 0.0, 0.0], [0.14, 0.12, jitter(&mut rng, 0.08, 0.11)])
                    .with_albedo([0.30, 0.65, 0.35]),
                Csg::sphere([jitter(&mut rng, -0.04, 0.04), 0.0, 0.08], 0.10),
            ),
            2 => Csg::union(
                Csg::cylinder(
                    [0.0, 0.0, -0.02],
                    [jitter(&mut rng, -0.3, 0.3), jitter(&mut rng, -0.3, 0.3), 1.0],
                    jitter(&mut rng, 0.06, 0.08),
                    0.12,
                )
                .with_albedo([0.75, 0.60, 0.20]),
                Csg::sphere([0.0, jitter(&mut rng, 0.04, 0.08), 0.09], 0.09),
            ),
            _ => Csg::union(
                Csg::sphere([jitter(&mut rng, 0.04, 0.08), 0.04, 0.0], 0.11)
                    .with_albedo([0.70, 0.25, 0.55]),
                Csg::sphere([jitter(&mut rng, -0.10, -0.05), -0.04, 0.02], jitter(&mut rng, 0.08, 0.11)),
            ),
        },
    }
}

pub const LIGHT_DIR: [f64; 3] = [0.35, -0.45, 0.82];

struct ViewPlan {
    scene_index: usize,
    view_index: usize,
    camera: Camera,
    shape: Csg,
    sigma: f64,
}

fn plan_view(cfg: &GenConfig, base: &Csg, si: usize, vi: usize) -> Result<ViewPlan> {
    let mut rng = substream(cfg.seed, &format!("data/view/{si}/{vi}"));
    let d_ref = (cfg.dist_min + cfg.dist_max) / 2.0;
    let dist = rng.gen_range(cfg.dist_min..cfg.dist_max);
    let sigma = dist / d_ref;
    let shape = base.scaled(sigma);

    let az = rng.gen_range(0.0..std::f64::consts::TAU);
    let el = rng.gen_range(-0.7..0.7f64);
    let eye = Point3::new(
        dist * el.cos() * az.cos(),
        dist * el.cos() * az.sin(),
        dist * el.sin(),
    );
    let f = cfg.focal_norm * cfg.image_size as f64 / 2.0;
    let camera = Camera::look_at(eye, Point3::origin(), f, cfg.image_size, cfg.image_size)?;

    // shell + field-of-view validation
    let r_w = shape.bounding_radius();
    if dist - r_w < cfg.d_min || dist + r_w > cfg.d_max {
        return Err(Error::invalid(format!(
            "scene {si} view {vi}: shape (radius {r_w:.3}) leaves the depth shell \
             [{}, {}] at camera distance {dist:.3}",
            cfg.d_min, cfg.d_max
        )));
    }
    let sil = f * r_w / (dist * dist - r_w * r_w).max(1e-9).sqrt();
    if sil > cfg.image_size as f64 / 2.0 {
        return Err(Error::invalid(format!(
            "scene {si} view {vi}: shape leaves the camera field of view"
        )));
    }
    Ok(ViewPlan { scene_index: si, view_index: vi, camera, shape, sigma })
}

fn build_view(cfg: &GenConfig, plan: &ViewPlan) -> Result<(Image, RaySamples)> {
    let image = render_view(
        &Scene::Analytic(&plan.shape),
        &plan.camera,
        Vector3::new(LIGHT_DIR[0], LIGHT_DIR[1], LIGHT_DIR[2]),
    )?;

    let w = cfg.image_size as usize;
    let pixel_count = w * w;
    if cfg.rays > pixel_count {
        return Err(Error::invalid(format!(
            "scene {} view {}: {} rays requested but the image has only {} pixels",
            plan.scene_index, plan.view_index, cfg.rays, pixel_count
        )));
    }
    let mut rng = substream(cfg.seed, &format!("data/rays/{}/{}", plan.scene_index, plan.view_index));
    let mut pixels: Vec<u32> = (0..pixel_count as u32).collect();
    pixels.shuffle(&mut rng);
    pixels.truncate(cfg.rays);

    let s = scale_factor(&plan.camera);
    let inv_pose = plan.camera.pose.inverse();
    let rays = pixels
        .iter()
        .map(|&pi| {
            let px = (pi as usize % w) as f32 + 0.5;
            let py = (pi as usize / w) as f32 + 0.5;
            let ray = backproject(&plan.camera, [px as f64, py as f64])?;
            let pts = sample_along_ray(&ray, cfg.samples, cfg.d_min, cfg.d_max)?;
            let bits = pts
                .iter()
                .map(|&x_cam| occupancy_analytic(&plan.shape, inv_pose.apply(x_cam)))
                .collect();
            Ok(RayRecord { px, py, bits })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok((
        image,
        RaySamples { m: cfg.samples, d_min: cfg.d_min, d_max: cfg.d_max, s, rays },
    ))
}

/// Generate a dataset directory: per view a PPM image and a RAYO ray
/// file, plus `manifest.json`. Fully determined by the config seed;
/// per-view RNG streams keep parallel generation byte-identical.
pub fn generate_dataset(cfg: &GenConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.rays == 0 || cfg.samples < 2 {
        return Err(Error::invalid("gen: need rays >= 1 and samples >= 2"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let scenes: Vec<Csg> = (0..cfg.scenes)
        .map(|si| catalog_scene(cfg.catalog, si, cfg.seed))
        .collect();

    let mut plans = Vec::new();
    for (si, base) in scenes.iter().enumerate() {
        for vi in 0..cfg.views_per_scene {
            plans.push(plan_view(cfg, base, si, vi)?);
        }
    }

    let built: Vec<(ViewEntry, Image, RaySamples)> = plans
        .par_iter()
        .map(|plan| {
            let (image, rays) = build_view(cfg, plan)?;
            let stem = format!("view_{:03}_{:03}", plan.scene_index, plan.view_index);
            Ok((
                ViewEntry {
                    scene: plan.scene_index,
                    view: plan.view_index,
                    image_file: format!("{stem}.ppm"),
                    rays_file: format!("{stem}.rayo"),
                    camera: plan.camera.clone(),
                    s: rays.s,
                    sigma: plan.sigma,
                },
                image,
                rays,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut views = Vec::with_capacity(built.len());
    for (entry, image, rays) in built {
        image.save_ppm(&out_dir.join(&entry.image_file))?;
        rays.save(&out_dir.join(&entry.rays_file))?;
        views.push(entry);
    }

    let manifest = Manifest { version: 1, config: cfg.clone(), scenes, views };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(out_dir.join("manifest.json"), json)
        .map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    Ok(manifest)
}

/// A dataset loaded back into memory.
pub struct Dataset {
    pub manifest: Manifest,
    pub views: Vec<LoadedView>,
    pub dir: PathBuf,
}

pub struct LoadedView {
    pub entry: ViewEntry,
    pub image: Image,
    pub rays: RaySamples,
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let views = manifest
        .views
        .iter()
        .map(|entry| {
            Ok(LoadedView {
                entry: entry.clone(),
                image: Image::load_ppm(&dir.join(&entry.image_file))?,
                rays: RaySamples::load(&dir.join(&entry.rays_file))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, views, dir: dir.to_path_buf() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> GenConfig {
        GenConfig {
            scenes: 1,
            views_per_scene: 2,
            rays: 200,
            samples: 16,
            image_size: 32,
            seed: 7,
            catalog: Catalog::SphereBox,
            ..Default::default()
        }
    }

    #[test]
    fn generated_dataset_round_trips_and_is_byte_identical() {
        let cfg = tiny_cfg();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let man_a = generate_dataset(&cfg, dir_a.path()).unwrap();
        let _ = generate_dataset(&cfg, dir_b.path()).unwrap();

        for entry in &man_a.views {
            for file in [&entry.image_file, &entry.rays_file] {
                let a = std::fs::read(dir_a.path().join(file)).unwrap();
                let b = std::fs::read(dir_b.path().join(file)).unwrap();
                assert_eq!(a, b, "{file} differs between identical runs");
            }
        }
        let ma = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);

        let ds = load_dataset(dir_a.path()).unwrap();
        assert_eq!(ds.views.len(), 2);
        for v in &ds.views {
            assert_eq!(v.rays.rays.len(), 200);
            assert_eq!(v.rays.m, 16);
            // saved f32 then reloaded: s matches to f32 precision
            assert!((v.rays.s - v.entry.s).abs() < 1e-6);
        }
    }

    #[test]
    fn ray_file_round_trip_is_exact() {
        let cfg = tiny_cfg();
        let dir = tempfile::tempdir().unwrap();
        let _ = generate_dataset(&cfg, dir.path()).unwrap();
        let loaded = RaySamples::load(&dir.path().join("view_000_000.rayo")).unwrap();
        let copy = dir.path().join("copy.rayo");
        loaded.save(&copy).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("view_000_000.rayo")).unwrap(),
            std::fs::read(&copy).unwrap()
        );
    }

    #[test]
    fn occupancy_transitions_pair_up_along_rays() {
        let cfg = GenConfig { samples: 64, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let _ = generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for v in &ds.views {
            for ray in &v.rays.rays {
                assert_eq!(ray.bits[0], 0, "first sample inside the shape");
                assert_eq!(*ray.bits.last().unwrap(), 0, "last sample inside the shape");
                let enters = ray.bits.windows(2).filter(|w| w[0] == 0 && w[1] == 1).count();
                let exits = ray.bits.windows(2).filter(|w| w[0] == 1 && w[1] == 0).count();
                assert_eq!(enters, exits);
            }
        }
    }

    #[test]
    fn silhouette_matches_occupied_rays() {
        let cfg = GenConfig { rays: 1024, samples: 96, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let _ = generate_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        for v in &ds.views {
            // silhouette mask from the image
            let w = v.image.width;
            let mask = |x: i64, y: i64| -> bool {
                if x < 0 || y < 0 || x >= w as i64 || y >= w as i64 {
                    return false;
                }
                v.image.pixel(x as u32, y as u32) != [1.0, 1.0, 1.0]
            };
            for ray in &v.rays.rays {
                let occupied = ray.bits.iter().any(|&b| b == 1);
                let x = (ray.px - 0.5) as i64;
                let y = (ray.py - 0.5) as i64;
                if occupied == mask(x, y) {
                    continue;
                }
                // disagreement allowed only within 2 px of the silhouette edge
                let near_edge = (-2..=2i64).any(|dy| {
                    (-2..=2i64).any(|dx| mask(x + dx, y + dy) != mask(x, y))
                });
                assert!(
                    near_edge,
                    "ray at ({}, {}) occupied={occupied} but mask={} far from any edge",
                    ray.px,
                    ray.py,
                    mask(x, y)
                );
            }
        }
    }

    #[test]
    fn scale_and_distance_covary() {
        let cfg = GenConfig { views_per_scene: 6, ..tiny_cfg() };
        let dir = tempfile::tempdir().unwrap();
        let man = generate_dataset(&cfg, dir.path()).unwrap();
        let d_ref = (cfg.dist_min + cfg.dist_max) / 2.0;
        for v in &man.views {
            assert!((v.camera.object_distance / d_ref - v.sigma).abs() < 1e-9);
            assert!(v.camera.object_distance >= cfg.dist_min && v.camera.object_distance <= cfg.dist_max);
        }
    }

    #[test]
    fn oversized_shape_is_rejected_with_view_name() {
        let cfg = GenConfig { dist_min: 2.0, dist_max: 2.1, ..tiny_cfg() };
        let err = generate_dataset(&cfg, tempfile::tempdir().unwrap().path())
            .unwrap_err()
            .to_string();
        assert!(err.contains("scene 0 view 0"), "{err}");
    }

    #[test]
    fn too_many_rays_is_an_error() {
        let cfg = GenConfig { rays: 2000, image_size: 16, ..tiny_cfg() };
        assert!(generate_dataset(&cfg, tempfile::tempdir().unwrap().path()).is_err());
    }
}
