//! Full reconstruction: dense per-pixel ray prediction into a frustum
//! grid, trilinear resampling to a regular grid, marching-cubes
//! extraction, and OBJ export in the scale-normalized evaluation frame.

use crate::geometry::{resample_frustum_to_grid, sample_distances, Aabb, Camera, FrustumGrid, RigidTransform};
use crate::mesh_extract::extract_mesh;
use crate::net::{image_to_tensor, CheckpointMeta, Network};
use crate::shapes::{Image, TriMesh};
use crate::{Error, Result};
use std::path::Path;

#[derive(Debug, Clone)]
pub struct ReconstructionRequest {
    /// Scale calibration factor; defaults to the midpoint of the
    /// training range when absent.
    pub s: Option<f64>,
    /// Image-plane sampling lattice.
    pub s_u: usize,
    pub s_v: usize,
    /// Samples along each ray; values other than the network's native M
    /// are realized by linear resampling along t.
    pub m: usize,
    /// Regular-grid resolution.
    pub n: usize,
    /// Camera-frame resampling bounds; derived from the frustum shell
    /// around the implied object distance when absent.
    pub bounds: Option<Aabb>,
    pub threshold: f64,
}

impl ReconstructionRequest {
    pub fn with_native_m(meta: &CheckpointMeta) -> Self {
        ReconstructionRequest {
            s: None,
            s_u: meta.config.image_size as usize,
            s_v: meta.config.image_size as usize,
            m: meta.config.m,
            n: 64,
            bounds: None,
            threshold: 0.2,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(format!(
                "reconstruct: threshold {} must lie in (0, 1)",
                self.threshold
            )));
        }
        if self.n < 8 {
            return Err(Error::invalid("reconstruct: N must be >= 8"));
        }
        if self.s_u == 0 || self.s_v == 0 || self.m < 2 {
            return Err(Error::invalid("reconstruct: need S_u, S_v >= 1 and M >= 2"));
        }
        Ok(())
    }
}

/// The synthetic camera matching the training renders for this
/// checkpoint: centered principal point, configured focal length.
pub fn implied_camera(meta: &CheckpointMeta, object_distance: f64) -> Camera {
    let size = meta.config.image_size;
    Camera {
        f: meta.focal_norm * size as f64 / 2.0,
        cx: size as f64 / 2.0,
        cy: size as f64 / 2.0,
        width: size,
        height: size,
        pose: RigidTransform::identity(),
        object_distance,
    }
}

/// Predict occupancy probabilities for rays at the centers of an
/// s_u x s_v pixel lattice, M values per ray. Exactly s_u * s_v decoder
/// forwards run (one per ray).
pub fn predict_frustum(
    net: &Network<f32>,
    meta: &CheckpointMeta,
    image: &Image,
    s: f64,
    s_u: usize,
    s_v: usize,
    m: usize,
) -> Result<FrustumGrid> {
    if image.width != meta.config.image_size || image.height != meta.config.image_size {
        return Err(Error::invalid(format!(
            "predict_frustum: image is {}x{}, checkpoint expects {}x{}",
            image.width, image.height, meta.config.image_size, meta.config.image_size
        )));
    }
    let camera = implied_camera(meta, s * meta.focal_norm);
    let mut grid = FrustumGrid::new(s_u, s_v, m, meta.d_min, meta.d_max, &camera)?;

    let mut pixels = Vec::with_capacity(s_u * s_v);
    for iv in 0..s_v {
        for iu in 0..s_u {
            pixels.push([grid.lattice_u(iu), grid.lattice_v(iv)]);
        }
    }
    let tensor = image_to_tensor::<f32>(image);
    let logits = net.infer_rays(&tensor, &pixels, s, meta.ablation)?;
    let m_net = meta.config.m;

    // sigmoid, then (if requested) linear resample along t; the network
    // always emits its native M in one forward per ray
    let mut probs = vec![0f32; m_net];
    for (ray, row) in logits.data().chunks(m_net).enumerate() {
        for (p, &l) in probs.iter_mut().zip(row) {
            *p = 1.0 / (1.0 + (-l).exp());
        }
        let base = ray * m;
        if m == m_net {
            grid.values[base..base + m].copy_from_slice(&probs);
        } else {
            for j in 0..m {
                let ft = j as f64 * (m_net - 1) as f64 / (m - 1) as f64;
                let i0 = (ft.floor() as usize).min(m_net - 1);
                let i1 = (i0 + 1).min(m_net - 1);
                let a = ft - i0 as f64;
                grid.values[base + j] =
                    (probs[i0] as f64 * (1.0 - a) + probs[i1] as f64 * a) as f32;
            }
        }
    }
    Ok(grid)
}

/// Default camera-frame bounds: a cube centered on the implied object
/// distance, clipped to the frustum shell and the image footprint.
pub fn derived_bounds(meta: &CheckpointMeta, s: f64) -> Aabb {
    let d_hat = s * meta.focal_norm;
    let lateral = d_hat / meta.focal_norm;
    let half = (d_hat - meta.d_min).min(meta.d_max - d_hat).min(lateral);
    Aabb {
        min: [-half, -half, d_hat - half],
        max: [half, half, d_hat + half],
    }
}

pub struct Reconstruction {
    /// Mesh in the evaluation frame (camera frame divided by s).
    pub mesh: TriMesh,
    pub s: f64,
    pub bounds: Aabb,
    pub grid: FrustumGrid,
}

/// predict -> resample -> marching cubes -> normalize by s.
pub fn reconstruct(
    net: &Network<f32>,
    meta: &CheckpointMeta,
    image: &Image,
    request: &ReconstructionRequest,
) -> Result<Reconstruction> {
    request.validate()?;
    let s = request.s.unwrap_or_else(|| meta.s_mid());
    let grid = predict_frustum(net, meta, image, s, request.s_u, request.s_v, request.m)?;
    let bounds = request.bounds.unwrap_or_else(|| derived_bounds(meta, s));
    let values = resample_frustum_to_grid(&grid, request.n, &bounds)?;
    let mesh = extract_mesh(&values, request.n, request.threshold, &bounds)?;
    Ok(Reconstruction {
        mesh: mesh.scaled(1.0 / s),
        s,
        bounds,
        grid,
    })
}

/// Write the reconstruction as OBJ; the header records the resampling
/// bounds, scale and threshold that produced it.
pub fn save_reconstruction_obj(rec: &Reconstruction, threshold: f64, path: &Path) -> Result<()> {
    rec.mesh.save_obj(
        path,
        &[
            format!(
                "resample bounds (camera frame): [{:.6}, {:.6}, {:.6}] .. [{:.6}, {:.6}, {:.6}]",
                rec.bounds.min[0], rec.bounds.min[1], rec.bounds.min[2],
                rec.bounds.max[0], rec.bounds.max[1], rec.bounds.max[2]
            ),
            format!("scale factor s = {}", rec.s),
            format!("threshold = {}", threshold),
            "vertices are in the evaluation frame (camera frame / s)".to_string(),
        ],
    )
}

/// Linear resample of per-ray values along t (used by the sampling
/// sweep to realize M > M_train).
pub fn resample_along_t(values: &[f32], m_src: usize, m_dst: usize) -> Vec<f32> {
    assert!(m_src >= 2 && m_dst >= 2);
    let rays = values.len() / m_src;
    let mut out = vec![0f32; rays * m_dst];
    for r in 0..rays {
        let src = &values[r * m_src..(r + 1) * m_src];
        let dst = &mut out[r * m_dst..(r + 1) * m_dst];
        for (j, d) in dst.iter_mut().enumerate() {
            let ft = j as f64 * (m_src - 1) as f64 / (m_dst - 1) as f64;
            let i0 = (ft.floor() as usize).min(m_src - 1);
            let i1 = (i0 + 1).min(m_src - 1);
            let a = ft - i0 as f64;
            *d = (src[i0] as f64 * (1.0 - a) + src[i1] as f64 * a) as f32;
        }
    }
    out
}

/// Sample distances covered by a frustum grid, mirroring the training
/// sample sites.
pub fn frustum_distances(grid: &FrustumGrid) -> Result<Vec<f64>> {
    sample_distances(grid.m, grid.d_min, grid.d_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{counters, Ablation, NetworkConfig};
    use crate::tensor::Tensor;

    fn test_meta(cfg: NetworkConfig) -> CheckpointMeta {
        CheckpointMeta {
            config: cfg,
            ablation: Ablation::default(),
            s_min: 1.0 / 2.4,
            s_max: 1.7 / 2.4,
            d_min: 0.63,
            d_max: 2.16,
            focal_norm: 2.4,
        }
    }

    fn small_net() -> (Network<f32>, CheckpointMeta) {
        let mut cfg = NetworkConfig::desk();
        cfg.image_size = 32;
        cfg.m = 8;
        let net = Network::init(cfg.clone(), 30).unwrap();
        (net, test_meta(cfg))
    }

    fn white_image(size: u32) -> Image {
        Image::filled(size, size, [1.0, 1.0, 1.0])
    }

    #[test]
    fn predict_frustum_runs_one_decoder_forward_per_ray() {
        let _guard = counters::exclusive();
        let (net, meta) = small_net();
        counters::reset();
        let grid = predict_frustum(&net, &meta, &white_image(32), 0.55, 12, 10, 8).unwrap();
        assert_eq!(counters::decoder_forwards(), 12 * 10);
        assert_eq!(counters::encoder_forwards(), 1);
        assert_eq!(grid.values.len(), 12 * 10 * 8);
        assert!(grid.values.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ray_mode_forward_count_is_quadratic_not_cubic() {
        let _guard = counters::exclusive();
        let (net, meta) = small_net();
        counters::reset();
        let n = 16usize;
        let _ = predict_frustum(&net, &meta, &white_image(32), 0.55, n, n, n).unwrap();
        assert_eq!(counters::decoder_forwards() as usize, n * n);
        assert!((counters::decoder_forwards() as usize) < n * n * n);
    }

    #[test]
    fn constant_logit_network_fills_a_constant_grid() {
        let (mut net, meta) = small_net();
        // zero the output head: logits 0 -> probability 0.5 everywhere
        for field in ["w", "b"] {
            let idx = net.param_index(&format!("decoder.final.fc.{field}")).unwrap();
            let shape = net.params[idx].1.shape().to_vec();
            net.params[idx].1 = Tensor::zeros(shape);
        }
        let grid = predict_frustum(&net, &meta, &white_image(32), 0.55, 6, 6, 8).unwrap();
        for &v in &grid.values {
            assert!((v - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn t_resampling_interpolates_between_native_samples() {
        let values = vec![0.0f32, 1.0]; // one ray, M=2
        let up = resample_along_t(&values, 2, 5);
        assert_eq!(up.len(), 5);
        for (j, &v) in up.iter().enumerate() {
            assert!((v - j as f32 / 4.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reconstruct_is_deterministic_and_obj_has_bounds_header() {
        let (net, meta) = small_net();
        let img = white_image(32);
        let req = ReconstructionRequest {
            s: Some(0.58),
            n: 16,
            s_u: 16,
            s_v: 16,
            m: 8,
            bounds: None,
            threshold: 0.2,
        };
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.obj"), dir.path().join("b.obj"));
        let r1 = reconstruct(&net, &meta, &img, &req).unwrap();
        save_reconstruction_obj(&r1, req.threshold, &p1).unwrap();
        let r2 = reconstruct(&net, &meta, &img, &req).unwrap();
        save_reconstruction_obj(&r2, req.threshold, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let text = std::fs::read_to_string(&p1).unwrap();
        assert!(text.starts_with("# resample bounds"));
    }

    #[test]
    fn raising_threshold_never_grows_reconstructed_volume() {
        let (net, meta) = small_net();
        let img = white_image(32);
        let vol_at = |thr: f64| {
            let req = ReconstructionRequest {
                s: Some(0.58),
                n: 24,
                s_u: 16,
                s_v: 16,
                m: 8,
                bounds: None,
                threshold: thr,
            };
            reconstruct(&net, &meta, &img, &req).unwrap().mesh.signed_volume()
        };
        let lo = vol_at(0.2);
        let hi = vol_at(0.999);
        let tol = 1e-6 * derived_bounds(&meta, 0.58).volume();
        assert!(hi <= lo + tol, "volume grew from {lo} to {hi}");
    }

    #[test]
    fn request_validation() {
        let (net, meta) = small_net();
        let img = white_image(32);
        let bad = ReconstructionRequest {
            threshold: 1.5,
            ..ReconstructionRequest::with_native_m(&meta)
        };
        assert!(reconstruct(&net, &meta, &img, &bad).is_err());
        let bad_n = ReconstructionRequest {
            n: 4,
            ..ReconstructionRequest::with_native_m(&meta)
        };
        assert!(reconstruct(&net, &meta, &img, &bad_n).is_err());
        // wrong image size
        assert!(predict_frustum(&net, &meta, &white_image(64), 0.5, 4, 4, 8).is_err());
    }
}
