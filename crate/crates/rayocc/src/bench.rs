//! Complexity measurements: ray-mode O(N^2) network forwards against a
//! point-mode O(N^3) baseline with a matched decoder, plus the
//! image-plane / along-ray sampling sweep.
//!
//! Timed sections cover network forwards only (no marching cubes or
//! resampling), matching how inference cost is usually reported.
//! Exponent fits run the kernels single-threaded so the log-log slopes
//! are not polluted by scheduling effects.

use crate::geometry::resample_frustum_to_grid;
use crate::inference::{derived_bounds, predict_frustum, reconstruct, ReconstructionRequest};
use crate::mesh_extract::extract_mesh;
use crate::metrics::volumetric_iou;
use crate::net::{counters, image_to_tensor, CheckpointMeta, Network, PointModeNet};
use crate::shapes::{Image, TriMesh};
use crate::{Error, Result};
use nalgebra::Point3;
use serde::Serialize;
use std::time::Instant;

/// Global allocation meter. Binaries opt in by installing
/// [`TrackingAllocator`] as their `#[global_allocator]`; without it the
/// peak reads 0.
pub mod alloc_meter {
    use std::alloc::{GlobalAlloc, Layout, System};
    use std::sync::atomic::{AtomicUsize, Ordering};

    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    pub struct TrackingAllocator;

    unsafe impl GlobalAlloc for TrackingAllocator {
        unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
            let p = unsafe { System.alloc(layout) };
            if !p.is_null() {
                let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            }
            p
        }

        unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
            unsafe { System.dealloc(ptr, layout) };
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
        }
    }

    /// Reset the high-water mark to the current live size.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }

    pub fn peak_bytes() -> usize {
        PEAK.load(Ordering::Relaxed)
    }

    pub fn current_bytes() -> usize {
        CURRENT.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchMode {
    Ray,
    Point,
}

impl std::fmt::Display for BenchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BenchMode::Ray => write!(f, "ray"),
            BenchMode::Point => write!(f, "point"),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRecord {
    pub mode: BenchMode,
    pub n: usize,
    pub s_u: usize,
    pub s_v: usize,
    pub m: usize,
    pub forwards: u64,
    pub wall_ms: f64,
    pub peak_bytes: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ComplexitySummary {
    pub ray_exponent: f64,
    pub point_exponent: f64,
    /// point wall time / ray wall time at the largest N.
    pub speedup_at_max_n: f64,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub n_list: Vec<usize>,
    pub repeats: usize,
    pub seed: u64,
    /// Pin kernels to one thread for clean exponent fits.
    pub single_thread: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_list: vec![32, 64, 128],
            repeats: 5,
            seed: 0,
            single_thread: true,
        }
    }
}

/// Median wall time of `f` in milliseconds over `repeats` runs,
/// automatically batching the call when it lands below 20 ticks of a
/// 0.1 us timer granularity.
pub fn time_median_ms(repeats: usize, mut f: impl FnMut()) -> f64 {
    const MIN_MEASURABLE_MS: f64 = 2e-3; // 20 x 0.1 us
    let mut inner = 1usize;
    loop {
        let mut samples = Vec::with_capacity(repeats.max(1));
        for _ in 0..repeats.max(1) {
            let t0 = Instant::now();
            for _ in 0..inner {
                f();
            }
            samples.push(t0.elapsed().as_secs_f64() * 1e3 / inner as f64);
        }
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = samples[samples.len() / 2];
        if median * inner as f64 >= MIN_MEASURABLE_MS || inner >= 1 << 20 {
            return median;
        }
        inner *= 8;
    }
}

/// Least-squares slope of log(y) against log(x).
pub fn fit_loglog_exponent(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn grid_points(n: usize, bounds: &crate::geometry::Aabb) -> Vec<[f64; 3]> {
    let step = bounds.size() / (n - 1) as f64;
    let min = bounds.min_p();
    let mut out = Vec::with_capacity(n * n * n);
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                out.push([
                    min.x + ix as f64 * step.x,
                    min.y + iy as f64 * step.y,
                    min.z + iz as f64 * step.z,
                ]);
            }
        }
    }
    out
}

/// Occupancies for every point of a regular N^3 grid, one decoder
/// forward per point, processed in N^2-sized chunks to bound memory.
pub fn point_mode_occupancies(
    net: &Network<f32>,
    point_net: &PointModeNet<f32>,
    _meta: &CheckpointMeta,
    image: &Image,
    s: f64,
    n: usize,
    bounds: &crate::geometry::Aabb,
) -> Result<Vec<f32>> {
    let tensor = image_to_tensor::<f32>(image);
    let z = {
        let mut tape = crate::tensor::Tape::new();
        let vars = net.bind_frozen(&mut tape);
        let (z, _c) = net.encode(&mut tape, &vars, &tensor)?;
        tape.value(z).clone()
    };
    let points = grid_points(n, bounds);
    let mut out = Vec::with_capacity(points.len());
    for chunk in points.chunks(n * n) {
        let logits = point_net.forward_points(&z, s, chunk)?;
        out.extend(logits.data().iter().map(|&l| 1.0 / (1.0 + (-l).exp())));
    }
    Ok(out)
}

fn run_in_thread_mode<R: Send>(single: bool, f: impl FnOnce() -> R + Send) -> R {
    if single {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool");
        pool.install(f)
    } else {
        f()
    }
}

/// Measure ray-mode vs point-mode network forwards over the resolution
/// list and fit log-log exponents. Forward counters are checked against
/// the closed forms (N^2 and N^3) on every run.
pub fn run_complexity_bench(
    net: &Network<f32>,
    meta: &CheckpointMeta,
    image: &Image,
    cfg: &BenchConfig,
) -> Result<(Vec<BenchRecord>, ComplexitySummary)> {
    if cfg.n_list.len() < 3 {
        return Err(Error::invalid("bench: need at least 3 resolutions"));
    }
    let point_net = PointModeNet::from_network(net, cfg.seed)?;
    let s = meta.s_mid();
    let _counter_guard = counters::exclusive();

    let mut records = Vec::new();
    let mut ray_points = Vec::new();
    let mut point_points = Vec::new();

    run_in_thread_mode(cfg.single_thread, || -> Result<()> {
        // warm-up outside timing
        let n0 = cfg.n_list[0];
        let _ = predict_frustum(net, meta, image, s, n0, n0, meta.config.m)?;
        let bounds0 = derived_bounds(meta, s);
        let _ = point_mode_occupancies(net, &point_net, meta, image, s, 8, &bounds0)?;

        for &n in &cfg.n_list {
            // ray mode: N^2 rays, native M per forward
            counters::reset();
            alloc_meter::reset_peak();
            let wall = time_median_ms(cfg.repeats, || {
                let _ = predict_frustum(net, meta, image, s, n, n, meta.config.m).unwrap();
            });
            let forwards = counters::decoder_forwards() / (counters::encoder_forwards().max(1));
            let expected = (n * n) as u64;
            if forwards != expected {
                return Err(Error::invalid(format!(
                    "bench: ray mode ran {forwards} decoder forwards per pass, expected {expected}"
                )));
            }
            records.push(BenchRecord {
                mode: BenchMode::Ray,
                n,
                s_u: n,
                s_v: n,
                m: meta.config.m,
                forwards: expected,
                wall_ms: wall,
                peak_bytes: alloc_meter::peak_bytes(),
                seed: cfg.seed,
            });
            ray_points.push((n as f64, wall));

            // point mode: N^3 points in N^2 chunks
            let bounds = derived_bounds(meta, s);
            counters::reset();
            alloc_meter::reset_peak();
            let mut passes = 0u64;
            let wall = time_median_ms(cfg.repeats, || {
                let _ = point_mode_occupancies(&*net, &point_net, meta, image, s, n, &bounds).unwrap();
                passes += 1;
            });
            let forwards = counters::decoder_forwards() / passes.max(1);
            let expected = (n * n * n) as u64;
            if forwards != expected {
                return Err(Error::invalid(format!(
                    "bench: point mode ran {forwards} decoder forwards per pass, expected {expected}"
                )));
            }
            records.push(BenchRecord {
                mode: BenchMode::Point,
                n,
                s_u: n,
                s_v: n,
                m: 1,
                forwards: expected,
                wall_ms: wall,
                peak_bytes: alloc_meter::peak_bytes(),
                seed: cfg.seed,
            });
            point_points.push((n as f64, wall));
        }
        Ok(())
    })?;

    let n_max = *cfg.n_list.iter().max().unwrap();
    let ray_at_max = ray_points.iter().find(|(x, _)| *x == n_max as f64).unwrap().1;
    let point_at_max = point_points.iter().find(|(x, _)| *x == n_max as f64).unwrap().1;
    let summary = ComplexitySummary {
        ray_exponent: fit_loglog_exponent(&ray_points),
        point_exponent: fit_loglog_exponent(&point_points),
        speedup_at_max_n: point_at_max / ray_at_max,
    };
    Ok((records, summary))
}

pub fn write_bench_csv(
    records: &[BenchRecord],
    summary: &ComplexitySummary,
    path: &std::path::Path,
) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "mode,N,S_u,S_v,M,forwards,wall_ms,peak_bytes,seed").map_err(io_err)?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.mode, r.n, r.s_u, r.s_v, r.m, r.forwards, r.wall_ms, r.peak_bytes, r.seed
        )
        .map_err(io_err)?;
    }
    writeln!(w, "# ray_exponent = {:.4}", summary.ray_exponent).map_err(io_err)?;
    writeln!(w, "# point_exponent = {:.4}", summary.point_exponent).map_err(io_err)?;
    writeln!(w, "# speedup_at_max_n = {:.2}", summary.speedup_at_max_n).map_err(io_err)?;
    w.flush().map_err(io_err)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRecord {
    pub s_plane: usize,
    pub m: usize,
    pub iou: f64,
}

/// Reconstruction quality as a function of image-plane samples and
/// along-ray samples. M beyond the network's native resolution is
/// realized by resampling along t.
#[allow(clippy::too_many_arguments)]
pub fn sampling_sweep(
    net: &Network<f32>,
    meta: &CheckpointMeta,
    image: &Image,
    s: f64,
    gt_eval_frame: &TriMesh,
    plane_list: &[usize],
    m_list: &[usize],
    grid_n: usize,
    n_iou: usize,
    seed: u64,
) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::new();
    let eval_at = |s_plane: usize, m: usize| -> Result<f64> {
        let req = ReconstructionRequest {
            s: Some(s),
            s_u: s_plane,
            s_v: s_plane,
            m,
            n: grid_n,
            bounds: None,
            threshold: 0.2,
        };
        let rec = reconstruct(net, meta, image, &req)?;
        volumetric_iou(&rec.mesh, gt_eval_frame, n_iou, seed)
    };
    let m_fixed = meta.config.m;
    for &s_plane in plane_list {
        out.push(SweepRecord { s_plane, m: m_fixed, iou: eval_at(s_plane, m_fixed)? });
    }
    let plane_fixed = *plane_list.iter().max().unwrap_or(&meta.config.image_size.try_into().unwrap());
    for &m in m_list {
        if m == m_fixed && plane_list.contains(&plane_fixed) {
            // already measured in the plane sweep
            if let Some(r) = out.iter().find(|r| r.s_plane == plane_fixed && r.m == m_fixed) {
                out.push(r.clone());
                continue;
            }
        }
        out.push(SweepRecord { s_plane: plane_fixed, m, iou: eval_at(plane_fixed, m)? });
    }
    Ok(out)
}

pub fn write_sweep_csv(records: &[SweepRecord], path: &std::path::Path) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e| Error::io(path.display().to_string(), e);
    writeln!(w, "s_plane,m,iou").map_err(io_err)?;
    for r in records {
        writeln!(w, "{},{},{}", r.s_plane, r.m, r.iou).map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Point-mode reconstruction used by tests to sanity-check the baseline
/// plumbing end to end (threshold + marching cubes on the N^3 field).
pub fn point_mode_mesh(
    net: &Network<f32>,
    point_net: &PointModeNet<f32>,
    meta: &CheckpointMeta,
    image: &Image,
    s: f64,
    n: usize,
    threshold: f64,
) -> Result<TriMesh> {
    let bounds = derived_bounds(meta, s);
    let occ = point_mode_occupancies(net, point_net, meta, image, s, n, &bounds)?;
    extract_mesh(&occ, n, threshold, &bounds)
}

/// Frustum-resampled grid values for parity checks against ray counts.
pub fn ray_mode_grid(
    net: &Network<f32>,
    meta: &CheckpointMeta,
    image: &Image,
    s: f64,
    n: usize,
) -> Result<Vec<f32>> {
    let grid = predict_frustum(net, meta, image, s, n, n, meta.config.m)?;
    let bounds = derived_bounds(meta, s);
    resample_frustum_to_grid(&grid, n, &bounds)
}

pub fn bounds_center(meta: &CheckpointMeta, s: f64) -> Point3<f64> {
    let b = derived_bounds(meta, s);
    b.center()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{Ablation, NetworkConfig};

    fn bench_net(width: usize, m: usize) -> (Network<f32>, CheckpointMeta) {
        let mut cfg = NetworkConfig::desk();
        cfg.image_size = 32;
        cfg.hidden = width;
        cfg.d_global = width;
        cfg.d_local = width;
        cfg.m = m;
        let net = Network::init(cfg.clone(), 42).unwrap();
        let meta = CheckpointMeta {
            config: cfg,
            ablation: Ablation::default(),
            s_min: 1.0 / 2.4,
            s_max: 1.7 / 2.4,
            d_min: 0.63,
            d_max: 2.16,
            focal_norm: 2.4,
        };
        (net, meta)
    }

    #[test]
    fn point_mode_counts_cubically() {
        let _guard = counters::exclusive();
        let (net, meta) = bench_net(16, 8);
        let point_net = PointModeNet::from_network(&net, 1).unwrap();
        let img = Image::filled(32, 32, [1.0; 3]);
        let bounds = derived_bounds(&meta, meta.s_mid());
        counters::reset();
        let occ = point_mode_occupancies(&net, &point_net, &meta, &img, meta.s_mid(), 16, &bounds).unwrap();
        assert_eq!(occ.len(), 16 * 16 * 16);
        assert_eq!(counters::decoder_forwards(), 16 * 16 * 16);
        assert_eq!(counters::encoder_forwards(), 1, "encode is shared, once per scene");
    }

    #[test]
    fn forwards_ratio_is_n() {
        // closed-form: N^3 / N^2 = N
        for n in [16u64, 32, 128] {
            assert_eq!((n * n * n) / (n * n), n);
        }
    }

    #[test]
    fn loglog_fit_recovers_known_exponents() {
        let quad: Vec<(f64, f64)> = [32.0, 64.0, 128.0].iter().map(|&n: &f64| (n, 3.0 * n * n)).collect();
        let cube: Vec<(f64, f64)> = [32.0, 64.0, 128.0].iter().map(|&n: &f64| (n, 0.5 * n * n * n)).collect();
        assert!((fit_loglog_exponent(&quad) - 2.0).abs() < 1e-9);
        assert!((fit_loglog_exponent(&cube) - 3.0).abs() < 1e-9);
    }

    #[test]
    fn complexity_bench_smoke() {
        let (net, meta) = bench_net(16, 8);
        let img = Image::filled(32, 32, [1.0; 3]);
        let cfg = BenchConfig {
            n_list: vec![8, 12, 16],
            repeats: 2,
            seed: 3,
            single_thread: true,
        };
        let (records, summary) = run_complexity_bench(&net, &meta, &img, &cfg).unwrap();
        assert_eq!(records.len(), 6);
        for r in &records {
            match r.mode {
                BenchMode::Ray => assert_eq!(r.forwards, (r.n * r.n) as u64),
                BenchMode::Point => assert_eq!(r.forwards, (r.n * r.n * r.n) as u64),
            }
            assert!(r.wall_ms > 0.0);
        }
        // at these tiny sizes only sanity-check the ordering
        assert!(summary.point_exponent > summary.ray_exponent);
        assert!(summary.speedup_at_max_n > 1.0);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        write_bench_csv(&records, &summary, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("mode,N,S_u,S_v,M,forwards,wall_ms,peak_bytes,seed"));
        assert!(text.contains("# ray_exponent"));
    }

    #[test]
    fn timer_auto_batches_fast_sections() {
        let ms = time_median_ms(3, || {
            std::hint::black_box(1 + 1);
        });
        assert!(ms > 0.0 && ms < 1.0);
    }
}
