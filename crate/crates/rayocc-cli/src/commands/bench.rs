use super::{parse_usize_list, write_resolved_config, FileConfig};
use anyhow::{bail, Context, Result};
use clap::Args;
use rayocc::bench::{
    run_complexity_bench, sampling_sweep, write_bench_csv, write_sweep_csv, BenchConfig,
};
use rayocc::mesh_extract::mesh_csg;
use rayocc::metrics::view_ground_truth;
use rayocc::net::{load_checkpoint, Ablation, CheckpointMeta, Network, NetworkConfig};
use rayocc::shapes::{load_dataset, Image};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct BenchArgs {
    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,

    /// JSON config file; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Trained checkpoint; without one the bench times a random-init
    /// network (timing depends only on architecture shape)
    #[arg(long)]
    pub ckpt: Option<PathBuf>,

    /// Mode: complexity | sweep [default: complexity]
    #[arg(long)]
    pub mode: Option<String>,

    /// Resolutions for the complexity fit [default: 32,64,128]
    #[arg(long)]
    pub n: Option<String>,

    /// Timing repeats per cell (medians reported) [default: 5]
    #[arg(long)]
    pub repeats: Option<usize>,

    /// Seed for the point-mode baseline init [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Decoder width of the random-init bench network when no
    /// checkpoint is given [default: 32]
    #[arg(long)]
    pub width: Option<usize>,

    /// Keep the configured thread pool during timing; exponent fits are
    /// defined for the default single-threaded mode
    #[arg(long)]
    pub parallel: bool,

    /// Dataset (sweep mode: supplies a view and its ground truth)
    #[arg(long)]
    pub data: Option<PathBuf>,

    /// View index within the dataset for the sweep [default: 0]
    #[arg(long)]
    pub view: Option<usize>,

    /// Image-plane lattice sizes for the sweep [default: 32,64,128]
    #[arg(long)]
    pub sweep_planes: Option<String>,

    /// Along-ray sample counts for the sweep [default: native M and 2x]
    #[arg(long)]
    pub sweep_samples: Option<String>,

    /// Reconstruction grid for the sweep [default: 48]
    #[arg(long)]
    pub grid: Option<usize>,

    /// IoU points for the sweep [default: 20000]
    #[arg(long)]
    pub n_iou: Option<usize>,
}

#[derive(Serialize)]
struct ResolvedBench {
    out: PathBuf,
    ckpt: Option<PathBuf>,
    mode: String,
    n: Vec<usize>,
    repeats: usize,
    seed: u64,
    width: usize,
    parallel: bool,
    data: Option<PathBuf>,
    view: usize,
    sweep_planes: Vec<usize>,
    sweep_samples: Vec<usize>,
    grid: usize,
    n_iou: usize,
}

fn bench_network(width: usize, seed: u64) -> Result<(Network<f32>, CheckpointMeta)> {
    let mut cfg = NetworkConfig::desk();
    cfg.hidden = width;
    cfg.d_global = width;
    cfg.d_local = width;
    let net = Network::init(cfg.clone(), seed)?;
    Ok((
        net,
        CheckpointMeta {
            config: cfg,
            ablation: Ablation::default(),
            s_min: 1.0 / 2.4,
            s_max: 1.7 / 2.4,
            d_min: 0.63,
            d_max: 2.16,
            focal_norm: 2.4,
        },
    ))
}

pub fn run(args: BenchArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let mode = file.pick(args.mode, "mode", "complexity".to_string())?;
    let resolved = ResolvedBench {
        out: args.out.clone(),
        ckpt: file.pick_opt(args.ckpt, "ckpt")?,
        mode: mode.clone(),
        n: parse_usize_list(&file.pick(args.n, "n", "32,64,128".to_string())?)?,
        repeats: file.pick(args.repeats, "repeats", 5)?,
        seed: file.pick(args.seed, "seed", 0)?,
        width: file.pick(args.width, "width", 32)?,
        parallel: args.parallel || file.pick(None, "parallel", false)?,
        data: file.pick_opt(args.data, "data")?,
        view: file.pick(args.view, "view", 0)?,
        sweep_planes: parse_usize_list(&file.pick(args.sweep_planes, "sweep_planes", "32,64,128".to_string())?)?,
        sweep_samples: match file.pick_opt(args.sweep_samples, "sweep_samples")? {
            Some(s) => parse_usize_list(&s)?,
            None => Vec::new(),
        },
        grid: file.pick(args.grid, "grid", 48)?,
        n_iou: file.pick(args.n_iou, "n_iou", 20_000)?,
    };

    let (net, meta) = match &resolved.ckpt {
        Some(path) => load_checkpoint(path).context("loading checkpoint")?,
        None => bench_network(resolved.width, resolved.seed)?,
    };

    match mode.as_str() {
        "complexity" => {
            let image = match (&resolved.data, resolved.view) {
                (Some(dir), v) => {
                    let ds = load_dataset(dir)?;
                    anyhow::ensure!(v < ds.views.len(), "view {v} out of range");
                    ds.views[v].image.clone()
                }
                (None, _) => Image::filled(meta.config.image_size, meta.config.image_size, [0.5; 3]),
            };
            let cfg = BenchConfig {
                n_list: resolved.n.clone(),
                repeats: resolved.repeats,
                seed: resolved.seed,
                single_thread: !resolved.parallel,
            };
            let (records, summary) = run_complexity_bench(&net, &meta, &image, &cfg).context("bench")?;
            write_bench_csv(&records, &summary, &resolved.out)?;
            write_resolved_config(&resolved.out, false, &resolved)?;
            println!(
                "ray exponent {:.3}, point exponent {:.3}, speedup at N={} is {:.1}x",
                summary.ray_exponent,
                summary.point_exponent,
                resolved.n.iter().max().unwrap(),
                summary.speedup_at_max_n
            );
        }
        "sweep" => {
            let Some(dir) = &resolved.data else {
                bail!("sweep mode needs --data for ground truth");
            };
            let ds = load_dataset(dir)?;
            anyhow::ensure!(resolved.view < ds.views.len(), "view {} out of range", resolved.view);
            let view = &ds.views[resolved.view];
            let scene_mesh = mesh_csg(&ds.manifest.scenes[view.entry.scene], 128)?;
            let gt = view_ground_truth(&scene_mesh, &view.entry);
            let m_list = if resolved.sweep_samples.is_empty() {
                vec![meta.config.m, 2 * meta.config.m]
            } else {
                resolved.sweep_samples.clone()
            };
            let records = sampling_sweep(
                &net,
                &meta,
                &view.image,
                view.rays.s,
                &gt,
                &resolved.sweep_planes,
                &m_list,
                resolved.grid,
                resolved.n_iou,
                resolved.seed,
            )
            .context("sweep")?;
            write_sweep_csv(&records, &resolved.out)?;
            write_resolved_config(&resolved.out, false, &resolved)?;
            for r in &records {
                println!("S_plane {:>4}  M {:>4}  IoU {:.4}", r.s_plane, r.m, r.iou);
            }
        }
        other => bail!("unknown bench mode {other:?} (complexity|sweep)"),
    }
    Ok(())
}
