use super::{write_resolved_config, FileConfig};
use anyhow::{Context, Result};
use clap::Args;
use rayocc::inference::{reconstruct, ReconstructionRequest};
use rayocc::mesh_extract::mesh_csg;
use rayocc::metrics::{evaluate_pair, view_ground_truth};
use rayocc::net::load_checkpoint;
use rayocc::shapes::load_dataset;
use serde::Serialize;
use std::io::Write;
use std::path::PathBuf;

#[derive(Args)]
pub struct EvalArgs {
    /// Dataset directory with ground-truth scenes
    #[arg(long)]
    pub data: PathBuf,

    /// Checkpoint file
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Output CSV path
    #[arg(long)]
    pub out: PathBuf,

    /// JSON config file; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Points for volumetric IoU [default: 100000]
    #[arg(long)]
    pub n_iou: Option<usize>,

    /// Surface samples for Chamfer/NC [default: 30000]
    #[arg(long)]
    pub n_surf: Option<usize>,

    /// Reconstruction grid resolution [default: 64]
    #[arg(long)]
    pub grid: Option<usize>,

    /// Image-plane lattice (defaults to the image resolution)
    #[arg(long)]
    pub plane: Option<usize>,

    /// Ground-truth meshing resolution [default: 128]
    #[arg(long)]
    pub gt_grid: Option<usize>,

    /// Occupancy threshold [default: 0.2]
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Evaluate only the first k views
    #[arg(long)]
    pub views: Option<usize>,

    /// Metric sampling seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct ResolvedEval {
    data: PathBuf,
    ckpt: PathBuf,
    out: PathBuf,
    n_iou: usize,
    n_surf: usize,
    grid: usize,
    plane: Option<usize>,
    gt_grid: usize,
    threshold: f64,
    views: Option<usize>,
    seed: u64,
}

pub fn run(args: EvalArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let resolved = ResolvedEval {
        data: args.data.clone(),
        ckpt: args.ckpt.clone(),
        out: args.out.clone(),
        n_iou: file.pick(args.n_iou, "n_iou", 100_000)?,
        n_surf: file.pick(args.n_surf, "n_surf", 30_000)?,
        grid: file.pick(args.grid, "grid", 64)?,
        plane: file.pick_opt(args.plane, "plane")?,
        gt_grid: file.pick(args.gt_grid, "gt_grid", 128)?,
        threshold: file.pick(args.threshold, "threshold", 0.2)?,
        views: file.pick_opt(args.views, "views")?,
        seed: file.pick(args.seed, "seed", 0)?,
    };

    let dataset = load_dataset(&resolved.data).context("loading dataset")?;
    let (net, meta) = load_checkpoint(&resolved.ckpt).context("loading checkpoint")?;

    // base scene meshes once; per-view ground truth is a scaled copy
    let mut scene_meshes = Vec::new();
    for scene in &dataset.manifest.scenes {
        scene_meshes.push(mesh_csg(scene, resolved.gt_grid).context("meshing ground truth")?);
    }

    let mut w = std::io::BufWriter::new(
        std::fs::File::create(&resolved.out)
            .with_context(|| format!("creating {}", resolved.out.display()))?,
    );
    writeln!(w, "scene,view,iou,chamfer_l1,nc,n_iou,n_surf,seed")?;

    let plane = resolved
        .plane
        .unwrap_or(dataset.manifest.config.image_size as usize);
    let limit = resolved.views.unwrap_or(dataset.views.len());
    for view in dataset.views.iter().take(limit) {
        let request = ReconstructionRequest {
            s: Some(view.rays.s),
            s_u: plane,
            s_v: plane,
            m: meta.config.m,
            n: resolved.grid,
            bounds: None,
            threshold: resolved.threshold,
        };
        let rec = reconstruct(&net, &meta, &view.image, &request)
            .with_context(|| format!("reconstructing scene {} view {}", view.entry.scene, view.entry.view))?;
        let gt = view_ground_truth(&scene_meshes[view.entry.scene], &view.entry);
        let report = evaluate_pair(&rec.mesh, &gt, resolved.n_iou, resolved.n_surf, resolved.seed)
            .with_context(|| format!("evaluating scene {} view {}", view.entry.scene, view.entry.view))?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            view.entry.scene,
            view.entry.view,
            report.iou,
            report.chamfer_l1,
            report.normal_consistency,
            report.n_iou,
            report.n_surf,
            report.seed
        )?;
    }
    w.flush()?;
    write_resolved_config(&resolved.out, false, &resolved)?;
    println!("wrote {}", resolved.out.display());
    Ok(())
}
