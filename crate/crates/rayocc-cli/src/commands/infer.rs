use super::{parse_plane, write_resolved_config, FileConfig};
use anyhow::{Context, Result};
use clap::Args;
use rayocc::inference::{reconstruct, save_reconstruction_obj, ReconstructionRequest};
use rayocc::net::load_checkpoint;
use rayocc::shapes::Image;
use serde::Serialize;
use std::path::PathBuf;

#[derive(Args)]
pub struct InferArgs {
    /// Checkpoint file (.ronw, with its .json sidecar)
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Input image (binary PPM)
    #[arg(long)]
    pub image: PathBuf,

    /// Output mesh (OBJ)
    #[arg(long)]
    pub out: PathBuf,

    /// JSON config file; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Image-plane sampling lattice, WxH [default: 128x128]
    #[arg(long)]
    pub plane: Option<String>,

    /// Samples along each ray [default: 128]
    #[arg(long)]
    pub samples: Option<usize>,

    /// Regular-grid resolution for resampling [default: 128]
    #[arg(long)]
    pub grid: Option<usize>,

    /// Occupancy threshold for the isosurface [default: 0.2]
    #[arg(long)]
    pub threshold: Option<f64>,

    /// Scale calibration factor [default: midpoint of the training range]
    #[arg(long)]
    pub scale: Option<f64>,
}

#[derive(Serialize)]
struct ResolvedInfer {
    ckpt: PathBuf,
    image: PathBuf,
    out: PathBuf,
    plane: String,
    samples: usize,
    grid: usize,
    threshold: f64,
    scale: Option<f64>,
}

pub fn run(args: InferArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let plane_str = file.pick(args.plane, "plane", "128x128".to_string())?;
    let (s_u, s_v) = parse_plane(&plane_str)?;
    let resolved = ResolvedInfer {
        ckpt: args.ckpt.clone(),
        image: args.image.clone(),
        out: args.out.clone(),
        plane: plane_str,
        samples: file.pick(args.samples, "samples", 128)?,
        grid: file.pick(args.grid, "grid", 128)?,
        threshold: file.pick(args.threshold, "threshold", 0.2)?,
        scale: file.pick_opt(args.scale, "scale")?,
    };

    let (net, meta) = load_checkpoint(&resolved.ckpt).context("loading checkpoint")?;
    let image = Image::load_ppm(&resolved.image).context("loading image")?;
    let request = ReconstructionRequest {
        s: resolved.scale,
        s_u,
        s_v,
        m: resolved.samples,
        n: resolved.grid,
        bounds: None,
        threshold: resolved.threshold,
    };
    let rec = reconstruct(&net, &meta, &image, &request).context("reconstruct")?;
    save_reconstruction_obj(&rec, resolved.threshold, &resolved.out)?;
    write_resolved_config(&resolved.out, false, &resolved)?;
    println!(
        "wrote {} ({} vertices, {} triangles, s = {:.4})",
        resolved.out.display(),
        rec.mesh.vertices.len(),
        rec.mesh.triangles.len(),
        rec.s
    );
    Ok(())
}
