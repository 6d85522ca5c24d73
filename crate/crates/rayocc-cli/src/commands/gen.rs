use super::{write_resolved_config, FileConfig};
use anyhow::{Context, Result};
use clap::Args;
use rayocc::shapes::{generate_dataset, Catalog, GenConfig};
use std::path::PathBuf;

#[derive(Args)]
pub struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    pub out: PathBuf,

    /// JSON config file; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Number of scenes [default: 4]
    #[arg(long)]
    pub scenes: Option<usize>,

    /// Views per scene [default: 8]
    #[arg(long)]
    pub views: Option<usize>,

    /// Rays stored per view [default: 5000]
    #[arg(long)]
    pub rays: Option<usize>,

    /// Occupancy samples per ray [default: 128]
    #[arg(long)]
    pub samples: Option<usize>,

    /// Square image resolution [default: 64]
    #[arg(long)]
    pub image_size: Option<u32>,

    /// Near bound of the ray-distance band [default: 0.63]
    #[arg(long)]
    pub d_min: Option<f64>,

    /// Far bound of the ray-distance band [default: 2.16]
    #[arg(long)]
    pub d_max: Option<f64>,

    /// Minimum camera-object distance [default: 1.0]
    #[arg(long)]
    pub dist_min: Option<f64>,

    /// Maximum camera-object distance [default: 1.7]
    #[arg(long)]
    pub dist_max: Option<f64>,

    /// Focal length in half-image-width units [default: 2.4]
    #[arg(long)]
    pub focal: Option<f64>,

    /// Scene catalog: mixed | sphere-box [default: mixed]
    #[arg(long)]
    pub catalog: Option<String>,

    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn run(args: GenArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let d = GenConfig::default();
    let catalog: Catalog = file
        .pick(args.catalog, "catalog", "mixed".to_string())?
        .parse()?;
    let cfg = GenConfig {
        scenes: file.pick(args.scenes, "scenes", d.scenes)?,
        views_per_scene: file.pick(args.views, "views", d.views_per_scene)?,
        rays: file.pick(args.rays, "rays", d.rays)?,
        samples: file.pick(args.samples, "samples", d.samples)?,
        image_size: file.pick(args.image_size, "image_size", d.image_size)?,
        d_min: file.pick(args.d_min, "d_min", d.d_min)?,
        d_max: file.pick(args.d_max, "d_max", d.d_max)?,
        dist_min: file.pick(args.dist_min, "dist_min", d.dist_min)?,
        dist_max: file.pick(args.dist_max, "dist_max", d.dist_max)?,
        focal_norm: file.pick(args.focal, "focal", d.focal_norm)?,
        catalog,
        seed: file.pick(args.seed, "seed", d.seed)?,
    };

    let manifest = generate_dataset(&cfg, &args.out).context("gen")?;
    write_resolved_config(&args.out, true, &cfg)?;
    println!(
        "wrote {} views ({} scenes) to {}",
        manifest.views.len(),
        manifest.scenes.len(),
        args.out.display()
    );
    Ok(())
}
