use super::{write_resolved_config, FileConfig};
use anyhow::{Context, Result};
use clap::Args;
use rayocc::net::Ablation;
use rayocc::training::{train, TrainConfig};
use std::path::PathBuf;

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `gen`
    #[arg(long)]
    pub data: PathBuf,

    /// Output directory for checkpoints and logs
    #[arg(long)]
    pub out: PathBuf,

    /// JSON config file; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Network preset: desk | paper [default: desk]
    #[arg(long)]
    pub preset: Option<String>,

    /// Pixels (rays) sampled per image per step [default: 1024]
    #[arg(long)]
    pub pixels: Option<usize>,

    /// Images per batch [default: 8 desk, 64 paper]
    #[arg(long)]
    pub batch: Option<usize>,

    /// Adam learning rate [default: 1e-4]
    #[arg(long)]
    pub lr: Option<f64>,

    /// Training steps [default: 3000]
    #[arg(long)]
    pub steps: Option<usize>,

    /// Root seed [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Periodic checkpoint cadence in steps; 0 keeps only the final
    /// checkpoint [default: 0]
    #[arg(long)]
    pub ckpt_every: Option<usize>,

    /// Log every n-th step [default: 25]
    #[arg(long)]
    pub log_every: Option<usize>,

    /// Ablation: zero the scale-factor input slot
    #[arg(long)]
    pub no_scale: bool,

    /// Ablation: zero the global feature input slot
    #[arg(long)]
    pub no_global: bool,

    /// Ablation: zero the local feature input slot
    #[arg(long)]
    pub no_local: bool,
}

pub fn run(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let d = TrainConfig::default();
    let preset = file.pick(args.preset, "preset", "desk".to_string())?;
    let default_batch = if preset == "paper" { 64 } else { 8 };
    let ablation = Ablation {
        use_scale: !(args.no_scale || file.pick(None, "no_scale", false)?),
        use_global: !(args.no_global || file.pick(None, "no_global", false)?),
        use_local: !(args.no_local || file.pick(None, "no_local", false)?),
    };
    let cfg = TrainConfig {
        dataset_dir: args.data,
        out_dir: args.out,
        preset,
        pixels_per_image: file.pick(args.pixels, "pixels", d.pixels_per_image)?,
        batch_images: file.pick(args.batch, "batch", default_batch)?,
        lr: file.pick(args.lr, "lr", d.lr)?,
        steps: file.pick(args.steps, "steps", d.steps)?,
        seed: file.pick(args.seed, "seed", d.seed)?,
        ablation,
        ckpt_every: file.pick(args.ckpt_every, "ckpt_every", d.ckpt_every)?,
        log_every: file.pick(args.log_every, "log_every", d.log_every)?,
    };

    let outcome = train(&cfg).context("train")?;
    write_resolved_config(&cfg.out_dir, true, &cfg)?;
    println!(
        "final loss {:.6} after {} steps; checkpoint {}",
        outcome.final_loss,
        cfg.steps,
        outcome.checkpoint.display()
    );
    Ok(())
}
