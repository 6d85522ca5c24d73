use super::FileConfig;
use anyhow::{bail, Result};
use clap::Args;
use rayocc::net::gradcheck_full;
use rayocc::tensor::check_all_ops;
use std::path::PathBuf;

#[derive(Args)]
pub struct GradcheckArgs {
    /// JSON config file; explicit flags win
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Network preset checked end-to-end: desk [default: desk]
    #[arg(long)]
    pub preset: Option<String>,

    /// Seed for shapes and sampled coordinates [default: 1]
    #[arg(long)]
    pub seed: Option<u64>,

    /// Central-difference step [default: 1e-4]
    #[arg(long)]
    pub eps: Option<f64>,

    /// Random-shape rounds for the per-op checks [default: 3]
    #[arg(long)]
    pub op_rounds: Option<u64>,

    /// Sampled coordinates per parameter tensor for the full-network
    /// check [default: 6]
    #[arg(long)]
    pub coords: Option<usize>,

    /// Acceptance bound on the max relative error [default: 1e-4]
    #[arg(long)]
    pub tol: Option<f64>,
}

pub fn run(args: GradcheckArgs) -> Result<()> {
    let file = FileConfig::load(&args.config)?;
    let preset = file.pick(args.preset, "preset", "desk".to_string())?;
    if preset != "desk" {
        bail!("gradcheck supports the desk preset (a full finite-difference pass over the paper preset is impractically slow)");
    }
    let seed = file.pick(args.seed, "seed", 1)?;
    let eps = file.pick(args.eps, "eps", 1e-4)?;
    let op_rounds = file.pick(args.op_rounds, "op_rounds", 3)?;
    let coords = file.pick(args.coords, "coords", 6)?;
    let tol = file.pick(args.tol, "tol", 1e-4)?;

    let mut max_err = 0.0f64;
    let mut checked = 0usize;
    for round in 0..op_rounds {
        let rep = check_all_ops(seed.wrapping_add(round), eps)?;
        max_err = max_err.max(rep.max_rel_err);
        checked += rep.coords_checked;
    }
    println!("per-op kinds: max rel err {max_err:.3e} over {checked} coordinates");

    let full = gradcheck_full(seed, eps, coords)?;
    println!(
        "full network: max rel err {:.3e} over {} sampled coordinates",
        full.max_rel_err, full.coords_checked
    );
    let worst = max_err.max(full.max_rel_err);
    println!("max rel error = {worst:.6e}");
    if worst >= tol {
        bail!("gradient check failed: {worst:.3e} >= {tol:.1e}");
    }
    Ok(())
}
