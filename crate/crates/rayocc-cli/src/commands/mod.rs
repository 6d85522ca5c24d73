pub mod bench;
pub mod eval;
pub mod gen;
pub mod gradcheck;
pub mod infer;
pub mod train;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "rayocc",
    about = "Ray-based occupancy prediction for single-view 3D reconstruction",
    version
)]
pub struct Cli {
    /// Worker threads for parallel sections; 1 guarantees byte-identical
    /// reruns [default: hardware count]
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a ray-sampled occupancy dataset from analytic scenes
    Gen(gen::GenArgs),
    /// Train the occupancy network on a generated dataset
    Train(train::TrainArgs),
    /// Reconstruct a mesh from a single image
    Infer(infer::InferArgs),
    /// Evaluate reconstructions against ground truth (IoU, Chamfer-L1, NC)
    Eval(eval::EvalArgs),
    /// Complexity benchmark (ray vs point mode) or sampling sweep
    Bench(bench::BenchArgs),
    /// Finite-difference gradient verification
    Gradcheck(gradcheck::GradcheckArgs),
}

/// Values loaded from `--config`; empty when no file was given.
pub struct FileConfig(serde_json::Value);

impl FileConfig {
    pub fn load(path: &Option<PathBuf>) -> Result<FileConfig> {
        match path {
            None => Ok(FileConfig(serde_json::Value::Null)),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config {}", p.display()))?;
                let value: serde_json::Value = serde_json::from_str(&text)
                    .with_context(|| format!("parsing config {}", p.display()))?;
                anyhow::ensure!(value.is_object(), "config {} must be a JSON object", p.display());
                Ok(FileConfig(value))
            }
        }
    }

    /// `flag` wins; otherwise the config file; otherwise `default`.
    pub fn pick<T: DeserializeOwned>(&self, flag: Option<T>, key: &str, default: T) -> Result<T> {
        if let Some(v) = flag {
            return Ok(v);
        }
        match self.0.get(key) {
            Some(v) => serde_json::from_value(v.clone())
                .with_context(|| format!("config key {key:?} has the wrong type")),
            None => Ok(default),
        }
    }

    pub fn pick_opt<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.0.get(key) {
            Some(v) => Ok(Some(serde_json::from_value(v.clone()).with_context(|| {
                format!("config key {key:?} has the wrong type")
            })?)),
            None => Ok(None),
        }
    }
}

/// Write the resolved configuration next to an output file or directory.
pub fn write_resolved_config<T: serde::Serialize>(target: &Path, is_dir: bool, resolved: &T) -> Result<()> {
    let path = if is_dir {
        target.join("resolved_config.json")
    } else {
        let mut os = target.as_os_str().to_owned();
        os.push(".config.json");
        PathBuf::from(os)
    };
    std::fs::write(&path, serde_json::to_string_pretty(resolved)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Comma-separated list of positive integers, e.g. "32,64,128".
pub fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<usize>()
                .with_context(|| format!("bad list entry {x:?}"))
        })
        .collect()
}

/// "WxH" lattice size, e.g. "128x128".
pub fn parse_plane(s: &str) -> Result<(usize, usize)> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .with_context(|| format!("expected WxH, got {s:?}"))?;
    Ok((w.trim().parse()?, h.trim().parse()?))
}
