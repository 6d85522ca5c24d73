//! Mini-batch training loop minimizing mean BCE over ray samples, with
//! input-ablation toggles.

use crate::net::{image_to_tensor, Ablation, BufferUpdates, CheckpointMeta, Network, NetworkConfig, NormMode};
use crate::rng::substream;
use crate::shapes::Dataset;
use crate::tensor::{Adam, AdamHyper, Scalar, Tape, Tensor};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    pub preset: String,
    /// Rays drawn per view per step (without replacement from storage).
    pub pixels_per_image: usize,
    pub batch_images: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
    /// Periodic checkpoint cadence in steps; 0 writes only the final one.
    pub ckpt_every: usize,
    /// Log every n-th step (first and last always logged).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            preset: "desk".into(),
            pixels_per_image: 1024,
            batch_images: 8,
            lr: 1e-4,
            steps: 3000,
            seed: 0,
            ablation: Ablation::default(),
            ckpt_every: 0,
            log_every: 25,
        }
    }
}

/// One training batch: per selected view, a subset of its stored rays.
pub struct Batch {
    pub views: Vec<BatchView>,
}

pub struct BatchView {
    pub view_index: usize,
    pub pixels: Vec<[f64; 2]>,
    /// [pixels x M] 0/1 targets.
    pub targets_bits: Vec<u8>,
    pub m: usize,
    pub s: f64,
}

/// Draw `batch_images` views uniformly (without replacement when the
/// dataset is large enough) and `pixels_per_image` rays per view without
/// replacement from that view's stored rays.
pub fn make_batch(dataset: &Dataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<Batch> {
    if dataset.views.is_empty() {
        return Err(Error::invalid("make_batch: empty dataset"));
    }
    let n_views = dataset.views.len();
    let view_indices: Vec<usize> = if cfg.batch_images <= n_views {
        let mut all: Vec<usize> = (0..n_views).collect();
        all.shuffle(rng);
        all.truncate(cfg.batch_images);
        all
    } else {
        (0..cfg.batch_images).map(|_| rng.gen_range(0..n_views)).collect()
    };

    let mut views = Vec::with_capacity(view_indices.len());
    for vi in view_indices {
        let stored = &dataset.views[vi].rays;
        if cfg.pixels_per_image > stored.rays.len() {
            return Err(Error::invalid(format!(
                "make_batch: view {vi} stores {} rays but {} were requested",
                stored.rays.len(),
                cfg.pixels_per_image
            )));
        }
        let mut ray_idx: Vec<usize> = (0..stored.rays.len()).collect();
        ray_idx.shuffle(rng);
        ray_idx.truncate(cfg.pixels_per_image);

        let mut pixels = Vec::with_capacity(ray_idx.len());
        let mut targets_bits = Vec::with_capacity(ray_idx.len() * stored.m);
        for &ri in &ray_idx {
            let ray = &stored.rays[ri];
            pixels.push([ray.px as f64, ray.py as f64]);
            targets_bits.extend_from_slice(&ray.bits);
        }
        views.push(BatchView {
            view_index: vi,
            pixels,
            targets_bits,
            m: stored.m,
            s: stored.s,
        });
    }
    Ok(Batch { views })
}

/// Forward all batch views on one tape, mean BCE over every ray sample,
/// backward, one Adam update, momentum update of CBN running stats.
pub fn training_step<T: Scalar>(
    net: &mut Network<T>,
    adam: &mut Adam<T>,
    images: &[Tensor<T>],
    batch: &Batch,
    ablation: Ablation,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = net.bind(&mut tape);
    let mut updates = BufferUpdates::new();

    let mut view_losses = Vec::with_capacity(batch.views.len());
    for view in &batch.views {
        let logits = net.full_forward_on_tape(
            &mut tape,
            &vars,
            &images[view.view_index],
            &view.pixels,
            view.s,
            NormMode::Train,
            ablation,
            Some(&mut updates),
        )?;
        let targets = Tensor::new(
            vec![view.pixels.len(), view.m],
            view.targets_bits.iter().map(|&b| T::from_f64(b as f64)).collect(),
        )?;
        view_losses.push(tape.bce_with_logits(logits, &targets)?);
    }
    // every view contributes the same ray count, so the mean of means is
    // the overall mean
    let mut total = view_losses[0];
    for &l in &view_losses[1..] {
        total = tape.add(total, l)?;
    }
    let loss = tape.scale(total, T::from_f64(1.0 / view_losses.len() as f64))?;
    let loss_value = tape.value(loss).item().as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { op: "training_step: loss".into() });
    }

    tape.backward(loss)?;
    let grads: Vec<Option<Tensor<T>>> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    adam.step(&mut net.params, &grads)?;
    net.apply_buffer_updates(&updates);
    Ok(loss_value)
}

pub struct TrainOutcome {
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub losses: Vec<f64>,
}

/// Run the full loop: loads the dataset, trains, writes a CSV log
/// (`step,loss,wall_ms`), periodic checkpoints, the final checkpoint
/// with its sidecar metadata, and an echo of the resolved config.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let dataset = crate::shapes::load_dataset(&cfg.dataset_dir)?;
    let net_cfg = NetworkConfig::preset(&cfg.preset)?;
    train_with_config(cfg, net_cfg, &dataset)
}

pub fn train_with_config(
    cfg: &TrainConfig,
    net_cfg: NetworkConfig,
    dataset: &Dataset,
) -> Result<TrainOutcome> {
    if net_cfg.image_size != dataset.manifest.config.image_size {
        return Err(Error::invalid(format!(
            "train: network expects {0}x{0} images, dataset provides {1}x{1}",
            net_cfg.image_size, dataset.manifest.config.image_size
        )));
    }
    if net_cfg.m != dataset.manifest.config.samples {
        return Err(Error::invalid(format!(
            "train: network emits M = {} but dataset stores M = {}",
            net_cfg.m, dataset.manifest.config.samples
        )));
    }
    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(cfg.out_dir.display().to_string(), e))?;
    let echo_path = cfg.out_dir.join("train_config.json");
    std::fs::write(&echo_path, serde_json::to_string_pretty(cfg)?)
        .map_err(|e| Error::io(echo_path.display().to_string(), e))?;

    let mut net = Network::<f32>::init(net_cfg.clone(), cfg.seed)?;
    let mut adam = Adam::new(&net.param_shapes(), AdamHyper { lr: cfg.lr, ..Default::default() });
    let images: Vec<Tensor<f32>> = dataset.views.iter().map(|v| image_to_tensor(&v.image)).collect();
    let (s_min, s_max) = dataset
        .views
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v.rays.s), hi.max(v.rays.s))
        });

    let log_path = cfg.out_dir.join("train_log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?,
    );
    let io_err = |e| Error::io(log_path.display().to_string(), e);
    writeln!(
        log,
        "# ablation use_scale={} use_global={} use_local={}",
        cfg.ablation.use_scale, cfg.ablation.use_global, cfg.ablation.use_local
    )
    .map_err(io_err)?;
    writeln!(log, "step,loss,wall_ms").map_err(io_err)?;

    let meta = CheckpointMeta {
        config: net_cfg,
        ablation: cfg.ablation,
        s_min,
        s_max,
        d_min: dataset.manifest.config.d_min,
        d_max: dataset.manifest.config.d_max,
        focal_norm: dataset.manifest.config.focal_norm,
    };
    let final_path = cfg.out_dir.join("ckpt_final.ronw");

    let mut rng = substream(cfg.seed, "train");
    let start = Instant::now();
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.steps {
        let batch = make_batch(dataset, cfg, &mut rng)?;
        let loss = training_step(&mut net, &mut adam, &images, &batch, cfg.ablation)
            .map_err(|e| Error::invalid(format!("step {step}: {e}")))?;
        losses.push(loss);
        final_loss = loss;
        if step % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            writeln!(log, "{},{},{}", step, loss, start.elapsed().as_millis()).map_err(io_err)?;
        }
        if cfg.ckpt_every > 0 && (step + 1) % cfg.ckpt_every == 0 && step + 1 != cfg.steps {
            let path = cfg.out_dir.join(format!("ckpt_step{:06}.ronw", step + 1));
            net.save_checkpoint(&path)?;
            meta.save(&path)?;
        }
    }
    log.flush().map_err(io_err)?;

    net.save_checkpoint(&final_path)?;
    meta.save(&final_path)?;
    Ok(TrainOutcome {
        final_loss,
        checkpoint: final_path,
        log: log_path,
        losses,
    })
}
