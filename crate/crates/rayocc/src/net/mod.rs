//! The occupancy prediction network G = D(J(p, C_p), z, s): an image
//! encoder H producing a global code z and a local feature map C, a
//! local context mixer J fusing the 2D position with the sampled local
//! feature, and a CBN-conditioned decoder D emitting M occupancy logits
//! per ray in one forward pass.

mod forward;
mod point;

pub use forward::{BufferUpdates, NormMode};
pub use point::PointModeNet;

use crate::rng::substream;
use crate::tensor::{save_named_tensors, Scalar, Tensor};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

/// Decoder-forward counter (one per ray or per 3D point) and encoder
/// counter, used by the inference and benchmark layers to assert the
/// O(N^2) vs O(N^3) claim on actual executions.
pub mod counters {
    use super::*;
    static DECODER_FORWARDS: AtomicU64 = AtomicU64::new(0);
    static ENCODER_FORWARDS: AtomicU64 = AtomicU64::new(0);

    pub fn reset() {
        DECODER_FORWARDS.store(0, Ordering::Relaxed);
        ENCODER_FORWARDS.store(0, Ordering::Relaxed);
    }

    pub fn add_decoder(n: u64) {
        DECODER_FORWARDS.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_encoder(n: u64) {
        ENCODER_FORWARDS.fetch_add(n, Ordering::Relaxed);
    }

    pub fn decoder_forwards() -> u64 {
        DECODER_FORWARDS.load(Ordering::Relaxed)
    }

    pub fn encoder_forwards() -> u64 {
        ENCODER_FORWARDS.load(Ordering::Relaxed)
    }

    /// Serialize counter-sensitive sections (tests run concurrently and
    /// the counters are process-global).
    pub fn exclusive() -> std::sync::MutexGuard<'static, ()> {
        static LOCK: std::sync::Mutex<()> = std::sync::Mutex::new(());
        LOCK.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkConfig {
    pub image_size: u32,
    pub d_global: usize,
    pub d_local: usize,
    /// Occupancy samples emitted per ray.
    pub m: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub mixer_blocks: usize,
    pub decoder_blocks: usize,
    /// Mixer output width == decoder hidden width.
    pub hidden: usize,
}

impl NetworkConfig {
    pub fn desk() -> Self {
        NetworkConfig {
            image_size: 64,
            d_global: 64,
            d_local: 64,
            m: 32,
            stem_channels: 16,
            stem_kernel: 3,
            stage_channels: vec![16, 24, 32, 48],
            blocks_per_stage: 1,
            mixer_blocks: 2,
            decoder_blocks: 3,
            hidden: 64,
        }
    }

    pub fn paper() -> Self {
        NetworkConfig {
            image_size: 224,
            d_global: 256,
            d_local: 256,
            m: 128,
            stem_channels: 64,
            stem_kernel: 7,
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: 2,
            mixer_blocks: 3,
            decoder_blocks: 5,
            hidden: 256,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::invalid(format!("unknown preset {other:?} (desk|paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.d_global < 1 || self.d_local < 1 || self.hidden < 1 {
            return Err(Error::invalid("network config: all widths and M must be >= 1"));
        }
        if self.stage_channels.len() != 4 {
            return Err(Error::invalid("network config: exactly 4 encoder stages"));
        }
        if self.image_size < 16 || self.image_size % 16 != 0 {
            return Err(Error::invalid("network config: image size must be a multiple of 16, >= 16"));
        }
        Ok(())
    }

    /// Feature-map resolution (half the input resolution).
    pub fn feature_res(&self) -> usize {
        self.image_size as usize / 2
    }

    /// Channel count of the concatenated encoder taps before projection.
    pub fn concat_width(&self) -> usize {
        self.stem_channels + self.stage_channels[0] + self.stage_channels[1] + self.stage_channels[2]
    }

    /// Width of the decoder condition vector concat(z, s).
    pub fn cond_width(&self) -> usize {
        self.d_global + 1
    }
}

// ── parameter layout ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub(crate) struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvIdx {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ResBlockIdx {
    pub conv1: ConvIdx,
    pub conv2: ConvIdx,
    pub skip: Option<ConvIdx>,
}

/// One conditional batch-norm layer: affine parameters are generated
/// from the condition vector; running statistics live in buffers.
#[derive(Debug, Clone, Copy)]
pub(crate) struct CbnIdx {
    pub gamma: LinearIdx,
    pub beta: LinearIdx,
    pub mean_buf: usize,
    pub var_buf: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DecBlockIdx {
    pub cbn1: CbnIdx,
    pub fc1: LinearIdx,
    pub cbn2: CbnIdx,
    pub fc2: LinearIdx,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub stem: ConvIdx,
    pub stages: Vec<Vec<ResBlockIdx>>,
    pub proj: ConvIdx,
    pub z_head: LinearIdx,
    pub mixer_input: LinearIdx,
    pub mixer_blocks: Vec<(LinearIdx, LinearIdx)>,
    pub dec_blocks: Vec<DecBlockIdx>,
    pub final_cbn: CbnIdx,
    pub final_fc: LinearIdx,
}

/// All learnable weights plus CBN running-statistic buffers, with a
/// fixed name order for checkpointing.
pub struct Network<T> {
    pub config: NetworkConfig,
    pub params: Vec<(String, Tensor<T>)>,
    pub buffers: Vec<(String, Tensor<T>)>,
    pub(crate) layout: Layout,
    name_index: HashMap<String, usize>,
}

pub(crate) struct Builder<T> {
    params: Vec<(String, Tensor<T>)>,
    buffers: Vec<(String, Tensor<T>)>,
    rng: rand_chacha::ChaCha12Rng,
}

impl<T: Scalar> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: substream(seed, "init"),
        }
    }

    fn he_normal(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let std = (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = self.rng.sample(StandardNormal);
                T::from_f64(z * std)
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.params.push((name, t));
        self.params.len() - 1
    }

    pub fn linear(&mut self, name: &str, input: usize, output: usize) -> LinearIdx {
        self.linear_scaled(name, input, output, 1.0)
    }

    /// Linear layer with the He weights shrunk by `scale`; the output
    /// head uses this so fresh networks start near chance level.
    pub fn linear_scaled(&mut self, name: &str, input: usize, output: usize, scale: f64) -> LinearIdx {
        let mut w = self.he_normal(vec![input, output], input);
        if scale != 1.0 {
            for v in w.data_mut() {
                *v *= T::from_f64(scale);
            }
        }
        let w = self.push(format!("{name}.w"), w);
        let b = self.push(format!("{name}.b"), Tensor::zeros(vec![output]));
        LinearIdx { w, b }
    }

    pub fn conv(
        &mut self,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> ConvIdx {
        let w = self.he_normal(vec![out_ch, in_ch, k, k], in_ch * k * k);
        let w = self.push(format!("{name}.w"), w);
        let b = self.push(format!("{name}.b"), Tensor::zeros(vec![out_ch]));
        ConvIdx { w, b, stride, pad }
    }

    /// Generator weights start small with gamma bias 1 / beta bias 0, so
    /// the initial CBN is close to identity normalization while still
    /// being sensitive to the condition vector.
    pub fn cbn(&mut self, name: &str, cond: usize, width: usize) -> CbnIdx {
        let gen_std = 0.02;
        let mut gen = |field: &str, bias_value: f64| {
            let n = cond * width;
            let data: Vec<T> = (0..n)
                .map(|_| {
                    let z: f64 = self.rng.sample(StandardNormal);
                    T::from_f64(z * gen_std)
                })
                .collect();
            let w = self.push(
                format!("{name}.{field}.w"),
                Tensor::new(vec![cond, width], data).unwrap(),
            );
            let b = self.push(
                format!("{name}.{field}.b"),
                Tensor::full(vec![width], T::from_f64(bias_value)),
            );
            LinearIdx { w, b }
        };
        let gamma = gen("gamma", 1.0);
        let beta = gen("beta", 0.0);
        let mean_buf = {
            self.buffers
                .push((format!("{name}.running_mean"), Tensor::zeros(vec![1, width])));
            self.buffers.len() - 1
        };
        let var_buf = {
            self.buffers
                .push((format!("{name}.running_var"), Tensor::full(vec![1, width], T::one())));
            self.buffers.len() - 1
        };
        CbnIdx { gamma, beta, mean_buf, var_buf }
    }
}

impl<T: Scalar> Network<T> {
    /// Fresh network with He-style random initialization.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::new(seed);

        let stem = b.conv(
            "encoder.stem",
            3,
            config.stem_channels,
            config.stem_kernel,
            2,
            config.stem_kernel / 2,
        );
        let mut stages = Vec::new();
        let mut in_ch = config.stem_channels;
        for (si, &out_ch) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage {
                let stride = if bi == 0 { 2 } else { 1 };
                let name = format!("encoder.stage{si}.block{bi}");
                let conv1 = b.conv(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1);
                let conv2 = b.conv(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1);
                let skip = if stride != 1 || in_ch != out_ch {
                    Some(b.conv(&format!("{name}.skip"), in_ch, out_ch, 1, stride, 0))
                } else {
                    None
                };
                blocks.push(ResBlockIdx { conv1, conv2, skip });
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let proj = b.conv("encoder.proj", config.concat_width(), config.d_local, 1, 1, 0);
        let z_head = b.linear("encoder.z", config.stage_channels[3], config.d_global);

        let mixer_input = b.linear("mixer.input", 2 + config.d_local, config.hidden);
        let mixer_blocks = (0..config.mixer_blocks)
            .map(|i| {
                (
                    b.linear(&format!("mixer.block{i}.fc1"), config.hidden, config.hidden),
                    b.linear(&format!("mixer.block{i}.fc2"), config.hidden, config.hidden),
                )
            })
            .collect();

        let cond = config.cond_width();
        let dec_blocks = (0..config.decoder_blocks)
            .map(|i| DecBlockIdx {
                cbn1: b.cbn(&format!("decoder.block{i}.cbn1"), cond, config.hidden),
                fc1: b.linear(&format!("decoder.block{i}.fc1"), config.hidden, config.hidden),
                cbn2: b.cbn(&format!("decoder.block{i}.cbn2"), cond, config.hidden),
                fc2: b.linear(&format!("decoder.block{i}.fc2"), config.hidden, config.hidden),
            })
            .collect();
        let final_cbn = b.cbn("decoder.final.cbn", cond, config.hidden);
        let final_fc = b.linear_scaled("decoder.final.fc", config.hidden, config.m, 0.25);

        let layout = Layout {
            stem,
            stages,
            proj,
            z_head,
            mixer_input,
            mixer_blocks,
            dec_blocks,
            final_cbn,
            final_fc,
        };
        let name_index = b
            .params
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Ok(Network {
            config,
            params: b.params,
            buffers: b.buffers,
            layout,
            name_index,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.params.iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    /// Every named tensor (parameters then buffers) in checkpoint order.
    fn all_entries(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .chain(self.buffers.iter())
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect()
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save_named_tensors(path, &self.all_entries())
    }

    /// Load weights and buffers for this config from a checkpoint.
    pub fn load_weights(&mut self, path: &Path) -> Result<()> {
        let entries = crate::tensor::load_named_tensors(path)?;
        let by_name: HashMap<&str, &crate::tensor::NamedTensor> =
            entries.iter().map(|e| (e.name.as_str(), e)).collect();
        let fill = |slot: &mut (String, Tensor<T>)| -> Result<()> {
            let found = by_name.get(slot.0.as_str()).ok_or_else(|| {
                Error::invalid(format!("checkpoint missing tensor {:?}", slot.0))
            })?;
            if found.tensor.shape() != slot.1.shape() {
                return Err(Error::ShapeMismatch {
                    op: format!("load_weights({})", slot.0),
                    lhs: slot.1.shape().to_vec(),
                    rhs: found.tensor.shape().to_vec(),
                });
            }
            slot.1 = Tensor::from_f32(&found.tensor);
            Ok(())
        };
        for slot in self.params.iter_mut() {
            fill(slot)?;
        }
        for slot in self.buffers.iter_mut() {
            fill(slot)?;
        }
        Ok(())
    }
}

/// Convert an RGB image into a [3, H, W] input tensor.
pub fn image_to_tensor<T: Scalar>(image: &crate::shapes::Image) -> Tensor<T> {
    let (w, h) = (image.width as usize, image.height as usize);
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data[c * h * w + y * w + x] = T::from_f64(image.data[(y * w + x) * 3 + c] as f64);
            }
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

/// Sidecar description stored next to each checkpoint: everything
/// inference needs to rebuild the camera frustum the network was
/// trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    pub ablation: Ablation,
    /// Scale-factor range seen during training; inference defaults to
    /// the midpoint when no s is given.
    pub s_min: f64,
    pub s_max: f64,
    /// Ray-distance band of the training data.
    pub d_min: f64,
    pub d_max: f64,
    /// Focal length in half-image-width units.
    pub focal_norm: f64,
}

impl CheckpointMeta {
    pub fn sidecar_path(ckpt: &Path) -> std::path::PathBuf {
        let mut os = ckpt.as_os_str().to_owned();
        os.push(".json");
        std::path::PathBuf::from(os)
    }

    pub fn save(&self, ckpt: &Path) -> Result<()> {
        let path = Self::sidecar_path(ckpt);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let path = Self::sidecar_path(ckpt);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn s_mid(&self) -> f64 {
        (self.s_min + self.s_max) / 2.0
    }
}

/// Load a checkpoint plus sidecar into a ready network.
pub fn load_checkpoint(path: &Path) -> Result<(Network<f32>, CheckpointMeta)> {
    let meta = CheckpointMeta::load(path)?;
    let mut net = Network::<f32>::init(meta.config.clone(), 0)?;
    net.load_weights(path)?;
    Ok((net, meta))
}

/// Finite-difference check of the whole network in double precision:
/// a small desk-style config, batch statistics frozen, a BCE loss over
/// a couple of rays, sampled coordinates across every parameter tensor.
pub fn gradcheck_full(
    seed: u64,
    eps: f64,
    coords_per_tensor: usize,
) -> Result<crate::tensor::GradReport> {
    use crate::tensor::{gradcheck, CoordSampling, Tape, Var};
    use rand::Rng;

    let mut cfg = NetworkConfig::desk();
    cfg.image_size = 16;
    cfg.m = 8;
    let net = Network::<f64>::init(cfg, seed)?;
    let mut rng = substream(seed, "gradcheck-full");
    let image = Tensor::new(
        vec![3, 16, 16],
        (0..3 * 256).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )?;
    let pixels: Vec<[f64; 2]> = (0..2)
        .map(|_| [rng.gen_range(0.5..15.5), rng.gen_range(0.5..15.5)])
        .collect();
    let targets = Tensor::new(
        vec![2, 8],
        (0..16).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect(),
    )?;

    let params: Vec<Tensor<f64>> = net.params.iter().map(|(_, t)| t.clone()).collect();
    let f = move |tape: &mut Tape<f64>, vars: &[Var]| {
        let logits = net.full_forward_on_tape(
            tape,
            vars,
            &image,
            &pixels,
            1.4,
            NormMode::Eval,
            Ablation::default(),
            None,
        )?;
        tape.bce_with_logits(logits, &targets)
    };
    gradcheck(
        &f,
        &params,
        eps,
        CoordSampling::PerTensor { max: coords_per_tensor, seed },
    )
}

/// Input ablation toggles: a disabled input's slot is zeroed, making the
/// output literally independent of it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct Ablation {
    pub use_scale: bool,
    pub use_global: bool,
    pub use_local: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { use_scale: true, use_global: true, use_local: true }
    }
}

#[cfg(test)]
mod tests;
