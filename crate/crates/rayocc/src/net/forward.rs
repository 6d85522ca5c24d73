//! Forward passes for encoder, mixer and decoder, on a caller-supplied
//! tape so training and inference share one code path.

use super::{counters, Ablation, CbnIdx, ConvIdx, LinearIdx, Network};
use crate::tensor::{Scalar, Tape, Tensor, Var, VAR_EPS};
use crate::{Error, Result};

/// Batch-statistics mode for conditional batch normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the current ray batch and report running-stat updates.
    Train,
    /// Normalize with frozen running statistics.
    Eval,
}

/// Pending running-statistic updates gathered during train-mode forwards;
/// applied with momentum by the caller after the step.
pub struct BufferUpdates<T> {
    pub pairs: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> BufferUpdates<T> {
    pub fn new() -> Self {
        BufferUpdates { pairs: Vec::new() }
    }
}

impl<T: Scalar> Default for BufferUpdates<T> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) const RUNNING_MOMENTUM: f64 = 0.9;

impl<T: Scalar> Network<T> {
    /// Put every parameter on the tape as a gradient-tracked leaf, in
    /// parameter order.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect()
    }

    /// Same, but frozen (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    /// Apply train-mode running-stat updates with momentum.
    pub fn apply_buffer_updates(&mut self, updates: &BufferUpdates<T>) {
        let mom = T::from_f64(RUNNING_MOMENTUM);
        let inv = T::from_f64(1.0 - RUNNING_MOMENTUM);
        for (idx, value) in &updates.pairs {
            let buf = &mut self.buffers[*idx].1;
            for (b, &v) in buf.data_mut().iter_mut().zip(value.data()) {
                *b = mom * *b + inv * v;
            }
        }
    }

    fn conv_fwd(&self, tape: &mut Tape<T>, vars: &[Var], idx: ConvIdx, x: Var) -> Result<Var> {
        tape.conv2d(x, vars[idx.w], vars[idx.b], idx.stride, idx.pad)
    }

    fn fc_fwd(&self, tape: &mut Tape<T>, vars: &[Var], idx: LinearIdx, x: Var) -> Result<Var> {
        tape.fully_connected(x, vars[idx.w], vars[idx.b])
    }

    /// CBN: normalize over the ray-batch axis, then apply the affine
    /// generated from the condition vector.
    fn cbn_fwd(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        idx: CbnIdx,
        x: Var,
        cond: Var,
        mode: NormMode,
        updates: &mut Option<&mut BufferUpdates<T>>,
    ) -> Result<Var> {
        let eps = T::from_f64(VAR_EPS);
        let xhat = match mode {
            NormMode::Train => {
                let mu = tape.mean_rows(x)?;
                let var = tape.var_rows(x)?;
                if let Some(up) = updates.as_deref_mut() {
                    up.pairs.push((idx.mean_buf, tape.value(mu).clone()));
                    up.pairs.push((idx.var_buf, tape.value(var).clone()));
                }
                let inv = tape.rsqrt_eps(var, eps)?;
                let mui = tape.mul(mu, inv)?;
                let shift = tape.scale(mui, -T::one())?;
                tape.affine_rows(x, inv, shift)?
            }
            NormMode::Eval => {
                let mean = &self.buffers[idx.mean_buf].1;
                let var = &self.buffers[idx.var_buf].1;
                let inv: Vec<T> = var.data().iter().map(|&v| (v + eps).sqrt().recip()).collect();
                let shift: Vec<T> = mean
                    .data()
                    .iter()
                    .zip(&inv)
                    .map(|(&m, &i)| -m * i)
                    .collect();
                let d = inv.len();
                let inv = tape.constant(Tensor::new(vec![1, d], inv)?);
                let shift = tape.constant(Tensor::new(vec![1, d], shift)?);
                tape.affine_rows(x, inv, shift)?
            }
        };
        let gamma = self.fc_fwd(tape, vars, idx.gamma, cond)?;
        let beta = self.fc_fwd(tape, vars, idx.beta, cond)?;
        tape.affine_rows(xhat, gamma, beta)
    }

    /// Encoder H: image [3,H,W] -> (z [1, D_global], C [D_local, H/2, W/2]).
    /// C concatenates the stem output and the first three stage outputs,
    /// bilinearly upsampled to half input resolution and projected 1x1.
    pub fn encode(&self, tape: &mut Tape<T>, vars: &[Var], image: &Tensor<T>) -> Result<(Var, Var)> {
        let expect = vec![3, self.config.image_size as usize, self.config.image_size as usize];
        if image.shape() != expect.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "encode".into(),
                lhs: image.shape().to_vec(),
                rhs: expect,
            });
        }
        counters::add_encoder(1);
        let x = tape.constant(image.clone());
        let stem = self.conv_fwd(tape, vars, self.layout.stem, x)?;
        let stem = tape.relu(stem)?;

        let mut taps = vec![stem];
        let mut cur = stem;
        for blocks in &self.layout.stages {
            for blk in blocks {
                let y1 = self.conv_fwd(tape, vars, blk.conv1, cur)?;
                let y1 = tape.relu(y1)?;
                let y2 = self.conv_fwd(tape, vars, blk.conv2, y1)?;
                let skip = match blk.skip {
                    Some(sc) => self.conv_fwd(tape, vars, sc, cur)?,
                    None => cur,
                };
                let sum = tape.add(y2, skip)?;
                cur = tape.relu(sum)?;
            }
            taps.push(cur);
        }

        // z from the last stage; C from the first four taps
        let pooled = tape.global_avg_pool(cur)?;
        let z = self.fc_fwd(tape, vars, self.layout.z_head, pooled)?;

        let mut upsampled = Vec::with_capacity(4);
        for (i, &tap) in taps[..4].iter().enumerate() {
            let factor = 1usize << i;
            upsampled.push(if factor == 1 {
                tap
            } else {
                tape.bilinear_upsample(tap, factor)?
            });
        }
        let cat = tape.concat(&upsampled, 0)?;
        let c = self.conv_fwd(tape, vars, self.layout.proj, cat)?;
        Ok((z, c))
    }

    /// Feature-map index coordinates of image-pixel positions
    /// (pixel-center convention).
    pub fn feature_coords(&self, pixels: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let scale = self.config.feature_res() as f64 / self.config.image_size as f64;
        pixels
            .iter()
            .map(|p| [p[0] * scale - 0.5, p[1] * scale - 0.5])
            .collect()
    }

    /// Interpolate the local feature C_p at image-pixel positions.
    pub fn sample_local_feature(
        &self,
        tape: &mut Tape<T>,
        c: Var,
        pixels: &[[f64; 2]],
    ) -> Result<Var> {
        for p in pixels {
            if p[0] < 0.0
                || p[0] > self.config.image_size as f64
                || p[1] < 0.0
                || p[1] > self.config.image_size as f64
            {
                return Err(Error::invalid(format!(
                    "sample_local_feature: point ({}, {}) outside image",
                    p[0], p[1]
                )));
            }
        }
        tape.bilinear_sample(c, &self.feature_coords(pixels))
    }

    /// Positions normalized to [-1, 1]^2 for the mixer input.
    pub fn normalize_pixels(&self, pixels: &[[f64; 2]]) -> Tensor<T> {
        let s = self.config.image_size as f64;
        let data: Vec<T> = pixels
            .iter()
            .flat_map(|p| [T::from_f64(2.0 * p[0] / s - 1.0), T::from_f64(2.0 * p[1] / s - 1.0)])
            .collect();
        Tensor::new(vec![pixels.len(), 2], data).unwrap()
    }

    /// Mixer J: concat(p, C_p) -> linear projection -> residual MLP
    /// blocks with ReLU before each fully-connected layer.
    pub fn mix(&self, tape: &mut Tape<T>, vars: &[Var], p_norm: &Tensor<T>, c_p: Var) -> Result<Var> {
        let p = tape.constant(p_norm.clone());
        let joined = tape.concat(&[p, c_p], 1)?;
        let mut x = self.fc_fwd(tape, vars, self.layout.mixer_input, joined)?;
        for &(fc1, fc2) in &self.layout.mixer_blocks {
            let h = tape.relu(x)?;
            let h = self.fc_fwd(tape, vars, fc1, h)?;
            let h = tape.relu(h)?;
            let h = self.fc_fwd(tape, vars, fc2, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Condition vector concat(z, s); ablated slots are zeroed.
    pub fn make_cond(
        &self,
        tape: &mut Tape<T>,
        z: Var,
        s: f64,
        ablation: Ablation,
    ) -> Result<Var> {
        let z_part = if ablation.use_global {
            z
        } else {
            tape.constant(Tensor::zeros(vec![1, self.config.d_global]))
        };
        let s_part = if ablation.use_scale {
            tape.constant(Tensor::new(vec![1, 1], vec![T::from_f64(s)])?)
        } else {
            tape.constant(Tensor::zeros(vec![1, 1]))
        };
        tape.concat(&[z_part, s_part], 1)
    }

    /// Decoder D: pre-activation residual blocks of (CBN -> ReLU -> FC)
    /// pairs with skip connections, then a final CBN -> ReLU -> FC to M
    /// logits per ray.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        y: Var,
        cond: Var,
        mode: NormMode,
        mut updates: Option<&mut BufferUpdates<T>>,
    ) -> Result<Var> {
        let rays = tape.value(y).shape()[0] as u64;
        counters::add_decoder(rays);
        let mut x = y;
        for blk in &self.layout.dec_blocks {
            let h = self.cbn_fwd(tape, vars, blk.cbn1, x, cond, mode, &mut updates)?;
            let h = tape.relu(h)?;
            let h = self.fc_fwd(tape, vars, blk.fc1, h)?;
            let h = self.cbn_fwd(tape, vars, blk.cbn2, h, cond, mode, &mut updates)?;
            let h = tape.relu(h)?;
            let h = self.fc_fwd(tape, vars, blk.fc2, h)?;
            x = tape.add(x, h)?;
        }
        let f = self.cbn_fwd(tape, vars, self.layout.final_cbn, x, cond, mode, &mut updates)?;
        let f = tape.relu(f)?;
        self.fc_fwd(tape, vars, self.layout.final_fc, f)
    }

    /// One encode plus per-ray mix+decode for a whole ray batch: maps
    /// each 2D position to M occupancy logits in a single network
    /// forward per ray.
    #[allow(clippy::too_many_arguments)]
    pub fn full_forward_on_tape(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        image: &Tensor<T>,
        pixels: &[[f64; 2]],
        s: f64,
        mode: NormMode,
        ablation: Ablation,
        updates: Option<&mut BufferUpdates<T>>,
    ) -> Result<Var> {
        let (z, c) = self.encode(tape, vars, image)?;
        let c_p = if ablation.use_local {
            self.sample_local_feature(tape, c, pixels)?
        } else {
            tape.constant(Tensor::zeros(vec![pixels.len(), self.config.d_local]))
        };
        let p_norm = self.normalize_pixels(pixels);
        let y = self.mix(tape, vars, &p_norm, c_p)?;
        let cond = self.make_cond(tape, z, s, ablation)?;
        self.decode(tape, vars, y, cond, mode, updates)
    }

    /// Inference entry point: frozen weights, running statistics, rays
    /// processed in bounded chunks after a single shared encode.
    pub fn infer_rays(
        &self,
        image: &Tensor<T>,
        pixels: &[[f64; 2]],
        s: f64,
        ablation: Ablation,
    ) -> Result<Tensor<T>> {
        const CHUNK: usize = 4096;
        // encode once, keep (z, C) as plain tensors
        let (z_val, c_val) = {
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape);
            let (z, c) = self.encode(&mut tape, &vars, image)?;
            (tape.value(z).clone(), tape.value(c).clone())
        };
        let m = self.config.m;
        let mut out = Vec::with_capacity(pixels.len() * m);
        for chunk in pixels.chunks(CHUNK.max(1)) {
            let mut tape = Tape::new();
            let vars = self.bind_frozen(&mut tape);
            let z = tape.constant(z_val.clone());
            let c = tape.constant(c_val.clone());
            let c_p = if ablation.use_local {
                self.sample_local_feature(&mut tape, c, chunk)?
            } else {
                tape.constant(Tensor::zeros(vec![chunk.len(), self.config.d_local]))
            };
            let p_norm = self.normalize_pixels(chunk);
            let y = self.mix(&mut tape, &vars, &p_norm, c_p)?;
            let cond = self.make_cond(&mut tape, z, s, ablation)?;
            let logits = self.decode(&mut tape, &vars, y, cond, NormMode::Eval, None)?;
            out.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(vec![pixels.len(), m], out)
    }
}
