//! Per-point occupancy baseline used for complexity measurements.
//!
//! One decoder forward per 3D point, output width 1, with the query
//! point appended to the condition path. Decoder block weights are
//! shared with the ray decoder where shapes allow; everything whose
//! shape差 differs (input embedding, condition generators, output head)
//! is freshly initialized. The baseline exists to measure the O(N^3)
//! query-every-point cost with a matched architecture, not to be
//! accurate.

use super::{counters, Builder, LinearIdx, Network, NetworkConfig};
use crate::tensor::{Scalar, Tape, Tensor, Var, VAR_EPS};
use crate::Result;

pub struct PointModeNet<T> {
    pub config: NetworkConfig,
    pub params: Vec<(String, Tensor<T>)>,
    embed: LinearIdx,
    blocks: Vec<PointBlock>,
    final_gens: (LinearIdx, LinearIdx),
    final_fc: LinearIdx,
}

struct PointBlock {
    gens1: (LinearIdx, LinearIdx),
    fc1: LinearIdx,
    gens2: (LinearIdx, LinearIdx),
    fc2: LinearIdx,
}

impl<T: Scalar> PointModeNet<T> {
    /// Condition width: concat(z, s, x) per point.
    fn cond_width(config: &NetworkConfig) -> usize {
        config.d_global + 1 + 3
    }

    pub fn from_network(net: &Network<T>, seed: u64) -> Result<Self> {
        let config = net.config.clone();
        let h = config.hidden;
        let cond = Self::cond_width(&config);
        let mut b = Builder::<T>::new(seed ^ 0x70696e74);

        let embed = b.linear("point.embed", 3, h);
        let mut blocks = Vec::new();
        for (i, src) in net.layout.dec_blocks.iter().enumerate() {
            let name = format!("point.block{i}");
            let gens1 = (
                b.linear(&format!("{name}.cbn1.gamma"), cond, h),
                b.linear(&format!("{name}.cbn1.beta"), cond, h),
            );
            let fc1 = b.linear(&format!("{name}.fc1"), h, h);
            let gens2 = (
                b.linear(&format!("{name}.cbn2.gamma"), cond, h),
                b.linear(&format!("{name}.cbn2.beta"), cond, h),
            );
            let fc2 = b.linear(&format!("{name}.fc2"), h, h);
            blocks.push(PointBlock { gens1, fc1, gens2, fc2 });
            // share the trained block weights (shapes match the ray decoder)
            for (dst, src_fc) in [(fc1, src.fc1), (fc2, src.fc2)] {
                b.params_mut()[dst.w].1 = net.params[src_fc.w].1.clone();
                b.params_mut()[dst.b].1 = net.params[src_fc.b].1.clone();
            }
        }
        let final_gens = (
            b.linear("point.final.cbn.gamma", cond, h),
            b.linear("point.final.cbn.beta", cond, h),
        );
        let final_fc = b.linear("point.final.fc", h, 1);

        Ok(PointModeNet {
            config,
            params: b.into_params(),
            embed,
            blocks,
            final_gens,
            final_fc,
        })
    }

    fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|(_, t)| tape.constant(t.clone())).collect()
    }

    fn fc(&self, tape: &mut Tape<T>, vars: &[Var], idx: LinearIdx, x: Var) -> Result<Var> {
        tape.fully_connected(x, vars[idx.w], vars[idx.b])
    }

    /// Per-point CBN with frozen unit statistics: normalize by the fixed
    /// (0,1) running stats, then apply the per-point generated affine.
    fn cbn(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        gens: (LinearIdx, LinearIdx),
        x: Var,
        cond: Var,
    ) -> Result<Var> {
        let inv = T::from_f64(1.0 / (1.0f64 + VAR_EPS).sqrt());
        let xhat = tape.scale(x, inv)?;
        let gamma = self.fc(tape, vars, gens.0, cond)?;
        let beta = self.fc(tape, vars, gens.1, cond)?;
        let scaled = tape.mul(xhat, gamma)?;
        tape.add(scaled, beta)
    }

    /// One decoder forward per 3D point: `points` are camera-frame
    /// positions, output is one occupancy logit per point.
    pub fn forward_points(
        &self,
        z: &Tensor<T>,
        s: f64,
        points: &[[f64; 3]],
    ) -> Result<Tensor<T>> {
        let t = points.len();
        counters::add_decoder(t as u64);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);

        let xyz = Tensor::new(
            vec![t, 3],
            points
                .iter()
                .flat_map(|p| p.iter().map(|&c| T::from_f64(c)))
                .collect(),
        )?;
        let xyz = tape.constant(xyz);
        let z_row = tape.constant(z.clone());
        let z_rep = tape.repeat_rows(z_row, t)?;
        let s_rep = tape.constant(Tensor::full(vec![t, 1], T::from_f64(s)));
        let cond = tape.concat(&[z_rep, s_rep, xyz], 1)?;

        let mut x = self.fc(&mut tape, &vars, self.embed, xyz)?;
        for blk in &self.blocks {
            let h = self.cbn(&mut tape, &vars, blk.gens1, x, cond)?;
            let h = tape.relu(h)?;
            let h = self.fc(&mut tape, &vars, blk.fc1, h)?;
            let h = self.cbn(&mut tape, &vars, blk.gens2, h, cond)?;
            let h = tape.relu(h)?;
            let h = self.fc(&mut tape, &vars, blk.fc2, h)?;
            x = tape.add(x, h)?;
        }
        let f = self.cbn(&mut tape, &vars, self.final_gens, x, cond)?;
        let f = tape.relu(f)?;
        let logits = self.fc(&mut tape, &vars, self.final_fc, f)?;
        Ok(tape.value(logits).clone())
    }
}

impl<T: Scalar> Builder<T> {
    pub(crate) fn params_mut(&mut self) -> &mut Vec<(String, Tensor<T>)> {
        &mut self.params
    }

    pub(crate) fn into_params(self) -> Vec<(String, Tensor<T>)> {
        self.params
    }

}
