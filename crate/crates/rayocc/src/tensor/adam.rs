//! Adam optimizer with bias correction.

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub hyper: AdamHyper,
}

pub struct Adam<T> {
    state: AdamState<T>,
}

impl<T: Scalar> Adam<T> {
    /// Moments start at zero, matching the parameter shapes.
    pub fn new(param_shapes: &[Vec<usize>], hyper: AdamHyper) -> Self {
        Adam {
            state: AdamState {
                m: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
                v: param_shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
                t: 0,
                hyper,
            },
        }
    }

    pub fn state(&self) -> &AdamState<T> {
        &self.state
    }

    /// One update. `grads[i]` of `None` means "no gradient this step"
    /// (parameter untouched by the loss); its moments still decay.
    pub fn step(
        &mut self,
        params: &mut [(String, Tensor<T>)],
        grads: &[Option<Tensor<T>>],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.m.len() {
            return Err(Error::invalid(format!(
                "adam_step: {} params vs {} grads vs {} moment slots",
                params.len(),
                grads.len(),
                self.state.m.len()
            )));
        }
        self.state.t += 1;
        let h = self.state.hyper;
        let b1 = T::from_f64(h.beta1);
        let b2 = T::from_f64(h.beta2);
        let one_m_b1 = T::from_f64(1.0 - h.beta1);
        let one_m_b2 = T::from_f64(1.0 - h.beta2);
        let eps = T::from_f64(h.eps);
        // bias-corrected step size
        let bc1 = 1.0 - h.beta1.powi(self.state.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.state.t as i32);
        let alpha = T::from_f64(h.lr / bc1);
        let bc2_sqrt_inv = T::from_f64(1.0 / bc2.sqrt());

        for (i, (name, p)) in params.iter_mut().enumerate() {
            let m = &mut self.state.m[i];
            let v = &mut self.state.v[i];
            if m.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: format!("adam_step({name})"),
                    lhs: p.shape().to_vec(),
                    rhs: m.shape().to_vec(),
                });
            }
            let zero = Tensor::zeros(p.shape().to_vec());
            let g = match &grads[i] {
                Some(g) => {
                    if g.shape() != p.shape() {
                        return Err(Error::ShapeMismatch {
                            op: format!("adam_step({name})"),
                            lhs: p.shape().to_vec(),
                            rhs: g.shape().to_vec(),
                        });
                    }
                    if !g.all_finite() {
                        return Err(Error::NonFinite {
                            op: format!("adam_step({name}): gradient"),
                        });
                    }
                    g
                }
                None => &zero,
            };
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + one_m_b1 * gv;
                *vv = b2 * *vv + one_m_b2 * gv * gv;
                let v_hat_sqrt = (*vv).sqrt() * bc2_sqrt_inv;
                *pv = *pv - alpha * *mv / (v_hat_sqrt + eps);
            }
        }
        Ok(())
    }
}
