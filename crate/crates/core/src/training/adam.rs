use crate::model::{Gradients, ModelParams};
use crate::tensor::round_to_f32;

/// Adam without weight decay. Parameters and moments are rounded to `f32`
/// after every step so a checkpoint stores them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: ModelParams,
    pub v: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn update(&mut self, params: &mut ModelParams, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let p_ts = params.tensors_mut();
        let m_ts = self.m.tensors_mut();
        let v_ts = self.v.tensors_mut();
        for (((_, p), (_, m)), ((_, v), (_, g))) in
            p_ts.into_iter().zip(m_ts).zip(v_ts.into_iter().zip(grads.tensors()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / c1;
                let vhat = v.data[i] / c2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
            round_to_f32(&mut p.data);
            round_to_f32(&mut m.data);
            round_to_f32(&mut v.data);
        }
    }
}

/// Scales `grads` so its global norm is at most `max_norm`; returns the original norm.
pub fn clip_grad_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}
