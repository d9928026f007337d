use serde::{Deserialize, Serialize};

use crate::autodiff::Scalar;
use crate::error::{Error, Result};

/// `initial * rate^(step / decayed_step)` with a real-valued exponent.
pub fn lr_schedule(step: u64, initial: f64, rate: f64, decayed_step: u64) -> f64 {
    initial * rate.powf(step as f64 / decayed_step.max(1) as f64)
}

/// Plain gradient descent: `p -= lr * g`.
pub fn sgd_step<T: Scalar>(param: &mut [T], grad: &[T], lr: f64) -> Result<()> {
    if param.len() != grad.len() {
        return Err(Error::LengthMismatch { expected: param.len(), found: grad.len() });
    }
    for (p, &g) in param.iter_mut().zip(grad) {
        *p = T::of(p.as_f64() - lr * g.as_f64());
    }
    Ok(())
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a fixed list of tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self { t: 0, m: sizes.iter().map(|&n| vec![0.0; n]).collect(), v: sizes.iter().map(|&n| vec![0.0; n]).collect() }
    }

    /// Advances the step counter; call once per optimiser step, before
    /// [`update`](Self::update) on each tensor.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Bias-corrected update of tensor `index`.
    pub fn update<T: Scalar>(&mut self, index: usize, param: &mut [T], grad: &[T], lr: f64) -> Result<()> {
        let (m, v) = (&mut self.m[index], &mut self.v[index]);
        if param.len() != grad.len() || param.len() != m.len() {
            return Err(Error::LengthMismatch { expected: m.len(), found: grad.len() });
        }
        let t = self.t.max(1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..param.len() {
            let g = grad[i].as_f64();
            let mi = ADAM_BETA1 * m[i] as f64 + (1.0 - ADAM_BETA1) * g;
            let vi = ADAM_BETA2 * v[i] as f64 + (1.0 - ADAM_BETA2) * g * g;
            m[i] = mi as f32;
            v[i] = vi as f32;
            let step = lr * (mi / c1) / ((vi / c2).sqrt() + ADAM_EPS);
            param[i] = T::of(param[i].as_f64() - step);
        }
        Ok(())
    }
}
