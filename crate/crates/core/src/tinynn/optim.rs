//! Adam, step-decay learning rates and exponential moving averages of parameters.

use serde::{Deserialize, Serialize};

use super::network::Params;
use super::real::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    m: Params<T>,
    v: Params<T>,
    step: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &Params<T>, config: AdamConfig) -> Self {
        Self {
            config,
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update at learning rate `lr`.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>, lr: f64) -> Result<()> {
        grads.check_finite("gradient")?;
        if params.tensors().len() != grads.tensors().len() {
            return Err(Error::Shape(
                "gradient layout differs from parameters".into(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one_b1, one_b2) = (
            T::from_f64_lossy(1.0 - c.beta1),
            T::from_f64_lossy(1.0 - c.beta2),
        );
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(c.eps);
        let tensors = params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().iter_mut().zip(self.v.tensors_mut()));
        for ((p, g), (m, v)) in tensors {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + one_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_b2 * gi * gi;
                p.data[i] =
                    p.data[i] - step_size * m.data[i] / ((v.data[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Learning rate multiplied by each milestone's factor once its epoch is reached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub base_lr: f64,
    /// `(epoch, factor)` pairs.
    pub milestones: Vec<(usize, f64)>,
}

impl StepDecay {
    pub fn new(base_lr: f64, milestones: &[usize], factor: f64) -> Self {
        Self {
            base_lr,
            milestones: milestones.iter().map(|&e| (e, factor)).collect(),
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .filter(|(e, _)| epoch >= *e)
            .fold(self.base_lr, |lr, (_, f)| lr * f)
    }
}

/// `teacher ← decay·teacher + (1 − decay)·student`, computed in `f64` and stored as `T`.
pub fn ema_update<T: Real, S: Real>(
    teacher: &mut Params<T>,
    student: &Params<S>,
    decay: f64,
) -> Result<()> {
    if teacher.arch() != student.arch() {
        return Err(Error::Shape(
            "teacher and student architectures differ".into(),
        ));
    }
    for (t, s) in teacher.tensors_mut().iter_mut().zip(student.tensors()) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = T::from_f64_lossy(decay * tv.as_f64() + (1.0 - decay) * sv.as_f64());
        }
    }
    Ok(())
}
