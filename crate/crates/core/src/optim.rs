//! Adam over the voxel parameter arrays and the exponential learning-rate decay.

use crate::error::{FrugalError, Result};
use crate::field::{FieldGrad, VoxelField};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m_density: Vec<f32>,
    pub v_density: Vec<f32>,
    pub m_appearance: Vec<f32>,
    pub v_appearance: Vec<f32>,
    pub step: u64,
}

impl AdamState {
    pub fn new(field: &VoxelField<f32>) -> Self {
        Self {
            m_density: vec![0.0; field.density_raw.len()],
            v_density: vec![0.0; field.density_raw.len()],
            m_appearance: vec![0.0; field.appearance_raw.len()],
            v_appearance: vec![0.0; field.appearance_raw.len()],
            step: 0,
        }
    }

    pub fn check_shapes(&self, field: &VoxelField<f32>) -> Result<()> {
        let d = field.density_raw.len();
        let a = field.appearance_raw.len();
        if self.m_density.len() != d
            || self.v_density.len() != d
            || self.m_appearance.len() != a
            || self.v_appearance.len() != a
        {
            return Err(FrugalError::CheckpointFormat(
                "optimizer state does not match the parameter arrays".into(),
            ));
        }
        Ok(())
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn update(&mut self, field: &mut VoxelField<f32>, grad: &FieldGrad, lr: f64, hp: &AdamParams) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - hp.beta1.powi(t);
        let c2 = 1.0 - hp.beta2.powi(t);
        adam_arrays(&mut field.density_raw, &mut self.m_density, &mut self.v_density, &grad.density, lr, c1, c2, hp);
        adam_arrays(
            &mut field.appearance_raw,
            &mut self.m_appearance,
            &mut self.v_appearance,
            &grad.appearance,
            lr,
            c1,
            c2,
            hp,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn adam_arrays(p: &mut [f32], m: &mut [f32], v: &mut [f32], g: &[f64], lr: f64, c1: f64, c2: f64, hp: &AdamParams) {
    for i in 0..p.len() {
        let gi = g[i];
        let mi = hp.beta1 * m[i] as f64 + (1.0 - hp.beta1) * gi;
        let vi = hp.beta2 * v[i] as f64 + (1.0 - hp.beta2) * gi * gi;
        m[i] = mi as f32;
        v[i] = vi as f32;
        let step = lr * (mi / c1) / ((vi / c2).sqrt() + hp.eps);
        p[i] = (p[i] as f64 - step) as f32;
    }
}

/// `lr_init * (lr_final / lr_init)^(iteration / iterations)`.
pub fn learning_rate(iteration: usize, iterations: usize, lr_init: f64, lr_final: f64) -> f64 {
    if iteration == 0 {
        return lr_init;
    }
    if iteration == iterations {
        return lr_final;
    }
    lr_init * (lr_final / lr_init).powf(iteration as f64 / iterations as f64)
}
