//! Adam with bias correction, global-norm gradient clipping and a cosine
//! learning-rate schedule.

use candle_core::backprop::GradStore;
use candle_core::{Result, Tensor, Var};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimizer state for an ordered list of named parameters.
pub struct Adam {
    pub cfg: AdamConfig,
    pub names: Vec<String>,
    pub vars: Vec<Var>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(named: Vec<(String, Var)>, cfg: AdamConfig) -> Result<Self> {
        let mut names = Vec::with_capacity(named.len());
        let mut vars = Vec::with_capacity(named.len());
        let mut m = Vec::with_capacity(named.len());
        let mut v = Vec::with_capacity(named.len());
        for (name, var) in named {
            m.push(var.zeros_like()?);
            v.push(var.zeros_like()?);
            names.push(name);
            vars.push(var);
        }
        Ok(Self { cfg, names, vars, m, v, step: 0 })
    }

    /// Gradients of every parameter in order; missing ones are `None`.
    pub fn collect(&self, grads: &GradStore) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| grads.get(v.as_tensor()).map(Tensor::detach)).collect()
    }

    /// One update with the given gradients. Parameters without a gradient
    /// are left untouched.
    pub fn apply(&mut self, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for k in 0..self.vars.len() {
            let Some(g) = &grads[k] else { continue };
            let m = ((&self.m[k] * b1)? + (g * (1.0 - b1))?)?;
            let v = ((&self.v[k] * b2)? + (g.sqr()? * (1.0 - b2))?)?;
            let m_hat = (&m / c1)?;
            let v_hat = (&v / c2)?;
            let update = (m_hat / (v_hat.sqrt()? + self.cfg.eps)?)?;
            let next = (self.vars[k].as_tensor() - (update * lr)?)?;
            self.vars[k].set(&next)?;
            self.m[k] = m.detach();
            self.v[k] = v.detach();
        }
        Ok(())
    }
}

/// Euclidean norm of all gradients taken together.
pub fn global_norm(grads: &[Option<Tensor>]) -> Result<f64> {
    let mut total = 0.0;
    for g in grads.iter().flatten() {
        total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    }
    Ok(total.sqrt())
}

/// Rescales the gradients so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> Result<f64> {
    let norm = global_norm(grads)?;
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = (&*g * scale)?;
        }
    }
    Ok(norm)
}

/// `lr · ½(1 + cos(π · epoch / epochs))`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    #[test]
    fn single_step_matches_closed_form() {
        let var = Var::from_tensor(&Tensor::new(&[1.5f64], &Device::Cpu).unwrap()).unwrap();
        let mut adam = Adam::new(vec![("p".into(), var.clone())], AdamConfig::default()).unwrap();
        let lr = 1e-3;
        let mut p = 1.5f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for (t, g) in [0.3f64, -0.7, 2.0].iter().enumerate() {
            let grad = Tensor::new(&[*g], &Device::Cpu).unwrap();
            adam.apply(&[Some(grad)], lr).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32 + 1));
            let vh = v / (1.0 - 0.999f64.powi(t as i32 + 1));
            p -= lr * mh / (vh.sqrt() + 1e-8);
            let got = var.as_tensor().to_vec1::<f64>().unwrap()[0];
            assert!((got - p).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let var = Var::from_tensor(&Tensor::new(&[0.1f32, -3.0], &Device::Cpu).unwrap()).unwrap();
        let before = var.as_tensor().to_vec1::<f32>().unwrap();
        let mut adam = Adam::new(vec![("p".into(), var.clone())], AdamConfig::default()).unwrap();
        for _ in 0..5 {
            adam.apply(&[Some(Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap())], 0.0).unwrap();
        }
        let after = var.as_tensor().to_vec1::<f32>().unwrap();
        assert_eq!(before.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), after.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut grads = vec![Some(Tensor::new(&[3.0f64, 4.0], &Device::Cpu).unwrap()), None];
        let before = clip_global_norm(&mut grads, 1.0).unwrap();
        assert_eq!(before, 5.0);
        assert!((global_norm(&grads).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(1e-3, 0, 10), 1e-3);
        assert!((cosine_lr(1e-3, 5, 10) - 5e-4).abs() < 1e-15);
    }
}
