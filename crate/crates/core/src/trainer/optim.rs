//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var, WithDType};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// Moment estimates per parameter name plus the update count.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: usize,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter for which `trainable(name)` holds.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// Weight decay skips vectors (biases and norm gains). Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore, trainable: impl Fn(&str) -> bool) -> Result<f64> {
        match params.iter().next().map(|(_, v)| v.dtype()) {
            Some(DType::F64) => self.step_as::<f64>(params, grads, trainable),
            _ => self.step_as::<f32>(params, grads, trainable),
        }
    }

    /// The update runs on host buffers: one fused loop per parameter
    /// instead of a dozen full-size tensor temporaries.
    fn step_as<T: WithDType>(
        &mut self,
        params: &ParamStore,
        grads: &GradStore,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<f64> {
        let host = |t: &Tensor| -> Result<Vec<T>> { Ok(t.flatten_all()?.to_dtype(T::DTYPE)?.to_vec1::<T>()?) };
        let mut live: Vec<(&str, &Var, Vec<T>)> = Vec::new();
        for (name, var) in params.iter().filter(|(n, _)| trainable(n)) {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => host(g)?,
                None => vec![T::zero(); var.as_tensor().elem_count()],
            };
            live.push((name, var, g));
        }
        let sq: f64 = live
            .iter()
            .flat_map(|(_, _, g)| g.iter())
            .map(|x| x.to_f64() * x.to_f64())
            .sum();
        let norm = sq.sqrt();
        let scale = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };

        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, var, g) in live {
            let p = var.as_tensor();
            let dims = p.dims().to_vec();
            let mut m = match self.m.get(name) {
                Some(m) => host(m)?,
                None => vec![T::zero(); g.len()],
            };
            let mut v = match self.v.get(name) {
                Some(v) => host(v)?,
                None => vec![T::zero(); g.len()],
            };
            let mut w = host(p)?;
            let decay = if dims.len() >= 2 { 1.0 - c.learning_rate * c.weight_decay } else { 1.0 };
            for (((wi, mi), vi), gi) in w.iter_mut().zip(&mut m).zip(&mut v).zip(&g) {
                let gi = gi.to_f64() * scale;
                let m_new = c.beta1 * mi.to_f64() + (1.0 - c.beta1) * gi;
                let v_new = c.beta2 * vi.to_f64() + (1.0 - c.beta2) * gi * gi;
                let update = (m_new / bc1) / ((v_new / bc2).sqrt() + c.eps);
                *wi = T::from_f64(wi.to_f64() * decay - c.learning_rate * update);
                *mi = T::from_f64(m_new);
                *vi = T::from_f64(v_new);
            }
            let back = |x: Vec<T>| Tensor::from_vec(x, dims.as_slice(), p.device());
            var.set(&back(w)?)?;
            self.m.insert(name.to_string(), back(m)?);
            self.v.insert(name.to_string(), back(v)?);
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Init, ParamBuilder};
    use candle_core::Device;

    fn quadratic() -> (ParamStore, Tensor) {
        let pb = ParamBuilder::new(0, DType::F64, &Device::Cpu);
        let w = pb.get("w", &[2, 2], Init::Ones).unwrap();
        (pb.finish(), w)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // Adam's bias-corrected first step is lr·sign(g), plus decay
        let (params, w) = quadratic();
        let loss = (w.sqr().unwrap().sum_all().unwrap() * 0.5).unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            clip_norm: None,
            ..Default::default()
        });
        opt.step(&params, &grads, |_| true).unwrap();
        let got: Vec<f64> = params.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let want = 1.0 * (1.0 - 0.1 * 0.5) - 0.1 * (1.0 / (1.0 + 1e-8));
        for g in got {
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_and_zero_lr_leave_parameters_alone() {
        let (params, w) = quadratic();
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let before: Vec<f64> = w.flatten_all().unwrap().to_vec1().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step(&params, &grads, |_| false).unwrap();
        let mut zero = AdamW::new(AdamWConfig {
            learning_rate: 0.0,
            ..Default::default()
        });
        zero.step(&params, &grads, |_| true).unwrap();
        let after: Vec<f64> = params.get("w").unwrap().as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(before, after);
        assert!(opt.m.is_empty());
    }

    #[test]
    fn clipping_reports_unclipped_norm() {
        let (params, w) = quadratic();
        // gradient of 10·sum(w) is 10 everywhere: norm 20
        let grads = (w.sum_all().unwrap() * 10.0).unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let n = opt.step(&params, &grads, |_| true).unwrap();
        assert!((n - 20.0).abs() < 1e-12);
        let m: Vec<f64> = opt.m["w"].flatten_all().unwrap().to_vec1().unwrap();
        // clipped gradient 10·(5/20) = 2.5, first moment 0.1·2.5
        assert!((m[0] - 0.25).abs() < 1e-12);
    }
}
