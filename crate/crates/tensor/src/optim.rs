//! First-order optimizers over a [`ParamStore`].

use crate::error::{Result, TensorError};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling applied before each step.
    pub clip_norm: Option<f64>,
}

impl OptimizerConfig {
    pub fn adam(lr: f64, eps: f64, clip_norm: Option<f64>) -> Self {
        Self {
            kind: OptimizerKind::Adam {
                beta1: 0.9,
                beta2: 0.999,
            },
            lr,
            eps,
            weight_decay: 0.0,
            clip_norm,
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd { momentum },
            lr,
            eps: 0.0,
            weight_decay,
            clip_norm: None,
        }
    }
}

/// Per-parameter moments. Entries stay `None` for parameters that never
/// received a gradient, so frozen parameters hold no state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step_count: u64,
    pub first: Vec<Option<Tensor<T>>>,
    pub second: Vec<Option<Tensor<T>>>,
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub config: OptimizerConfig,
    pub state: OptimizerState<T>,
}

/// Diagnostics from one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were multiplied by (1 when not clipped).
    pub clip_scale: f64,
}

impl<T: Real> Optimizer<T> {
    pub fn new(config: OptimizerConfig, param_count: usize) -> Self {
        Self {
            config,
            state: OptimizerState {
                step_count: 0,
                first: vec![None; param_count],
                second: vec![None; param_count],
            },
        }
    }

    /// Applies one update. `grads[i]` is the gradient of parameter `i` of
    /// `store`, or `None` when the parameter is frozen or off the graph.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<Option<Tensor<T>>>) -> Result<StepStats> {
        if grads.len() != store.len() {
            return Err(TensorError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        if !(self.config.lr >= 0.0) {
            return Err(TensorError::InvalidArgument("learning rate must be >= 0".into()));
        }
        self.state.first.resize(store.len(), None);
        self.state.second.resize(store.len(), None);
        let mut sq = 0.0;
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.value(i).shape() {
                    return Err(crate::error::shape_err(
                        "optimizer step",
                        format!("gradient {:?} for `{}` {:?}", g.shape(), store.name(i), store.value(i).shape()),
                    ));
                }
                if !g.all_finite() {
                    return Err(TensorError::NonFiniteGradient(store.name(i).to_string()));
                }
                sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let lr = self.config.lr;
        let wd = self.config.weight_decay;
        for (i, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let param = store.value_mut(i);
            let n = param.numel();
            let mut eff: Vec<f64> = g.data().iter().map(|v| v.as_f64() * clip_scale).collect();
            if wd != 0.0 {
                for (e, p) in eff.iter_mut().zip(param.data()) {
                    *e += wd * p.as_f64();
                }
            }
            match self.config.kind {
                OptimizerKind::Sgd { momentum } => {
                    let buf = self.state.first[i].get_or_insert_with(|| Tensor::zeros(param.shape()));
                    for j in 0..n {
                        let b = momentum * buf.data()[j].as_f64() + eff[j];
                        buf.data_mut()[j] = T::of(b);
                        let p = param.data()[j].as_f64() - lr * b;
                        param.data_mut()[j] = T::of(p);
                    }
                }
                OptimizerKind::Adam { beta1, beta2 } => {
                    let m = self.state.first[i].get_or_insert_with(|| Tensor::zeros(param.shape()));
                    let v = self.state.second[i].get_or_insert_with(|| Tensor::zeros(param.shape()));
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for j in 0..n {
                        let mj = beta1 * m.data()[j].as_f64() + (1.0 - beta1) * eff[j];
                        let vj = beta2 * v.data()[j].as_f64() + (1.0 - beta2) * eff[j] * eff[j];
                        m.data_mut()[j] = T::of(mj);
                        v.data_mut()[j] = T::of(vj);
                        let update = lr * (mj / bc1) / ((vj / bc2).sqrt() + self.config.eps);
                        let p = param.data()[j].as_f64() - update;
                        param.data_mut()[j] = T::of(p);
                    }
                }
            }
        }
        Ok(StepStats {
            grad_norm,
            clip_scale,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.add("w", Tensor::from_f64(&[values.len()], values).unwrap());
        store
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut store = store_with(&[1.0, -2.0, 3.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3, 1e-8, None), 1);
        opt.step(&mut store, vec![Some(Tensor::zeros(&[3]))]).unwrap();
        assert_eq!(store.value(0).data(), &[1.0, -2.0, 3.0]);
        assert!(opt.state.first[0].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(opt.state.second[0].as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_adam_step_closed_form() {
        let mut store = store_with(&[0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-4, 1e-8, None), 1);
        opt.step(&mut store, vec![Some(Tensor::from_f64(&[1], &[0.5]).unwrap())])
            .unwrap();
        let expected = -1e-4 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(0).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn global_norm_clip_halves_gradients() {
        // Plain SGD so the halved gradient shows up directly in the update.
        let g = Tensor::from_f64(&[2], &[1200.0, 1600.0]).unwrap();
        let mut a = store_with(&[0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(1e-3, 0.0, 0.0), 1);
        opt.config.clip_norm = Some(1000.0);
        let stats = opt.step(&mut a, vec![Some(g)]).unwrap();
        assert!((stats.grad_norm - 2000.0).abs() < 1e-9);
        assert!((stats.clip_scale - 0.5).abs() < 1e-12);
        assert!((a.value(0).data()[0] + 1e-3 * 600.0).abs() < 1e-9);
        assert!((a.value(0).data()[1] + 1e-3 * 800.0).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = store_with(&[1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3, 1e-8, None), 1);
        let err = opt
            .step(&mut store, vec![Some(Tensor::from_f64(&[1], &[f64::NAN]).unwrap())])
            .unwrap_err();
        assert_eq!(err, TensorError::NonFiniteGradient("w".into()));
        assert_eq!(store.value(0).data(), &[1.0]);
    }

    #[test]
    fn frozen_parameters_hold_no_state() {
        let mut store = store_with(&[1.0]);
        store.add("frozen", Tensor::from_f64(&[1], &[2.0]).unwrap());
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3, 1e-8, None), 2);
        opt.step(&mut store, vec![Some(Tensor::from_f64(&[1], &[0.1]).unwrap()), None])
            .unwrap();
        assert!(opt.state.first[1].is_none() && opt.state.second[1].is_none());
        assert_eq!(store.value(1).data(), &[2.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut store = store_with(&[0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::sgd(0.1, 0.9, 0.0), 1);
        for _ in 0..2 {
            opt.step(&mut store, vec![Some(Tensor::from_f64(&[1], &[1.0]).unwrap())])
                .unwrap();
        }
        // buffers: 1, then 1.9
        assert!((store.value(0).data()[0] + 0.1 * (1.0 + 1.9)).abs() < 1e-12);
    }
}
