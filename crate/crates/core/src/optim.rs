//! Adam with bias correction and a per-epoch cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{DilError, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr_base: f64,
    pub lr_incremental: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub eta_min: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            lr_base: 1e-3,
            lr_incremental: 1e-4,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            eta_min: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(DilError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_incremental", self.lr_incremental),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be a positive number, got {lr}"));
            }
        }
        if !(0.0..=self.lr_base.min(self.lr_incremental)).contains(&self.eta_min) {
            return bad(format!(
                "eta_min must lie in [0, min(lr_base, lr_incremental)], got {}",
                self.eta_min
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        Ok(())
    }

    /// Peak learning rate of a step: the base rate for bank 0, the
    /// incremental rate afterwards.
    pub fn lr_for_bank(&self, bank_id: usize) -> f64 {
        if bank_id == 0 {
            self.lr_base
        } else {
            self.lr_incremental
        }
    }
}

/// Moments of a fixed list of parameters. Moments are kept in f64 for
/// either parameter precision.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    pub fn from_config(config: &TrainConfig) -> Self {
        AdamState::new(config.beta1, config.beta2, config.adam_eps)
    }
}

/// One bias-corrected Adam update of every parameter in place. Moments are
/// allocated on the first call and must keep their shapes afterwards.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&[T]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(DilError::shape(
            "adam_step",
            format!("{} parameters for {} gradients", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.numel() != g.len() {
            return Err(DilError::shape(
                "adam_step",
                format!(
                    "parameter {i} has {} values, gradient {}",
                    p.numel(),
                    g.len()
                ),
            ));
        }
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    }
    let matches = state.m.len() == params.len()
        && params
            .iter()
            .zip(&state.m)
            .all(|(p, m)| p.numel() == m.len());
    if !matches {
        return Err(DilError::shape(
            "adam_step",
            "parameters do not match the optimizer state",
        ));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (k, x) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].as_f64();
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + state.eps);
            *x = T::lit(x.as_f64() - update);
        }
    }
    for p in params.iter() {
        crate::tensor::ensure_finite("adam_step", p.data())?;
    }
    Ok(())
}

/// Cosine-annealed learning rate for `epoch` of `total`.
pub fn cosine_lr(epoch: usize, total: usize, lr_max: f64, eta_min: f64) -> Result<f64> {
    if total == 0 {
        return Err(DilError::InvalidArgument(
            "cosine schedule needs total >= 1".into(),
        ));
    }
    if epoch > total {
        return Err(DilError::InvalidArgument(format!(
            "epoch {epoch} is past the schedule length {total}"
        )));
    }
    let phase = std::f64::consts::PI * epoch as f64 / total as f64;
    Ok(eta_min + 0.5 * (lr_max - eta_min) * (1.0 + phase.cos()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_with_unit_gradient() {
        let mut p = Tensor::<f64>::zeros(vec![3]);
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        let g = [1.0; 3];
        adam_step(&mut [&mut p], &[&g], &mut st, 1e-3).unwrap();
        for &x in p.data() {
            assert!((x + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn zero_gradient_does_not_move() {
        let mut p = Tensor::<f32>::full(vec![2, 2], 0.7);
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        adam_step(&mut [&mut p], &[&[0.0; 4]], &mut st, 1e-3).unwrap();
        assert!(p.data().iter().all(|&x| x == 0.7));
    }

    #[test]
    fn two_step_trace() {
        // hand trace with g = 0.5 twice, lr = 0.1:
        // m1 = 0.05, v1 = 0.00025, m̂ = 0.5, v̂ = 0.25, step 1 = 0.1 * 0.5 / (0.5 + eps)
        // m2 = 0.095, v2 = 0.00049975, m̂ = 0.5, v̂ = 0.25, identical step
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        adam_step(&mut [&mut p], &[&[0.5]], &mut st, 0.1).unwrap();
        adam_step(&mut [&mut p], &[&[0.5]], &mut st, 0.1).unwrap();
        let one = 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.data()[0] - (1.0 - 2.0 * one)).abs() < 1e-12);
        assert!((st.m[0][0] - 0.095).abs() < 1e-15);
        assert!((st.v[0][0] - 0.00049975).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut p = Tensor::<f64>::zeros(vec![3]);
        let mut st = AdamState::new(0.9, 0.999, 1e-8);
        assert!(adam_step(&mut [&mut p], &[&[1.0; 2]], &mut st, 1e-3).is_err());
        adam_step(&mut [&mut p], &[&[1.0; 3]], &mut st, 1e-3).unwrap();
        let mut q = Tensor::<f64>::zeros(vec![4]);
        assert!(adam_step(&mut [&mut q], &[&[1.0; 4]], &mut st, 1e-3).is_err());
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 20, 1e-3, 0.0).unwrap(), 1e-3);
        assert!(cosine_lr(20, 20, 1e-3, 0.0).unwrap().abs() < 1e-18);
        assert!((cosine_lr(10, 20, 1e-3, 0.0).unwrap() - 5e-4).abs() < 1e-15);
        assert!((cosine_lr(20, 20, 1e-3, 1e-5).unwrap() - 1e-5).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1e-3, 0.0).is_err());
        assert!(cosine_lr(21, 20, 1e-3, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_base: 0.0,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
