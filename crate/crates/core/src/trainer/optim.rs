//! Learning-rate schedule, Adam and the EMA shadow.

use super::{TrainConfig, TrainError};
use crate::model::ParamStore;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Learning rate at a (fractional) epoch: linear warm-up from
/// `warmup_start · base` to `base`, a constant hold, then a step decay by
/// `decay_factor` every `decay_interval` epochs.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let base = cfg.base_lr;
    let warm = cfg.warmup_epochs as f64;
    if epoch < warm {
        let frac = epoch.max(0.0) / warm;
        return base * (cfg.warmup_start + (1.0 - cfg.warmup_start) * frac);
    }
    let decay_from = warm + cfg.hold_epochs as f64;
    if epoch < decay_from {
        return base;
    }
    let steps = ((epoch - decay_from) / cfg.decay_interval as f64).floor() + 1.0;
    base * cfg.decay_factor.powf(steps)
}

/// Parameters, Adam moments and the EMA shadow.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub shadow: Vec<Tensor>,
    pub step: u64,
    pub epoch: u64,
}

impl TrainState {
    /// Zero moments; shadow starts equal to the parameters.
    pub fn new(params: ParamStore) -> Self {
        let zeros: Vec<Tensor> = params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Self {
            shadow: params.tensors().to_vec(),
            first_moment: zeros.clone(),
            second_moment: zeros,
            params,
            step: 0,
            epoch: 0,
        }
    }

    /// One bias-corrected Adam update.
    pub fn adam_step(&mut self, grads: &[Tensor], lr: f64) -> Result<(), TrainError> {
        if grads.len() != self.params.len() {
            return Err(TrainError::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.params.len()
            )));
        }
        for (name, (g, p)) in self
            .params
            .names()
            .iter()
            .zip(grads.iter().zip(self.params.tensors()))
        {
            if g.shape() != p.shape() {
                return Err(TrainError::Config(format!(
                    "gradient of {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    param: name.clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let tensors = self.params.tensors_mut();
        for (k, g) in grads.iter().enumerate() {
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            let p = tensors[k].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// `shadow ← decay · shadow + (1 − decay) · params`.
    pub fn ema_update(&mut self, decay: f64) {
        for (s, p) in self.shadow.iter_mut().zip(self.params.tensors()) {
            for (sv, pv) in s.data_mut().iter_mut().zip(p.data()) {
                *sv = decay * *sv + (1.0 - decay) * pv;
            }
        }
    }

    /// Parameters used for evaluation.
    pub fn ema_params(&self) -> ParamStore {
        let mut out = self.params.clone();
        for (dst, src) in out.tensors_mut().iter_mut().zip(&self.shadow) {
            *dst = src.clone();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Gem2Model, ModelConfig};

    fn cfg() -> TrainConfig {
        TrainConfig {
            base_lr: 1.0,
            ..TrainConfig::default()
        }
    }

    fn state() -> TrainState {
        let mut mc = ModelConfig::uniform(1, 1, 4, 2, 0.0);
        mc.features.hop.max = 0.5;
        mc.features.distance.max = 0.5;
        mc.features.angle.max = 0.5;
        TrainState::new(Gem2Model::new(mc, 0).unwrap().params().clone())
    }

    #[test]
    fn schedule_landmarks() {
        let c = cfg();
        assert_eq!(lr_at(0.0, &c), 0.01);
        assert_eq!(lr_at(10.0, &c), 1.0);
        assert_eq!(lr_at(49.9, &c), 1.0);
        assert_eq!(lr_at(50.0, &c), 0.5);
        assert_eq!(lr_at(60.0, &c), 0.25);
        assert_eq!(lr_at(99.0, &c), 0.5f64.powi(5));
        assert!((lr_at(5.0, &c) - 0.505).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = state();
        let before = s.params.clone();
        let zeros: Vec<Tensor> = before
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        s.adam_step(&zeros, 0.1).unwrap();
        assert_eq!(s.params, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut s = state();
        let before = s.params.clone();
        let grads: Vec<Tensor> = before
            .tensors()
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |i| if i[0] % 2 == 0 { 3.0 } else { -0.02 }))
            .collect();
        s.adam_step(&grads, 0.01).unwrap();
        for ((a, b), g) in s.params.tensors().iter().zip(before.tensors()).zip(&grads) {
            for ((x, y), gv) in a.data().iter().zip(b.data()).zip(g.data()) {
                let expect = -0.01 * gv / (gv.abs() + ADAM_EPS);
                assert!(((x - y) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let mut s = state();
        let grads: Vec<Tensor> = s
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::full(t.shape(), 0.3))
            .collect();
        let mut last = 0.0;
        for _ in 0..200 {
            let before = s.params.tensors()[0].data()[0];
            s.adam_step(&grads, 0.001).unwrap();
            last = before - s.params.tensors()[0].data()[0];
        }
        assert!((last - 0.001).abs() < 1e-9);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut s = state();
        let mut grads: Vec<Tensor> = s
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        grads[3].data_mut()[0] = f64::NAN;
        let name = s.params.names()[3].clone();
        match s.adam_step(&grads, 0.1) {
            Err(TrainError::NonFiniteGradient { param }) => assert_eq!(param, name),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ema_decay_zero_tracks_parameters() {
        let mut s = state();
        s.params.tensors_mut()[0].data_mut()[0] += 1.0;
        s.ema_update(0.0);
        assert_eq!(s.ema_params(), s.params);
    }
}
