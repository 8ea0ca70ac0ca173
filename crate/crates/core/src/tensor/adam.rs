use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    /// DC-GAN settings.
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for a named set of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub config: AdamConfig,
    pub step: u64,
    /// Steps rejected because a gradient was non-finite.
    pub skipped: u64,
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, skipped: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Applies one bias-corrected update to every parameter that has a
    /// gradient. Returns `Ok(false)` (and counts a skip) when any gradient
    /// is non-finite; parameters are then left untouched.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
        grads: &BTreeMap<String, Tensor<T>>,
    ) -> Result<bool> {
        if grads.values().any(|g| !g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = grads.get(*name) {
                if g.shape() != p.shape() {
                    return Err(Error::Shape(format!(
                        "gradient for {name} has shape {:?}, parameter {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (omb1, omb2) = (T::one() - b1, T::one() - b2);
        let step_size = T::from_f64_lossy(c.lr / bc1);
        let inv_bc2_sqrt = T::from_f64_lossy(1.0 / bc2.sqrt());
        let eps = T::from_f64_lossy(c.eps);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(*name) else { continue };
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.shape()));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + omb1 * gv;
                *vv = b2 * *vv + omb2 * gv * gv;
                *pv -= step_size * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(grads_seq: &[f64], lr: f64) -> Vec<f64> {
        let mut state = AdamState::<f64>::new(AdamConfig { lr, ..AdamConfig::default() });
        let mut p = Tensor::scalar(1.0);
        let mut trace = vec![];
        for &g in grads_seq {
            let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(g))]);
            state.step([("p", &mut p)], &grads).unwrap();
            trace.push(p.item());
        }
        trace
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        assert_eq!(run(&[0.0, 0.0], 1e-3), vec![1.0, 1.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let t = run(&[1.0], 2e-4);
        assert!((1.0 - t[0] - 2e-4).abs() < 1e-11, "{}", t[0]);
    }

    #[test]
    fn two_step_trace_matches_hand_simulation() {
        // Scalar Adam unrolled by hand with beta1=0.5, beta2=0.999, eps=1e-8:
        // step1 g=1: m=.5 v=.001 mhat=1 vhat=1 -> p = 1 - lr/(1+eps)
        // step2 g=1: m=.75 v=.001999 mhat=.75/.75=1 vhat=.001999/.001999=1
        let lr = 0.1;
        let t = run(&[1.0, 1.0], lr);
        let s1 = 1.0 - lr / (1.0 + 1e-8);
        let s2 = s1 - lr / (1.0 + 1e-8);
        assert!((t[0] - s1).abs() < 1e-12);
        assert!((t[1] - s2).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut state = AdamState::<f32>::new(AdamConfig::default());
        let mut p = Tensor::scalar(1.0f32);
        let grads = BTreeMap::from([("p".to_string(), Tensor::scalar(f32::NAN))]);
        assert!(!state.step([("p", &mut p)], &grads).unwrap());
        assert_eq!(state.skipped, 1);
        assert_eq!(state.step, 0);
        assert_eq!(p.item(), 1.0);
    }
}
