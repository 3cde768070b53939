//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamWState<T> {
    pub first_moment: Vec<Tensor<T>>,
    pub second_moment: Vec<Tensor<T>>,
    pub step_count: u64,
    pub config: AdamWConfig,
}

impl<T: Element> AdamWState<T> {
    pub fn new(params: &[Tensor<T>], config: AdamWConfig) -> Result<Self> {
        contract!(
            config.beta1 > 0.0 && config.beta1 < 1.0 && config.beta2 > 0.0 && config.beta2 < 1.0,
            "betas must lie in (0, 1): {:?}",
            config
        );
        contract!(config.eps > 0.0, "eps must be positive");
        contract!(config.weight_decay >= 0.0, "weight decay must be non-negative");
        let zeros = || {
            params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect()
        };
        Ok(Self {
            first_moment: zeros(),
            second_moment: zeros(),
            step_count: 0,
            config,
        })
    }
}

/// One AdamW update of every parameter in place:
///
/// ```text
/// p ← p − lr·wd·p
/// m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
/// p ← p − lr · (m / (1−β₁ᵗ)) / (sqrt(v / (1−β₂ᵗ)) + eps)
/// ```
pub fn adamw_step<T: Element>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamWState<T>,
    lr: f64,
) -> Result<()> {
    contract!(lr >= 0.0, "learning rate must be non-negative, got {lr}");
    contract!(
        params.len() == grads.len() && params.len() == state.first_moment.len(),
        "parameter/gradient/state counts differ: {}/{}/{}",
        params.len(),
        grads.len(),
        state.first_moment.len()
    );
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        contract!(
            p.shape() == g.shape() && p.shape() == state.first_moment[i].shape(),
            "shape mismatch for parameter {i}: {:?} / {:?} / {:?}",
            p.shape(),
            g.shape(),
            state.first_moment[i].shape()
        );
    }
    state.step_count += 1;
    let cfg = state.config;
    let t = state.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = T::cst(1.0 - lr * cfg.weight_decay);
    let (b1, b2) = (T::cst(cfg.beta1), T::cst(cfg.beta2));
    let (one_b1, one_b2) = (T::cst(1.0 - cfg.beta1), T::cst(1.0 - cfg.beta2));
    let step = T::cst(lr / bc1);
    let inv_bc2 = T::cst(1.0 / bc2);
    let eps = T::cst(cfg.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mv = b1 * *mv + one_b1 * gv;
            *vv = b2 * *vv + one_b2 * gv * gv;
            *pv = *pv * decay - step * *mv / ((*vv * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p = vec![Tensor::from_vec(vec![3], vec![1.0f64, -2.0, 0.5]).unwrap()];
        let orig = p.clone();
        let g = vec![Tensor::zeros(vec![3])];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = AdamWState::new(&p, cfg).unwrap();
        for _ in 0..5 {
            adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
        }
        assert_eq!(p, orig);
        assert!(st.first_moment[0].data().iter().all(|&v| v == 0.0));
        assert!(st.second_moment[0].data().iter().all(|&v| v == 0.0));
        assert_eq!(st.step_count, 5);
    }

    #[test]
    fn one_step_hand_oracle() {
        let mut p = vec![Tensor::from_vec(vec![1], vec![1.0f64]).unwrap()];
        let g = vec![Tensor::from_vec(vec![1], vec![0.5]).unwrap()];
        let cfg = AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut st = AdamWState::new(&p, cfg).unwrap();
        adamw_step(&mut p, &g, &mut st, 1e-3).unwrap();
        // m = 0.05, v = 0.00025; m̂ = 0.5, v̂ = 0.25; p' = 1 − 1e-3·0.5/(0.5 + 1e-8).
        let want = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p[0].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut p = vec![Tensor::from_vec(vec![2], vec![3.0f32, -1.0]).unwrap()];
        let orig = p.clone();
        let g = vec![Tensor::from_vec(vec![2], vec![0.7f32, 0.2]).unwrap()];
        let mut st = AdamWState::new(
            &p,
            AdamWConfig {
                weight_decay: 0.3,
                ..Default::default()
            },
        )
        .unwrap();
        adamw_step(&mut p, &g, &mut st, 0.0).unwrap();
        assert_eq!(p, orig);
        assert_eq!(st.step_count, 1);
    }

    #[test]
    fn decoupled_decay_shrinks_parameters() {
        let mut p = vec![Tensor::from_vec(vec![1], vec![2.0f64]).unwrap()];
        let g = vec![Tensor::zeros(vec![1])];
        let mut st = AdamWState::new(
            &p,
            AdamWConfig {
                weight_decay: 0.1,
                ..Default::default()
            },
        )
        .unwrap();
        adamw_step(&mut p, &g, &mut st, 0.5).unwrap();
        assert!((p[0].data()[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![Tensor::<f64>::zeros(vec![2])];
        let g = vec![Tensor::zeros(vec![3])];
        let mut st = AdamWState::new(&p, AdamWConfig::default()).unwrap();
        assert!(adamw_step(&mut p, &g, &mut st, 1e-3).is_err());
    }
}
