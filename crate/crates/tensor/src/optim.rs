//! AdamW with decoupled weight decay.

use crate::error::{shape_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Moment accumulators, one pair per parameter, in a fixed parameter order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<'t>(config: AdamWConfig, params: impl IntoIterator<Item = &'t Tensor>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())))
            .unzip();
        Self {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn moments(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.m[i], &self.v[i])
    }
}

/// One AdamW update. `params[i]` pairs with `grads[i]`; all gradients are
/// validated before any parameter is touched.
pub fn adamw_step(params: &mut [&mut Tensor], grads: &[&[f64]], state: &mut OptimizerState) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(TensorError::Invalid {
            op: "adamw_step",
            msg: format!(
                "{} params, {} grads, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != state.m[i].shape() || p.numel() != g.len() {
            return Err(shape_err("adamw_step", &[p.shape(), state.m[i].shape(), &[g.len()]]));
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFiniteGradient { index: i });
        }
    }
    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j];
            m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
            v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= c.lr * c.weight_decay * *w;
            *w -= c.lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_fixed_point() {
        let mut p = Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let before = p.clone();
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, [&p]);
        for _ in 0..5 {
            adamw_step(&mut [&mut p], &[&[0.0, 0.0, 0.0]], &mut st).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_calculation() {
        // m = 0.1 g, v = 0.001 g^2, bias-corrected mhat = g, vhat = g^2,
        // so the step is lr * g / (|g| + eps) after decay.
        let (lr, wd, eps) = (0.01, 0.1, 1e-8);
        let (w0, g) = (2.0, -0.5);
        let mut p = Tensor::scalar(w0);
        let cfg = AdamWConfig {
            lr,
            weight_decay: wd,
            eps,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, [&p]);
        adamw_step(&mut [&mut p], &[&[g]], &mut st).unwrap();
        let decayed = w0 - lr * wd * w0;
        let expected = decayed - lr * g / (g.abs() + eps);
        assert!((p.data()[0] - expected).abs() < 1e-15, "{} vs {expected}", p.data()[0]);
    }

    #[test]
    fn decay_only_shrinks_by_lr_wd_param() {
        let mut p = Tensor::scalar(3.0);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut st = OptimizerState::new(cfg, [&p]);
        adamw_step(&mut [&mut p], &[&[0.0]], &mut st).unwrap();
        assert!((p.data()[0] - (3.0 - 0.1 * 0.5 * 3.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_mutation() {
        let mut a = Tensor::scalar(1.0);
        let mut b = Tensor::scalar(1.0);
        let mut st = OptimizerState::new(AdamWConfig::default(), [&a, &b]);
        let err = adamw_step(&mut [&mut a, &mut b], &[&[0.1], &[f64::NAN]], &mut st).unwrap_err();
        assert!(matches!(err, TensorError::NonFiniteGradient { index: 1 }));
        assert_eq!(a.data()[0], 1.0);
        assert_eq!(st.step, 0);
    }
}
