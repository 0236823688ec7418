//! Adam with elementwise gradient clipping, and the warmup schedule.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_lo: f64,
    pub clip_hi: f64,
    /// Decoupled weight decay; zero disables it.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.98, eps: 1e-9, clip_lo: -1.0, clip_hi: 1.0, weight_decay: 0.0 }
    }
}

#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    /// Zero moments shaped like each parameter of `params`.
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let mut m = Vec::new();
        params.visit(&mut |_, t| m.push(Tensor::zeros(t.shape())));
        Self { config, step: 0, v: m.clone(), m }
    }
}

/// One bias-corrected Adam update. `grads` follow the traversal order of `params`.
/// Gradients are clipped elementwise before entering the moments.
pub fn adam_step<P: Parameters + ?Sized>(params: &mut P, grads: &[Tensor], state: &mut OptimState, lr: f64) -> Result<()> {
    if grads.len() != state.m.len() {
        return Err(dim_err!("{} gradients for {} parameters", grads.len(), state.m.len()));
    }
    let mut shape_err = None;
    let mut i = 0;
    params.visit(&mut |name, t| {
        if shape_err.is_none() && (i >= grads.len() || grads[i].shape() != t.shape()) {
            shape_err = Some(dim_err!("gradient for {name} has the wrong shape"));
        }
        i += 1;
    });
    if let Some(e) = shape_err {
        return Err(e);
    }

    state.step += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.step as i32);
    let bc2 = 1.0 - c.beta2.powi(state.step as i32);
    let (ms, vs) = (&mut state.m, &mut state.v);
    let mut i = 0;
    params.visit_mut(&mut |_, p| {
        let g = grads[i].data();
        let m = ms[i].data_mut();
        let v = vs[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k].clamp(c.clip_lo, c.clip_hi);
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            if c.weight_decay > 0.0 {
                *w -= lr * c.weight_decay * *w;
            }
            *w -= lr * mhat / (vhat.sqrt() + c.eps);
        }
        i += 1;
    });
    Ok(())
}

/// `d_model^-0.5 * min(n^-0.5, n * w^-1.5)`.
pub fn warmup_lr(n_step: u64, d_model: usize, w_steps: u64) -> Result<f64> {
    if n_step == 0 || d_model == 0 || w_steps == 0 {
        return Err(Error::Domain(format!(
            "warmup schedule needs positive arguments, got n={n_step}, d={d_model}, w={w_steps}"
        )));
    }
    let n = n_step as f64;
    Ok((d_model as f64).powf(-0.5) * n.powf(-0.5).min(n * (w_steps as f64).powf(-1.5)))
}

/// One line of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> Tensor {
        Tensor::from_raw(vec![1], vec![v])
    }

    #[test]
    fn zero_grad_leaves_params() {
        let mut p = vec![one(1.5), Tensor::ones(&[2, 2])];
        let mut st = OptimState::new(&p, AdamConfig::default());
        adam_step(&mut p, &[one(0.0), Tensor::zeros(&[2, 2])], &mut st, 0.1).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(p[0].item(), 1.5);
        assert_eq!(p[1], Tensor::ones(&[2, 2]));
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m = 0.1 c, v = 0.02 c^2; bias-corrected: c and c^2 -> step = lr c/(|c| + eps)
        for c in [0.3, -0.7] {
            let mut p = vec![one(0.0)];
            let mut st = OptimState::new(&p, AdamConfig::default());
            adam_step(&mut p, &[one(c)], &mut st, 0.01).unwrap();
            let expect = -0.01 * c / (c.abs() + 1e-9);
            assert!((p[0].item() - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn large_grads_are_clipped() {
        let mut a = vec![one(0.0)];
        let mut b = vec![one(0.0)];
        let mut sa = OptimState::new(&a, AdamConfig::default());
        let mut sb = OptimState::new(&b, AdamConfig::default());
        for g in [100.0, 0.5, -3.0] {
            adam_step(&mut a, &[one(g)], &mut sa, 0.01).unwrap();
            adam_step(&mut b, &[one(g.clamp(-1.0, 1.0))], &mut sb, 0.01).unwrap();
        }
        assert_eq!(a[0].item(), b[0].item());
        assert_eq!(sa.m[0].item(), sb.m[0].item());
    }

    #[test]
    fn weight_decay_shrinks() {
        let cfg = AdamConfig { weight_decay: 0.5, ..AdamConfig::default() };
        let mut p = vec![one(2.0)];
        let mut st = OptimState::new(&p, cfg);
        adam_step(&mut p, &[one(0.0)], &mut st, 0.1).unwrap();
        assert!((p[0].item() - 1.9).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = vec![one(0.0)];
        let mut st = OptimState::new(&p, AdamConfig::default());
        assert!(adam_step(&mut p, &[Tensor::zeros(&[2])], &mut st, 0.1).is_err());
        assert!(adam_step(&mut p, &[], &mut st, 0.1).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn warmup_values() {
        assert!((warmup_lr(40000, 256, 40000).unwrap() - 3.125e-4).abs() < 1e-18);
        let cross = warmup_lr(400, 64, 400).unwrap();
        assert!((cross - (64.0f64 * 400.0).powf(-0.5)).abs() < 1e-15);
        let mut prev = 0.0;
        for n in 1..400 {
            let lr = warmup_lr(n, 64, 400).unwrap();
            assert!(lr > prev);
            prev = lr;
        }
        assert!(warmup_lr(401, 64, 400).unwrap() < cross);
        assert!(warmup_lr(0, 64, 400).is_err());
        assert!(warmup_lr(1, 0, 400).is_err());
        assert!(warmup_lr(1, 64, 0).is_err());
    }

    #[test]
    fn log_entry_is_one_json_line() {
        let e = TrainLogEntry { step: 3, lr: 0.01, loss: 0.5, grad_norm: 1.25, wall_ms: 2.0 };
        let s = serde_json::to_string(&e).unwrap();
        assert!(!s.contains('\n'));
        assert_eq!(serde_json::from_str::<TrainLogEntry>(&s).unwrap(), e);
    }
}
