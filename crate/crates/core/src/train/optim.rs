//! AdamW with decoupled weight decay, warmup-cosine schedule, and global
//! gradient clipping.

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Param, ParamKind};
use crate::tensor::Elem;

pub const ADAM_EPS: f64 = 1e-8;
pub const ALPHA_FLOOR: f64 = 1e-6;

/// Linear warmup 0 → peak over `warmup_steps`, then cosine decay from peak to
/// zero at `total_steps`; steps past the end clamp to the final value.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    debug_assert!(cfg.total_steps > 0, "schedule requires resolved total_steps");
    let total = cfg.total_steps;
    let warmup = cfg.warmup_steps.min(total);
    if step <= warmup {
        if warmup == 0 {
            return cfg.peak_lr;
        }
        return cfg.peak_lr * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// If the global L2 norm of all gradients exceeds `max_norm`, scale every
/// gradient by `max_norm / norm`. Returns the applied scale.
pub fn clip_grad_norm<E: Elem>(params: &[Param<E>], max_norm: f64) -> Result<f64> {
    debug_assert!(max_norm > 0.0);
    let norm = global_grad_norm(params)?;
    if norm <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    let scale_e = E::from_f(scale);
    for p in params {
        if let Some(mut g) = p.tensor.grad() {
            for v in g.iter_mut() {
                *v = *v * scale_e;
            }
            p.tensor.set_grad(g);
        }
    }
    Ok(scale)
}

/// Global L2 norm across every parameter gradient, accumulated in f64 in the
/// fixed parameter order. Non-finite values abort with the parameter's name.
pub fn global_grad_norm<E: Elem>(params: &[Param<E>]) -> Result<f64> {
    let mut acc = 0.0f64;
    for p in params {
        if let Some(g) = p.tensor.grad() {
            for &v in &g {
                let v = v.as_f64();
                if !v.is_finite() {
                    return Err(Error::NonFiniteGrad(p.name.clone()));
                }
                acc += v * v;
            }
        }
    }
    if !acc.is_finite() {
        return Err(Error::NonFiniteGrad("<global norm overflow>".into()));
    }
    Ok(acc.sqrt())
}

struct Moments<E: Elem> {
    m: Vec<E>,
    v: Vec<E>,
}

/// AdamW state over a fixed parameter list. Weight decay is decoupled and
/// applies only to 2-D projection latent weights; alphas are clamped back to
/// the positive domain after every step.
pub struct AdamW<E: Elem> {
    beta1: f64,
    beta2: f64,
    weight_decay: f64,
    /// Ablation hook: false freezes every alpha at its current value.
    pub update_alpha: bool,
    states: Vec<Moments<E>>,
    t: u64,
}

impl<E: Elem> AdamW<E> {
    pub fn new(params: &[Param<E>], cfg: &TrainConfig) -> Self {
        let states = params
            .iter()
            .map(|p| Moments {
                m: vec![E::zero(); p.tensor.numel()],
                v: vec![E::zero(); p.tensor.numel()],
            })
            .collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            weight_decay: cfg.weight_decay,
            update_alpha: cfg.train_alpha,
            states,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameters. Validates every gradient before any
    /// mutation so a non-finite gradient aborts the step cleanly.
    pub fn step(&mut self, params: &[Param<E>], lr: f64) -> Result<()> {
        debug_assert_eq!(params.len(), self.states.len());
        for p in params {
            if let Some(g) = p.tensor.grad() {
                if g.iter().any(|v| !v.as_f64().is_finite()) {
                    return Err(Error::NonFiniteGrad(p.name.clone()));
                }
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let b1 = E::from_f(self.beta1);
        let b2 = E::from_f(self.beta2);
        let one_m_b1 = E::from_f(1.0 - self.beta1);
        let one_m_b2 = E::from_f(1.0 - self.beta2);
        let inv_bc1 = E::from_f(1.0 / bc1);
        let inv_bc2 = E::from_f(1.0 / bc2);
        let eps = E::from_f(ADAM_EPS);
        let lr_e = E::from_f(lr);

        for (p, st) in params.iter().zip(self.states.iter_mut()) {
            if p.kind == ParamKind::Alpha && !self.update_alpha {
                continue;
            }
            let grad = p.tensor.grad_or_zeros();
            let decay = if p.kind == ParamKind::Projection {
                E::from_f(1.0 - lr * self.weight_decay)
            } else {
                E::one()
            };
            p.tensor.update_data(|theta| {
                for i in 0..theta.len() {
                    let g = grad[i];
                    st.m[i] = b1 * st.m[i] + one_m_b1 * g;
                    st.v[i] = b2 * st.v[i] + one_m_b2 * g * g;
                    let m_hat = st.m[i] * inv_bc1;
                    let v_hat = st.v[i] * inv_bc2;
                    theta[i] = theta[i] * decay - lr_e * m_hat / (v_hat.sqrt() + eps);
                }
            });
            if p.kind == ParamKind::Alpha {
                p.tensor.update_data(|a| {
                    if a[0].as_f64() < ALPHA_FLOOR {
                        a[0] = E::from_f(ALPHA_FLOOR);
                    }
                });
            }
        }
        Ok(())
    }
}
