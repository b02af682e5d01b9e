//! Ternary projection layers: latent full-precision weights quantized each
//! forward to alpha · sign(W) with an adaptive threshold, trained through a
//! straight-through estimator.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::infer::packed::PackedTernaryMatrix;
use crate::tensor::kernels::population_std;
use crate::tensor::{Elem, Tensor};

/// tau = 0.5 · population std of all entries.
pub fn compute_threshold<E: Elem>(w: &[E]) -> f64 {
    0.5 * population_std(w)
}

/// Eq-style trichotomy: +1 above tau, 0 within ±tau (boundary inclusive),
/// −1 below −tau.
pub fn ternary_sign<E: Elem>(w: &[E], tau: f64) -> Vec<i8> {
    debug_assert!(tau >= 0.0);
    w.iter()
        .map(|&v| {
            let v = v.as_f64();
            if v > tau {
                1
            } else if v < -tau {
                -1
            } else {
                0
            }
        })
        .collect()
}

/// Binary ablation variant: no zero code, ties map to +1.
pub fn binary_sign<E: Elem>(w: &[E]) -> Vec<i8> {
    w.iter()
        .map(|&v| if v.as_f64() >= 0.0 { 1 } else { -1 })
        .collect()
}

/// Per-layer quantization snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantStats {
    pub layer_id: String,
    pub sparsity: f64,
    pub fraction_pos: f64,
    pub fraction_neg: f64,
    pub tau: f64,
    pub alpha: f64,
    pub weight_count: usize,
}

impl QuantStats {
    pub fn from_signs(layer_id: &str, signs: &[i8], tau: f64, alpha: f64) -> Self {
        let n = signs.len() as f64;
        let pos = signs.iter().filter(|&&s| s == 1).count() as f64;
        let neg = signs.iter().filter(|&&s| s == -1).count() as f64;
        QuantStats {
            layer_id: layer_id.to_string(),
            sparsity: (signs.len() as f64 - pos - neg) / n,
            fraction_pos: pos / n,
            fraction_neg: neg / n,
            tau,
            alpha,
            weight_count: signs.len(),
        }
    }

    pub const CSV_HEADER: &'static str = "layer_id,sparsity,fraction_pos,fraction_neg,tau,alpha";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.layer_id, self.sparsity, self.fraction_pos, self.fraction_neg, self.tau, self.alpha
        )
    }
}

struct QuantCache {
    tau: f64,
    signs: Rc<Vec<i8>>,
}

struct Frozen<E: Elem> {
    tau: f64,
    signs: Rc<Vec<i8>>,
    w_base: Vec<E>,
}

/// A quantized projection layer. The latent `w` stays full precision and is
/// what the optimizer updates; every forward requantizes it to
/// `alpha · sign(w)` unless the sign pattern is frozen for gradient checks.
pub struct TernaryLinear<E: Elem> {
    pub name: String,
    w: Option<Tensor<E>>,
    alpha: Tensor<E>,
    pub out_features: usize,
    pub in_features: usize,
    pub quantize_enabled: bool,
    pub binary_mode: bool,
    pub ste_alpha_scaling: bool,
    cache: RefCell<Option<QuantCache>>,
    frozen: RefCell<Option<Frozen<E>>>,
    packed: Option<PackedTernaryMatrix>,
}

impl<E: Elem> TernaryLinear<E> {
    /// Fresh layer with truncated-normal latent weights (the model default).
    pub fn new(
        name: &str,
        out_features: usize,
        in_features: usize,
        init_std: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let w = Tensor::trunc_randn(&[out_features, in_features], init_std, rng);
        Self::from_weight_tensor(name, out_features, in_features, w)
    }

    /// Fresh layer with untruncated Gaussian weights (used by the analytic
    /// sparsity oracles).
    pub fn new_gaussian(
        name: &str,
        out_features: usize,
        in_features: usize,
        std: f64,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let w = Tensor::randn(&[out_features, in_features], std, rng);
        Self::from_weight_tensor(name, out_features, in_features, w)
    }

    pub fn from_weights(
        name: &str,
        out_features: usize,
        in_features: usize,
        data: Vec<E>,
    ) -> Result<Self> {
        let w = Tensor::from_vec(&[out_features, in_features], data)?;
        Ok(Self::from_weight_tensor(name, out_features, in_features, w))
    }

    fn from_weight_tensor(
        name: &str,
        out_features: usize,
        in_features: usize,
        w: Tensor<E>,
    ) -> Self {
        let alpha0 = init_alpha(&w.data());
        let w = w.requires_grad(true);
        let alpha = Tensor::scalar(E::from_f(alpha0)).requires_grad(true);
        TernaryLinear {
            name: name.to_string(),
            w: Some(w),
            alpha,
            out_features,
            in_features,
            quantize_enabled: true,
            binary_mode: false,
            ste_alpha_scaling: true,
            cache: RefCell::new(None),
            frozen: RefCell::new(None),
            packed: None,
        }
    }

    /// Inference-only layer backed by packed codes; the latent weights are gone.
    pub fn from_packed(name: &str, packed: PackedTernaryMatrix) -> Self {
        let alpha = Tensor::scalar(E::from_f(packed.alpha() as f64));
        TernaryLinear {
            name: name.to_string(),
            out_features: packed.rows(),
            in_features: packed.cols(),
            w: None,
            alpha,
            quantize_enabled: true,
            binary_mode: false,
            ste_alpha_scaling: true,
            cache: RefCell::new(None),
            frozen: RefCell::new(None),
            packed: Some(packed),
        }
    }

    pub fn weight(&self) -> Option<&Tensor<E>> {
        self.w.as_ref()
    }

    pub fn alpha_tensor(&self) -> &Tensor<E> {
        &self.alpha
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.data()[0].as_f64()
    }

    pub fn is_packed(&self) -> bool {
        self.packed.is_some()
    }

    pub fn packed_matrix(&self) -> Option<&PackedTernaryMatrix> {
        self.packed.as_ref()
    }

    pub fn weight_count(&self) -> usize {
        self.out_features * self.in_features
    }

    fn latent(&self) -> Result<&Tensor<E>> {
        self.w.as_ref().ok_or_else(|| {
            Error::Quant(format!(
                "layer '{}' is packed-only; latent weights were discarded",
                self.name
            ))
        })
    }

    fn sign_of(&self, w: &[E], tau: f64) -> Vec<i8> {
        if self.binary_mode {
            binary_sign(w)
        } else {
            ternary_sign(w, tau)
        }
    }

    /// Effective weights W_q for the current latent state. Recomputes the
    /// threshold and sign pattern (and caches them) unless signs are frozen.
    pub fn quantize(&self) -> Result<Tensor<E>> {
        let w = self.latent()?;
        if !self.quantize_enabled {
            return Ok(w.clone());
        }
        let alpha = self.alpha.data()[0].as_f64();
        if alpha <= 0.0 {
            return Err(Error::Quant(format!(
                "layer '{}': alpha must stay positive, got {alpha}",
                self.name
            )));
        }
        if let Some(f) = self.frozen.borrow().as_ref() {
            return crate::tensor::ops_internal::quantize_frozen(
                w,
                &self.alpha,
                Rc::clone(&f.signs),
                &f.w_base,
                self.ste_alpha_scaling,
            );
        }
        let (tau, signs) = {
            let wd = w.data();
            let tau = compute_threshold(&wd);
            (tau, Rc::new(self.sign_of(&wd, tau)))
        };
        *self.cache.borrow_mut() = Some(QuantCache {
            tau,
            signs: Rc::clone(&signs),
        });
        crate::tensor::ops_internal::quantize(w, &self.alpha, signs, self.ste_alpha_scaling)
    }

    /// Projection forward: packed path, quantized path, or plain latent path.
    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        if let Some(p) = &self.packed {
            if x.shape().len() != 2 || x.shape()[1] != self.in_features {
                return Err(Error::Shape {
                    op: "packed forward",
                    lhs: x.shape().to_vec(),
                    rhs: vec![self.out_features, self.in_features],
                });
            }
            let s = x.shape()[0];
            let y = p.linear(&x.data(), s)?;
            return Tensor::from_vec(&[s, self.out_features], y);
        }
        if self.quantize_enabled {
            let wq = self.quantize()?;
            x.linear(&wq)
        } else {
            x.linear(self.latent()?)
        }
    }

    /// Standalone straight-through backward against the most recent forward:
    /// grad(W) = alpha · upstream (or plain upstream when alpha scaling is
    /// off) and grad(alpha) = Σ upstream ⊙ signs.
    pub fn ste_backward(&self, upstream: &[E]) -> Result<(Vec<E>, E)> {
        let cache = self.cache.borrow();
        let (signs,) = match (cache.as_ref(), self.frozen.borrow().as_ref()) {
            (_, Some(f)) => (Rc::clone(&f.signs),),
            (Some(c), None) => (Rc::clone(&c.signs),),
            (None, None) => {
                return Err(Error::Quant(format!(
                    "layer '{}': ste_backward without a matching forward (stale cache)",
                    self.name
                )))
            }
        };
        if upstream.len() != self.weight_count() {
            return Err(Error::Shape {
                op: "ste_backward",
                lhs: vec![self.out_features, self.in_features],
                rhs: vec![upstream.len()],
            });
        }
        let alpha = self.alpha.data()[0];
        let grad_w: Vec<E> = if self.ste_alpha_scaling {
            upstream.iter().map(|&u| u * alpha).collect()
        } else {
            upstream.to_vec()
        };
        let mut grad_alpha = E::zero();
        for (&u, &s) in upstream.iter().zip(signs.iter()) {
            grad_alpha += u * E::from_f(s as f64);
        }
        Ok((grad_w, grad_alpha))
    }

    /// Stats over the sign pattern of the most recent forward.
    pub fn layer_stats(&self) -> Result<QuantStats> {
        let frozen = self.frozen.borrow();
        let cache = self.cache.borrow();
        let (tau, signs) = if let Some(f) = frozen.as_ref() {
            (f.tau, Rc::clone(&f.signs))
        } else if let Some(c) = cache.as_ref() {
            (c.tau, Rc::clone(&c.signs))
        } else {
            return Err(Error::Quant(format!(
                "layer '{}': no cached signs; run a quantized forward first",
                self.name
            )));
        };
        Ok(QuantStats::from_signs(
            &self.name,
            &signs,
            tau,
            self.alpha_value(),
        ))
    }

    pub fn last_tau(&self) -> Option<f64> {
        if let Some(f) = self.frozen.borrow().as_ref() {
            return Some(f.tau);
        }
        self.cache.borrow().as_ref().map(|c| c.tau)
    }

    pub fn last_signs(&self) -> Option<Rc<Vec<i8>>> {
        if let Some(f) = self.frozen.borrow().as_ref() {
            return Some(Rc::clone(&f.signs));
        }
        self.cache.borrow().as_ref().map(|c| Rc::clone(&c.signs))
    }

    /// Threshold and sign pattern for the current latent weights, honoring
    /// the layer's binary/ternary mode. Does not touch the forward cache.
    pub fn signs_now(&self) -> Result<(f64, Vec<i8>)> {
        let w = self.latent()?;
        let wd = w.data();
        let tau = compute_threshold(&wd);
        Ok((tau, self.sign_of(&wd, tau)))
    }

    /// Full-precision copy (latent weights, alpha, flags); drops caches.
    pub fn clone_fp(&self) -> Result<Self> {
        let w = self.latent()?;
        let mut l = Self::from_weights(
            &self.name,
            self.out_features,
            self.in_features,
            w.data_vec(),
        )?;
        l.alpha
            .set_data(self.alpha.data_vec())
            .expect("alpha shape");
        l.quantize_enabled = self.quantize_enabled;
        l.binary_mode = self.binary_mode;
        l.ste_alpha_scaling = self.ste_alpha_scaling;
        Ok(l)
    }

    /// Capture the current sign pattern and hold it fixed across forwards.
    /// While frozen, the quantized forward evaluates
    /// `alpha · (signs + (W − W_base))`, which equals `alpha · signs` at the
    /// capture point but stays differentiable in W, so central differences
    /// can probe the straight-through gradient of every parameter.
    pub fn freeze_signs(&self) -> Result<()> {
        let w = self.latent()?;
        let wd = w.data();
        let tau = compute_threshold(&wd);
        let signs = Rc::new(self.sign_of(&wd, tau));
        *self.frozen.borrow_mut() = Some(Frozen {
            tau,
            signs,
            w_base: wd.clone(),
        });
        Ok(())
    }

    pub fn unfreeze_signs(&self) {
        *self.frozen.borrow_mut() = None;
    }

    /// Clamp alpha to the positive domain; called after each optimizer step.
    pub fn clamp_alpha(&self, floor: f64) {
        self.alpha.update_data(|a| {
            if a[0].as_f64() < floor {
                a[0] = E::from_f(floor);
            }
        });
    }
}

/// Mean |w| over entries with |w| above the initial threshold; the scale that
/// minimizes initial quantization error over surviving weights.
pub(crate) fn init_alpha<E: Elem>(w: &[E]) -> f64 {
    let tau = compute_threshold(w);
    let mut sum = 0.0;
    let mut count = 0usize;
    for &v in w {
        let a = v.as_f64().abs();
        if a > tau {
            sum += a;
            count += 1;
        }
    }
    if count > 0 {
        (sum / count as f64).max(1e-6)
    } else {
        let mean_abs = w.iter().map(|v| v.as_f64().abs()).sum::<f64>() / w.len().max(1) as f64;
        mean_abs.max(1e-6)
    }
}
