//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to shared storage. Non-leaf
//! tensors carry the operation that produced them; calling [`Tensor::backward`]
//! on a scalar walks the recorded graph once in reverse topological order,
//! accumulates gradients into every leaf that requires them, and consumes the
//! graph. Computation runs in `f32` or `f64` via the [`Elem`] parameter;
//! the double-precision instantiation exists for gradient checking.

pub mod fastmath;
pub mod gradcheck;
pub mod kernels;
mod op;
mod ops;
#[cfg(test)]
mod tests;

pub use op::Mask;
pub use ops::{cross_entropy_smoothed, embedding_lookup};

pub(crate) mod ops_internal {
    pub(crate) use super::ops::quantize_frozen_op as quantize_frozen;
    pub(crate) use super::ops::quantize_op as quantize;
}

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Element type for tensor computation.
///
/// The `f*` transcendentals are what the elementwise kernels call: for f32
/// they dispatch to branchless vectorizable polynomials at f32 accuracy, for
/// f64 they stay on libm so double-precision gradient checks see exact math.
pub trait Elem:
    Copy
    + fmt::Debug
    + fmt::Display
    + PartialOrd
    + Default
    + num_traits::Float
    + num_traits::NumAssign
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn erf(self) -> Self;
    fn from_f(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn fexp(self) -> Self {
        self.exp()
    }
    fn ferf(self) -> Self {
        self.erf()
    }
    fn ftanh(self) -> Self {
        self.tanh()
    }
}

impl Elem for f32 {
    const DTYPE: &'static str = "f32";
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn from_f(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn fexp(self) -> Self {
        fastmath::exp32(self)
    }
    fn ferf(self) -> Self {
        fastmath::erf32(self)
    }
    fn ftanh(self) -> Self {
        fastmath::tanh32(self)
    }
}

impl Elem for f64 {
    const DTYPE: &'static str = "f64";
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn from_f(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// True when forward ops should record graph nodes.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Run `f` without recording any graph nodes (inference mode).
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Inner<E: Elem> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<E>>,
    requires_grad: Cell<bool>,
    grad: RefCell<Option<Vec<E>>>,
    node: RefCell<Option<op::Op<E>>>,
    consumed: Cell<bool>,
}

/// Handle to a dense n-dimensional array, optionally tracked by the autodiff
/// graph. Clones share storage.
pub struct Tensor<E: Elem> {
    inner: Rc<Inner<E>>,
}

impl<E: Elem> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<E: Elem> fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl<E: Elem> Tensor<E> {
    fn new_inner(shape: Vec<usize>, data: Vec<E>, requires_grad: bool, node: Option<op::Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                requires_grad: Cell::new(requires_grad),
                grad: RefCell::new(None),
                node: RefCell::new(node),
                consumed: Cell::new(false),
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::new_inner(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![E::zero(); n], false, None)
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: E) -> Self {
        Self::new_inner(vec![1], vec![value], false, None)
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<E>, node: Option<op::Op<E>>) -> Self {
        let rg = node.is_some();
        Self::new_inner(shape, data, rg, node)
    }

    /// Builder-style flag setter for leaves.
    pub fn requires_grad(self, flag: bool) -> Self {
        self.inner.requires_grad.set(flag);
        self
    }

    pub fn requires_grad_flag(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.borrow().is_none()
    }

    pub(crate) fn is_consumed(&self) -> bool {
        self.inner.consumed.get()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<E>> {
        self.inner.data.borrow()
    }

    pub fn data_vec(&self) -> Vec<E> {
        self.inner.data.borrow().clone()
    }

    /// Overwrite the stored values (leaves only; shape must match).
    pub fn set_data(&self, data: Vec<E>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::Shape {
                op: "set_data",
                lhs: self.inner.shape.clone(),
                rhs: vec![data.len()],
            });
        }
        *self.inner.data.borrow_mut() = data;
        Ok(())
    }

    /// Mutate values in place through a closure (used by the optimizer).
    pub fn update_data(&self, f: impl FnOnce(&mut [E])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn item(&self) -> E {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<E>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient, or zeros when no reverse pass touched this leaf.
    pub fn grad_or_zeros(&self) -> Vec<E> {
        self.inner
            .grad
            .borrow()
            .clone()
            .unwrap_or_else(|| vec![E::zero(); self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = Some(vec![E::zero(); self.numel()]);
    }

    pub fn set_grad(&self, g: Vec<E>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.inner.grad.borrow_mut() = Some(g);
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[E]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g.iter()) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf with copied values and no graph history.
    pub fn detach(&self) -> Self {
        Self::new_inner(self.inner.shape.clone(), self.data_vec(), false, None)
    }

    /// Reverse pass from a scalar. Gradients are accumulated (summed) into
    /// every participating leaf with `requires_grad`; the graph is consumed
    /// and a second call without a fresh forward is rejected.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.inner.shape
            )));
        }
        if self.inner.consumed.get() {
            return Err(Error::Graph(
                "graph already consumed by a previous reverse pass".into(),
            ));
        }
        if self.is_leaf() {
            // A bare leaf scalar: gradient of itself is 1.
            if self.requires_grad_flag() {
                self.accumulate_grad(&[E::one()]);
            }
            return Ok(());
        }

        let order = self.topo_order()?;
        self.accumulate_grad(&[E::one()]);

        let profile = std::env::var_os("TLM_PROFILE_BACKWARD").is_some();
        let mut timings: std::collections::BTreeMap<&'static str, f64> = Default::default();
        for t in order.iter().rev() {
            let node = t.inner.node.borrow_mut().take();
            let Some(op) = node else { continue };
            let upstream = t
                .inner
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![E::zero(); t.numel()]);
            {
                let out_val = t.inner.data.borrow();
                if profile {
                    let t0 = std::time::Instant::now();
                    op.backward(&out_val, &upstream);
                    *timings.entry(op.tag()).or_default() += t0.elapsed().as_secs_f64();
                } else {
                    op.backward(&out_val, &upstream);
                }
            }
            t.inner.consumed.set(true);
            // Interior gradients are no longer needed.
            *t.inner.grad.borrow_mut() = None;
        }
        if profile {
            eprintln!("backward op timings: {timings:?}");
        }
        Ok(())
    }

    /// Post-order over the graph (inputs before outputs).
    fn topo_order(&self) -> Result<Vec<Tensor<E>>> {
        enum Visit<E: Elem> {
            Enter(Tensor<E>),
            Exit(Tensor<E>),
        }
        let mut order = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack = vec![Visit::Enter(self.clone())];
        while let Some(v) = stack.pop() {
            match v {
                Visit::Enter(t) => {
                    if visited.contains(&t.inner.id) {
                        continue;
                    }
                    visited.insert(t.inner.id);
                    if t.inner.consumed.get() {
                        return Err(Error::Graph(
                            "reverse pass reached a node consumed by an earlier backward".into(),
                        ));
                    }
                    stack.push(Visit::Exit(t.clone()));
                    if let Some(op) = t.inner.node.borrow().as_ref() {
                        for p in op.parents() {
                            if !visited.contains(&p.inner.id) {
                                stack.push(Visit::Enter(p));
                            }
                        }
                    }
                }
                Visit::Exit(t) => order.push(t),
            }
        }
        Ok(order)
    }

    /// Guard used by forward ops: building on a consumed graph is an error.
    pub(crate) fn check_usable(&self, opname: &'static str) -> Result<()> {
        if self.inner.consumed.get() {
            return Err(Error::Graph(format!(
                "{opname}: input belongs to a consumed graph; run a fresh forward"
            )));
        }
        Ok(())
    }
}

/// Random initializers driven by an external seeded RNG.
impl<E: Elem> Tensor<E> {
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data: Vec<E> = (0..n).map(|_| E::from_f(dist.sample(rng))).collect();
        Self::new_inner(shape.to_vec(), data, false, None)
    }

    /// Normal(0, std) truncated at ±3 std (resampled).
    pub fn trunc_randn(shape: &[usize], std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let bound = 3.0 * std;
        let data: Vec<E> = (0..n)
            .map(|_| loop {
                let v: f64 = dist.sample(rng);
                if v.abs() <= bound {
                    break E::from_f(v);
                }
            })
            .collect();
        Self::new_inner(shape.to_vec(), data, false, None)
    }
}
