//! Forward operations. Each op validates shapes, computes its value, and
//! records a graph node when gradients are enabled and any input needs them.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::op::{rope_rotate, BinKind, Bcast, Mask, Op, UnaryKind};
use super::{grad_enabled, Elem, Tensor};

impl<E: Elem> Tensor<E> {
    fn unary(&self, kind: UnaryKind) -> Result<Tensor<E>> {
        self.check_usable("unary")?;
        let xd = self.data();
        let data: Vec<E> = match kind {
            UnaryKind::Silu => {
                super::kernels::par_map(&xd, |x| x / (E::one() + (-x).fexp()))
            }
            UnaryKind::Gelu => {
                let half = E::from_f(0.5);
                let inv_sqrt2 = E::from_f(std::f64::consts::FRAC_1_SQRT_2);
                super::kernels::par_map(&xd, move |x| {
                    x * half * (E::one() + (x * inv_sqrt2).ferf())
                })
            }
            UnaryKind::Tanh => super::kernels::par_map(&xd, |x| x.ftanh()),
            UnaryKind::Exp => super::kernels::par_map(&xd, |x| x.fexp()),
            UnaryKind::Log => super::kernels::par_map(&xd, |x| x.ln()),
            UnaryKind::Neg => super::kernels::par_map(&xd, |x| -x),
        };
        drop(xd);
        let node = (grad_enabled() && self.requires_grad_flag())
            .then(|| Op::Unary { x: self.clone(), kind });
        Ok(Tensor::from_op(self.shape().to_vec(), data, node))
    }

    pub fn silu(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Silu)
    }
    pub fn gelu(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Gelu)
    }
    pub fn tanh_op(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Tanh)
    }
    pub fn exp_op(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Exp)
    }
    pub fn log_op(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Log)
    }
    pub fn neg(&self) -> Result<Tensor<E>> {
        self.unary(UnaryKind::Neg)
    }

    pub fn scale(&self, c: E) -> Result<Tensor<E>> {
        self.check_usable("scale")?;
        let data: Vec<E> = self.data().iter().map(|&x| x * c).collect();
        let node = (grad_enabled() && self.requires_grad_flag())
            .then(|| Op::Scale { x: self.clone(), c });
        Ok(Tensor::from_op(self.shape().to_vec(), data, node))
    }

    fn binary(&self, other: &Tensor<E>, kind: BinKind) -> Result<Tensor<E>> {
        self.check_usable("binary")?;
        other.check_usable("binary")?;
        let (a, b) = (self, other);
        // Broadcasting is rhs-only; add/mul are commutative so swap when the
        // lhs is the small operand.
        let shape_err = || Error::Shape {
            op: "elementwise",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let bc_of = |big: &Tensor<E>, small: &Tensor<E>| -> Option<Bcast> {
            if big.shape() == small.shape() {
                Some(Bcast::None)
            } else if small.numel() == 1 {
                Some(Bcast::ScalarRhs)
            } else if small.shape().len() == 1 && big.shape().last() == Some(&small.shape()[0]) {
                Some(Bcast::LastAxisRhs)
            } else {
                None
            }
        };
        let (a, b, bcast) = if let Some(bc) = bc_of(a, b) {
            (a.clone(), b.clone(), bc)
        } else if matches!(kind, BinKind::Add | BinKind::Mul) {
            let bc = bc_of(b, a).ok_or_else(shape_err)?;
            (b.clone(), a.clone(), bc)
        } else {
            return Err(shape_err());
        };
        let ad = a.data();
        let bd = b.data();
        let n = ad.len();
        let mut data = vec![E::zero(); n];
        let rhs = |i: usize| match bcast {
            Bcast::None => bd[i],
            Bcast::ScalarRhs => bd[0],
            Bcast::LastAxisRhs => bd[i % bd.len()],
        };
        match kind {
            BinKind::Add => {
                for (i, slot) in data.iter_mut().enumerate() {
                    *slot = ad[i] + rhs(i);
                }
            }
            BinKind::Sub => {
                for (i, slot) in data.iter_mut().enumerate() {
                    *slot = ad[i] - rhs(i);
                }
            }
            BinKind::Mul => {
                for (i, slot) in data.iter_mut().enumerate() {
                    *slot = ad[i] * rhs(i);
                }
            }
        }
        drop(ad);
        drop(bd);
        let shape = a.shape().to_vec();
        let node = (grad_enabled() && (a.requires_grad_flag() || b.requires_grad_flag()))
            .then(|| Op::Binary { a, b, kind, bcast });
        Ok(Tensor::from_op(shape, data, node))
    }

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Add)
    }
    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Sub)
    }
    /// Hadamard product (with scalar / trailing-axis broadcast).
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, BinKind::Mul)
    }

    /// Standard matrix product A[m,k] · B[k,n].
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_usable("matmul")?;
        other.check_usable("matmul")?;
        if self.shape().len() != 2 || other.shape().len() != 2 || self.shape()[1] != other.shape()[0]
        {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let n = other.shape()[1];
        let mut data = vec![E::zero(); m * n];
        super::kernels::gemm_nn(&self.data(), &other.data(), &mut data, m, k, n);
        let node = (grad_enabled() && (self.requires_grad_flag() || other.requires_grad_flag()))
            .then(|| Op::MatMul {
                a: self.clone(),
                b: other.clone(),
            });
        Ok(Tensor::from_op(vec![m, n], data, node))
    }

    /// x[s,in] · wᵀ for a weight stored [out,in]; the projection primitive.
    pub fn linear(&self, w: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_usable("linear")?;
        w.check_usable("linear")?;
        if self.shape().len() != 2 || w.shape().len() != 2 || self.shape()[1] != w.shape()[1] {
            return Err(Error::Shape {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (s, k) = (self.shape()[0], self.shape()[1]);
        let out = w.shape()[0];
        // Transposing w lets the kernel stream contiguous rows; the transpose
        // cost is amortized over the s rows.
        let wt = super::kernels::transpose(&w.data(), out, k);
        let mut data = vec![E::zero(); s * out];
        super::kernels::gemm_nn(&self.data(), &wt, &mut data, s, k, out);
        let node = (grad_enabled() && (self.requires_grad_flag() || w.requires_grad_flag()))
            .then(|| Op::Linear {
                x: self.clone(),
                w: w.clone(),
            });
        Ok(Tensor::from_op(vec![s, out], data, node))
    }

    /// Batched product [h,m,k]·[h,k,n].
    pub fn bmm_nn(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_usable("bmm_nn")?;
        other.check_usable("bmm_nn")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm_nn",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (h, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = vec![E::zero(); h * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for hi in 0..h {
                super::kernels::gemm_nn(
                    &ad[hi * m * k..(hi + 1) * m * k],
                    &bd[hi * k * n..(hi + 1) * k * n],
                    &mut data[hi * m * n..(hi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let node = (grad_enabled() && (self.requires_grad_flag() || other.requires_grad_flag()))
            .then(|| Op::BmmNN {
                a: self.clone(),
                b: other.clone(),
            });
        Ok(Tensor::from_op(vec![h, m, n], data, node))
    }

    /// Batched product [h,m,k]·[h,n,k]ᵀ (attention scores).
    pub fn bmm_nt(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_usable("bmm_nt")?;
        other.check_usable("bmm_nt")?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Shape {
                op: "bmm_nt",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (h, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let mut data = vec![E::zero(); h * m * n];
        {
            let ad = self.data();
            let bd = other.data();
            for hi in 0..h {
                super::kernels::gemm_nt(
                    &ad[hi * m * k..(hi + 1) * m * k],
                    &bd[hi * n * k..(hi + 1) * n * k],
                    &mut data[hi * m * n..(hi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let node = (grad_enabled() && (self.requires_grad_flag() || other.requires_grad_flag()))
            .then(|| Op::BmmNT {
                a: self.clone(),
                b: other.clone(),
            });
        Ok(Tensor::from_op(vec![h, m, n], data, node))
    }

    /// Softmax over the last dimension, numerically stabilized by
    /// max-subtraction. Masked positions receive −∞ before normalization.
    pub fn softmax_lastdim(&self, mask: Option<&Mask>) -> Result<Tensor<E>> {
        self.check_usable("softmax")?;
        let shape = self.shape();
        let cols = *shape.last().ok_or(Error::Shape {
            op: "softmax",
            lhs: shape.to_vec(),
            rhs: vec![],
        })?;
        let total_rows = self.numel() / cols;
        // Row index within the trailing matrix, for causal masking.
        let mat_rows = if shape.len() >= 2 {
            shape[shape.len() - 2]
        } else {
            1
        };
        if mask.is_some() && shape.len() < 2 {
            return Err(Error::Shape {
                op: "softmax mask",
                lhs: shape.to_vec(),
                rhs: vec![mat_rows, cols],
            });
        }
        if let Some(Mask::Explicit(m)) = mask {
            if m.len() != mat_rows * cols {
                return Err(Error::Shape {
                    op: "softmax mask",
                    lhs: vec![mat_rows, cols],
                    rhs: vec![m.len()],
                });
            }
        }
        // A fully-masked row is a property of the mask alone, so reject it
        // before the (parallel) compute pass.
        if cols == 0 {
            return Err(Error::AllMaskedRow { row: 0 });
        }
        if let Some(Mask::Explicit(m)) = mask {
            for r in 0..mat_rows {
                if !m[r * cols..(r + 1) * cols].iter().any(|&k| k) {
                    return Err(Error::AllMaskedRow { row: r });
                }
            }
        }
        let keep = |r: usize, c: usize| -> bool {
            match mask {
                None => true,
                Some(Mask::Causal) => c <= r,
                Some(Mask::Explicit(m)) => m[r * cols + c],
            }
        };
        let xd = self.data();
        let xs: &[E] = &xd;
        let mut data = vec![E::zero(); xs.len()];
        super::kernels::par_rows(&mut data, cols, move |row, out_row| {
            let r = row % mat_rows;
            let base = row * cols;
            let mut maxv = E::neg_infinity();
            for c in 0..cols {
                if keep(r, c) && xs[base + c] > maxv {
                    maxv = xs[base + c];
                }
            }
            let mut denom = E::zero();
            for c in 0..cols {
                if keep(r, c) {
                    let e = (xs[base + c] - maxv).fexp();
                    out_row[c] = e;
                    denom += e;
                }
            }
            for o in out_row.iter_mut() {
                *o = *o / denom;
            }
        });
        drop(xd);
        let node = (grad_enabled() && self.requires_grad_flag()).then(|| Op::Softmax {
            x: self.clone(),
            rows: total_rows,
            cols,
        });
        Ok(Tensor::from_op(shape.to_vec(), data, node))
    }

    /// Rotary position embedding over a [seq, head_dim] or [heads, seq, head_dim]
    /// tensor; consecutive pairs are rotated by pos · theta^(−2i/head_dim).
    pub fn rope_apply(&self, positions: &[usize], theta: f64) -> Result<Tensor<E>> {
        self.check_usable("rope")?;
        let shape = self.shape();
        let (seq, head_dim) = match shape.len() {
            2 => (shape[0], shape[1]),
            3 => (shape[1], shape[2]),
            _ => {
                return Err(Error::Shape {
                    op: "rope",
                    lhs: shape.to_vec(),
                    rhs: vec![],
                })
            }
        };
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rope requires even head_dim, got {head_dim}"
            )));
        }
        if positions.len() != seq {
            return Err(Error::Shape {
                op: "rope positions",
                lhs: vec![seq],
                rhs: vec![positions.len()],
            });
        }
        let mut data = vec![E::zero(); self.numel()];
        rope_rotate(&self.data(), &mut data, positions, theta, head_dim, false);
        let node = (grad_enabled() && self.requires_grad_flag()).then(|| Op::Rope {
            x: self.clone(),
            theta,
            positions: positions.to_vec(),
            head_dim,
        });
        Ok(Tensor::from_op(shape.to_vec(), data, node))
    }

    /// gain ⊙ x / sqrt(mean(x²) + eps), no mean subtraction.
    pub fn rmsnorm(&self, gain: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        self.check_usable("rmsnorm")?;
        gain.check_usable("rmsnorm")?;
        let d = gain.numel();
        if self.shape().last() != Some(&d) {
            return Err(Error::Shape {
                op: "rmsnorm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let xd = self.data();
        let gd = gain.data();
        let rows = xd.len() / d;
        let mut data = vec![E::zero(); xd.len()];
        let mut inv_rms = vec![E::zero(); rows];
        for r in 0..rows {
            let base = r * d;
            let mut acc = 0.0f64;
            for j in 0..d {
                let v = xd[base + j].as_f64();
                acc += v * v;
            }
            let rs = E::from_f(1.0 / (acc / d as f64 + eps).sqrt());
            inv_rms[r] = rs;
            for j in 0..d {
                data[base + j] = gd[j] * xd[base + j] * rs;
            }
        }
        drop(xd);
        drop(gd);
        let node = (grad_enabled() && (self.requires_grad_flag() || gain.requires_grad_flag()))
            .then(|| Op::RmsNorm {
                x: self.clone(),
                gain: gain.clone(),
                inv_rms,
            });
        Ok(Tensor::from_op(self.shape().to_vec(), data, node))
    }

    /// Mean-subtracting LayerNorm with a gain vector (no bias); the ablation
    /// substitute for rmsnorm.
    pub fn layernorm(&self, gain: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        self.check_usable("layernorm")?;
        gain.check_usable("layernorm")?;
        let d = gain.numel();
        if self.shape().last() != Some(&d) {
            return Err(Error::Shape {
                op: "layernorm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let xd = self.data();
        let gd = gain.data();
        let rows = xd.len() / d;
        let mut data = vec![E::zero(); xd.len()];
        let mut mean = vec![E::zero(); rows];
        let mut inv_std = vec![E::zero(); rows];
        for r in 0..rows {
            let base = r * d;
            let mut acc = 0.0f64;
            for j in 0..d {
                acc += xd[base + j].as_f64();
            }
            let mu = acc / d as f64;
            let mut var = 0.0f64;
            for j in 0..d {
                let v = xd[base + j].as_f64() - mu;
                var += v * v;
            }
            var /= d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[r] = E::from_f(mu);
            inv_std[r] = E::from_f(rs);
            for j in 0..d {
                data[base + j] = gd[j] * (xd[base + j] - mean[r]) * inv_std[r];
            }
        }
        drop(xd);
        drop(gd);
        let node = (grad_enabled() && (self.requires_grad_flag() || gain.requires_grad_flag()))
            .then(|| Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                mean,
                inv_std,
            });
        Ok(Tensor::from_op(self.shape().to_vec(), data, node))
    }

    /// [s, h·hd] → [h, s, hd]
    pub fn split_heads(&self, heads: usize) -> Result<Tensor<E>> {
        self.split_heads_batched(heads, 1)
    }

    /// [b·s, h·hd] → [b·h, s, hd]; sequence structure recovered from `batch`.
    pub fn split_heads_batched(&self, heads: usize, batch: usize) -> Result<Tensor<E>> {
        self.check_usable("split_heads")?;
        let shape = self.shape();
        if shape.len() != 2 || shape[1] % heads != 0 || batch == 0 || shape[0] % batch != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: shape.to_vec(),
                rhs: vec![heads, batch],
            });
        }
        let (s, d) = (shape[0] / batch, shape[1]);
        let hd = d / heads;
        let xd = self.data();
        let mut data = vec![E::zero(); xd.len()];
        super::op::split_heads_map(&xd, &mut data, batch, heads, s, hd, false);
        drop(xd);
        let node = (grad_enabled() && self.requires_grad_flag()).then(|| Op::SplitHeads {
            x: self.clone(),
            heads,
            batch,
        });
        Ok(Tensor::from_op(vec![batch * heads, s, hd], data, node))
    }

    /// [h, s, hd] → [s, h·hd]
    pub fn merge_heads(&self) -> Result<Tensor<E>> {
        self.merge_heads_batched(1)
    }

    /// [b·h, s, hd] → [b·s, h·hd]
    pub fn merge_heads_batched(&self, batch: usize) -> Result<Tensor<E>> {
        self.check_usable("merge_heads")?;
        let shape = self.shape();
        if shape.len() != 3 || batch == 0 || shape[0] % batch != 0 {
            return Err(Error::Shape {
                op: "merge_heads",
                lhs: shape.to_vec(),
                rhs: vec![batch],
            });
        }
        let (h, s, hd) = (shape[0] / batch, shape[1], shape[2]);
        let d = h * hd;
        let xd = self.data();
        let mut data = vec![E::zero(); xd.len()];
        super::op::split_heads_map(&xd, &mut data, batch, h, s, hd, true);
        drop(xd);
        let node = (grad_enabled() && self.requires_grad_flag()).then(|| Op::MergeHeads {
            x: self.clone(),
            batch,
        });
        Ok(Tensor::from_op(vec![batch * s, d], data, node))
    }

    pub fn select_row(&self, row: usize) -> Result<Tensor<E>> {
        self.check_usable("select_row")?;
        let shape = self.shape();
        if shape.len() != 2 || row >= shape[0] {
            return Err(Error::Shape {
                op: "select_row",
                lhs: shape.to_vec(),
                rhs: vec![row],
            });
        }
        let d = shape[1];
        let data = self.data()[row * d..(row + 1) * d].to_vec();
        let node = (grad_enabled() && self.requires_grad_flag()).then(|| Op::SelectRow {
            x: self.clone(),
            row,
        });
        Ok(Tensor::from_op(vec![d], data, node))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        self.check_usable("reshape")?;
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let node =
            (grad_enabled() && self.requires_grad_flag()).then(|| Op::Reshape { x: self.clone() });
        Ok(Tensor::from_op(shape.to_vec(), self.data_vec(), node))
    }

    pub fn sum(&self) -> Result<Tensor<E>> {
        self.check_usable("sum")?;
        let mut acc = E::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        let node = (grad_enabled() && self.requires_grad_flag()).then(|| Op::Sum { x: self.clone() });
        Ok(Tensor::from_op(vec![1], vec![acc], node))
    }

    pub fn mean(&self) -> Result<Tensor<E>> {
        self.check_usable("mean")?;
        let mut acc = E::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        let m = acc / E::from_f(self.numel() as f64);
        let node =
            (grad_enabled() && self.requires_grad_flag()).then(|| Op::Mean { x: self.clone() });
        Ok(Tensor::from_op(vec![1], vec![m], node))
    }
}

/// Row gather: out[t] = table[ids[t]].
pub fn embedding_lookup<E: Elem>(table: &Tensor<E>, ids: &[u32]) -> Result<Tensor<E>> {
    table.check_usable("embedding")?;
    let shape = table.shape();
    if shape.len() != 2 {
        return Err(Error::Shape {
            op: "embedding",
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let (v, d) = (shape[0], shape[1]);
    for &id in ids {
        if id as usize >= v {
            return Err(Error::Data(format!(
                "token id {id} out of range for vocab size {v}"
            )));
        }
    }
    let td = table.data();
    let mut data = vec![E::zero(); ids.len() * d];
    for (r, &id) in ids.iter().enumerate() {
        data[r * d..(r + 1) * d].copy_from_slice(&td[id as usize * d..(id as usize + 1) * d]);
    }
    drop(td);
    let node = (grad_enabled() && table.requires_grad_flag()).then(|| Op::Embedding {
        table: table.clone(),
        ids: ids.to_vec(),
    });
    Ok(Tensor::from_op(vec![ids.len(), d], data, node))
}

/// Mean over positions of cross-entropy against the label-smoothed target:
/// (1−ε) on the true token, ε/(V−1) on the rest.
pub fn cross_entropy_smoothed<E: Elem>(
    logits: &Tensor<E>,
    targets: &[u32],
    smoothing: f64,
) -> Result<Tensor<E>> {
    logits.check_usable("cross_entropy")?;
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape.to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!(
            "label smoothing must be in [0,1), got {smoothing}"
        )));
    }
    let (t, v) = (shape[0], shape[1]);
    for &y in targets {
        if y as usize >= v {
            return Err(Error::Data(format!(
                "target id {y} out of range for vocab size {v}"
            )));
        }
    }
    let xd = logits.data();
    let mut probs = vec![E::zero(); t * v];
    let mut total = 0.0f64;
    let on = 1.0 - smoothing;
    let off = if v > 1 { smoothing / (v as f64 - 1.0) } else { 0.0 };
    for r in 0..t {
        let base = r * v;
        let row = &xd[base..base + v];
        let mut maxv = row[0];
        for &x in row.iter() {
            if x > maxv {
                maxv = x;
            }
        }
        let mut denom = E::zero();
        for (j, &x) in row.iter().enumerate() {
            let e = (x - maxv).fexp();
            probs[base + j] = e;
            denom += e;
        }
        let lse = maxv.as_f64() + denom.as_f64().ln();
        for j in 0..v {
            probs[base + j] = probs[base + j] / denom;
        }
        let mut sum_x = 0.0f64;
        for &x in row.iter() {
            sum_x += x.as_f64();
        }
        let y = targets[r] as usize;
        let expect = on * row[y].as_f64() + off * (sum_x - row[y].as_f64());
        total += lse - expect;
    }
    drop(xd);
    let loss = E::from_f(total / t as f64);
    let node = (grad_enabled() && logits.requires_grad_flag()).then(|| Op::CrossEntropy {
        logits: logits.clone(),
        targets: targets.to_vec(),
        smoothing,
        probs,
    });
    Ok(Tensor::from_op(vec![1], vec![loss], node))
}

/// W_q = alpha · signs, recorded with the straight-through backward rule.
pub(crate) fn quantize_op<E: Elem>(
    w: &Tensor<E>,
    alpha: &Tensor<E>,
    signs: Rc<Vec<i8>>,
    ste_alpha: bool,
) -> Result<Tensor<E>> {
    w.check_usable("quantize")?;
    alpha.check_usable("quantize")?;
    debug_assert_eq!(signs.len(), w.numel());
    let a = alpha.data()[0];
    let data: Vec<E> = signs
        .iter()
        .map(|&s| match s {
            1 => a,
            -1 => -a,
            _ => E::zero(),
        })
        .collect();
    let node = (grad_enabled() && (w.requires_grad_flag() || alpha.requires_grad_flag())).then(
        || Op::Quantize {
            w: w.clone(),
            alpha: alpha.clone(),
            signs,
            ste_alpha,
        },
    );
    Ok(Tensor::from_op(w.shape().to_vec(), data, node))
}

/// Frozen-sign surrogate `alpha · (signs + (w − w_base))`. Bitwise equal to
/// `alpha · signs` at the capture point (w == w_base) while remaining
/// differentiable in w, so finite differences agree with the straight-through
/// backward that the shared Quantize node applies.
pub(crate) fn quantize_frozen_op<E: Elem>(
    w: &Tensor<E>,
    alpha: &Tensor<E>,
    signs: Rc<Vec<i8>>,
    w_base: &[E],
    ste_alpha: bool,
) -> Result<Tensor<E>> {
    w.check_usable("quantize")?;
    alpha.check_usable("quantize")?;
    debug_assert_eq!(signs.len(), w.numel());
    debug_assert_eq!(w_base.len(), w.numel());
    let a = alpha.data()[0];
    let wd = w.data();
    let data: Vec<E> = signs
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let sv = match s {
                1 => E::one(),
                -1 => -E::one(),
                _ => E::zero(),
            };
            a * (sv + (wd[i] - w_base[i]))
        })
        .collect();
    drop(wd);
    let node = (grad_enabled() && (w.requires_grad_flag() || alpha.requires_grad_flag())).then(
        || Op::Quantize {
            w: w.clone(),
            alpha: alpha.clone(),
            signs,
            ste_alpha,
        },
    );
    Ok(Tensor::from_op(w.shape().to_vec(), data, node))
}
