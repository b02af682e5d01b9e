//! Recorded operations and their backward rules.

use std::rc::Rc;

use super::kernels;
use super::{Elem, Tensor};

/// Softmax masking over the trailing two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Position (row, col) is masked when col > row.
    Causal,
    /// Explicit row-major mask over the trailing [rows, cols]; `true` = keep.
    Explicit(Vec<bool>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Silu,
    Gelu,
    Tanh,
    Exp,
    Log,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
}

/// How the rhs operand of a binary op was broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bcast {
    None,
    ScalarRhs,
    LastAxisRhs,
}

pub(super) enum Op<E: Elem> {
    /// C = A[m,k] · B[k,n]
    MatMul { a: Tensor<E>, b: Tensor<E> },
    /// y = x[s,in] · wᵀ, w is [out,in]
    Linear { x: Tensor<E>, w: Tensor<E> },
    /// Batched [h,m,k]·[h,k,n]
    BmmNN { a: Tensor<E>, b: Tensor<E> },
    /// Batched [h,m,k]·[h,n,k]ᵀ
    BmmNT { a: Tensor<E>, b: Tensor<E> },
    Unary { x: Tensor<E>, kind: UnaryKind },
    Binary {
        a: Tensor<E>,
        b: Tensor<E>,
        kind: BinKind,
        bcast: Bcast,
    },
    Scale { x: Tensor<E>, c: E },
    Softmax {
        x: Tensor<E>,
        rows: usize,
        cols: usize,
    },
    Rope {
        x: Tensor<E>,
        theta: f64,
        positions: Vec<usize>,
        head_dim: usize,
    },
    RmsNorm {
        x: Tensor<E>,
        gain: Tensor<E>,
        inv_rms: Vec<E>,
    },
    LayerNorm {
        x: Tensor<E>,
        gain: Tensor<E>,
        mean: Vec<E>,
        inv_std: Vec<E>,
    },
    Embedding { table: Tensor<E>, ids: Vec<u32> },
    CrossEntropy {
        logits: Tensor<E>,
        targets: Vec<u32>,
        smoothing: f64,
        probs: Vec<E>,
    },
    /// W_q = alpha · signs with straight-through gradient to the latent w.
    Quantize {
        w: Tensor<E>,
        alpha: Tensor<E>,
        signs: Rc<Vec<i8>>,
        ste_alpha: bool,
    },
    Sum { x: Tensor<E> },
    Mean { x: Tensor<E> },
    /// [b·h, s, hd] view of [b·s, h·hd]
    SplitHeads {
        x: Tensor<E>,
        heads: usize,
        batch: usize,
    },
    /// [b·s, h·hd] view of [b·h, s, hd]
    MergeHeads { x: Tensor<E>, batch: usize },
    /// Single row of a [s,d] matrix.
    SelectRow { x: Tensor<E>, row: usize },
    /// Same data, different shape.
    Reshape { x: Tensor<E> },
}

impl<E: Elem> Op<E> {
    pub(super) fn tag(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Linear { .. } => "linear",
            Op::BmmNN { .. } => "bmm_nn",
            Op::BmmNT { .. } => "bmm_nt",
            Op::Unary { .. } => "unary",
            Op::Binary { .. } => "binary",
            Op::Scale { .. } => "scale",
            Op::Softmax { .. } => "softmax",
            Op::Rope { .. } => "rope",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::LayerNorm { .. } => "layernorm",
            Op::Embedding { .. } => "embedding",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Quantize { .. } => "quantize",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::SelectRow { .. } => "select_row",
            Op::Reshape { .. } => "reshape",
        }
    }

    pub(super) fn parents(&self) -> Vec<Tensor<E>> {
        match self {
            Op::MatMul { a, b }
            | Op::BmmNN { a, b }
            | Op::BmmNT { a, b }
            | Op::Binary { a, b, .. } => vec![a.clone(), b.clone()],
            Op::Linear { x, w } => vec![x.clone(), w.clone()],
            Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::Softmax { x, .. }
            | Op::Rope { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x, .. }
            | Op::SelectRow { x, .. }
            | Op::Reshape { x } => vec![x.clone()],
            Op::RmsNorm { x, gain, .. } | Op::LayerNorm { x, gain, .. } => {
                vec![x.clone(), gain.clone()]
            }
            Op::Embedding { table, .. } => vec![table.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::Quantize { w, alpha, .. } => vec![w.clone(), alpha.clone()],
        }
    }

    /// Accumulate parent gradients given this node's output value and the
    /// upstream gradient.
    pub(super) fn backward(&self, out_val: &[E], upstream: &[E]) {
        match self {
            Op::MatMul { a, b } => {
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if a.requires_grad_flag() {
                    let mut da = vec![E::zero(); m * k];
                    kernels::gemm_nt(upstream, &b.data(), &mut da, m, n, k);
                    a.accumulate_grad(&da);
                }
                if b.requires_grad_flag() {
                    let mut db = vec![E::zero(); k * n];
                    kernels::gemm_tn(&a.data(), upstream, &mut db, k, m, n);
                    b.accumulate_grad(&db);
                }
            }
            Op::Linear { x, w } => {
                let (s, k) = (x.shape()[0], x.shape()[1]);
                let out = w.shape()[0];
                if x.requires_grad_flag() {
                    let mut dx = vec![E::zero(); s * k];
                    kernels::gemm_nn(upstream, &w.data(), &mut dx, s, out, k);
                    x.accumulate_grad(&dx);
                }
                if w.requires_grad_flag() {
                    let mut dw = vec![E::zero(); out * k];
                    kernels::gemm_tn(upstream, &x.data(), &mut dw, out, s, k);
                    w.accumulate_grad(&dw);
                }
            }
            Op::BmmNN { a, b } => {
                let (h, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[2];
                if a.requires_grad_flag() {
                    let bd = b.data();
                    let mut da = vec![E::zero(); h * m * k];
                    for hi in 0..h {
                        kernels::gemm_nt(
                            &upstream[hi * m * n..(hi + 1) * m * n],
                            &bd[hi * k * n..(hi + 1) * k * n],
                            &mut da[hi * m * k..(hi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad_flag() {
                    let ad = a.data();
                    let mut db = vec![E::zero(); h * k * n];
                    for hi in 0..h {
                        kernels::gemm_tn(
                            &ad[hi * m * k..(hi + 1) * m * k],
                            &upstream[hi * m * n..(hi + 1) * m * n],
                            &mut db[hi * k * n..(hi + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::BmmNT { a, b } => {
                // out[h,m,n] = A[h,m,k] · B[h,n,k]ᵀ
                let (h, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let n = b.shape()[1];
                if a.requires_grad_flag() {
                    let bd = b.data();
                    let mut da = vec![E::zero(); h * m * k];
                    for hi in 0..h {
                        kernels::gemm_nn(
                            &upstream[hi * m * n..(hi + 1) * m * n],
                            &bd[hi * n * k..(hi + 1) * n * k],
                            &mut da[hi * m * k..(hi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad_flag() {
                    let ad = a.data();
                    let mut db = vec![E::zero(); h * n * k];
                    for hi in 0..h {
                        kernels::gemm_tn(
                            &upstream[hi * m * n..(hi + 1) * m * n],
                            &ad[hi * m * k..(hi + 1) * m * k],
                            &mut db[hi * n * k..(hi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::Unary { x, kind } => {
                if !x.requires_grad_flag() {
                    return;
                }
                let xd = x.data();
                let dx: Vec<E> = match kind {
                    UnaryKind::Silu => kernels::par_zip_map(upstream, &xd, |u, xi| {
                        let sig = E::one() / (E::one() + (-xi).fexp());
                        u * (sig + xi * sig * (E::one() - sig))
                    }),
                    UnaryKind::Gelu => {
                        let half = E::from_f(0.5);
                        let inv_sqrt2 = E::from_f(std::f64::consts::FRAC_1_SQRT_2);
                        let inv_sqrt_2pi = E::from_f(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                        kernels::par_zip_map(upstream, &xd, move |u, xi| {
                            let cdf = half * (E::one() + (xi * inv_sqrt2).ferf());
                            let pdf = inv_sqrt_2pi * (-(xi * xi) * half).fexp();
                            u * (cdf + xi * pdf)
                        })
                    }
                    UnaryKind::Tanh => kernels::par_zip_map(upstream, out_val, |u, o| {
                        u * (E::one() - o * o)
                    }),
                    UnaryKind::Exp => kernels::par_zip_map(upstream, out_val, |u, o| u * o),
                    UnaryKind::Log => kernels::par_zip_map(upstream, &xd, |u, xi| u / xi),
                    UnaryKind::Neg => upstream.iter().map(|&u| -u).collect(),
                };
                drop(xd);
                x.accumulate_grad(&dx);
            }
            Op::Binary { a, b, kind, bcast } => {
                let n = upstream.len();
                if a.requires_grad_flag() {
                    let mut da = vec![E::zero(); n];
                    match kind {
                        BinKind::Add | BinKind::Sub => da.copy_from_slice(upstream),
                        BinKind::Mul => {
                            let bd = b.data();
                            match bcast {
                                Bcast::None => {
                                    for i in 0..n {
                                        da[i] = upstream[i] * bd[i];
                                    }
                                }
                                Bcast::ScalarRhs => {
                                    let c = bd[0];
                                    for i in 0..n {
                                        da[i] = upstream[i] * c;
                                    }
                                }
                                Bcast::LastAxisRhs => {
                                    let w = bd.len();
                                    for i in 0..n {
                                        da[i] = upstream[i] * bd[i % w];
                                    }
                                }
                            }
                        }
                    }
                    a.accumulate_grad(&da);
                }
                if b.requires_grad_flag() {
                    let bn = b.numel();
                    let mut db = vec![E::zero(); bn];
                    let fill = |db: &mut [E], term: &dyn Fn(usize) -> E| match bcast {
                        Bcast::None => {
                            for (i, slot) in db.iter_mut().enumerate() {
                                *slot += term(i);
                            }
                        }
                        Bcast::ScalarRhs => {
                            let mut acc = E::zero();
                            for i in 0..n {
                                acc += term(i);
                            }
                            db[0] = acc;
                        }
                        Bcast::LastAxisRhs => {
                            let w = db.len();
                            for i in 0..n {
                                db[i % w] += term(i);
                            }
                        }
                    };
                    match kind {
                        BinKind::Add => fill(&mut db, &|i| upstream[i]),
                        BinKind::Sub => fill(&mut db, &|i| -upstream[i]),
                        BinKind::Mul => {
                            let ad = a.data();
                            fill(&mut db, &|i| upstream[i] * ad[i]);
                        }
                    }
                    b.accumulate_grad(&db);
                }
            }
            Op::Scale { x, c } => {
                if x.requires_grad_flag() {
                    let dx: Vec<E> = upstream.iter().map(|&u| u * *c).collect();
                    x.accumulate_grad(&dx);
                }
            }
            Op::Softmax { x, rows, cols } => {
                if !x.requires_grad_flag() {
                    return;
                }
                let _ = rows;
                // dx = p ⊙ (u − Σ u·p) per row; masked entries have p = 0.
                let mut dx = vec![E::zero(); upstream.len()];
                kernels::par_rows(&mut dx, *cols, |r, dx_row| {
                    let base = r * cols;
                    let p = &out_val[base..base + cols];
                    let u = &upstream[base..base + cols];
                    let mut dot = E::zero();
                    for j in 0..*cols {
                        dot += u[j] * p[j];
                    }
                    for j in 0..*cols {
                        dx_row[j] = p[j] * (u[j] - dot);
                    }
                });
                x.accumulate_grad(&dx);
            }
            Op::Rope {
                x,
                theta,
                positions,
                head_dim,
            } => {
                if !x.requires_grad_flag() {
                    return;
                }
                // Backward of a rotation is the rotation by the opposite angle.
                let mut dx = vec![E::zero(); upstream.len()];
                rope_rotate(upstream, &mut dx, positions, *theta, *head_dim, true);
                x.accumulate_grad(&dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xd = x.data();
                let gd = gain.data();
                let d = gd.len();
                let rows = xd.len() / d;
                let mut dx = vec![E::zero(); xd.len()];
                let mut dg = vec![E::zero(); d];
                let dim = E::from_f(d as f64);
                for r in 0..rows {
                    let base = r * d;
                    let rs = inv_rms[r];
                    let mut dot = E::zero();
                    for j in 0..d {
                        dot += upstream[base + j] * gd[j] * xd[base + j];
                    }
                    let coeff = rs * rs * rs * dot / dim;
                    for j in 0..d {
                        dx[base + j] = upstream[base + j] * gd[j] * rs - xd[base + j] * coeff;
                        dg[j] += upstream[base + j] * xd[base + j] * rs;
                    }
                }
                drop(xd);
                drop(gd);
                if x.requires_grad_flag() {
                    x.accumulate_grad(&dx);
                }
                if gain.requires_grad_flag() {
                    gain.accumulate_grad(&dg);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                mean,
                inv_std,
            } => {
                let xd = x.data();
                let gd = gain.data();
                let d = gd.len();
                let rows = xd.len() / d;
                let mut dx = vec![E::zero(); xd.len()];
                let mut dg = vec![E::zero(); d];
                let dim = E::from_f(d as f64);
                for r in 0..rows {
                    let base = r * d;
                    let (mu, rs) = (mean[r], inv_std[r]);
                    let mut mean_w = E::zero();
                    let mut mean_wx = E::zero();
                    for j in 0..d {
                        let xh = (xd[base + j] - mu) * rs;
                        let w = upstream[base + j] * gd[j];
                        mean_w += w;
                        mean_wx += w * xh;
                        dg[j] += upstream[base + j] * xh;
                    }
                    mean_w /= dim;
                    mean_wx /= dim;
                    for j in 0..d {
                        let xh = (xd[base + j] - mu) * rs;
                        let w = upstream[base + j] * gd[j];
                        dx[base + j] = rs * (w - mean_w - xh * mean_wx);
                    }
                }
                drop(xd);
                drop(gd);
                if x.requires_grad_flag() {
                    x.accumulate_grad(&dx);
                }
                if gain.requires_grad_flag() {
                    gain.accumulate_grad(&dg);
                }
            }
            Op::Embedding { table, ids } => {
                if !table.requires_grad_flag() {
                    return;
                }
                let d = table.shape()[1];
                let mut dt = vec![E::zero(); table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &upstream[r * d..(r + 1) * d];
                    let dst = &mut dt[id as usize * d..(id as usize + 1) * d];
                    for (o, &u) in dst.iter_mut().zip(src.iter()) {
                        *o += u;
                    }
                }
                table.accumulate_grad(&dt);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                if !logits.requires_grad_flag() {
                    return;
                }
                let v = logits.shape()[1];
                let t = targets.len();
                let up = upstream[0];
                let on = E::from_f(1.0 - smoothing);
                let off = E::from_f(smoothing / (v as f64 - 1.0));
                let inv_t = E::from_f(1.0 / t as f64);
                let mut dl = vec![E::zero(); logits.numel()];
                for (r, &y) in targets.iter().enumerate() {
                    let base = r * v;
                    for j in 0..v {
                        let q = if j == y as usize { on } else { off };
                        dl[base + j] = up * inv_t * (probs[base + j] - q);
                    }
                }
                logits.accumulate_grad(&dl);
            }
            Op::Quantize {
                w,
                alpha,
                signs,
                ste_alpha,
            } => {
                if w.requires_grad_flag() {
                    let dw: Vec<E> = if *ste_alpha {
                        let a = alpha.data()[0];
                        upstream.iter().map(|&u| u * a).collect()
                    } else {
                        upstream.to_vec()
                    };
                    w.accumulate_grad(&dw);
                }
                if alpha.requires_grad_flag() {
                    let mut acc = E::zero();
                    for (&u, &s) in upstream.iter().zip(signs.iter()) {
                        acc += u * E::from_f(s as f64);
                    }
                    alpha.accumulate_grad(&[acc]);
                }
            }
            Op::Sum { x } => {
                if x.requires_grad_flag() {
                    let dx = vec![upstream[0]; x.numel()];
                    x.accumulate_grad(&dx);
                }
            }
            Op::Mean { x } => {
                if x.requires_grad_flag() {
                    let c = upstream[0] / E::from_f(x.numel() as f64);
                    let dx = vec![c; x.numel()];
                    x.accumulate_grad(&dx);
                }
            }
            Op::SplitHeads { x, heads, batch } => {
                if !x.requires_grad_flag() {
                    return;
                }
                let d = x.shape()[1];
                let s = x.shape()[0] / batch;
                let hd = d / heads;
                let mut dx = vec![E::zero(); x.numel()];
                split_heads_map(upstream, &mut dx, *batch, *heads, s, hd, true);
                x.accumulate_grad(&dx);
            }
            Op::MergeHeads { x, batch } => {
                if !x.requires_grad_flag() {
                    return;
                }
                let (bh, s, hd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let heads = bh / batch;
                let mut dx = vec![E::zero(); x.numel()];
                split_heads_map(upstream, &mut dx, *batch, heads, s, hd, false);
                x.accumulate_grad(&dx);
            }
            Op::SelectRow { x, row } => {
                if !x.requires_grad_flag() {
                    return;
                }
                let d = x.shape()[1];
                let mut dx = vec![E::zero(); x.numel()];
                dx[row * d..(row + 1) * d].copy_from_slice(upstream);
                x.accumulate_grad(&dx);
            }
            Op::Reshape { x } => {
                if x.requires_grad_flag() {
                    x.accumulate_grad(upstream);
                }
            }
        }
    }
}

/// Data movement between [b·s, h·hd] (row-major tokens) and [b·h, s, hd]
/// (head-batched) layouts. `to_rows` = true maps head-batched → rows.
pub(super) fn split_heads_map<E: Elem>(
    src: &[E],
    dst: &mut [E],
    batch: usize,
    heads: usize,
    s: usize,
    hd: usize,
    to_rows: bool,
) {
    let d = heads * hd;
    for b in 0..batch {
        for h in 0..heads {
            for t in 0..s {
                let row_off = (b * s + t) * d + h * hd;
                let head_off = ((b * heads + h) * s + t) * hd;
                if to_rows {
                    for j in 0..hd {
                        dst[row_off + j] += src[head_off + j];
                    }
                } else {
                    for j in 0..hd {
                        dst[head_off + j] += src[row_off + j];
                    }
                }
            }
        }
    }
}

/// Rotate consecutive pairs of the trailing dimension by pos·theta^(−2i/head_dim).
/// `inverse` rotates by the opposite angle (used by the backward pass).
pub(super) fn rope_rotate<E: Elem>(
    input: &[E],
    out: &mut [E],
    positions: &[usize],
    theta: f64,
    head_dim: usize,
    inverse: bool,
) {
    let seq = positions.len();
    let heads = input.len() / (seq * head_dim);
    let half = head_dim / 2;
    // Angles depend only on (position, pair); precompute once per call.
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut cos_sin = vec![(0.0f64, 0.0f64); seq * half];
    for (t, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let mut angle = pos as f64 * inv_freq[i];
            if inverse {
                angle = -angle;
            }
            cos_sin[t * half + i] = (angle.cos(), angle.sin());
        }
    }
    for h in 0..heads {
        for t in 0..seq {
            let base = (h * seq + t) * head_dim;
            for i in 0..half {
                let (c, s) = cos_sin[t * half + i];
                let (c, s) = (E::from_f(c), E::from_f(s));
                let x0 = input[base + 2 * i];
                let x1 = input[base + 2 * i + 1];
                out[base + 2 * i] = x0 * c - x1 * s;
                out[base + 2 * i + 1] = x0 * s + x1 * c;
            }
        }
    }
}
