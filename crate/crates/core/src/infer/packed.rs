//! 2-bit packed ternary matrices: 4 weights per byte plus one scale.
//!
//! Code 00 → 0, 01 → +1, 10 → −1; 11 is invalid and rejected. Element `i` of
//! the row-major flattening occupies bits `2·(i mod 4)` (LSB-first) of byte
//! `i / 4`. Unused trailing slots in the final byte must be zero.

use crate::error::{Error, Result};
use crate::tensor::Elem;

#[derive(Debug, Clone, PartialEq)]
pub struct PackedTernaryMatrix {
    rows: usize,
    cols: usize,
    alpha: f32,
    codes: Vec<u8>,
}

pub const CODE_ZERO: u8 = 0b00;
pub const CODE_POS: u8 = 0b01;
pub const CODE_NEG: u8 = 0b10;

#[inline]
fn code_at(codes: &[u8], i: usize) -> u8 {
    (codes[i / 4] >> (2 * (i % 4))) & 0b11
}

impl PackedTernaryMatrix {
    /// Pack a row-major sign matrix with its per-layer scale.
    pub fn pack(signs: &[i8], rows: usize, cols: usize, alpha: f32) -> Result<Self> {
        if signs.len() != rows * cols {
            return Err(Error::Shape {
                op: "pack",
                lhs: vec![rows, cols],
                rhs: vec![signs.len()],
            });
        }
        let mut codes = vec![0u8; signs.len().div_ceil(4)];
        for (i, &s) in signs.iter().enumerate() {
            let code = match s {
                0 => CODE_ZERO,
                1 => CODE_POS,
                -1 => CODE_NEG,
                other => {
                    return Err(Error::NonTernary {
                        index: i,
                        value: other as f32,
                    })
                }
            };
            codes[i / 4] |= code << (2 * (i % 4));
        }
        Ok(PackedTernaryMatrix {
            rows,
            cols,
            alpha,
            codes,
        })
    }

    /// Reconstruct from raw parts (checkpoint loading); validates every code.
    pub fn from_parts(rows: usize, cols: usize, alpha: f32, codes: Vec<u8>) -> Result<Self> {
        let n = rows * cols;
        if codes.len() != n.div_ceil(4) {
            return Err(Error::Checkpoint(format!(
                "packed byte length {} does not match {}x{} matrix",
                codes.len(),
                rows,
                cols
            )));
        }
        for i in 0..n {
            if code_at(&codes, i) == 0b11 {
                return Err(Error::CorruptCode { index: i });
            }
        }
        // Trailing pad slots must stay canonical zero.
        for i in n..codes.len() * 4 {
            if code_at(&codes, i) != CODE_ZERO {
                return Err(Error::Checkpoint(
                    "nonzero padding in final packed byte".into(),
                ));
            }
        }
        Ok(PackedTernaryMatrix {
            rows,
            cols,
            alpha,
            codes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn alpha(&self) -> f32 {
        self.alpha
    }
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }
    pub fn byte_len(&self) -> usize {
        self.codes.len()
    }

    /// Expand back to a row-major sign matrix.
    pub fn unpack(&self) -> Result<Vec<i8>> {
        let n = self.rows * self.cols;
        let mut out = vec![0i8; n];
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = match code_at(&self.codes, i) {
                CODE_ZERO => 0,
                CODE_POS => 1,
                CODE_NEG => -1,
                _ => return Err(Error::CorruptCode { index: i }),
            };
        }
        Ok(out)
    }

    /// y[out,b] = alpha · S · x for x given as [in, b] column-major batches.
    /// The inner loop only adds or subtracts; the single multiply by alpha
    /// happens once per output element.
    pub fn matmul<E: Elem>(&self, x: &[E], b: usize) -> Result<Vec<E>> {
        if x.len() != self.cols * b {
            return Err(Error::Shape {
                op: "packed_matmul",
                lhs: vec![self.cols, b],
                rhs: vec![x.len()],
            });
        }
        let alpha = E::from_f(self.alpha as f64);
        let mut out = vec![E::zero(); self.rows * b];
        for o in 0..self.rows {
            for j in 0..b {
                let mut acc = E::zero();
                let base = o * self.cols;
                for k in 0..self.cols {
                    match code_at(&self.codes, base + k) {
                        CODE_ZERO => {}
                        CODE_POS => acc += x[k * b + j],
                        CODE_NEG => acc -= x[k * b + j],
                        _ => return Err(Error::CorruptCode { index: base + k }),
                    }
                }
                out[o * b + j] = acc * alpha;
            }
        }
        Ok(out)
    }

    /// y[s,out] for activations given as row-major [s, in]; the layout the
    /// model uses. Same accumulate-then-scale contract as `matmul`.
    pub fn linear<E: Elem>(&self, x: &[E], s: usize) -> Result<Vec<E>> {
        if x.len() != s * self.cols {
            return Err(Error::Shape {
                op: "packed_linear",
                lhs: vec![s, self.cols],
                rhs: vec![x.len()],
            });
        }
        let alpha = E::from_f(self.alpha as f64);
        let mut out = vec![E::zero(); s * self.rows];
        for t in 0..s {
            let x_row = &x[t * self.cols..(t + 1) * self.cols];
            for o in 0..self.rows {
                let mut acc = E::zero();
                let base = o * self.cols;
                for (k, &xv) in x_row.iter().enumerate() {
                    match code_at(&self.codes, base + k) {
                        CODE_ZERO => {}
                        CODE_POS => acc += xv,
                        CODE_NEG => acc -= xv,
                        _ => return Err(Error::CorruptCode { index: base + k }),
                    }
                }
                out[t * self.rows + o] = acc * alpha;
            }
        }
        Ok(out)
    }
}
