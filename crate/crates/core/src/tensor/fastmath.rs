//! Branchless single-precision exp/erf/tanh used by the f32 elementwise
//! kernels. Plain float arithmetic (no tables, no data-dependent branches),
//! so the loops autovectorize and results are reproducible. Accuracy is at
//! the f32 resolution limit (~2 ulp for exp, ~2e-7 absolute for erf/tanh);
//! the f64 paths keep libm and back the gradient-check oracles.

const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;
const LOG2_E: f32 = std::f32::consts::LOG2_E;

/// exp(x) for finite f32, clamped to the representable range.
#[inline]
pub fn exp32(x: f32) -> f32 {
    let x = x.clamp(-87.336_54, 88.722_84);
    let n = (x * LOG2_E).round();
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // degree-6 minimax polynomial for exp(r) on |r| ≤ ln2/2
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_57
                    + r * (0.041_666_83 + r * (0.008_333_59 + r * 0.001_394_060_5)))));
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// erf(x): Abramowitz–Stegun 7.1.26 rational form, odd-extended.
#[inline]
pub fn erf32(x: f32) -> f32 {
    const A1: f32 = 0.254_829_6;
    const A2: f32 = -0.284_496_74;
    const A3: f32 = 1.421_413_7;
    const A4: f32 = -1.453_152_1;
    const A5: f32 = 1.061_405_4;
    const P: f32 = 0.327_591_1;
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let ax = x.abs();
    let t = 1.0 / (1.0 + P * ax);
    let poly = t * (A1 + t * (A2 + t * (A3 + t * (A4 + t * A5))));
    let y = 1.0 - poly * exp32(-ax * ax);
    sign * y
}

/// tanh(x) = 1 − 2/(exp(2x) + 1).
#[inline]
pub fn tanh32(x: f32) -> f32 {
    let e = exp32(2.0 * x.clamp(-20.0, 20.0));
    1.0 - 2.0 / (e + 1.0)
}
