use core::fmt::{Debug, Display};
use core::iter::Sum;

use num_traits::Float;

/// Element type for all tensors: `f64` by default, `f32` selectable.
///
/// Double precision is the default because the gradient-check and
/// Kronecker-identity tolerances (1e-10..1e-12) have no headroom in single.
pub trait Scalar:
    Float + Sum + Debug + Display + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Canonical little-endian byte image, used for checksums.
    fn to_le_byte_vec(self) -> alloc::vec::Vec<u8>;
    /// tanh accurate to ~1e-14 absolute; the activation hot loop calls this
    /// a few million times per step, so a polynomial path beats libm's.
    fn fast_tanh(self) -> Self;
    const DTYPE_CODE: u32;
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn to_le_byte_vec(self) -> alloc::vec::Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    #[inline]
    fn fast_tanh(self) -> Self {
        fast_tanh_f64(self)
    }
    const DTYPE_CODE: u32 = 0;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn to_le_byte_vec(self) -> alloc::vec::Vec<u8> {
        self.to_le_bytes().to_vec()
    }
    #[inline]
    fn fast_tanh(self) -> Self {
        fast_tanh_f64(self as f64) as f32
    }
    const DTYPE_CODE: u32 = 1;
}

const LOG2_E: f64 = core::f64::consts::LOG2_E;
// ln(2) split hi/lo so `x - n*ln2` stays exact through the hi part.
const LN2_HI: f64 = 0.693_147_180_369_123_816_490e0;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;

/// expm1 for x >= 0: argument reduction x = n*ln2 + r with |r| <= ln2/2,
/// then a degree-11 Taylor tail q = e^r - 1 (truncation < 1e-14).
#[inline]
fn expm1_pos(x: f64) -> f64 {
    // round-to-nearest for non-negative x without a libm call
    let ni = (x * LOG2_E + 0.5) as i64;
    let n = ni as f64;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut q = 1.0 / 39_916_800.0; // 1/11!
    q = q * r + 1.0 / 3_628_800.0;
    q = q * r + 1.0 / 362_880.0;
    q = q * r + 1.0 / 40_320.0;
    q = q * r + 1.0 / 5_040.0;
    q = q * r + 1.0 / 720.0;
    q = q * r + 1.0 / 120.0;
    q = q * r + 1.0 / 24.0;
    q = q * r + 1.0 / 6.0;
    q = q * r + 0.5;
    q = q * r * r + r; // q = e^r - 1
    // 2^n via exponent bits; n = 0 reduces to q since pow2 == 1
    let pow2 = f64::from_bits(((ni + 1023) as u64) << 52);
    pow2 * q + (pow2 - 1.0)
}

/// tanh(x) = t / (t + 2) with t = expm1(2|x|); exact ±1 beyond saturation.
#[inline]
pub(crate) fn fast_tanh_f64(x: f64) -> f64 {
    let ax = x.abs();
    if !(ax <= 20.0) {
        // saturated, NaN, or infinite
        if ax.is_nan() {
            return x;
        }
        return if x.is_sign_positive() { 1.0 } else { -1.0 };
    }
    let t = expm1_pos(2.0 * ax);
    let y = t / (t + 2.0);
    if x.is_sign_positive() {
        y
    } else {
        -y
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_tanh_matches_libm() {
        let mut worst = 0.0f64;
        let mut x = -25.0;
        while x <= 25.0 {
            let d = (fast_tanh_f64(x) - x.tanh()).abs();
            if d > worst {
                worst = d;
            }
            x += 1.0 / 1024.0;
        }
        assert!(worst < 1e-13, "worst abs err {worst}");
    }

    #[test]
    fn fast_tanh_edge_cases() {
        assert_eq!(fast_tanh_f64(0.0), 0.0);
        assert_eq!(fast_tanh_f64(1e3), 1.0);
        assert_eq!(fast_tanh_f64(-1e3), -1.0);
        assert_eq!(fast_tanh_f64(f64::INFINITY), 1.0);
        assert_eq!(fast_tanh_f64(f64::NEG_INFINITY), -1.0);
        assert!(fast_tanh_f64(f64::NAN).is_nan());
        // odd symmetry
        for &x in &[0.3, 1.7, 5.5, 19.0] {
            assert_eq!(fast_tanh_f64(-x), -fast_tanh_f64(x));
        }
        // tiny arguments keep full relative precision via the expm1 form
        let x = 1e-9;
        assert!((fast_tanh_f64(x) - x).abs() < 1e-24);
    }
}
