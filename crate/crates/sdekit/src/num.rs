//! Scalar abstraction and the special functions used by the statistical layers.
//!
//! Everything numeric in this crate is generic over [`Scalar`], which is any
//! real floating-point type that nalgebra can put in a matrix and num-traits
//! can convert constants into. The crate root exports `f64` aliases for the
//! common types; `f32` works everywhere but is only appropriate for short
//! trajectories, since the estimators accumulate long sums.

use num_traits::{FromPrimitive, NumAssign, ToPrimitive};
use serde::{de::DeserializeOwned, Serialize};

/// Real scalar type usable throughout the crate.
///
/// The supertraits pull in arithmetic, elementary functions (through
/// `nalgebra::RealField`), primitive conversions, and serde support. `f32`
/// and `f64` implement it; nothing here assumes IEEE semantics beyond
/// finiteness checks.
pub trait Scalar:
    nalgebra::RealField
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Copy
    + Default
    + Serialize
    + DeserializeOwned
{
    /// Converts an `f64` constant into `Self`. Exact for `f64`, rounded for
    /// `f32`. Panics on values unrepresentable even after rounding, which no
    /// literal in this crate triggers.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    /// Lossy widening back to `f64`, used for formatting and oracle checks.
    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }

    /// True for NaN and infinities. Divergence detection in the simulators.
    #[inline]
    fn not_finite(self) -> bool {
        !self.is_finite()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Error function, error ≤ a few ulps of `f64` across the whole line.
///
/// Rational approximations in three ranges (|x| ≤ 0.46875, the mid range, and
/// the tail), with the tail computed through `erfc` to avoid cancellation.
pub fn erf<T: Scalar>(x: T) -> T {
    T::of(erf_f64(x.f64()))
}

/// Complementary error function, accurate in the far tail where `1 - erf`
/// would lose all digits. Underflows to zero past x ≈ 26.5 in `f64`.
pub fn erfc<T: Scalar>(x: T) -> T {
    T::of(erfc_f64(x.f64()))
}

/// CDF of the chi-squared distribution with one degree of freedom.
pub fn chi2_1_cdf<T: Scalar>(x: T) -> T {
    if x <= T::zero() {
        return T::zero();
    }
    T::of(erf_f64((x.f64() / 2.0).sqrt()))
}

const THRESH: f64 = 0.46875;
const INV_SQRT_PI: f64 = 5.641_895_835_477_562_9e-1;

const A: [f64; 5] = [
    3.161_123_743_870_565_6e0,
    1.138_641_541_510_501_6e2,
    3.774_852_376_853_020_2e2,
    3.209_377_589_138_469_5e3,
    1.857_777_061_846_031_5e-1,
];
const B: [f64; 4] = [
    2.360_129_095_234_412_1e1,
    2.440_246_379_344_441_7e2,
    1.282_616_526_077_372_3e3,
    2.844_236_833_439_170_6e3,
];
const C: [f64; 9] = [
    5.641_884_969_886_700_9e-1,
    8.883_149_794_388_375_9e0,
    6.611_919_063_714_163_0e1,
    2.986_351_381_974_001_3e2,
    8.819_522_212_417_690_9e2,
    1.712_047_612_634_070_6e3,
    2.051_078_377_826_071_5e3,
    1.230_339_354_797_997_2e3,
    2.153_115_354_744_038_5e-8,
];
const D: [f64; 8] = [
    1.574_492_611_070_983_5e1,
    1.176_939_508_913_125_0e2,
    5.371_811_018_620_098_6e2,
    1.621_389_574_566_690_2e3,
    3.290_799_235_733_459_6e3,
    4.362_619_090_143_247_2e3,
    3.439_367_674_143_721_6e3,
    1.230_339_354_803_749_4e3,
];
const P: [f64; 6] = [
    3.053_266_349_612_323_4e-1,
    3.603_448_999_498_044_4e-1,
    1.257_817_261_112_292_5e-1,
    1.608_378_514_874_227_7e-2,
    6.587_491_615_298_378_0e-4,
    1.631_538_713_730_209_8e-2,
];
const Q: [f64; 5] = [
    2.568_520_192_289_822_4e0,
    1.872_952_849_923_460_5e0,
    5.279_051_029_514_284_1e-1,
    6.051_834_131_244_131_9e-2,
    2.335_204_976_268_691_8e-3,
];

fn erf_f64(x: f64) -> f64 {
    let y = x.abs();
    if y <= THRESH {
        let z = if y > f64::EPSILON { y * y } else { 0.0 };
        let mut num = A[4] * z;
        let mut den = z;
        for i in 0..3 {
            num = (num + A[i]) * z;
            den = (den + B[i]) * z;
        }
        return x * (num + A[3]) / (den + B[3]);
    }
    let e = erfc_mid_tail(y);
    if x < 0.0 {
        e - 1.0
    } else {
        1.0 - e
    }
}

fn erfc_f64(x: f64) -> f64 {
    let y = x.abs();
    let e = if y <= THRESH {
        return 1.0 - erf_f64(x);
    } else {
        erfc_mid_tail(y)
    };
    if x < 0.0 {
        2.0 - e
    } else {
        e
    }
}

/// erfc(y) for y > 0.46875.
fn erfc_mid_tail(y: f64) -> f64 {
    let raw = if y <= 4.0 {
        let mut num = C[8] * y;
        let mut den = y;
        for i in 0..7 {
            num = (num + C[i]) * y;
            den = (den + D[i]) * y;
        }
        (num + C[7]) / (den + D[7])
    } else {
        if y >= 26.6 {
            return 0.0;
        }
        let z = 1.0 / (y * y);
        let mut num = P[5] * z;
        let mut den = z;
        for i in 0..4 {
            num = (num + P[i]) * z;
            den = (den + Q[i]) * z;
        }
        let r = z * (num + P[4]) / (den + Q[4]);
        (INV_SQRT_PI - r) / y
    };
    // exp(-y^2) split so the squared truncation stays exactly representable.
    let ysq = (y * 16.0).trunc() / 16.0;
    let del = (y - ysq) * (y + ysq);
    (-ysq * ysq).exp() * (-del).exp() * raw
}
