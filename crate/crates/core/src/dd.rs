//! Double-double scalar: an unevaluated sum `hi + lo` of two `f64`s giving
//! roughly 106 bits of significand.
//!
//! Used as the reference precision for finite-difference gradient checks,
//! where `f64` roundoff in the loss swamps the difference quotient of
//! coordinates whose gradient is near zero. `exp`, `ln`, `sqrt` and `tanh`
//! are accurate to full double-double precision; the remaining `Float`
//! methods (trigonometry and friends) are evaluated at `f64` precision.

use std::cmp::Ordering;
use std::fmt;
use std::iter::Sum;
use std::num::FpCategory;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Float, FromPrimitive, Num, NumCast, One, ToPrimitive, Zero};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const fn new(hi: f64, lo: f64) -> Self {
        Dd { hi, lo }
    }

    /// Exact conversion.
    pub const fn f(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    fn norm(hi: f64, lo: f64) -> Self {
        if !hi.is_finite() {
            return Dd { hi, lo: 0.0 };
        }
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    /// Multiply by `2^k` exactly.
    fn ldexp(self, k: i32) -> Self {
        let half = 2f64.powi(k / 2);
        let rest = 2f64.powi(k - k / 2);
        Dd {
            hi: self.hi * half * rest,
            lo: self.lo * half * rest,
        }
    }

    fn from_f64_fn(self, f: impl Fn(f64) -> f64) -> Self {
        Dd::f(f(self.hi))
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::f(x)
    }
}

impl fmt::Display for Dd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.hi, f)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&other.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&other.lo),
            o => Some(o),
        }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, y: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, y.hi);
        if !s.is_finite() {
            return Dd::f(s);
        }
        let (t, f) = two_sum(self.lo, y.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, y: Dd) -> Dd {
        self + (-y)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, y: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, y.hi);
        if !p.is_finite() {
            return Dd::f(p);
        }
        Dd::norm(p, e + (self.hi * y.lo + self.lo * y.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, y: Dd) -> Dd {
        let q1 = self.hi / y.hi;
        if !q1.is_finite() || q1 == 0.0 && self.hi == 0.0 {
            return Dd::f(q1);
        }
        let r = self - y * Dd::f(q1);
        let q2 = r.hi / y.hi;
        let r = r - y * Dd::f(q2);
        let q3 = r.hi / y.hi;
        let (a, b) = quick_two_sum(q1, q2);
        Dd::new(a, b) + Dd::f(q3)
    }
}

impl Rem for Dd {
    type Output = Dd;
    fn rem(self, y: Dd) -> Dd {
        self - (self / y).trunc() * y
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl $tr for Dd {
            fn $m(&mut self, y: Dd) {
                *self = *self $op y;
            }
        }
    )*};
}

assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::zero(), |a, b| a + b)
    }
}

impl Zero for Dd {
    fn zero() -> Self {
        Dd::f(0.0)
    }
    fn is_zero(&self) -> bool {
        self.hi == 0.0
    }
}

impl One for Dd {
    fn one() -> Self {
        Dd::f(1.0)
    }
}

impl Num for Dd {
    type FromStrRadixErr = <f64 as Num>::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        f64::from_str_radix(s, radix).map(Dd::f)
    }
}

impl ToPrimitive for Dd {
    fn to_i64(&self) -> Option<i64> {
        self.trunc().hi.to_i64()
    }
    fn to_u64(&self) -> Option<u64> {
        self.trunc().hi.to_u64()
    }
    fn to_f64(&self) -> Option<f64> {
        Some(self.hi + self.lo)
    }
}

impl FromPrimitive for Dd {
    fn from_i64(n: i64) -> Option<Self> {
        let hi = n as f64;
        // the low part recovers integers beyond 2^53
        let lo = (n as i128 - hi as i128) as f64;
        Some(Dd::norm(hi, lo))
    }
    fn from_u64(n: u64) -> Option<Self> {
        let hi = n as f64;
        let lo = (n as i128 - hi as i128) as f64;
        Some(Dd::norm(hi, lo))
    }
    fn from_f64(x: f64) -> Option<Self> {
        Some(Dd::f(x))
    }
}

impl NumCast for Dd {
    fn from<N: ToPrimitive>(n: N) -> Option<Self> {
        n.to_f64().map(Dd::f)
    }
}

impl Float for Dd {
    fn nan() -> Self {
        Dd::f(f64::NAN)
    }
    fn infinity() -> Self {
        Dd::f(f64::INFINITY)
    }
    fn neg_infinity() -> Self {
        Dd::f(f64::NEG_INFINITY)
    }
    fn neg_zero() -> Self {
        Dd::f(-0.0)
    }
    fn min_value() -> Self {
        Dd::f(f64::MIN)
    }
    fn min_positive_value() -> Self {
        Dd::f(f64::MIN_POSITIVE)
    }
    fn epsilon() -> Self {
        Dd::f(2f64.powi(-104))
    }
    fn max_value() -> Self {
        Dd::f(f64::MAX)
    }
    fn is_nan(self) -> bool {
        self.hi.is_nan()
    }
    fn is_infinite(self) -> bool {
        self.hi.is_infinite()
    }
    fn is_finite(self) -> bool {
        self.hi.is_finite()
    }
    fn is_normal(self) -> bool {
        self.hi.is_normal()
    }
    fn classify(self) -> FpCategory {
        self.hi.classify()
    }
    fn floor(self) -> Self {
        let hi = self.hi.floor();
        if hi == self.hi {
            Dd::norm(hi, self.lo.floor())
        } else {
            Dd::f(hi)
        }
    }
    fn ceil(self) -> Self {
        -(-self).floor()
    }
    fn round(self) -> Self {
        if self.hi >= 0.0 {
            (self + Dd::f(0.5)).floor()
        } else {
            -((-self) + Dd::f(0.5)).floor()
        }
    }
    fn trunc(self) -> Self {
        if self.hi >= 0.0 {
            self.floor()
        } else {
            self.ceil()
        }
    }
    fn fract(self) -> Self {
        self - self.trunc()
    }
    fn abs(self) -> Self {
        if self.hi < 0.0 || (self.hi == 0.0 && self.lo < 0.0) {
            -self
        } else {
            self
        }
    }
    fn signum(self) -> Self {
        Dd::f(self.hi.signum())
    }
    fn is_sign_positive(self) -> bool {
        self.hi.is_sign_positive()
    }
    fn is_sign_negative(self) -> bool {
        self.hi.is_sign_negative()
    }
    fn mul_add(self, a: Self, b: Self) -> Self {
        self * a + b
    }
    fn recip(self) -> Self {
        Dd::one() / self
    }
    fn powi(self, n: i32) -> Self {
        let mut base = self;
        let mut e = n.unsigned_abs();
        let mut acc = Dd::one();
        while e > 0 {
            if e & 1 == 1 {
                acc *= base;
            }
            base = base * base;
            e >>= 1;
        }
        if n < 0 {
            acc.recip()
        } else {
            acc
        }
    }
    fn powf(self, n: Self) -> Self {
        (n * self.ln()).exp()
    }
    fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::f(self.hi.sqrt());
        }
        let q = Dd::f(self.hi.sqrt());
        q + (self - q * q) / (q + q)
    }
    fn exp(self) -> Self {
        if self.hi > 709.8 {
            return Dd::infinity();
        }
        if self.hi < -745.2 {
            return Dd::zero();
        }
        if self.hi.is_nan() {
            return self;
        }
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::f(k)).ldexp(-10);
        // expm1 of the reduced argument by Taylor series
        let mut term = r;
        let mut s = r;
        for i in 2..=12 {
            term = term * r / Dd::f(i as f64);
            s += term;
        }
        // undo the 2^-10 scaling: (1+s)^2 - 1 = 2s + s^2
        for _ in 0..10 {
            s = s.ldexp(1) + s * s;
        }
        (s + Dd::one()).ldexp(k as i32)
    }
    fn exp2(self) -> Self {
        (self * LN2).exp()
    }
    fn ln(self) -> Self {
        if self.hi <= 0.0 || !self.hi.is_finite() {
            return Dd::f(self.hi.ln());
        }
        let mut y = Dd::f(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::one();
        }
        y
    }
    fn log(self, base: Self) -> Self {
        self.ln() / base.ln()
    }
    fn log2(self) -> Self {
        self.ln() / LN2
    }
    fn log10(self) -> Self {
        self.ln() / Dd::f(10.0).ln()
    }
    fn max(self, other: Self) -> Self {
        if self.is_nan() || other > self {
            other
        } else {
            self
        }
    }
    fn min(self, other: Self) -> Self {
        if self.is_nan() || other < self {
            other
        } else {
            self
        }
    }
    fn abs_sub(self, other: Self) -> Self {
        if self > other {
            self - other
        } else {
            Dd::zero()
        }
    }
    fn cbrt(self) -> Self {
        self.from_f64_fn(f64::cbrt)
    }
    fn hypot(self, other: Self) -> Self {
        (self * self + other * other).sqrt()
    }
    fn sin(self) -> Self {
        self.from_f64_fn(f64::sin)
    }
    fn cos(self) -> Self {
        self.from_f64_fn(f64::cos)
    }
    fn tan(self) -> Self {
        self.from_f64_fn(f64::tan)
    }
    fn asin(self) -> Self {
        self.from_f64_fn(f64::asin)
    }
    fn acos(self) -> Self {
        self.from_f64_fn(f64::acos)
    }
    fn atan(self) -> Self {
        self.from_f64_fn(f64::atan)
    }
    fn atan2(self, other: Self) -> Self {
        Dd::f(self.hi.atan2(other.hi))
    }
    fn sin_cos(self) -> (Self, Self) {
        (self.sin(), self.cos())
    }
    fn exp_m1(self) -> Self {
        self.exp() - Dd::one()
    }
    fn ln_1p(self) -> Self {
        (self + Dd::one()).ln()
    }
    fn sinh(self) -> Self {
        let e = self.exp();
        (e - e.recip()).ldexp(-1)
    }
    fn cosh(self) -> Self {
        let e = self.exp();
        (e + e.recip()).ldexp(-1)
    }
    fn tanh(self) -> Self {
        if self.hi.abs() > 40.0 {
            return Dd::f(self.hi.signum());
        }
        let t = (-self.abs().ldexp(1)).exp();
        let y = (Dd::one() - t) / (Dd::one() + t);
        if self.hi < 0.0 {
            -y
        } else {
            y
        }
    }
    fn asinh(self) -> Self {
        self.from_f64_fn(f64::asinh)
    }
    fn acosh(self) -> Self {
        self.from_f64_fn(f64::acosh)
    }
    fn atanh(self) -> Self {
        self.from_f64_fn(f64::atanh)
    }
    fn integer_decode(self) -> (u64, i16, i8) {
        self.hi.integer_decode()
    }
}

impl Scalar for Dd {
    const NAME: &'static str = "dd";
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Dd, b: Dd, tol: f64) -> bool {
        (a - b).abs().hi <= tol * b.abs().hi.max(1.0)
    }

    #[test]
    fn arithmetic_carries_extra_bits() {
        let third = Dd::one() / Dd::f(3.0);
        let back = third * Dd::f(3.0);
        assert!(close(back, Dd::one(), 1e-31));
        // 1 + 2^-80 is not representable in f64
        let tiny = Dd::f(2f64.powi(-80));
        assert_eq!(((Dd::one() + tiny) - Dd::one()).hi, tiny.hi);
    }

    #[test]
    fn exp_ln_are_inverse() {
        for &x in &[-30.0, -1.5, -1e-9, 0.0, 1e-12, 0.7, 3.0, 50.0] {
            let x = Dd::f(x) + Dd::f(x * 1e-17);
            assert!(close(x.exp().ln(), x, 1e-29), "{x:?}");
        }
        assert!(close(Dd::one().exp(), Dd::new(std::f64::consts::E, 1.445_646_891_729_250_2e-16), 1e-30));
        assert!(close(Dd::f(2.0).ln(), LN2, 1e-31));
    }

    #[test]
    fn sqrt_and_tanh() {
        let r = Dd::f(2.0).sqrt();
        assert!(close(r * r, Dd::f(2.0), 1e-31));
        for &x in &[-3.0, -0.2, 1e-10, 0.5, 8.0] {
            let x = Dd::f(x);
            let e = x.ldexp(1).exp();
            let want = (e - Dd::one()) / (e + Dd::one());
            assert!(close(x.tanh(), want, 1e-29), "{x:?}");
            assert!((x.tanh().hi - x.hi.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn rounding_and_order() {
        assert_eq!(Dd::f(2.5).floor(), Dd::f(2.0));
        assert_eq!(Dd::f(-2.5).floor(), Dd::f(-3.0));
        assert_eq!(Dd::f(-2.5).trunc(), Dd::f(-2.0));
        assert!(Dd::new(1.0, 1e-20) > Dd::one());
        assert_eq!(Dd::f(3.0).max(Dd::nan()), Dd::f(3.0));
    }
}
