//! Double-double arithmetic: an unevaluated sum `hi + lo` with
//! `|lo| ≤ ulp(hi)/2`, giving about 32 significant digits.
//!
//! Used where a double-precision evaluation loses the digits being measured,
//! such as finite-difference oracles on gradient entries that are small
//! because of cancellation.

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

/// Terms of the exponential series. Enough for `|r| ≤ ln 2 / 2` at full
/// precision.
const EXP_TERMS: u32 = 27;
/// Terms of the `expm1` series, used for `|x| < 1/2`.
const EXPM1_TERMS: u32 = 32;

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Requires `|a| ≥ |b|` or `a = 0`.
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
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub const fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn renorm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }

    pub fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        Self::renorm(p, e + self.lo * b)
    }

    pub fn square(self) -> Self {
        self * self
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        // One Newton step from the double root doubles the correct digits.
        let y = self.hi.sqrt();
        let (p, e) = two_prod(y, y);
        let r = self - Dd { hi: p, lo: e };
        let (s, t) = two_sum(y, r.hi / (2.0 * y));
        Self::renorm(s, t)
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        let r = self - LN2.mul_f64(k);
        let mut s = Dd::ONE;
        for n in (1..=EXP_TERMS).rev() {
            s = Dd::ONE + (s * r) / Dd::from_f64(n as f64);
        }
        let scale = 2f64.powi(k as i32);
        Dd {
            hi: s.hi * scale,
            lo: s.lo * scale,
        }
    }

    /// `e^x − 1` without cancellation near zero.
    pub fn expm1(self) -> Self {
        if self.hi.abs() >= 0.5 {
            return self.exp() - Dd::ONE;
        }
        let mut s = Dd::ZERO;
        for n in (1..=EXPM1_TERMS).rev() {
            s = ((s + Dd::ONE) * self) / Dd::from_f64(n as f64);
        }
        s
    }

    /// Natural logarithm of a positive value.
    pub fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::from_f64(f64::NAN);
        }
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp() - Dd::ONE
    }

    pub fn tanh(self) -> Self {
        let y = (self.abs().mul_f64(-2.0)).expm1();
        let t = -y / (Dd::from_f64(2.0) + y);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(self) -> Self {
        if self.hi > 0.0 {
            self + (Dd::ONE + (-self).exp()).ln()
        } else {
            (Dd::ONE + self.exp()).ln()
        }
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::from_f64(x)
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
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::renorm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        Dd::renorm(p, e + (self.hi * b.lo + self.lo * b.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b.mul_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b.mul_f64(q2);
        let q3 = r.hi / b.hi;
        let (q, e) = quick_two_sum(q1, q2);
        Dd { hi: q, lo: e } + Dd::from_f64(q3)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E: Dd = Dd {
        hi: std::f64::consts::E,
        lo: 1.445_646_891_729_250_2e-16,
    };

    fn close(a: Dd, b: Dd, rel: f64) -> bool {
        (a - b).abs().to_f64() <= rel * b.abs().to_f64().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn exp_of_one_is_e() {
        assert!(close(Dd::ONE.exp(), E, 1e-31), "{:?}", Dd::ONE.exp());
        assert!(close(E.ln(), Dd::ONE, 1e-31));
    }

    #[test]
    fn exact_product_residual_is_kept() {
        // (1 + 2^-30)^2 = 1 + 2^-29 + 2^-60 needs more than 53 bits.
        let x = Dd::from_f64(1.0 + 2f64.powi(-30));
        let sq = x * x;
        assert_eq!(sq.hi, 1.0 + 2f64.powi(-29));
        assert_eq!(sq.lo, 2f64.powi(-60));
    }

    #[test]
    fn small_argument_functions() {
        let x = Dd::from_f64(1e-20);
        assert!(close(x.expm1(), x, 1e-19));
        assert!(close(x.tanh(), x, 1e-19));
        assert_eq!(Dd::ZERO.tanh(), Dd::ZERO);
    }

    proptest! {
        #[test]
        fn matches_double_precision(x in -20.0f64..20.0) {
            let d = Dd::from_f64(x);
            prop_assert!((d.exp().to_f64() - x.exp()).abs() <= 4e-16 * x.exp());
            prop_assert!((d.tanh().to_f64() - x.tanh()).abs() <= 4e-16 * x.tanh().abs().max(1e-300));
            let sp = if x > 30.0 { x } else { x.exp().ln_1p() };
            prop_assert!((d.softplus().to_f64() - sp).abs() <= 4e-16 * sp);
        }

        #[test]
        fn field_identities(a in -1e3f64..1e3, b in 0.01f64..1e3, c in 1e-8f64..1.0) {
            let (a, b) = (Dd::from_f64(a) + Dd::from_f64(c * 1e-17), Dd::from_f64(b));
            prop_assert!(close((a * b) / b, a, 1e-30));
            prop_assert!(close((a + b) - b, a, 1e-30 * (1.0 + b.hi / a.hi.abs().max(1e-300))));
            prop_assert!(close(b.sqrt().square(), b, 1e-30));
        }

        #[test]
        fn transcendental_identities(x in -8.0f64..8.0, y in -8.0f64..8.0) {
            let (x, y) = (Dd::from_f64(x), Dd::from_f64(y) / Dd::from_f64(3.0));
            prop_assert!(close((x + y).exp(), x.exp() * y.exp(), 1e-30));
            prop_assert!(close(x.exp().ln(), x, 1e-30 * (1.0 / x.hi.abs().max(1e-3))));
            // tanh(2x) = 2 tanh x / (1 + tanh² x)
            let t = y.tanh();
            let two = Dd::from_f64(2.0);
            prop_assert!(close((y * two).tanh(), (t * two) / (Dd::ONE + t * t), 1e-30));
            // softplus(x) − softplus(−x) = x
            prop_assert!((x.softplus() - (-x).softplus() - x).abs().to_f64() <= 1e-30 * x.hi.abs().max(1.0));
        }
    }
}
