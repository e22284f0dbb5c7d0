//! Exact dyadic rationals `num / 2^exp`.
//!
//! Every coordinate in the slit constructions is dyadic, so separation and
//! incidence tests are done in exact integer arithmetic; floats appear only
//! in distances and measures.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::str::FromStr;

use crate::Error;

/// A rational number of the form `num / 2^exp`, kept in normalized form
/// (`num` odd or zero; zero stored as `0 / 2^0`).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dyadic {
    num: i64,
    exp: u32,
}

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { num: 0, exp: 0 };
    pub const ONE: Dyadic = Dyadic { num: 1, exp: 0 };

    pub fn new(num: i64, exp: u32) -> Dyadic {
        Dyadic { num, exp }.normalized()
    }

    /// `1 / 2^exp`.
    pub fn pow2(exp: u32) -> Dyadic {
        Dyadic { num: 1, exp }
    }

    pub fn from_int(n: i64) -> Dyadic {
        Dyadic { num: n, exp: 0 }
    }

    fn normalized(mut self) -> Dyadic {
        if self.num == 0 {
            return Dyadic::ZERO;
        }
        while self.exp > 0 && self.num % 2 == 0 {
            self.num /= 2;
            self.exp -= 1;
        }
        self
    }

    pub fn numerator(&self) -> i64 {
        self.num
    }

    pub fn exponent(&self) -> u32 {
        self.exp
    }

    pub fn is_zero(&self) -> bool {
        self.num == 0
    }

    pub fn is_positive(&self) -> bool {
        self.num > 0
    }

    pub fn is_negative(&self) -> bool {
        self.num < 0
    }

    pub fn abs(self) -> Dyadic {
        Dyadic { num: self.num.abs(), exp: self.exp }
    }

    pub fn halved(self) -> Dyadic {
        Dyadic { num: self.num, exp: self.exp + 1 }.normalized()
    }

    /// Numerator after rescaling to denominator `2^exp`. Panics on overflow;
    /// all coordinates in this crate stay far below the i64 range.
    fn scaled_num(&self, exp: u32) -> i128 {
        debug_assert!(exp >= self.exp);
        (self.num as i128) << (exp - self.exp)
    }

    /// Exact quotient `self / rhs` if it is an integer.
    pub fn exact_div(&self, rhs: Dyadic) -> Option<i64> {
        if rhs.is_zero() {
            return None;
        }
        let exp = self.exp.max(rhs.exp);
        let a = self.scaled_num(exp);
        let b = rhs.scaled_num(exp);
        if a % b == 0 {
            i64::try_from(a / b).ok()
        } else {
            None
        }
    }

    /// True if `self` is an integer multiple of `step`.
    pub fn is_multiple_of(&self, step: Dyadic) -> bool {
        self.exact_div(step).is_some()
    }

    pub fn to_f64(&self) -> f64 {
        self.num as f64 / f64::powi(2.0, self.exp as i32)
    }

    pub fn min(self, other: Dyadic) -> Dyadic {
        if self <= other {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: Dyadic) -> Dyadic {
        if self >= other {
            self
        } else {
            other
        }
    }
}

impl Add for Dyadic {
    type Output = Dyadic;
    fn add(self, rhs: Dyadic) -> Dyadic {
        let exp = self.exp.max(rhs.exp);
        let num = self.scaled_num(exp) + rhs.scaled_num(exp);
        Dyadic { num: i64::try_from(num).expect("dyadic overflow"), exp }.normalized()
    }
}

impl Sub for Dyadic {
    type Output = Dyadic;
    fn sub(self, rhs: Dyadic) -> Dyadic {
        self + (-rhs)
    }
}

impl Neg for Dyadic {
    type Output = Dyadic;
    fn neg(self) -> Dyadic {
        Dyadic { num: -self.num, exp: self.exp }
    }
}

impl Mul for Dyadic {
    type Output = Dyadic;
    fn mul(self, rhs: Dyadic) -> Dyadic {
        let num = (self.num as i128) * (rhs.num as i128);
        Dyadic {
            num: i64::try_from(num).expect("dyadic overflow"),
            exp: self.exp + rhs.exp,
        }
        .normalized()
    }
}

impl PartialOrd for Dyadic {
    fn partial_cmp(&self, other: &Dyadic) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Dyadic {
    fn cmp(&self, other: &Dyadic) -> Ordering {
        let exp = self.exp.max(other.exp);
        self.scaled_num(exp).cmp(&other.scaled_num(exp))
    }
}

impl fmt::Display for Dyadic {
    /// Serialized as `p/2^q`, or bare `p` for integers.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.exp == 0 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/2^{}", self.num, self.exp)
        }
    }
}

impl fmt::Debug for Dyadic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl FromStr for Dyadic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Dyadic, Error> {
        let s = s.trim();
        let parse_int = |t: &str| {
            t.parse::<i64>()
                .map_err(|_| Error::Parse(format!("bad dyadic component {t:?}")))
        };
        match s.split_once('/') {
            None => Ok(Dyadic::from_int(parse_int(s)?)),
            Some((num, den)) => {
                let den = den
                    .strip_prefix("2^")
                    .ok_or_else(|| Error::Parse(format!("denominator of {s:?} must be 2^q")))?;
                let exp = den
                    .parse::<u32>()
                    .map_err(|_| Error::Parse(format!("bad exponent in {s:?}")))?;
                if exp > 62 {
                    return Err(Error::Parse(format!("exponent too large in {s:?}")));
                }
                Ok(Dyadic::new(parse_int(num)?, exp))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalization_and_display() {
        assert_eq!(Dyadic::new(4, 3), Dyadic::new(1, 1));
        assert_eq!(Dyadic::new(4, 3).to_string(), "1/2^1");
        assert_eq!(Dyadic::from_int(-3).to_string(), "-3");
        assert_eq!(Dyadic::new(0, 7), Dyadic::ZERO);
    }

    #[test]
    fn parse_round_trip() {
        for s in ["0", "1", "-5", "3/2^2", "-7/2^4", "1/2^1"] {
            let d: Dyadic = s.parse().unwrap();
            assert_eq!(d.to_string(), s);
        }
        assert!("1/3".parse::<Dyadic>().is_err());
        assert!("x/2^2".parse::<Dyadic>().is_err());
    }

    #[test]
    fn exact_division() {
        let h = Dyadic::pow2(3); // 1/8
        assert_eq!(Dyadic::new(3, 2).exact_div(h), Some(6)); // 3/4 = 6 * 1/8
        assert_eq!(Dyadic::new(1, 4).exact_div(h), None); // 1/16 not a multiple
        assert!(Dyadic::new(5, 1).is_multiple_of(Dyadic::pow2(1)));
    }

    fn arb_dyadic() -> impl Strategy<Value = Dyadic> {
        (-(1i64 << 20)..(1i64 << 20), 0u32..16).prop_map(|(n, e)| Dyadic::new(n, e))
    }

    proptest! {
        #[test]
        fn field_laws(a in arb_dyadic(), b in arb_dyadic(), c in arb_dyadic()) {
            prop_assert_eq!((a + b) - b, a);
            prop_assert_eq!(a + b, b + a);
            prop_assert_eq!((a + b) + c, a + (b + c));
            prop_assert_eq!(a * (b + c), a * b + a * c);
            prop_assert_eq!((a * b).to_f64(), a.to_f64() * b.to_f64());
        }

        #[test]
        fn order_matches_f64(a in arb_dyadic(), b in arb_dyadic()) {
            prop_assert_eq!(a.cmp(&b), a.to_f64().partial_cmp(&b.to_f64()).unwrap());
        }
    }
}
