//! Outward-rounded interval arithmetic.
//!
//! Every operation returns an interval guaranteed to contain the image of its
//! operands. Basic arithmetic is correctly rounded by IEEE 754, so one ulp of
//! outward widening suffices; the libm transcendentals are only faithful to a
//! couple of ulps, so they get a wider margin. Any operation whose result
//! would be undefined (division by an interval containing zero, `tan` across
//! a pole) returns [`Interval::ENTIRE`] rather than panicking.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

const TRANSCENDENTAL_ULPS: u32 = 4;

#[derive(Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    lo: f64,
    hi: f64,
}

fn down(x: f64, ulps: u32) -> f64 {
    let mut v = x;
    for _ in 0..ulps {
        v = v.next_down();
    }
    v
}

fn up(x: f64, ulps: u32) -> f64 {
    let mut v = x;
    for _ in 0..ulps {
        v = v.next_up();
    }
    v
}

impl Interval {
    pub const ENTIRE: Interval = Interval {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
    };

    pub const ZERO: Interval = Interval { lo: 0.0, hi: 0.0 };
    pub const UNIT: Interval = Interval { lo: 0.0, hi: 1.0 };

    /// Panics if `lo > hi` or either bound is NaN.
    pub fn new(lo: f64, hi: f64) -> Self {
        assert!(lo <= hi, "invalid interval [{lo}, {hi}]");
        Self { lo, hi }
    }

    /// Builds `[lo, hi]`, falling back to [`Interval::ENTIRE`] if the bounds
    /// are NaN or inverted. Used internally where arithmetic on unbounded
    /// operands can produce NaN.
    fn checked(lo: f64, hi: f64) -> Self {
        if lo.is_nan() || hi.is_nan() || lo > hi {
            Self::ENTIRE
        } else {
            Self { lo, hi }
        }
    }

    fn rounded(lo: f64, hi: f64, ulps: u32) -> Self {
        Self::checked(down(lo, ulps), up(hi, ulps))
    }

    pub fn point(x: f64) -> Self {
        Self::new(x, x)
    }

    /// Symmetric interval `[c - r, c + r]`.
    pub fn centered(c: f64, r: f64) -> Self {
        assert!(r >= 0.0);
        Self::rounded(c - r, c + r, 1)
    }

    #[inline]
    pub fn lo(&self) -> f64 {
        self.lo
    }

    #[inline]
    pub fn hi(&self) -> f64 {
        self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        if self.lo.is_infinite() || self.hi.is_infinite() {
            return 0.0;
        }
        0.5 * self.lo + 0.5 * self.hi
    }

    /// Largest absolute value in the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn is_finite(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite()
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn contains_zero(&self) -> bool {
        self.contains(0.0)
    }

    pub fn is_subset_of(&self, other: &Interval) -> bool {
        other.lo <= self.lo && self.hi <= other.hi
    }

    /// Strict inclusion: `self` lies in the interior of `other`.
    pub fn is_interior_of(&self, other: &Interval) -> bool {
        other.lo < self.lo && self.hi < other.hi
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval {
            lo: self.lo.min(other.lo),
            hi: self.hi.max(other.hi),
        }
    }

    pub fn intersect(&self, other: &Interval) -> Option<Interval> {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        (lo <= hi).then_some(Interval { lo, hi })
    }

    pub fn inflate(&self, r: f64) -> Interval {
        Self::rounded(self.lo - r, self.hi + r, 1)
    }

    pub fn shift(&self, d: f64) -> Interval {
        Self::rounded(self.lo + d, self.hi + d, 1)
    }

    pub fn scale(&self, k: f64) -> Interval {
        *self * Interval::point(k)
    }

    pub fn sqr(&self) -> Interval {
        let (a, b) = (self.lo * self.lo, self.hi * self.hi);
        if self.lo >= 0.0 {
            Self::rounded(a, b, 1)
        } else if self.hi <= 0.0 {
            Self::rounded(b, a, 1)
        } else {
            Self::checked(0.0, up(a.max(b), 1))
        }
    }

    pub fn abs(&self) -> Interval {
        if self.lo >= 0.0 {
            *self
        } else if self.hi <= 0.0 {
            -*self
        } else {
            Interval {
                lo: 0.0,
                hi: self.mag(),
            }
        }
    }

    pub fn recip(&self) -> Interval {
        if self.contains_zero() {
            return Self::ENTIRE;
        }
        Self::rounded(1.0 / self.hi, 1.0 / self.lo, 1)
    }

    pub fn sqrt(&self) -> Interval {
        if self.hi < 0.0 || self.lo.is_nan() {
            return Self::ENTIRE;
        }
        let lo = self.lo.max(0.0).sqrt();
        Self::checked(down(lo, 1).max(0.0), up(self.hi.sqrt(), 1))
    }

    pub fn exp(&self) -> Interval {
        let lo = down(self.lo.exp(), TRANSCENDENTAL_ULPS).max(0.0);
        Self::checked(lo, up(self.hi.exp(), TRANSCENDENTAL_ULPS))
    }

    pub fn atan(&self) -> Interval {
        Self::rounded(self.lo.atan(), self.hi.atan(), TRANSCENDENTAL_ULPS)
    }

    /// `tan` is only monotone between consecutive poles; intervals reaching
    /// `±π/2` map to [`Interval::ENTIRE`].
    pub fn tan(&self) -> Interval {
        let guard = FRAC_PI_2 - 1e-9;
        if self.lo <= -guard || self.hi >= guard {
            return Self::ENTIRE;
        }
        Self::rounded(self.lo.tan(), self.hi.tan(), TRANSCENDENTAL_ULPS)
    }

    pub fn sin(&self) -> Interval {
        self.periodic_range(FRAC_PI_2, f64::sin)
    }

    pub fn cos(&self) -> Interval {
        self.periodic_range(0.0, f64::cos)
    }

    /// Range of a unit-amplitude sinusoid whose maxima sit at `phase + 2kπ`
    /// and minima at `phase + π + 2kπ`.
    fn periodic_range(&self, phase: f64, f: fn(f64) -> f64) -> Interval {
        if !self.is_finite() || self.width() >= 2.0 * PI {
            return Interval::new(-1.0, 1.0);
        }
        let (a, b) = (f(self.lo), f(self.hi));
        let mut lo = a.min(b);
        let mut hi = a.max(b);
        // Extremum lattice points are tested with a small slack so that a
        // point straddling the boundary by rounding still counts as inside.
        let slack = 1e-12 * (1.0 + self.mag());
        let contains_lattice = |offset: f64| {
            let period = 2.0 * PI;
            let k = ((self.lo - offset - slack) / period).ceil();
            offset + k * period <= self.hi + slack
        };
        if contains_lattice(phase) {
            hi = 1.0;
        }
        if contains_lattice(phase + PI) {
            lo = -1.0;
        }
        let lo = if lo == -1.0 {
            -1.0
        } else {
            down(lo, TRANSCENDENTAL_ULPS).max(-1.0)
        };
        let hi = if hi == 1.0 {
            1.0
        } else {
            up(hi, TRANSCENDENTAL_ULPS).min(1.0)
        };
        Interval::checked(lo, hi)
    }

    pub fn max_scalar(&self, c: f64) -> Interval {
        Interval::checked(self.lo.max(c), self.hi.max(c))
    }

    pub fn min_scalar(&self, c: f64) -> Interval {
        Interval::checked(self.lo.min(c), self.hi.min(c))
    }
}

impl fmt::Debug for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:e}, {:e}]", self.lo, self.hi)
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

impl From<f64> for Interval {
    fn from(x: f64) -> Self {
        Interval::point(x)
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        Interval::rounded(self.lo + rhs.lo, self.hi + rhs.hi, 1)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval::rounded(self.lo - rhs.hi, self.hi - rhs.lo, 1)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval {
            lo: -self.hi,
            hi: -self.lo,
        }
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        // Point-zero operands annihilate even unbounded partners.
        if (self.lo == 0.0 && self.hi == 0.0) || (rhs.lo == 0.0 && rhs.hi == 0.0) {
            return Interval::ZERO;
        }
        let p = [self.lo * rhs.lo, self.lo * rhs.hi, self.hi * rhs.lo, self.hi * rhs.hi];
        if p.iter().any(|v| v.is_nan()) {
            return Interval::ENTIRE;
        }
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Interval::rounded(lo, hi, 1)
    }
}

impl Div for Interval {
    type Output = Interval;
    fn div(self, rhs: Interval) -> Interval {
        if rhs.contains_zero() {
            return Interval::ENTIRE;
        }
        let q = [self.lo / rhs.lo, self.lo / rhs.hi, self.hi / rhs.lo, self.hi / rhs.hi];
        if q.iter().any(|v| v.is_nan()) {
            return Interval::ENTIRE;
        }
        let lo = q.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Interval::rounded(lo, hi, 1)
    }
}

/// Axis-aligned hyper-rectangle: one interval per coordinate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox(pub Vec<Interval>);

impl IntervalBox {
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Self {
        assert_eq!(lower.len(), upper.len());
        IntervalBox(lower.iter().zip(upper).map(|(&l, &u)| Interval::new(l, u)).collect())
    }

    pub fn centered(center: &[f64], half_widths: &[f64]) -> Self {
        assert_eq!(center.len(), half_widths.len());
        IntervalBox(
            center
                .iter()
                .zip(half_widths)
                .map(|(&c, &r)| Interval::centered(c, r))
                .collect(),
        )
    }

    pub fn point(x: &[f64]) -> Self {
        IntervalBox(x.iter().map(|&v| Interval::point(v)).collect())
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn lower(&self) -> Vec<f64> {
        self.0.iter().map(Interval::lo).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.0.iter().map(Interval::hi).collect()
    }

    pub fn mid(&self) -> Vec<f64> {
        self.0.iter().map(Interval::mid).collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.0.iter().map(Interval::width).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.0.iter().zip(x).all(|(i, &v)| i.contains(v))
    }

    pub fn is_subset_of(&self, other: &IntervalBox) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(&other.0).all(|(a, b)| a.is_subset_of(b))
    }

    pub fn is_interior_of(&self, other: &IntervalBox) -> bool {
        self.dim() == other.dim() && self.0.iter().zip(&other.0).all(|(a, b)| a.is_interior_of(b))
    }

    pub fn hull(&self, other: &IntervalBox) -> IntervalBox {
        IntervalBox(self.0.iter().zip(&other.0).map(|(a, b)| a.hull(b)).collect())
    }

    /// Shift every coordinate by `offset` (exact up to one ulp outward).
    pub fn translate(&self, offset: &[f64]) -> IntervalBox {
        assert_eq!(offset.len(), self.dim());
        IntervalBox(
            self.0
                .iter()
                .zip(offset)
                .map(|(i, &d)| if d == 0.0 { *i } else { i.shift(d) })
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(Interval::is_finite)
    }
}

impl std::ops::Index<usize> for IntervalBox {
    type Output = Interval;
    fn index(&self, i: usize) -> &Interval {
        &self.0[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_interval() -> impl Strategy<Value = (Interval, f64, f64)> {
        (-20.0f64..20.0, 0.0f64..5.0, 0.0f64..=1.0, 0.0f64..=1.0).prop_map(|(lo, w, s, t)| {
            let i = Interval::new(lo, lo + w);
            (i, lo + s * w, lo + t * w)
        })
    }

    #[test]
    fn sin_cos_hit_extrema() {
        let i = Interval::new(1.0, 2.0);
        assert_eq!(i.sin().hi(), 1.0);
        assert!(i.sin().lo() <= 1.0f64.sin());
        let j = Interval::new(3.0, 3.5);
        assert_eq!(j.cos().lo(), -1.0);
        assert_eq!(Interval::new(-0.1, 0.1).cos().hi(), 1.0);
        assert_eq!(Interval::new(0.0, 7.0).sin(), Interval::new(-1.0, 1.0));
    }

    #[test]
    fn division_by_zero_is_entire() {
        let r = Interval::new(1.0, 2.0) / Interval::new(-1.0, 1.0);
        assert_eq!(r, Interval::ENTIRE);
        assert_eq!(Interval::new(-2.0, 2.0).tan(), Interval::ENTIRE);
    }

    #[test]
    fn mean_value_containment() {
        let x = Interval::new(-0.05, 0.05);
        assert!(x.sqr().lo() == 0.0);
        assert!((x * x).lo() < 0.0);
    }

    proptest! {
        #[test]
        fn arithmetic_encloses_point_results((a, x, _) in arb_interval(), (b, y, _) in arb_interval()) {
            prop_assert!((a + b).contains(x + y));
            prop_assert!((a - b).contains(x - y));
            prop_assert!((a * b).contains(x * y));
            if !b.contains_zero() {
                prop_assert!((a / b).contains(x / y));
            }
            prop_assert!(a.sqr().contains(x * x));
            prop_assert!(a.abs().contains(x.abs()));
        }

        #[test]
        fn elementary_functions_enclose((a, x, y) in arb_interval()) {
            prop_assert!(a.sin().contains(x.sin()));
            prop_assert!(a.cos().contains(y.cos()));
            prop_assert!(a.atan().contains(x.atan()));
            prop_assert!(a.exp().contains(x.exp()) || x > 700.0);
            if a.lo() >= 0.0 {
                prop_assert!(a.sqrt().contains(x.sqrt()));
            }
            let t = Interval::new(a.lo() / 14.0, a.hi() / 14.0);
            prop_assert!(t.tan().contains((x / 14.0).tan()));
        }
    }
}
