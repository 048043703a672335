//! Numeric abstraction shared by simulation and reachability.
//!
//! Closed-loop vector fields are written once, generically over [`Scalar`],
//! and evaluated with `f64` for rollouts, [`Interval`] for enclosures, and
//! [`Dual`] (interval-valued forward-mode derivatives) for the Jacobians the
//! funnel engine needs. Keeping a single definition is what ties the
//! simulated dynamics to the certified ones.

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::interval::Interval;

pub trait Scalar:
    Copy + Debug + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(x: f64) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tan(self) -> Self;
    fn atan(self) -> Self;
    fn exp(self) -> Self;
    fn sqrt(self) -> Self;

    fn sqr(self) -> Self {
        self * self
    }

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }

    /// `clamp(ff + self, lo, hi) - ff`: the feedback part of a saturated
    /// command whose feedforward is `ff`. Evaluated without forming the
    /// difference explicitly, so that interval evaluation does not pick up
    /// the dependency width of `ff`.
    fn clamp_offset(self, ff: Self, lo: f64, hi: f64) -> Self;

    /// `clamp(self, lo, hi) - self`: zero, with zero derivative, whenever the
    /// command is strictly inside its limits.
    fn excess(self, lo: f64, hi: f64) -> Self;
}

impl Scalar for f64 {
    fn cst(x: f64) -> Self {
        x
    }
    fn sin(self) -> Self {
        f64::sin(self)
    }
    fn cos(self) -> Self {
        f64::cos(self)
    }
    fn tan(self) -> Self {
        f64::tan(self)
    }
    fn atan(self) -> Self {
        f64::atan(self)
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn clamp_offset(self, ff: Self, lo: f64, hi: f64) -> Self {
        self.clamp(lo - ff, hi - ff)
    }
    fn excess(self, lo: f64, hi: f64) -> Self {
        self.clamp(lo, hi) - self
    }
}

impl Scalar for Interval {
    fn cst(x: f64) -> Self {
        Interval::point(x)
    }
    fn sin(self) -> Self {
        Interval::sin(&self)
    }
    fn cos(self) -> Self {
        Interval::cos(&self)
    }
    fn tan(self) -> Self {
        Interval::tan(&self)
    }
    fn atan(self) -> Self {
        Interval::atan(&self)
    }
    fn exp(self) -> Self {
        Interval::exp(&self)
    }
    fn sqrt(self) -> Self {
        Interval::sqrt(&self)
    }
    fn sqr(self) -> Self {
        Interval::sqr(&self)
    }
    fn clamp_offset(self, ff: Self, lo: f64, hi: f64) -> Self {
        // h(ff, u) = clamp(u, lo - ff, hi - ff) is nondecreasing in u and
        // nonincreasing in ff, so its range is attained at opposite corners.
        let lower = clamp_offset_lower(self.lo(), ff.hi(), lo, hi);
        let upper = clamp_offset_upper(self.hi(), ff.lo(), lo, hi);
        if lower <= upper {
            Interval::new(lower, upper)
        } else {
            Interval::ENTIRE
        }
    }
    fn excess(self, lo: f64, hi: f64) -> Self {
        if self.lo() > lo && self.hi() < hi {
            return Interval::ZERO;
        }
        // Nonincreasing in the command, so the range comes from the ends.
        let at = |u: f64| {
            let u = Interval::point(u);
            (Interval::point(lo) - u).max_scalar(0.0) - (u - Interval::point(hi)).max_scalar(0.0)
        };
        Interval::new(at(self.hi()).lo(), at(self.lo()).hi())
    }
}

fn clamp_offset_lower(u: f64, ff: f64, lo: f64, hi: f64) -> f64 {
    let a = Interval::point(lo) - Interval::point(ff);
    let b = Interval::point(hi) - Interval::point(ff);
    u.max(a.lo()).min(b.lo())
}

fn clamp_offset_upper(u: f64, ff: f64, lo: f64, hi: f64) -> f64 {
    let a = Interval::point(lo) - Interval::point(ff);
    let b = Interval::point(hi) - Interval::point(ff);
    u.max(a.hi()).min(b.hi())
}

/// Maximum number of independent variables a [`Dual`] tracks.
pub const DUAL_VARS: usize = 8;

/// Interval value with interval-valued partial derivatives.
///
/// Evaluating a function on a `Dual` whose seeds are boxes yields an
/// enclosure of the function *and* of its gradient over the box, which is
/// exactly what the mean-value form needs.
#[derive(Clone, Copy, Debug)]
pub struct Dual {
    pub v: Interval,
    pub d: [Interval; DUAL_VARS],
}

impl Dual {
    pub fn constant(v: Interval) -> Self {
        Dual {
            v,
            d: [Interval::ZERO; DUAL_VARS],
        }
    }

    /// Independent variable number `index`.
    pub fn variable(v: Interval, index: usize) -> Self {
        assert!(index < DUAL_VARS);
        let mut d = [Interval::ZERO; DUAL_VARS];
        d[index] = Interval::point(1.0);
        Dual { v, d }
    }

    fn chain(self, v: Interval, dv: Interval) -> Self {
        let mut d = self.d;
        for di in d.iter_mut() {
            *di = *di * dv;
        }
        Dual { v, d }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, rhs: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d) {
            *a = *a + b;
        }
        Dual { v: self.v + rhs.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, rhs: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(rhs.d) {
            *a = *a - b;
        }
        Dual { v: self.v - rhs.v, d }
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        let mut d = self.d;
        for a in d.iter_mut() {
            *a = -*a;
        }
        Dual { v: -self.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn mul(self, rhs: Dual) -> Dual {
        let d = std::array::from_fn(|i| self.d[i] * rhs.v + self.v * rhs.d[i]);
        Dual { v: self.v * rhs.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[allow(clippy::suspicious_arithmetic_impl)]
    fn div(self, rhs: Dual) -> Dual {
        let q = self.v / rhs.v;
        let d = std::array::from_fn(|i| (self.d[i] - q * rhs.d[i]) / rhs.v);
        Dual { v: q, d }
    }
}

impl Scalar for Dual {
    fn cst(x: f64) -> Self {
        Dual::constant(Interval::point(x))
    }
    fn sin(self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn tan(self) -> Self {
        let t = self.v.tan();
        self.chain(t, Interval::point(1.0) + t.sqr())
    }
    fn atan(self) -> Self {
        self.chain(self.v.atan(), (Interval::point(1.0) + self.v.sqr()).recip())
    }
    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        self.chain(s, (s.scale(2.0)).recip())
    }
    fn sqr(self) -> Self {
        let two_v = self.v.scale(2.0);
        self.chain(self.v.sqr(), two_v)
    }
    fn scale(self, k: f64) -> Self {
        self.chain(self.v.scale(k), Interval::point(k))
    }
    fn clamp_offset(self, ff: Self, lo: f64, hi: f64) -> Self {
        let v = self.v.clamp_offset(ff.v, lo, hi);
        let total = ff.v + self.v;
        let mut d = [Interval::ZERO; DUAL_VARS];
        if total.lo() > lo && total.hi() < hi {
            d = self.d;
        } else if total.hi() <= lo || total.lo() >= hi {
            for (di, fd) in d.iter_mut().zip(ff.d) {
                *di = -fd;
            }
        } else {
            // Generalized gradient: any convex combination of the two
            // regimes, enclosed by scaling both with [0, 1].
            for ((di, sd), fd) in d.iter_mut().zip(self.d).zip(ff.d) {
                *di = Interval::UNIT * sd - Interval::UNIT * fd;
            }
        }
        Dual { v, d }
    }
    fn excess(self, lo: f64, hi: f64) -> Self {
        let v = self.v.excess(lo, hi);
        let slope = if self.v.lo() > lo && self.v.hi() < hi {
            Interval::ZERO
        } else if self.v.hi() < lo || self.v.lo() > hi {
            Interval::point(-1.0)
        } else {
            -Interval::UNIT
        };
        let mut d = self.d;
        for di in d.iter_mut() {
            *di = *di * slope;
        }
        Dual { v, d }
    }
}
