//! Planar collision primitives shared by funnel and rollout checks.
//!
//! All predicates are closed: touching counts as contact.

use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
}

impl Aabb {
    pub fn centered(cx: f64, cy: f64, half_x: f64, half_y: f64) -> Self {
        Aabb {
            x_lo: cx - half_x,
            x_hi: cx + half_x,
            y_lo: cy - half_y,
            y_hi: cy + half_y,
        }
    }

    pub fn overlaps(&self, other: &Aabb) -> bool {
        self.x_lo <= other.x_hi && other.x_lo <= self.x_hi && self.y_lo <= other.y_hi && other.y_lo <= self.y_hi
    }

    pub fn inflate(&self, dx: f64, dy: f64) -> Self {
        Aabb {
            x_lo: self.x_lo - dx,
            x_hi: self.x_hi + dx,
            y_lo: self.y_lo - dy,
            y_hi: self.y_hi + dy,
        }
    }

    fn center(&self) -> (f64, f64) {
        (0.5 * (self.x_lo + self.x_hi), 0.5 * (self.y_lo + self.y_hi))
    }

    fn half(&self) -> (f64, f64) {
        (0.5 * (self.x_hi - self.x_lo), 0.5 * (self.y_hi - self.y_lo))
    }

    /// Closed contact with the disc of radius `r` around `(cx, cy)`.
    pub fn touches_disc(&self, cx: f64, cy: f64, r: f64) -> bool {
        let dx = cx - cx.clamp(self.x_lo, self.x_hi);
        let dy = cy - cy.clamp(self.y_lo, self.y_hi);
        dx * dx + dy * dy <= r * r
    }
}

/// Rectangle of half-extents `(half_length, half_width)` rotated by `heading`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OrientedRect {
    pub cx: f64,
    pub cy: f64,
    pub heading: f64,
    pub half_length: f64,
    pub half_width: f64,
}

impl OrientedRect {
    /// Separating-axis test against an axis-aligned rectangle.
    pub fn overlaps(&self, b: &Aabb) -> bool {
        let (c, s) = (self.heading.cos(), self.heading.sin());
        let (bx, by) = b.center();
        let (px, py) = b.half();
        let (dx, dy) = (self.cx - bx, self.cy - by);
        let axes = [(1.0, 0.0), (0.0, 1.0), (c, s), (-s, c)];
        axes.iter().all(|&(ux, uy)| {
            let r_self = self.half_length * (ux * c + uy * s).abs() + self.half_width * (-ux * s + uy * c).abs();
            let r_box = px * ux.abs() + py * uy.abs();
            (ux * dx + uy * dy).abs() <= r_self + r_box
        })
    }
}

/// Half-extents of the axis-aligned hull of a `half_length × half_width`
/// rectangle over every heading in `[heading_lo, heading_hi]`.
pub fn footprint_half_extents(half_length: f64, half_width: f64, heading_lo: f64, heading_hi: f64) -> (f64, f64) {
    let (cos_max, sin_max) = abs_trig_max(heading_lo, heading_hi);
    (
        half_length * cos_max + half_width * sin_max,
        half_length * sin_max + half_width * cos_max,
    )
}

/// Upper bounds on `|cos|` and `|sin|` over an angle interval.
fn abs_trig_max(lo: f64, hi: f64) -> (f64, f64) {
    use std::f64::consts::{FRAC_PI_2, PI};
    if hi - lo >= PI {
        return (1.0, 1.0);
    }
    let contains = |target: f64| {
        // Some `target + kπ` lies in [lo, hi].
        let k = ((lo - target) / PI).ceil();
        target + k * PI <= hi
    };
    let cos_max = if contains(0.0) {
        1.0
    } else {
        lo.cos().abs().max(hi.cos().abs())
    };
    let sin_max = if contains(FRAC_PI_2) {
        1.0
    } else {
        lo.sin().abs().max(hi.sin().abs())
    };
    // A few ulps of slack so the hull stays outward under rounding.
    (
        (cos_max + 4.0 * f64::EPSILON).min(1.0),
        (sin_max + 4.0 * f64::EPSILON).min(1.0),
    )
}

/// Distance along the ray from `(ox, oy)` in direction `angle` to the disc,
/// or `None` when the ray misses. Zero when the origin is inside.
pub fn ray_disc_distance(ox: f64, oy: f64, angle: f64, cx: f64, cy: f64, r: f64) -> Option<f64> {
    let (ux, uy) = (angle.cos(), angle.sin());
    let (fx, fy) = (ox - cx, oy - cy);
    let c = fx * fx + fy * fy - r * r;
    if c <= 0.0 {
        return Some(0.0);
    }
    let b = fx * ux + fy * uy;
    let disc = b * b - c;
    if b >= 0.0 || disc < 0.0 {
        return None;
    }
    Some(-b - disc.sqrt())
}
