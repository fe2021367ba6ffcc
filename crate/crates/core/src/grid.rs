//! Sampling geometry and the cyclic rotation group.
//!
//! Cell `(i, j)` of a `p x p` grid with mesh size `h` sits at
//! `((i - (p-1)/2) h, (j - (p-1)/2) h)`. The first coordinate follows the row
//! index. Indices are 0-based everywhere.

use std::f64::consts::PI;

use crate::error::{invalid, Result};

/// A 2D point or vector.
pub type Point = [f64; 2];

/// 2x2 matrix stored row-major.
pub type Mat2 = [[f64; 2]; 2];

/// Geometry of a square sampling grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    p: usize,
    h: f64,
}

impl GridSpec {
    pub fn new(p: usize, h: f64) -> Result<Self> {
        if p == 0 {
            return Err(invalid("grid size p must be positive"));
        }
        if !(h > 0.0) || !h.is_finite() {
            return Err(invalid(format!("mesh size h must be positive, got {h}")));
        }
        Ok(Self { p, h })
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Offset of the center from index 0, in cells.
    pub fn center(&self) -> f64 {
        (self.p as f64 - 1.0) / 2.0
    }

    pub fn coord(&self, i: usize, j: usize) -> Point {
        let c = self.center();
        [(i as f64 - c) * self.h, (j as f64 - c) * self.h]
    }

    /// All coordinates in row-major order.
    pub fn coords(&self) -> Vec<Point> {
        let mut out = Vec::with_capacity(self.p * self.p);
        for i in 0..self.p {
            for j in 0..self.p {
                out.push(self.coord(i, j));
            }
        }
        out
    }
}

/// Centered `p x p` grid coordinates in row-major order.
pub fn make_grid(p: usize, h: f64) -> Result<Vec<Point>> {
    Ok(GridSpec::new(p, h)?.coords())
}

/// `[[cos θ, sin θ], [-sin θ, cos θ]]`.
pub fn rotation_matrix(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[c, s], [-s, c]]
}

pub fn mat_vec(m: &Mat2, v: Point) -> Point {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
    ]
}

pub fn transpose(m: &Mat2) -> Mat2 {
    [[m[0][0], m[1][0]], [m[0][1], m[1][1]]]
}

/// `U_θ^{-1} x`, the pull-back used by every rotation operator.
pub fn rotate_inverse(theta: f64, x: Point) -> Point {
    let (s, c) = theta.sin_cos();
    [c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

/// The cyclic group of `t` planar rotations by multiples of `2π/t`.
///
/// Elements are integer indices; angles are only materialized on demand so
/// composition and inversion stay exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RotationGroup {
    t: usize,
}

impl RotationGroup {
    pub fn new(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(invalid("group order t must be positive"));
        }
        Ok(Self { t })
    }

    pub fn order(&self) -> usize {
        self.t
    }

    pub fn identity(&self) -> usize {
        0
    }

    pub fn compose(&self, a: usize, b: usize) -> usize {
        (a % self.t + b % self.t) % self.t
    }

    pub fn inverse(&self, a: usize) -> usize {
        (self.t - a % self.t) % self.t
    }

    pub fn angle(&self, k: usize) -> f64 {
        2.0 * PI * (k % self.t) as f64 / self.t as f64
    }

    pub fn matrix(&self, k: usize) -> Mat2 {
        rotation_matrix(self.angle(k))
    }

    pub fn angles(&self) -> Vec<f64> {
        (0..self.t).map(|k| self.angle(k)).collect()
    }

    pub fn matrices(&self) -> Vec<Mat2> {
        (0..self.t).map(|k| self.matrix(k)).collect()
    }

    /// Number of quarter turns element `k` represents, if it is one.
    pub fn quarter_turns(&self, k: usize) -> Option<usize> {
        let k = k % self.t;
        if (4 * k) % self.t == 0 {
            Some(4 * k / self.t)
        } else {
            None
        }
    }
}

pub fn group_elements(t: usize) -> Result<RotationGroup> {
    RotationGroup::new(t)
}
