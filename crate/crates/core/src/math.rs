//! Minimal generic 3D math.
//!
//! Every geometric kernel in this crate (blendshape sum, rotations, projection,
//! losses) is written once, generically over [`Scalar`], and evaluated either
//! with plain `f64` or with tape variables from [`crate::tape`]. Constants enter
//! through `addc`/`mulc`/`lift` so the tape path never records nodes for them.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// Scalar abstraction over `f64` and tape variables.
///
/// Nonsmooth operations fix a subgradient convention: `abs` has slope 0 at the
/// origin, `min_c`/`max_c` route the derivative to the argument only when it is
/// strictly on the winning side (ties go to the constant, slope 0).
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    /// Current numeric value (used for branching, argmins, diagnostics).
    fn value(self) -> f64;
    /// A constant carrying the same evaluation context as `self`.
    fn lift(self, c: f64) -> Self;
    fn addc(self, c: f64) -> Self;
    fn mulc(self, c: f64) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn min_c(self, c: f64) -> Self;
    fn max_c(self, c: f64) -> Self;

    fn sq(self) -> Self {
        self * self
    }
}

impl Scalar for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, c: f64) -> f64 {
        c
    }
    fn addc(self, c: f64) -> f64 {
        self + c
    }
    fn mulc(self, c: f64) -> f64 {
        self * c
    }
    fn sqrt(self) -> f64 {
        f64::sqrt(self)
    }
    fn sin(self) -> f64 {
        f64::sin(self)
    }
    fn cos(self) -> f64 {
        f64::cos(self)
    }
    fn abs(self) -> f64 {
        f64::abs(self)
    }
    fn min_c(self, c: f64) -> f64 {
        if self < c {
            self
        } else {
            c
        }
    }
    fn max_c(self, c: f64) -> f64 {
        if self > c {
            self
        } else {
            c
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

pub type Vec3f = Vec3<f64>;

impl<S: Scalar> Vec3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Vec3 { x, y, z }
    }

    pub fn dot(self, o: Vec3<S>) -> S {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3<S>) -> Vec3<S> {
        Vec3 {
            x: self.y * o.z - self.z * o.y,
            y: self.z * o.x - self.x * o.z,
            z: self.x * o.y - self.y * o.x,
        }
    }

    pub fn norm(self) -> S {
        self.dot(self).sqrt()
    }

    pub fn scale(self, s: S) -> Vec3<S> {
        Vec3 {
            x: self.x * s,
            y: self.y * s,
            z: self.z * s,
        }
    }

    pub fn scale_c(self, c: f64) -> Vec3<S> {
        Vec3 {
            x: self.x.mulc(c),
            y: self.y.mulc(c),
            z: self.z.mulc(c),
        }
    }

    pub fn add_c(self, c: Vec3f) -> Vec3<S> {
        Vec3 {
            x: self.x.addc(c.x),
            y: self.y.addc(c.y),
            z: self.z.addc(c.z),
        }
    }

    pub fn values(self) -> Vec3f {
        Vec3 {
            x: self.x.value(),
            y: self.y.value(),
            z: self.z.value(),
        }
    }
}

impl Vec3f {
    pub const ZERO: Vec3f = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn normalized(self) -> Vec3f {
        let n = self.norm();
        Vec3 {
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<S: Scalar> Add for Vec3<S> {
    type Output = Vec3<S>;
    fn add(self, o: Vec3<S>) -> Vec3<S> {
        Vec3 {
            x: self.x + o.x,
            y: self.y + o.y,
            z: self.z + o.z,
        }
    }
}

impl<S: Scalar> Sub for Vec3<S> {
    type Output = Vec3<S>;
    fn sub(self, o: Vec3<S>) -> Vec3<S> {
        Vec3 {
            x: self.x - o.x,
            y: self.y - o.y,
            z: self.z - o.z,
        }
    }
}

/// Row-major 3x3 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<S> {
    pub m: [[S; 3]; 3],
}

pub type Mat3f = Mat3<f64>;

impl<S: Scalar> Mat3<S> {
    pub fn mul_vec(&self, v: Vec3<S>) -> Vec3<S> {
        Vec3 {
            x: self.m[0][0] * v.x + self.m[0][1] * v.y + self.m[0][2] * v.z,
            y: self.m[1][0] * v.x + self.m[1][1] * v.y + self.m[1][2] * v.z,
            z: self.m[2][0] * v.x + self.m[2][1] * v.y + self.m[2][2] * v.z,
        }
    }

    pub fn mul_mat(&self, o: &Mat3<S>) -> Mat3<S> {
        let mut m = self.m;
        for (r, row) in m.iter_mut().enumerate() {
            for (c, e) in row.iter_mut().enumerate() {
                *e = self.m[r][0] * o.m[0][c] + self.m[r][1] * o.m[1][c] + self.m[r][2] * o.m[2][c];
            }
        }
        Mat3 { m }
    }

    pub fn transpose(&self) -> Mat3<S> {
        let m = &self.m;
        Mat3 {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    /// Row-major flattening `[m00, m01, m02, m10, ...]`.
    pub fn flatten(&self) -> [S; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn values(&self) -> Mat3f {
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = self.m[r][c].value();
            }
        }
        Mat3 { m: out }
    }
}

impl Mat3f {
    pub const IDENTITY: Mat3f = Mat3 {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }
}
