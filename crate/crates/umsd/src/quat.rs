//! Unit quaternion math in (w, x, y, z) component order.

use crate::error::{Error, Result};

/// Norm below which a quaternion cannot be safely normalised.
pub const DEGENERATE_NORM: f64 = 1e-9;

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Rotation channel orders supported by the BVH reader; rotations compose in
/// listed order, e.g. ZYX means `Rz * Ry * Rx`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum EulerOrder {
    Zyx,
    Zxy,
    Xyz,
}

impl EulerOrder {
    pub fn axes(self) -> [Axis; 3] {
        match self {
            EulerOrder::Zyx => [Axis::Z, Axis::Y, Axis::X],
            EulerOrder::Zxy => [Axis::Z, Axis::X, Axis::Y],
            EulerOrder::Xyz => [Axis::X, Axis::Y, Axis::Z],
        }
    }
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Quat { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Quat {
            w: a[0],
            x: a[1],
            y: a[2],
            z: a[3],
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Unit-norm, sign-canonicalised form: `w >= 0`, ties broken so the
    /// first nonzero of (x, y, z) is positive. Errors on near-zero input.
    pub fn normalized(self) -> Result<Quat> {
        let n = self.norm();
        if n < DEGENERATE_NORM {
            return Err(Error::DegeneratePose(format!(
                "quaternion norm {n:e} too small"
            )));
        }
        // Norms within round-off of 1 are left untouched so that
        // normalisation is idempotent at the bit level.
        let q = if (n - 1.0).abs() <= 16.0 * f64::EPSILON {
            self
        } else {
            Quat {
                w: self.w / n,
                x: self.x / n,
                y: self.y / n,
                z: self.z / n,
            }
        };
        Ok(q.canonical_sign())
    }

    fn canonical_sign(self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        if flip {
            Quat {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        } else {
            self
        }
    }

    pub fn conjugate(self) -> Quat {
        Quat {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Hamilton product `self * other`.
    pub fn mul(self, o: Quat) -> Quat {
        Quat {
            w: self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            x: self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            y: self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            z: self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        }
    }

    /// Rotates a 3-vector; assumes a unit quaternion.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        // q * (0, v) * q^-1 expanded via the double-cross identity.
        let u = [self.x, self.y, self.z];
        let uv = cross(u, v);
        let uuv = cross(u, uv);
        [
            v[0] + 2.0 * (self.w * uv[0] + uuv[0]),
            v[1] + 2.0 * (self.w * uv[1] + uuv[1]),
            v[2] + 2.0 * (self.w * uv[2] + uuv[2]),
        ]
    }

    pub fn from_axis_angle(axis: Axis, radians: f64) -> Quat {
        let (s, c) = (radians * 0.5).sin_cos();
        match axis {
            Axis::X => Quat::new(c, s, 0.0, 0.0),
            Axis::Y => Quat::new(c, 0.0, s, 0.0),
            Axis::Z => Quat::new(c, 0.0, 0.0, s),
        }
    }

    /// Composes rotations in the listed channel order; angles in radians.
    pub fn from_euler(order: EulerOrder, angles: [f64; 3]) -> Quat {
        let axes = order.axes();
        let mut q = Quat::IDENTITY;
        for (axis, angle) in axes.into_iter().zip(angles) {
            q = q.mul(Quat::from_axis_angle(axis, angle));
        }
        q
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Spherical linear interpolation between unit quaternions, taking the
    /// shorter arc. Falls back to normalised lerp when nearly parallel.
    pub fn slerp(self, other: Quat, t: f64) -> Result<Quat> {
        let mut b = other;
        let mut d = self.dot(other);
        if d < 0.0 {
            b = Quat {
                w: -b.w,
                x: -b.x,
                y: -b.y,
                z: -b.z,
            };
            d = -d;
        }
        if d > 0.9995 {
            let lerp = Quat {
                w: self.w + t * (b.w - self.w),
                x: self.x + t * (b.x - self.x),
                y: self.y + t * (b.y - self.y),
                z: self.z + t * (b.z - self.z),
            };
            return lerp.normalized();
        }
        let theta = d.clamp(-1.0, 1.0).acos();
        let sin_theta = theta.sin();
        let wa = ((1.0 - t) * theta).sin() / sin_theta;
        let wb = (t * theta).sin() / sin_theta;
        Ok(Quat {
            w: wa * self.w + wb * b.w,
            x: wa * self.x + wb * b.x,
            y: wa * self.y + wb * b.y,
            z: wa * self.z + wb * b.z,
        })
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}
