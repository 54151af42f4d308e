//! Rotation representations and the rotation distance metric.
//!
//! Joint rotations enter as axis-angle vectors (elements of so(3)) and are
//! compared as unit quaternions. The distance between two rotations is
//! `1 - |q1 . q2|`, which lies in `[0, 1]`, is symmetric, and does not depend
//! on the quaternion hemisphere because antipodal quaternions encode the same
//! rotation.
//!
//! Quaternions are kept on a canonical hemisphere (`w >= 0`; if `w == 0` the
//! first nonzero vector component is `>= 0`) so that equal rotations serialize
//! to equal bytes.

use crate::error::{Error, Result};

/// Axis-angle norms below this are treated as the identity rotation.
pub const IDENTITY_ANGLE_EPS: f64 = 1e-12;

/// Two stored key rotations closer than this are considered duplicates.
pub const DISTINCT_ROTATION_EPS: f64 = 1e-9;

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// A rotation as a 3-vector in so(3): direction is the rotation axis, norm is
/// the rotation angle in radians. The zero vector is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxisAngle([f64; 3]);

impl AxisAngle {
    pub const IDENTITY: AxisAngle = AxisAngle([0.0; 3]);

    pub fn new(x: f64, y: f64, z: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::non_finite("axis-angle components"));
        }
        Ok(Self([x, y, z]))
    }

    pub fn from_array(v: [f64; 3]) -> Result<Self> {
        Self::new(v[0], v[1], v[2])
    }

    /// Caller guarantees finiteness.
    pub(crate) fn from_array_unchecked(v: [f64; 3]) -> Self {
        debug_assert!(v.iter().all(|c| c.is_finite()));
        Self(v)
    }

    pub fn components(&self) -> [f64; 3] {
        self.0
    }

    /// Rotation angle in radians (the vector norm), before any wrapping.
    pub fn angle(&self) -> f64 {
        let [x, y, z] = self.0;
        (x * x + y * y + z * z).sqrt()
    }

    /// Wraps the rotation angle into `[0, 2π)` while keeping the axis.
    /// Mocap exports occasionally exceed one full turn.
    pub fn canonicalized(&self) -> AxisAngle {
        let theta = self.angle();
        if theta < TAU {
            return *self;
        }
        let wrapped = theta % TAU;
        let s = wrapped / theta;
        Self([self.0[0] * s, self.0[1] * s, self.0[2] * s])
    }

    pub fn to_quat(&self) -> UnitQuat {
        axis_angle_to_quat(self)
    }
}

/// A unit quaternion `(w, x, y, z)` on the canonical hemisphere.
///
/// Values produced by [`axis_angle_to_quat`] and [`UnitQuat::new`] are
/// renormalized, so their norm is within 1e-9 of one. Keys loaded from a
/// vocabulary file keep their stored f32-precision components verbatim (norm
/// within ~2e-7); [`rotation_distance`] tolerates both.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuat {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuat {
    pub const IDENTITY: UnitQuat = UnitQuat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds from raw components, renormalizing and canonicalizing.
    /// Rejects non-finite input and norms farther than 1e-6 from one
    /// (anything that far off is a caller bug, not rounding).
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::non_finite("quaternion components"));
        }
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "quaternion norm {norm} deviates from 1 by more than 1e-6"
            )));
        }
        Ok(Self {
            w: w / norm,
            x: x / norm,
            y: y / norm,
            z: z / norm,
        }
        .canonical())
    }

    /// Accepts components exactly as stored in a vocabulary file: canonical
    /// hemisphere is required, norm only loosely checked, and no
    /// renormalization is applied so round-trips stay bit-identical.
    pub(crate) fn from_stored(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if !(w.is_finite() && x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(Error::non_finite("stored quaternion components"));
        }
        let norm = (w * w + x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!(
                "stored quaternion norm {norm} is not unit"
            )));
        }
        let q = Self { w, x, y, z };
        if !q.is_canonical() {
            return Err(Error::invalid(
                "stored quaternion is not on the canonical hemisphere".to_string(),
            ));
        }
        Ok(q)
    }

    pub fn components(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn dot(&self, other: &UnitQuat) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Inverse of [`axis_angle_to_quat`]: recovers the axis-angle vector with
    /// angle in `[0, π]` (canonical hemisphere pins the short representation).
    /// The identity maps to the zero vector.
    pub fn to_axis_angle(&self) -> AxisAngle {
        let vnorm = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        if vnorm < IDENTITY_ANGLE_EPS {
            return AxisAngle::IDENTITY;
        }
        let angle = 2.0 * vnorm.atan2(self.w);
        let k = angle / vnorm;
        AxisAngle([self.x * k, self.y * k, self.z * k])
    }

    /// Rounds every component to f32 precision and re-canonicalizes, yielding
    /// the exact value a vocabulary file stores. Idempotent.
    pub fn quantized_f32(&self) -> UnitQuat {
        Self {
            w: self.w as f32 as f64,
            x: self.x as f32 as f64,
            y: self.y as f32 as f64,
            z: self.z as f32 as f64,
        }
        .canonical()
    }

    fn is_canonical(&self) -> bool {
        for c in self.components() {
            if c > 0.0 {
                return true;
            }
            if c < 0.0 {
                return false;
            }
            // exact zero (either sign): look at the next component
        }
        false
    }

    /// Flips to the `w >= 0` hemisphere and normalizes negative zeros so that
    /// equal rotations have equal bit patterns.
    fn canonical(self) -> Self {
        let flip = !self.is_canonical();
        let fix = |v: f64| {
            let v = if flip { -v } else { v };
            if v == 0.0 {
                0.0
            } else {
                v
            }
        };
        Self {
            w: fix(self.w),
            x: fix(self.x),
            y: fix(self.y),
            z: fix(self.z),
        }
    }
}

/// Converts an axis-angle vector to the canonical unit quaternion
/// `(cos(θ/2), sin(θ/2)·axis)`. Angles at or above one turn are wrapped
/// first; norms below [`IDENTITY_ANGLE_EPS`] give the identity.
pub fn axis_angle_to_quat(aa: &AxisAngle) -> UnitQuat {
    let c = aa.canonicalized();
    let theta = c.angle();
    if theta < IDENTITY_ANGLE_EPS {
        return UnitQuat::IDENTITY;
    }
    let (s, w) = (0.5 * theta).sin_cos();
    let k = s / theta;
    let [vx, vy, vz] = c.components();
    let (x, y, z) = (k * vx, k * vy, k * vz);
    let norm = (w * w + x * x + y * y + z * z).sqrt();
    UnitQuat {
        w: w / norm,
        x: x / norm,
        y: y / norm,
        z: z / norm,
    }
    .canonical()
}

/// Distance between two rotations: `1 - |a . b|`, in `[0, 1]`.
///
/// Symmetric, zero for equal rotations, and one for rotations a half turn
/// apart. The absolute dot product makes it independent of which hemisphere
/// either quaternion was stored on. The dot is normalized by the product of
/// norms, which is a no-op for exactly unit quaternions but keeps
/// self-distance at zero for keys carrying f32 storage precision.
pub fn rotation_distance(a: &UnitQuat, b: &UnitQuat) -> f64 {
    let dot = a.dot(b).abs();
    let norms = (a.dot(a) * b.dot(b)).sqrt();
    (1.0 - dot / norms).max(0.0)
}
