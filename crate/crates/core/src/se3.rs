//! SE(3) rigid transforms, twist parameterization and the Jacobian
//! machinery used by the registration and smoothing solvers.
//!
//! Conventions, fixed once for the whole crate:
//! - a [`Pose`] maps body-frame coordinates to world-frame coordinates,
//!   `compose(a, b)` is the homogeneous matrix product `a * b`;
//! - twists are ordered `[rho, phi]` (translation first);
//! - solver increments are applied right-multiplicatively,
//!   `x <- x * exp(delta)`;
//! - angles in radians, distances in meters.

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

/// Rotation angle (radians) below which Taylor expansions replace the
/// closed trigonometric forms.
const SMALL_ANGLE: f64 = 1e-6;

/// Margin around pi inside which the logarithm is treated as degenerate.
const PI_MARGIN: f64 = 1e-9;

/// Orthonormality drift beyond which `compose` re-orthonormalizes.
const ORTHO_DRIFT: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum Se3Error {
    /// Rotation angle is at (or numerically indistinguishable from) pi,
    /// where the logarithm axis is not unique.
    #[error("degenerate rotation: angle {angle} rad is too close to pi")]
    DegenerateRotation { angle: f64 },
}

/// Minimal 6-dof parameterization of an SE(3) element: `rho` is the
/// translational part, `phi` the rotational part (axis * angle).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rho: Vector3::zeros(),
            phi: Vector3::zeros(),
        }
    }

    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Twist { rho, phi }
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Twist {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn as_vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        )
    }

    /// Euclidean norm of the stacked 6-vector.
    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }

    pub fn scaled(&self, s: f64) -> Self {
        Twist {
            rho: self.rho * s,
            phi: self.phi * s,
        }
    }
}

/// Rigid transform in SE(3), stored as a rotation matrix plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Pose::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Build from parts. The rotation is trusted to be orthonormal;
    /// callers with questionable input should follow up with
    /// [`Pose::orthonormalized`].
    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Rotation angle in [0, pi].
    pub fn rotation_angle(&self) -> f64 {
        let cos = ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        cos.acos()
    }

    /// Composition `self * other`: applies `other` first when acting on
    /// points expressed in `other`'s source frame.
    pub fn compose(&self, other: &Pose) -> Pose {
        let mut rotation = self.rotation * other.rotation;
        // Keep long composition chains orthonormal.
        let drift = (rotation * rotation.transpose() - Matrix3::identity()).norm();
        if drift > ORTHO_DRIFT {
            rotation = polar_orthonormalize(&rotation);
        }
        Pose {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Applies the transform to a point: `R * q + t`.
    pub fn transform_point(&self, q: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * q + self.translation
    }

    /// Re-projects the rotation onto SO(3) via polar decomposition.
    pub fn orthonormalized(&self) -> Pose {
        Pose {
            rotation: polar_orthonormalize(&self.rotation),
            translation: self.translation,
        }
    }

    /// SE(3) exponential map.
    pub fn exp(xi: &Twist) -> Pose {
        let rotation = so3_exp(&xi.phi);
        let v = so3_left_jacobian(&xi.phi);
        Pose {
            rotation,
            translation: v * xi.rho,
        }
    }

    /// SE(3) logarithm. Fails when the rotation angle is numerically at
    /// pi, where the axis is not unique.
    pub fn log(&self) -> Result<Twist, Se3Error> {
        let angle = self.rotation_angle();
        if angle >= std::f64::consts::PI - PI_MARGIN {
            return Err(Se3Error::DegenerateRotation { angle });
        }
        Ok(self.log_unchecked())
    }

    /// Total variant of [`Pose::log`]: at angle pi the axis sign is picked
    /// arbitrarily but the result still satisfies `exp(log(p)) == p`.
    pub(crate) fn log_unchecked(&self) -> Twist {
        let phi = so3_log(&self.rotation);
        let v_inv = so3_left_jacobian_inv(&phi);
        Twist {
            rho: v_inv * self.translation,
            phi,
        }
    }

    /// Fractional transform `exp(s * log(self))`; `interpolate(p, 0) = I`
    /// and `interpolate(p, 1) = p`. Also valid outside [0, 1], which the
    /// deskew step relies on.
    pub fn interpolate(&self, s: f64) -> Pose {
        Pose::exp(&self.log_unchecked().scaled(s))
    }

    /// Unit quaternion of the rotation part (Hamilton convention).
    pub fn rotation_quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn from_quaternion_translation(q: &UnitQuaternion<f64>, t: Vector3<f64>) -> Pose {
        Pose {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: t,
        }
    }
}

/// Skew-symmetric matrix of `v`, i.e. `hat(v) * w = v x w`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// SO(3) exponential (Rodrigues).
pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let (a, b) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let theta = theta2.sqrt();
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + a * k + b * (k * k)
}

/// SO(3) logarithm via the unit quaternion, stable over the whole angle
/// range including the neighborhood of pi.
pub fn so3_log(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rotation));
    let q = q.quaternion();
    // Canonicalize to the w >= 0 hemisphere so the angle lands in [0, pi].
    let (w, v) = if q.w < 0.0 {
        (-q.w, -q.imag())
    } else {
        (q.w, q.imag())
    };
    let v_norm = v.norm();
    if v_norm < SMALL_ANGLE {
        // theta ~ 2 * |v| / w; series of 2*atan2(|v|, w)/|v|
        let scale = 2.0 / w * (1.0 - v_norm * v_norm / (3.0 * w * w));
        return v * scale;
    }
    let angle = 2.0 * v_norm.atan2(w);
    v * (angle / v_norm)
}

/// Left Jacobian of SO(3); also the `V` matrix of the SE(3) exponential.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let (b, c) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + b * k + c * (k * k)
}

/// Inverse of the SO(3) left Jacobian. Well defined for angles below 2*pi;
/// the half-angle cotangent form stays stable through pi.
pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let k = hat(phi);
    let c = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        let half = 0.5 * theta;
        1.0 / theta2 - (half.cos() / half.sin()) / (2.0 * theta)
    };
    Matrix3::identity() - 0.5 * k + c * (k * k)
}

/// Adjoint of an SE(3) element for the `[rho, phi]` twist ordering:
/// `exp(Adj(T) xi) = T exp(xi) T^{-1}`.
pub fn adjoint(pose: &Pose) -> Matrix6<f64> {
    let r = pose.rotation();
    let tk = hat(pose.translation());
    let mut adj = Matrix6::zeros();
    adj.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    adj.fixed_view_mut::<3, 3>(0, 3).copy_from(&(tk * r));
    adj.fixed_view_mut::<3, 3>(3, 3).copy_from(r);
    adj
}

/// The Q block of the SE(3) left Jacobian (Barfoot's closed form).
fn se3_q_matrix(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let rk = hat(rho);
    let pk = hat(phi);
    let theta2 = phi.norm_squared();
    let (c1, c2, c3) = if theta2 < SMALL_ANGLE * SMALL_ANGLE {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
            -1.0 / 120.0 + theta2 / 5040.0,
        )
    } else {
        let theta = theta2.sqrt();
        let theta4 = theta2 * theta2;
        let (s, c) = (theta.sin(), theta.cos());
        (
            (theta - s) / (theta2 * theta),
            (1.0 - theta2 / 2.0 - c) / theta4,
            ((theta - s) - theta2 * theta / 6.0) / (theta4 * theta),
        )
    };
    let pk_rk = pk * rk;
    let rk_pk = rk * pk;
    let pk_rk_pk = pk_rk * pk;
    0.5 * rk + c1 * (pk_rk + rk_pk + pk_rk_pk)
        - c2 * (pk * pk_rk + rk_pk * pk - 3.0 * pk_rk_pk)
        - 0.5 * (c2 - 3.0 * c3) * (pk_rk_pk * pk + pk * pk_rk_pk)
}

/// Inverse left Jacobian of SE(3) at `xi`.
pub fn se3_left_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    let jl_inv = so3_left_jacobian_inv(&xi.phi);
    let q = se3_q_matrix(&xi.rho, &xi.phi);
    let top_right = -jl_inv * q * jl_inv;
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl_inv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&top_right);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jl_inv);
    out
}

/// Inverse right Jacobian of SE(3): `d/d delta log(exp(xi) exp(delta))`
/// evaluated at `delta = 0`.
pub fn se3_right_jacobian_inv(xi: &Twist) -> Matrix6<f64> {
    se3_left_jacobian_inv(&xi.scaled(-1.0))
}

fn polar_orthonormalize(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd of 3x3 always yields u");
    let vt = svd.v_t.expect("svd of 3x3 always yields v_t");
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        // Flip the weakest singular direction to stay in SO(3).
        let mut u_fixed = u;
        u_fixed.column_mut(2).neg_mut();
        r = u_fixed * vt;
    }
    r
}
