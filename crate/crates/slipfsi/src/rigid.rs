//! Rigid-body configuration and kinematics for N = 2 and N = 3.
//!
//! The body configuration is a mass-center position `q` together with a
//! rotation `Q` in SO(N). Angular velocity is a scalar in 2D and a 3-vector
//! in 3D; `hat`/`vee` convert between vectors and skew matrices.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};

/// Angular velocity: a scalar in 2D, a vector in 3D.
#[derive(Debug, Clone, PartialEq)]
pub enum AngularVelocity {
    Planar(f64),
    Spatial(Vector3<f64>),
}

impl AngularVelocity {
    pub fn dim(&self) -> usize {
        match self {
            AngularVelocity::Planar(_) => 2,
            AngularVelocity::Spatial(_) => 3,
        }
    }

    pub fn zero(dim: usize) -> Result<Self> {
        match dim {
            2 => Ok(AngularVelocity::Planar(0.0)),
            3 => Ok(AngularVelocity::Spatial(Vector3::zeros())),
            d => Err(Error::UnsupportedDimension(d)),
        }
    }

    /// Scalar value; valid only in 2D.
    pub fn planar(&self) -> f64 {
        match self {
            AngularVelocity::Planar(w) => *w,
            AngularVelocity::Spatial(_) => panic!("planar() on a 3D angular velocity"),
        }
    }

    pub fn norm(&self) -> f64 {
        match self {
            AngularVelocity::Planar(w) => w.abs(),
            AngularVelocity::Spatial(w) => w.norm(),
        }
    }
}

/// Skew matrix of an angular velocity: `hat(w) x = w × x` (3D) or
/// `w·[[0,-1],[1,0]]` (2D).
pub fn hat(omega: &AngularVelocity) -> DMatrix<f64> {
    match omega {
        AngularVelocity::Planar(w) => {
            DMatrix::from_row_slice(2, 2, &[0.0, -w, *w, 0.0])
        }
        AngularVelocity::Spatial(w) => DMatrix::from_row_slice(
            3,
            3,
            &[0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0],
        ),
    }
}

/// Inverse of `hat`. Rejects inputs whose skew defect exceeds 1e-8.
pub fn vee(p: &DMatrix<f64>) -> Result<AngularVelocity> {
    let n = p.nrows();
    if n != p.ncols() || (n != 2 && n != 3) {
        return Err(Error::UnsupportedDimension(n));
    }
    let defect = (p + p.transpose()).norm();
    if defect > 1e-8 {
        return Err(Error::InvalidInput(format!(
            "matrix is not skew-symmetric: |P + P^T| = {defect:.3e}"
        )));
    }
    if n == 2 {
        Ok(AngularVelocity::Planar(0.5 * (p[(1, 0)] - p[(0, 1)])))
    } else {
        Ok(AngularVelocity::Spatial(Vector3::new(
            0.5 * (p[(2, 1)] - p[(1, 2)]),
            0.5 * (p[(0, 2)] - p[(2, 0)]),
            0.5 * (p[(1, 0)] - p[(0, 1)]),
        )))
    }
}

/// Rigid-body configuration and velocity at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidState {
    pub t: f64,
    /// Mass-center position.
    pub q: DVector<f64>,
    /// Rotation matrix in SO(N).
    pub rot: DMatrix<f64>,
    /// Translational velocity.
    pub a: DVector<f64>,
    pub omega: AngularVelocity,
}

impl RigidState {
    pub fn new(q: DVector<f64>, a: DVector<f64>, omega: AngularVelocity) -> Result<Self> {
        let n = q.len();
        if n != 2 && n != 3 {
            return Err(Error::UnsupportedDimension(n));
        }
        if a.len() != n || omega.dim() != n {
            return Err(Error::ShapeMismatch(format!(
                "q, a, omega dimensions disagree: {}, {}, {}",
                n,
                a.len(),
                omega.dim()
            )));
        }
        Ok(RigidState {
            t: 0.0,
            rot: DMatrix::identity(n, n),
            q,
            a,
            omega,
        })
    }

    /// 2D state at rest position `q` with velocity `(a, omega)`.
    pub fn planar(q: Vector2<f64>, a: Vector2<f64>, omega: f64) -> Self {
        RigidState::new(
            DVector::from_column_slice(q.as_slice()),
            DVector::from_column_slice(a.as_slice()),
            AngularVelocity::Planar(omega),
        )
        .expect("planar state is always dimension 2")
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn q2(&self) -> Vector2<f64> {
        Vector2::new(self.q[0], self.q[1])
    }

    pub fn a2(&self) -> Vector2<f64> {
        Vector2::new(self.a[0], self.a[1])
    }

    pub fn rot2(&self) -> Matrix2<f64> {
        Matrix2::new(
            self.rot[(0, 0)],
            self.rot[(0, 1)],
            self.rot[(1, 0)],
            self.rot[(1, 1)],
        )
    }

    /// Frobenius distance of `Q Q^T` from the identity.
    pub fn orthogonality_defect(&self) -> f64 {
        let n = self.dim();
        (&self.rot * self.rot.transpose() - DMatrix::<f64>::identity(n, n)).norm()
    }
}

/// Rigid velocity field `u_s(x) = a + hat(omega)(x - q)`.
pub fn rigid_velocity(state: &RigidState, x: &DVector<f64>) -> DVector<f64> {
    &state.a + hat(&state.omega) * (x - &state.q)
}

/// 2D fast path of [`rigid_velocity`].
pub fn rigid_velocity_2d(q: Vector2<f64>, a: Vector2<f64>, omega: f64, x: Vector2<f64>) -> Vector2<f64> {
    let d = x - q;
    Vector2::new(a.x - omega * d.y, a.y + omega * d.x)
}

/// Nearest rotation to `m` (polar decomposition, det forced to +1).
pub fn project_rotation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.expect("svd with u");
    let vt = svd.v_t.expect("svd with v_t");
    let mut r = &u * &vt;
    if r.determinant() < 0.0 {
        // Flip the singular direction with the smallest singular value.
        let n = m.nrows();
        let mut u = u;
        for i in 0..n {
            u[(i, n - 1)] = -u[(i, n - 1)];
        }
        r = u * vt;
    }
    r
}

/// One step of `dq/dt = a`, `dQ/dt = hat(omega) Q` with a second-order
/// truncated exponential, followed by re-projection onto SO(N).
pub fn step_rigid(state: &RigidState, a: &DVector<f64>, omega: &AngularVelocity, dt: f64) -> Result<RigidState> {
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let n = state.dim();
    if a.len() != n || omega.dim() != n {
        return Err(Error::ShapeMismatch("velocity dimension mismatch".into()));
    }
    let p = hat(omega);
    let expo = DMatrix::<f64>::identity(n, n) + &p * dt + &p * &p * (0.5 * dt * dt);
    let rot = project_rotation(&(expo * &state.rot));
    Ok(RigidState {
        t: state.t + dt,
        q: &state.q + a * dt,
        rot,
        a: a.clone(),
        omega: omega.clone(),
    })
}

/// Moment of inertia: scalar in 2D, symmetric positive-definite matrix in 3D.
#[derive(Debug, Clone, PartialEq)]
pub enum Moment {
    Planar(f64),
    Spatial(Matrix3<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct InertiaTensor {
    pub mass: f64,
    pub moment: Moment,
}

impl InertiaTensor {
    /// Scalar moment; valid only in 2D.
    pub fn planar(&self) -> f64 {
        match &self.moment {
            Moment::Planar(j) => *j,
            Moment::Spatial(_) => panic!("planar() on a 3D inertia tensor"),
        }
    }
}

/// Inertia of a uniform disk (N = 2) or ball (N = 3).
pub fn body_inertia(radius: f64, mass: f64, dim: usize) -> Result<InertiaTensor> {
    if radius <= 0.0 || mass <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "radius and mass must be positive, got {radius}, {mass}"
        )));
    }
    let moment = match dim {
        2 => Moment::Planar(0.5 * mass * radius * radius),
        3 => Moment::Spatial(Matrix3::identity() * (0.4 * mass * radius * radius)),
        d => return Err(Error::UnsupportedDimension(d)),
    };
    Ok(InertiaTensor { mass, moment })
}

fn check_rotation(q: &DMatrix<f64>) -> Result<()> {
    let n = q.nrows();
    let defect = (q * q.transpose() - DMatrix::<f64>::identity(n, n)).norm();
    if defect > 1e-8 || q.determinant() < 0.0 {
        return Err(Error::InvalidInput(format!(
            "matrix is not a rotation: |QQ^T - I| = {defect:.3e}, det = {:.3e}",
            q.determinant()
        )));
    }
    Ok(())
}

/// Conjugated inertia `J1 = Q^T J2 Q`.
pub fn transform_inertia(j2: &InertiaTensor, q: &DMatrix<f64>) -> Result<InertiaTensor> {
    check_rotation(q)?;
    let moment = match &j2.moment {
        Moment::Planar(j) => Moment::Planar(*j),
        Moment::Spatial(j) => {
            if q.nrows() != 3 {
                return Err(Error::ShapeMismatch("3D inertia needs a 3x3 rotation".into()));
            }
            let qt = q.transpose();
            let m = &qt * DMatrix::from_iterator(3, 3, j.iter().cloned()) * q;
            let mut out = Matrix3::zeros();
            for i in 0..3 {
                for k in 0..3 {
                    out[(i, k)] = m[(i, k)];
                }
            }
            // symmetrize rounding noise
            Moment::Spatial(0.5 * (out + out.transpose()))
        }
    };
    Ok(InertiaTensor { mass: j2.mass, moment })
}

/// Relative angular velocity of two rotation paths: the vector associated with
/// `Q^T Q'` for `Q = Q2 Q1^T`, computed in closed form as
/// `Q^T P2 Q - P1` and returned as `Omega2 - omega1`.
pub fn relative_angular_velocity(
    q1: &DMatrix<f64>,
    p1: &DMatrix<f64>,
    q2: &DMatrix<f64>,
    p2: &DMatrix<f64>,
) -> Result<AngularVelocity> {
    check_rotation(q1)?;
    check_rotation(q2)?;
    let n = q1.nrows();
    if n == 2 {
        // 2D rotations commute: the relative spin is the scalar difference.
        let w1 = vee(p1)?.planar();
        let w2 = vee(p2)?.planar();
        return Ok(AngularVelocity::Planar(w2 - w1));
    }
    let q = q2 * q1.transpose();
    let p_omega2 = q.transpose() * p2 * &q;
    vee(&(p_omega2 - p1))
}
