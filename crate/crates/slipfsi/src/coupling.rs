//! Fluid force and torque on the body, and the rigid-body momentum update.
//!
//! In the rigid neighborhood of the body the change of variables is the
//! rigid motion itself, so the physical traction at `x = X(y)` equals the
//! rotated reference traction: `T_x n_x = Q (-P I + 2 mu D_y(U)) N`. Force
//! and torque reduce to quadrature of reference-grid data on the inner
//! circle.

use crate::error::{Error, Result};
use crate::grid::{boundary_quadrature, cartesian_gradient, AnnulusGrid, BoundaryNode, BoundarySide, GridField};
use crate::rigid::{project_rotation, InertiaTensor, Moment, RigidState};
use nalgebra::{Matrix2, Vector2};

/// Net hydrodynamic load on the body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyForce {
    pub force: Vector2<f64>,
    /// Torque about the body center (scalar in 2D).
    pub torque: f64,
}

impl BodyForce {
    pub fn zero() -> Self {
        BodyForce { force: Vector2::zeros(), torque: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.force.x.is_finite() && self.force.y.is_finite() && self.torque.is_finite()
    }
}

fn cross2(a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    a.x * b.y - a.y * b.x
}

/// Reference-frame traction `(-P I + 2 mu D(U)) N` at the inner-boundary
/// nodes, with `N` the quadrature normal (pointing into the body).
/// Ghost rows of `u` and `p` must be current.
pub fn boundary_traction(
    u: &GridField,
    p: &GridField,
    grid: &AnnulusGrid,
    mu: f64,
) -> Result<Vec<Vector2<f64>>> {
    if u.comps != 2 || p.comps != 1 {
        return Err(Error::ShapeMismatch("traction expects velocity (2) and pressure (1)".into()));
    }
    let (ux, uy) = cartesian_gradient(u, grid);
    let nodes = boundary_quadrature(grid, BoundarySide::Inner);
    let mut out = Vec::with_capacity(nodes.len());
    for bn in &nodes {
        let j = bn.index_j;
        let grad = Matrix2::new(ux.get(1, j, 0), uy.get(1, j, 0), ux.get(1, j, 1), uy.get(1, j, 1));
        let d = 0.5 * (grad + grad.transpose());
        let stress = -p.get(1, j, 0) * Matrix2::identity() + 2.0 * mu * d;
        out.push(stress * bn.normal);
    }
    Ok(out)
}

/// Quadrature of the traction into net load:
/// `F = -sum w T N`, `torque = -sum w (x - q) x (T N)` with `N` interior.
/// `rot` maps reference to physical directions; the torque is
/// frame-invariant about the body center.
pub fn surface_force(
    traction: &[Vector2<f64>],
    nodes: &[BoundaryNode],
    rot: &Matrix2<f64>,
) -> Result<BodyForce> {
    if traction.len() != nodes.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} traction samples vs {} quadrature nodes",
            traction.len(),
            nodes.len()
        )));
    }
    let mut force_ref = Vector2::zeros();
    let mut torque = 0.0;
    for (tn, bn) in traction.iter().zip(nodes) {
        force_ref -= bn.weight * tn;
        torque -= bn.weight * cross2(bn.point, *tn);
    }
    Ok(BodyForce { force: rot * force_ref, torque })
}

/// Convenience wrapper: traction quadrature directly from reference fields.
pub fn body_load(
    u: &GridField,
    p: &GridField,
    grid: &AnnulusGrid,
    rot: &Matrix2<f64>,
    mu: f64,
) -> Result<BodyForce> {
    let tr = boundary_traction(u, p, grid, mu)?;
    let nodes = boundary_quadrature(grid, BoundarySide::Inner);
    surface_force(&tr, &nodes, rot)
}

/// Advances the body by one step under a constant load: velocities by
/// forward Euler, position by the velocity midpoint (exact for constant
/// force), rotation by a second-order exponential with reprojection.
pub fn step_newton_euler(
    state: &RigidState,
    load: &BodyForce,
    inertia: &InertiaTensor,
    dt: f64,
) -> Result<RigidState> {
    if state.dim() != 2 {
        return Err(Error::UnsupportedDimension(state.dim()));
    }
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let j = match inertia.moment {
        Moment::Planar(j) => j,
        Moment::Spatial(_) => return Err(Error::UnsupportedDimension(3)),
    };
    let a0 = state.a2();
    let w0 = state.omega.planar();
    let a1 = a0 + dt * load.force / inertia.mass;
    let w1 = w0 + dt * load.torque / j;
    let q1 = state.q2() + 0.5 * dt * (a0 + a1);
    let wm = 0.5 * (w0 + w1);
    let p = Matrix2::new(0.0, -wm, wm, 0.0);
    let rot_step = Matrix2::identity() + dt * p + 0.5 * dt * dt * p * p;
    let raw = rot_step * state.rot2();
    let rot1 = project_rotation(&nalgebra::DMatrix::from_fn(2, 2, |i, j| raw[(i, j)]));
    let mut out = RigidState::planar(q1, a1, w1);
    out.t = state.t + dt;
    out.rot = rot1;
    Ok(out)
}

/// Momentum update in the relative frame: `dA/dt = -omega_tilde x A + F/m`,
/// `J dOmega/dt = tau` (the rotating-frame term vanishes on the scalar
/// angular momentum in 2D). One Heun step; `load` is expressed in the
/// relative frame.
pub fn step_transformed_newton_euler(
    a2: Vector2<f64>,
    omega2: f64,
    omega_tilde: f64,
    load: &BodyForce,
    inertia: &InertiaTensor,
    dt: f64,
) -> Result<(Vector2<f64>, f64)> {
    let j = match inertia.moment {
        Moment::Planar(j) => j,
        Moment::Spatial(_) => return Err(Error::UnsupportedDimension(3)),
    };
    let perp = |v: Vector2<f64>| Vector2::new(-v.y, v.x);
    let w1 = omega2 + dt * load.torque / j;
    let k1 = load.force / inertia.mass - omega_tilde * perp(a2);
    let a_pred = a2 + dt * k1;
    let k2 = load.force / inertia.mass - omega_tilde * perp(a_pred);
    Ok((a2 + 0.5 * dt * (k1 + k2), w1))
}
