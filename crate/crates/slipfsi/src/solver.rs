//! Explicit RK2 advection-diffusion with pressure projection on the
//! reference annulus.
//!
//! The momentum equation is the transformed system
//! `dU/dt = -N(U) - M(U) + mu L(U) - G(P)` closed by plain incompressibility
//! `div U = 0` (the map is volume preserving, so the transformed divergence
//! is the flat one). Navier slip is applied on the inner circle, no-slip on
//! the outer wall. The body and the flow map advance in lockstep with the
//! fluid stages.

use crate::coupling::{body_load, step_newton_euler, BodyForce};
use crate::error::{Error, Result};
use crate::grid::{divergence, AnnulusGrid, GridField};
use crate::rigid::{body_inertia, InertiaTensor, RigidState};
use crate::transform::{
    advance_flow_map, build_extension, op_conv, op_g, op_l, op_m, ExtensionField, TransformAtlas,
};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Physical and numerical parameters of a run.
#[derive(Debug, Clone)]
pub struct SolverParams {
    pub mu: f64,
    pub beta: f64,
    /// Relative residual target of the pressure solve.
    pub proj_tol: f64,
    /// Minimum admissible body-wall distance.
    pub delta0: f64,
    /// Hold the body frame fixed (velocities still drive the slip
    /// condition); the atlas stays at its current value.
    pub pinned: bool,
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0) {
            return Err(Error::InvalidInput(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.beta > 0.0) {
            return Err(Error::InvalidInput(format!("beta must be positive, got {}", self.beta)));
        }
        if !(self.proj_tol > 0.0) || !(self.delta0 > 0.0) {
            return Err(Error::InvalidInput("proj_tol and delta0 must be positive".into()));
        }
        Ok(())
    }
}

/// Optional momentum forcing in reference coordinates (used by the
/// manufactured-solution studies).
pub type Forcing<'a> = dyn Fn(Vector2<f64>, f64) -> Vector2<f64> + Sync + 'a;

/// Coupled state: reference-frame fluid fields, body, and flow-map atlas.
/// Invariant outside of `step` internals: boundary conditions and ghost
/// rows of `u` are current, and `div u` is at projection tolerance.
#[derive(Debug, Clone)]
pub struct FlowState {
    pub t: f64,
    pub u: GridField,
    pub p: GridField,
    pub body: RigidState,
    pub atlas: TransformAtlas,
}

/// Body velocity data expressed in reference directions:
/// `U_s(y) = Q^T a + omega y-perp`.
pub fn reference_body_velocity(body: &RigidState) -> (Vector2<f64>, f64) {
    (body.rot2().transpose() * body.a2(), body.omega.planar())
}

/// Initial velocity library. All entries are divergence-free and satisfy
/// the slip condition against a matching body state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialCondition {
    Rest,
    /// Azimuthal profile `amp * sin^2(pi (r - r_in)/(r_out - r_in))`;
    /// value and radial derivative vanish at both walls, so the slip and
    /// no-slip conditions hold exactly at t = 0.
    Swirl { amplitude: f64 },
}

/// Seeded solenoidal perturbation: stream-function bumps compactly
/// supported away from both boundaries.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationSpec {
    pub amplitude: f64,
    pub seed: u64,
    pub modes: usize,
}

fn stream_bump(r: f64, r_a: f64, r_b: f64) -> (f64, f64) {
    // value and derivative of sin^2(pi (r-r_a)/(r_b-r_a)) on [r_a, r_b]
    if r <= r_a || r >= r_b {
        return (0.0, 0.0);
    }
    let w = std::f64::consts::PI / (r_b - r_a);
    let s = (w * (r - r_a)).sin();
    let c = (w * (r - r_a)).cos();
    (s * s, 2.0 * w * s * c)
}

/// Analytic curl of the seeded stream function at a point.
pub fn perturbation_velocity(spec: &PerturbationSpec, grid: &AnnulusGrid, x: Vector2<f64>) -> Vector2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = grid.r_outer - grid.r_inner;
    let r_a = grid.r_inner + 0.25 * span;
    let r_b = grid.r_outer - 0.25 * span;
    let r = x.norm();
    if r < 1e-12 {
        return Vector2::zeros();
    }
    let theta = x.y.atan2(x.x);
    let (b, db) = stream_bump(r, r_a, r_b);
    let mut dpsi_dr = 0.0;
    let mut dpsi_dth = 0.0;
    for m in 1..=spec.modes {
        let ca: f64 = rng.gen_range(-1.0..1.0);
        let cb: f64 = rng.gen_range(-1.0..1.0);
        let mm = m as f64;
        let ang = ca * (mm * theta).cos() + cb * (mm * theta).sin();
        let dang = mm * (-ca * (mm * theta).sin() + cb * (mm * theta).cos());
        dpsi_dr += db * ang;
        dpsi_dth += b * dang;
    }
    dpsi_dr *= spec.amplitude;
    dpsi_dth *= spec.amplitude;
    // u = (d psi/dy, -d psi/dx) via the polar chain rule
    let cs = x.x / r;
    let sn = x.y / r;
    let px = cs * dpsi_dr - sn / r * dpsi_dth;
    let py = sn * dpsi_dr + cs / r * dpsi_dth;
    Vector2::new(py, -px)
}

/// Builds the initial coupled state: sampled initial velocity, optional
/// seeded perturbation, slip conditions, and one projection. The body must
/// start in the reference configuration (concentric, unrotated), where the
/// flow map is the identity.
pub fn initialize_state(
    grid: &AnnulusGrid,
    params: &SolverParams,
    init: InitialCondition,
    perturbation: Option<&PerturbationSpec>,
    body: RigidState,
) -> Result<FlowState> {
    params.validate()?;
    if body.dim() != 2 {
        return Err(Error::UnsupportedDimension(body.dim()));
    }
    if body.q2().norm() > 1e-12 || body.orthogonality_defect() > 1e-12
        || (body.rot2() - nalgebra::Matrix2::identity()).norm() > 1e-12
    {
        return Err(Error::InvalidInput(
            "initial body must be concentric and unrotated (reference configuration)".into(),
        ));
    }
    build_extension(&body, grid.r_inner, grid.r_outer, params.delta0)?;
    let span = grid.r_outer - grid.r_inner;
    let mut u = GridField::from_fn(grid, 2, |x, c| {
        let base = match init {
            InitialCondition::Rest => Vector2::zeros(),
            InitialCondition::Swirl { amplitude } => {
                let r = x.norm();
                let (b, _) = stream_bump(r, grid.r_inner, grid.r_inner + span);
                amplitude * b / r * Vector2::new(-x.y, x.x)
            }
        };
        let pert = perturbation
            .map(|p| perturbation_velocity(p, grid, x))
            .unwrap_or_else(Vector2::zeros);
        (base + pert)[c]
    });
    let atlas = TransformAtlas::identity(grid);
    let (a_ref, omega) = reference_body_velocity(&body);
    apply_slip_bc(&mut u, grid, a_ref, omega, params.mu, params.beta);
    let mut p = GridField::zeros(grid, 1);
    project(&mut u, &mut p, &atlas, 1.0, params)?;
    u.t = body.t;
    p.t = body.t;
    Ok(FlowState { t: body.t, u, p, body, atlas })
}

/// Enforces the boundary conditions in place.
///
/// Inner circle: normal component set strongly to the body's, tangential
/// component from the discrete Navier condition
/// `mu (2 D(u) n) . tau = beta (u_s - u) . tau` with a second-order one-sided
/// radial derivative (solving for the boundary value keeps the update stable for
/// arbitrarily large beta). Outer wall: homogeneous Dirichlet with odd
/// ghost reflection.
pub fn apply_slip_bc(
    u: &mut GridField,
    grid: &AnnulusGrid,
    a_ref: Vector2<f64>,
    omega: f64,
    mu: f64,
    beta: f64,
) {
    let n_r = grid.n_r;
    let n_t = grid.n_theta;
    let r_in = grid.r_inner;
    // pass 1: strong normal condition on the inner row
    let mut u_r1 = vec![0.0; n_t];
    for j in 0..n_t {
        let th = grid.theta(j);
        let (cs, sn) = (th.cos(), th.sin());
        let usr = a_ref.x * cs + a_ref.y * sn;
        let uth = -u.get(1, j, 0) * sn + u.get(1, j, 1) * cs;
        u.set(1, j, 0, usr * cs - uth * sn);
        u.set(1, j, 1, usr * sn + uth * cs);
        u_r1[j] = usr;
    }
    // pass 2: tangential Navier condition using d(u_r)/d theta of pass 1
    for j in 0..n_t {
        let th = grid.theta(j);
        let (cs, sn) = (th.cos(), th.sin());
        let jp = (j + 1) % n_t;
        let jm = (j + n_t - 1) % n_t;
        let dth_ur = (u_r1[jp] - u_r1[jm]) / (2.0 * grid.dtheta);
        let uth2 = -u.get(2, j, 0) * sn + u.get(2, j, 1) * cs;
        let uth3 = -u.get(3, j, 0) * sn + u.get(3, j, 1) * cs;
        let us_th = -a_ref.x * sn + a_ref.y * cs + omega * r_in;
        // second-order one-sided d(u_th)/dr = (-3 u1 + 4 u2 - u3)/(2 dr)
        let uth1 = (mu * ((4.0 * uth2 - uth3) / (2.0 * grid.dr) + dth_ur / r_in) + beta * us_th)
            / (beta + 1.5 * mu / grid.dr + mu / r_in);
        u.set(1, j, 0, u_r1[j] * cs - uth1 * sn);
        u.set(1, j, 1, u_r1[j] * sn + uth1 * cs);
    }
    // ghost rows: quadratic extrapolation inside the body, odd reflection
    // past the wall; boundary row n_r is exact no-slip
    for j in 0..n_t {
        for c in 0..2 {
            u.set(0, j, c, 3.0 * u.get(1, j, c) - 3.0 * u.get(2, j, c) + u.get(3, j, c));
            u.set(n_r, j, c, 0.0);
            u.set(n_r + 1, j, c, -u.get(n_r - 1, j, c));
        }
    }
}

/// Boundary-condition residuals: max |(u - u_s) . n| on the inner row and
/// max defect of the tangential Navier condition evaluated with centered
/// (ghost-based) derivatives. The tangential figure measures the true
/// discretization error of the one-sided enforcement, O(h^2).
pub fn slip_residuals(
    u: &GridField,
    grid: &AnnulusGrid,
    a_ref: Vector2<f64>,
    omega: f64,
    mu: f64,
    beta: f64,
) -> (f64, f64) {
    let n_t = grid.n_theta;
    let r_in = grid.r_inner;
    let polar = |i: usize, j: usize| -> (f64, f64) {
        let th = grid.theta(j);
        let (cs, sn) = (th.cos(), th.sin());
        (
            u.get(i, j, 0) * cs + u.get(i, j, 1) * sn,
            -u.get(i, j, 0) * sn + u.get(i, j, 1) * cs,
        )
    };
    let mut normal: f64 = 0.0;
    let mut tangential: f64 = 0.0;
    for j in 0..n_t {
        let th = grid.theta(j);
        let (cs, sn) = (th.cos(), th.sin());
        let (ur1, uth1) = polar(1, j);
        let usr = a_ref.x * cs + a_ref.y * sn;
        let us_th = -a_ref.x * sn + a_ref.y * cs + omega * r_in;
        normal = normal.max((ur1 - usr).abs());
        let (_, uth0) = polar(0, j);
        let (_, uth2) = polar(2, j);
        let jp = (j + 1) % n_t;
        let jm = (j + n_t - 1) % n_t;
        let (urp, _) = polar(1, jp);
        let (urm, _) = polar(1, jm);
        let duth_dr = (uth2 - uth0) / (2.0 * grid.dr);
        let dur_dth = (urp - urm) / (2.0 * grid.dtheta);
        let stress = mu * (duth_dr - uth1 / r_in + dur_dth / r_in);
        tangential = tangential.max((stress - beta * (uth1 - us_th)).abs());
    }
    (normal, tangential)
}

/// Gauge modes of the discrete projection operator: the wide centered
/// stencils of `div(G p)` annihilate the constant and, on even grids, the
/// three parity checkerboards, so all four are pure gauge and must be
/// kept out of the Krylov space.
fn gauge_modes(grid: &AnnulusGrid) -> Vec<Vec<f64>> {
    let n_t = grid.n_theta;
    let n = grid.n_r * n_t;
    let mut modes = vec![vec![1.0; n]];
    let mut radial = vec![0.0; n];
    for i in 1..=grid.n_r {
        for j in 0..n_t {
            radial[(i - 1) * n_t + j] = if i % 2 == 0 { 1.0 } else { -1.0 };
        }
    }
    modes.push(radial);
    if n_t % 2 == 0 {
        for flip_r in [false, true] {
            let mut m = vec![0.0; n];
            for i in 1..=grid.n_r {
                let si = if flip_r && i % 2 == 0 { -1.0 } else { 1.0 };
                for j in 0..n_t {
                    let sj = if j % 2 == 0 { 1.0 } else { -1.0 };
                    m[(i - 1) * n_t + j] = si * sj;
                }
            }
            modes.push(m);
        }
    }
    modes
}

fn weighted_dot(a: &[f64], b: &[f64], grid: &AnnulusGrid) -> f64 {
    let mut s = 0.0;
    for i in 1..=grid.n_r {
        let w = grid.cell_weight(i);
        for j in 0..grid.n_theta {
            let k = (i - 1) * grid.n_theta + j;
            s += w * a[k] * b[k];
        }
    }
    s
}

/// Weighted orthogonal projection of `v` onto the complement of the gauge
/// modes (small Gram solve; the modes are not mutually orthogonal under
/// the radial weights).
fn remove_gauge(v: &mut [f64], modes: &[Vec<f64>], grid: &AnnulusGrid) {
    let k = modes.len();
    let gram = nalgebra::DMatrix::from_fn(k, k, |a, b| weighted_dot(&modes[a], &modes[b], grid));
    let rhs = nalgebra::DVector::from_fn(k, |a, _| weighted_dot(&modes[a], v, grid));
    if let Some(c) = gram.lu().solve(&rhs) {
        for (a, m) in modes.iter().enumerate() {
            let ca = c[a];
            for (x, mx) in v.iter_mut().zip(m) {
                *x -= ca * mx;
            }
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Applies the pressure operator `div(G p)` to an interior-node vector,
/// with mirror ghosts realizing the homogeneous Neumann condition (the
/// metric is the identity at both walls).
fn set_pressure_ghosts(p: &mut GridField) {
    let n_r = p.n_r;
    for j in 0..p.n_theta {
        for c in 0..p.comps {
            p.set(0, j, c, p.get(2, j, c));
            p.set(n_r + 1, j, c, p.get(n_r - 1, j, c));
        }
    }
}

fn pressure_apply(v: &[f64], atlas: &TransformAtlas, modes: &[Vec<f64>]) -> Result<Vec<f64>> {
    let grid = &atlas.grid;
    let n_t = grid.n_theta;
    let mut p = GridField::zeros(grid, 1);
    for i in 1..=grid.n_r {
        for j in 0..n_t {
            p.set(i, j, 0, v[(i - 1) * n_t + j]);
        }
    }
    set_pressure_ghosts(&mut p);
    let gp = op_g(&p, atlas)?;
    let d = divergence(&gp, grid)?;
    let mut out = vec![0.0; grid.n_r * n_t];
    for i in 1..=grid.n_r {
        for j in 0..n_t {
            out[(i - 1) * n_t + j] = d.get(i, j, 0);
        }
    }
    remove_gauge(&mut out, modes, grid);
    Ok(out)
}

/// Iterative solve of `div(G p) = rhs` to residual
/// `tol * |rhs| + abs_tol`, gauge modes removed. BiCGStab with optional
/// warm start, restarting from the best iterate on breakdown or
/// stagnation; the operator is mildly nonsymmetric through the metric
/// coefficients.
pub fn pressure_solve(
    rhs: &GridField,
    atlas: &TransformAtlas,
    tol: f64,
    abs_tol: f64,
    warm: Option<&GridField>,
) -> Result<(GridField, usize)> {
    let grid = &atlas.grid;
    let n_t = grid.n_theta;
    let n = grid.n_r * n_t;
    let mut b = vec![0.0; n];
    for i in 1..=grid.n_r {
        for j in 0..n_t {
            b[(i - 1) * n_t + j] = rhs.get(i, j, 0);
        }
    }
    let modes = gauge_modes(grid);
    remove_gauge(&mut b, &modes, grid);
    let bnorm = norm2(&b);
    let mut result = GridField::zeros(grid, 1);
    result.t = rhs.t;
    let scale = grid.n_r as f64 * n_t as f64;
    if bnorm <= 1e-300 * scale {
        return Ok((result, 0));
    }

    let mut x = vec![0.0; n];
    if let Some(w) = warm {
        for i in 1..=grid.n_r {
            for j in 0..n_t {
                x[(i - 1) * n_t + j] = w.get(i, j, 0);
            }
        }
        remove_gauge(&mut x, &modes, grid);
    }
    let ax = pressure_apply(&x, atlas, &modes)?;
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    // absolute floor: a warm start against a near-zero rhs cannot reduce
    // the residual below the round-off of the initial defect
    let target = tol * bnorm + abs_tol + 1e-13 * (bnorm + norm2(&r));
    let mut best = x.clone();
    let mut best_res = norm2(&r);
    let max_iters = 20 * n.max(500);
    let mut it = 0;
    let finish = |x: &[f64], mut result: GridField, it: usize| {
        for i in 1..=grid.n_r {
            for j in 0..n_t {
                result.set(i, j, 0, x[(i - 1) * n_t + j]);
            }
        }
        set_pressure_ghosts(&mut result);
        (result, it)
    };
    'outer: while it < max_iters {
        let mut r_hat = r.clone();
        let mut rho = 1.0;
        let mut alpha = 1.0;
        let mut w = 1.0;
        let mut v = vec![0.0; n];
        let mut p = vec![0.0; n];
        loop {
            let res = norm2(&r);
            if res < best_res {
                best_res = res;
                best.copy_from_slice(&x);
            }
            if res <= target {
                return Ok(finish(&x, result, it));
            }
            if it >= max_iters {
                break 'outer;
            }
            let rho1 = dot(&r_hat, &r);
            // breakdown or runaway: restart from the best iterate
            if rho1.abs() < 1e-280 || res > 1e3 * best_res.max(target) {
                x.copy_from_slice(&best);
                let ax = pressure_apply(&x, atlas, &modes)?;
                r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
                it += 1;
                continue 'outer;
            }
            let beta = (rho1 / rho) * (alpha / w);
            rho = rho1;
            for k in 0..n {
                p[k] = r[k] + beta * (p[k] - w * v[k]);
            }
            v = pressure_apply(&p, atlas, &modes)?;
            let denom = dot(&r_hat, &v);
            if denom.abs() < 1e-280 {
                x.copy_from_slice(&best);
                let ax = pressure_apply(&x, atlas, &modes)?;
                r = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
                it += 1;
                continue 'outer;
            }
            alpha = rho / denom;
            let s: Vec<f64> = r.iter().zip(&v).map(|(ri, vi)| ri - alpha * vi).collect();
            if norm2(&s) <= target {
                for k in 0..n {
                    x[k] += alpha * p[k];
                }
                remove_gauge(&mut x, &modes, grid);
                return Ok(finish(&x, result, it + 1));
            }
            let t_vec = pressure_apply(&s, atlas, &modes)?;
            let tt = dot(&t_vec, &t_vec);
            if tt.abs() < 1e-300 {
                break 'outer;
            }
            w = dot(&t_vec, &s) / tt;
            for k in 0..n {
                x[k] += alpha * p[k] + w * s[k];
                r[k] = s[k] - w * t_vec[k];
            }
            remove_gauge(&mut x, &modes, grid);
            // long stagnation plateaus drift; refresh the shadow residual
            it += 1;
            if it % (2 * grid.n_r.max(64)) == 0 {
                r_hat = r.clone();
                rho = 1.0;
                alpha = 1.0;
                w = 1.0;
                v.iter_mut().for_each(|z| *z = 0.0);
                p.iter_mut().for_each(|z| *z = 0.0);
            }
        }
    }
    if best_res <= target {
        return Ok(finish(&best, result, max_iters));
    }
    Err(Error::SolverDiverged { residual: best_res / bnorm, iters: max_iters })
}

/// Chorin-type projection: removes the divergence of `u` through a
/// pressure solve. `p` doubles as warm start and output. The corrective
/// gradient uses the same mirror pressure ghosts as the solved operator,
/// so a second application moves `u` only by the solver residual; the
/// mirror ghosts also keep the normal velocity at both walls unchanged
/// wherever the metric is the identity.
pub fn project(
    u: &mut GridField,
    p: &mut GridField,
    atlas: &TransformAtlas,
    dt: f64,
    params: &SolverParams,
) -> Result<()> {
    let grid = &atlas.grid;
    let mut rhs = divergence(u, grid)?;
    rhs.scale(1.0 / dt);
    // a residual of eps leaves a post-correction divergence of dt * eps,
    // so proj_tol / dt is the largest residual meeting the postcondition
    let abs_tol = 0.5 * params.proj_tol / dt;
    let (pn, _iters) = pressure_solve(&rhs, atlas, params.proj_tol, abs_tol, Some(p))?;
    if std::env::var("SLIPFSI_DEBUG").is_ok() {
        eprintln!("project iters {_iters}");
    }
    let gp = op_g_with_mirror_ghosts(&pn, atlas)?;
    u.scaled_add(&gp, -dt);
    *p = pn;
    Ok(())
}

/// The exact discrete gradient whose divergence the pressure solve drove
/// to the rhs: `op_g` of a field carrying mirror ghosts.
fn op_g_with_mirror_ghosts(p: &GridField, atlas: &TransformAtlas) -> Result<GridField> {
    let mut q = p.clone();
    set_pressure_ghosts(&mut q);
    op_g(&q, atlas)
}

/// L2 norm of the discrete divergence over interior rows (the boundary
/// rows are owned by the boundary conditions).
pub fn divergence_norm(u: &GridField, grid: &AnnulusGrid) -> Result<f64> {
    let d = divergence(u, grid)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 2..grid.n_r {
        let w = grid.cell_weight(i);
        for j in 0..grid.n_theta {
            num += w * d.get(i, j, 0) * d.get(i, j, 0);
            den += w;
        }
    }
    Ok((num / den).sqrt())
}

fn thread_width() -> usize {
    std::env::var("SLIPFSI_THREADS")
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .unwrap_or(1)
        .max(1)
}

/// Momentum right-hand side `mu L(u) - N(u) - M(u) + f` at a stage.
/// With SLIPFSI_THREADS >= 2 the three operator evaluations run on scoped
/// threads; they are pure, so the result is identical to the serial path.
fn rhs_momentum(
    u: &GridField,
    atlas: &TransformAtlas,
    params: &SolverParams,
    forcing: Option<&Forcing>,
    t: f64,
) -> Result<GridField> {
    let (lu, conv, mu_term) = if thread_width() >= 2 {
        std::thread::scope(|s| {
            let h1 = s.spawn(|| op_l(u, atlas));
            let h2 = s.spawn(|| op_conv(u, atlas));
            let m = op_m(u, atlas);
            (h1.join().expect("op_l panicked"), h2.join().expect("op_conv panicked"), m)
        })
    } else {
        (op_l(u, atlas), op_conv(u, atlas), op_m(u, atlas))
    };
    let mut out = lu?;
    out.scale(params.mu);
    out.scaled_add(&conv?.0, -1.0);
    out.scaled_add(&mu_term?, -1.0);
    if let Some(f) = forcing {
        let grid = &atlas.grid;
        for i in 1..=grid.n_r {
            for j in 0..grid.n_theta {
                let fv = f(grid.node(i, j), t);
                out.set(i, j, 0, out.get(i, j, 0) + fv.x);
                out.set(i, j, 1, out.get(i, j, 1) + fv.y);
            }
        }
        out.fill_ghosts_extrapolate();
    }
    out.t = t;
    Ok(out)
}

fn max_speed(u: &GridField, grid: &AnnulusGrid) -> f64 {
    let mut m: f64 = 0.0;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            m = m.max(u.get(i, j, 0).hypot(u.get(i, j, 1)));
        }
    }
    m
}

/// Largest stable step: `min(0.4 h^2 / (mu kappa), 0.5 h / max speed)`
/// with `kappa` the worst metric eigenvalue and the speed including the
/// frame motion.
pub fn stable_dt(state: &FlowState, params: &SolverParams) -> f64 {
    let grid = &state.atlas.grid;
    let h = grid.h_min();
    let kappa = state.atlas.max_metric_eigenvalue();
    let diff = 0.4 * h * h / (params.mu * kappa);
    let speed = max_speed(&state.u, grid) + max_speed(&state.atlas.ydot, grid);
    if speed <= 1e-14 {
        diff
    } else {
        diff.min(0.5 * h / speed)
    }
}

fn inertia_for(grid: &AnnulusGrid) -> InertiaTensor {
    body_inertia(grid.r_inner, 1.0, 2).expect("2D inertia")
}

fn extension_for(
    body: &RigidState,
    a: Vector2<f64>,
    omega: f64,
    grid: &AnnulusGrid,
    params: &SolverParams,
) -> Result<ExtensionField> {
    let mut f = build_extension(body, grid.r_inner, grid.r_outer, params.delta0)?;
    f.a = a;
    f.omega = omega;
    Ok(f)
}

/// One coupled Heun step of the fluid-body-map triple.
pub fn step(state: &FlowState, params: &SolverParams, dt: f64, forcing: Option<&Forcing>) -> Result<FlowState> {
    params.validate()?;
    let limit = stable_dt(state, params);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let grid = state.atlas.grid.clone();
    let inertia = inertia_for(&grid);

    let k1 = rhs_momentum(&state.u, &state.atlas, params, forcing, state.t)?;
    let load_n = if params.pinned {
        BodyForce::zero()
    } else {
        body_load(&state.u, &state.p, &grid, &state.body.rot2(), params.mu)?
    };

    // predictor: frozen-coefficient advance of body and map
    let (body_pred, atlas_pred) = if params.pinned {
        let mut b = state.body.clone();
        b.t = state.t + dt;
        (b, state.atlas.clone())
    } else {
        let b = step_newton_euler(&state.body, &load_n, &inertia, dt)?;
        let ext = extension_for(&state.body, state.body.a2(), state.body.omega.planar(), &grid, params)?;
        (b, advance_flow_map(&state.atlas, &ext, dt)?)
    };
    let (a_ref_p, om_p) = reference_body_velocity(&body_pred);
    let mut u_pred = state.u.clone();
    u_pred.scaled_add(&k1, dt);
    apply_slip_bc(&mut u_pred, &grid, a_ref_p, om_p, params.mu, params.beta);
    let mut p_pred = state.p.clone();
    project(&mut u_pred, &mut p_pred, &atlas_pred, dt, params)?;
    u_pred.t = state.t + dt;

    let k2 = rhs_momentum(&u_pred, &atlas_pred, params, forcing, state.t + dt)?;
    let load_pred = if params.pinned {
        BodyForce::zero()
    } else {
        body_load(&u_pred, &p_pred, &grid, &body_pred.rot2(), params.mu)?
    };

    // corrector: stage-averaged load and map velocity
    let (body_new, atlas_new) = if params.pinned {
        let mut b = state.body.clone();
        b.t = state.t + dt;
        (b, state.atlas.clone())
    } else {
        let load_avg = BodyForce {
            force: 0.5 * (load_n.force + load_pred.force),
            torque: 0.5 * (load_n.torque + load_pred.torque),
        };
        let b = step_newton_euler(&state.body, &load_avg, &inertia, dt)?;
        let a_mid = 0.5 * (state.body.a2() + body_pred.a2());
        let w_mid = 0.5 * (state.body.omega.planar() + body_pred.omega.planar());
        let ext = extension_for(&state.body, a_mid, w_mid, &grid, params)?;
        // refuse steps that land inside the proximity floor
        build_extension(&b, grid.r_inner, grid.r_outer, params.delta0)?;
        (b, advance_flow_map(&state.atlas, &ext, dt)?)
    };
    let (a_ref, om) = reference_body_velocity(&body_new);
    let mut u_new = state.u.clone();
    u_new.scaled_add(&k1, 0.5 * dt);
    u_new.scaled_add(&k2, 0.5 * dt);
    apply_slip_bc(&mut u_new, &grid, a_ref, om, params.mu, params.beta);
    let mut p_new = p_pred;
    project(&mut u_new, &mut p_new, &atlas_new, dt, params)?;
    u_new.t = state.t + dt;
    p_new.t = state.t + dt;
    u_new.assert_finite()?;

    Ok(FlowState { t: state.t + dt, u: u_new, p: p_new, body: body_new, atlas: atlas_new })
}

/// Advances until `t_end`, clamping the last step; steps are capped at
/// half the stability limit (running exactly at the limit is marginal).
/// `observer` sees every accepted state (including the initial one).
pub fn run(
    state: FlowState,
    params: &SolverParams,
    dt: f64,
    t_end: f64,
    forcing: Option<&Forcing>,
    mut observer: impl FnMut(&FlowState) -> Result<()>,
) -> Result<FlowState> {
    let mut s = state;
    observer(&s)?;
    while s.t < t_end - 1e-14 {
        let step_dt = dt.min(t_end - s.t).min(0.5 * stable_dt(&s, params));
        s = step(&s, params, step_dt, forcing)?;
        observer(&s)?;
    }
    Ok(s)
}
