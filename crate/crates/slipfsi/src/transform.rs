//! Moving-domain change of variables on the fixed reference annulus.
//!
//! A solenoidal extension field carries the body's rigid motion into the
//! fluid and vanishes at the container wall; its flow map sends the
//! reference annulus onto the current fluid domain while preserving volume.
//! The atlas stores the map, its Jacobians, metric tensors and Christoffel
//! symbols sampled per grid node, plus the time derivatives entering the
//! transformed advection operator.

use crate::error::{Error, Result};
use crate::grid::{cartesian_gradient, divergence, interpolate, laplacian, AnnulusGrid, GridField};
use crate::rigid::{rigid_velocity_2d, RigidState};
use nalgebra::{Matrix2, Vector2};

/// Solenoidal velocity field equal to the rigid field near the body and
/// zero near the container wall, built as the curl of a cutoff stream
/// function (exactly divergence-free).
#[derive(Debug, Clone)]
pub struct ExtensionField {
    pub q: Vector2<f64>,
    pub a: Vector2<f64>,
    pub omega: f64,
    pub r_body: f64,
    pub r_wall: f64,
    pub delta0: f64,
}

/// C^2 quintic step: 0 at 0, 1 at 1, with vanishing first and second
/// derivatives at both ends.
fn smootherstep(x: f64) -> (f64, f64) {
    // value and derivative
    let v = x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
    let d = 30.0 * x * x * (1.0 - x) * (1.0 - x);
    (v, d)
}

impl ExtensionField {
    /// Rigid stream function generating `a + omega x (x - q)` through
    /// u = (d psi/dy, -d psi/dx).
    fn psi_rigid(&self, x: Vector2<f64>) -> (f64, Vector2<f64>) {
        let d = x - self.q;
        let psi = self.a.x * d.y - self.a.y * d.x - 0.5 * self.omega * d.norm_squared();
        let grad = Vector2::new(-self.a.y - self.omega * d.x, self.a.x - self.omega * d.y);
        (psi, grad)
    }

    /// Cutoff coordinate: <= 0 within delta0/4 of the body, >= 1 within
    /// delta0/4 of the wall.
    fn xi(&self, x: Vector2<f64>) -> (f64, Vector2<f64>) {
        let dq = x - self.q;
        let rq = dq.norm();
        let r0 = x.norm();
        let d_body = rq - self.r_body;
        let d_wall = self.r_wall - r0;
        let num = d_body - 0.25 * self.delta0;
        let den = d_body + d_wall - 0.5 * self.delta0;
        let xi = num / den;
        if xi <= 0.0 || xi >= 1.0 || rq < 1e-12 || r0 < 1e-12 {
            return (xi, Vector2::zeros());
        }
        let e_q = dq / rq;
        let e_0 = x / r0;
        // grad(num) = e_q, grad(den) = e_q - e_0
        let grad = (e_q * den - num * (e_q - e_0)) / (den * den);
        (xi, grad)
    }

    /// Velocity Lambda(x) = curl(chi * psi).
    pub fn velocity(&self, x: Vector2<f64>) -> Vector2<f64> {
        let (xi, gxi) = self.xi(x);
        if xi <= 0.0 {
            return rigid_velocity_2d(self.q, self.a, self.omega, x);
        }
        if xi >= 1.0 {
            return Vector2::zeros();
        }
        let (s, ds) = smootherstep(xi);
        let chi = 1.0 - s;
        let dchi = -ds;
        let (psi, gpsi) = self.psi_rigid(x);
        let g = chi * gpsi + (dchi * psi) * gxi;
        Vector2::new(g.y, -g.x)
    }
}

/// Builds the extension field, rejecting configurations where the body is
/// closer than `delta0` to the container wall.
pub fn build_extension(state: &RigidState, r_body: f64, r_wall: f64, delta0: f64) -> Result<ExtensionField> {
    let q = state.q2();
    let gap = r_wall - q.norm() - r_body;
    if gap <= delta0 {
        return Err(Error::Proximity { gap, delta0 });
    }
    Ok(ExtensionField {
        q,
        a: state.a2(),
        omega: state.omega.planar(),
        r_body,
        r_wall,
        delta0,
    })
}

/// Analytic map specification used to build exact atlases.
pub struct AnalyticMap<'a> {
    pub x: Box<dyn Fn(Vector2<f64>) -> Vector2<f64> + 'a>,
    pub jac: Box<dyn Fn(Vector2<f64>) -> Matrix2<f64> + 'a>,
    pub xdot: Box<dyn Fn(Vector2<f64>) -> Vector2<f64> + 'a>,
}

impl<'a> AnalyticMap<'a> {
    pub fn identity() -> Self {
        AnalyticMap {
            x: Box::new(|y| y),
            jac: Box::new(|_| Matrix2::identity()),
            xdot: Box::new(|_| Vector2::zeros()),
        }
    }

    /// Rigid map `X(y) = q + R y` (reference body centered at the origin)
    /// with velocity data `(a, omega)`.
    pub fn rigid(q: Vector2<f64>, rot: Matrix2<f64>, a: Vector2<f64>, omega: f64) -> Self {
        AnalyticMap {
            x: Box::new(move |y| q + rot * y),
            jac: Box::new(move |_| rot),
            xdot: Box::new(move |y| {
                let x = q + rot * y;
                rigid_velocity_2d(q, a, omega, x)
            }),
        }
    }
}

/// Per-node geometric data of the flow map on the reference grid.
///
/// Component layouts: `x_jac`/`y_jac`/`dxdot` store 2x2 matrices row-major
/// (`[k][i]` at `2k+i`); `x_hess` stores `X_{l,ij}` at `4l+2i+j`; `gamma`
/// stores the symmetrized `Gamma^k_{ij}` at `4k+2i+j`.
#[derive(Debug, Clone)]
pub struct TransformAtlas {
    pub grid: AnnulusGrid,
    pub t: f64,
    pub x: GridField,
    pub x_jac: GridField,
    pub y_jac: GridField,
    pub x_hess: GridField,
    pub g_lo: GridField,
    pub g_up: GridField,
    pub gamma: GridField,
    pub xdot: GridField,
    pub ydot: GridField,
    pub dxdot: GridField,
    /// Cached zero-order coefficient of the transformed Laplacian,
    /// `c^i_j = sum_k d_k(g^{kl} Gamma^i_{jl}) + g^{kl} Gamma^m_{jl} Gamma^i_{km}`.
    lcoef: GridField,
}

fn mat2_at(f: &GridField, i: usize, j: usize) -> Matrix2<f64> {
    Matrix2::new(f.get(i, j, 0), f.get(i, j, 1), f.get(i, j, 2), f.get(i, j, 3))
}

fn set_mat2(f: &mut GridField, i: usize, j: usize, m: &Matrix2<f64>) {
    f.set(i, j, 0, m[(0, 0)]);
    f.set(i, j, 1, m[(0, 1)]);
    f.set(i, j, 2, m[(1, 0)]);
    f.set(i, j, 3, m[(1, 1)]);
}

fn vec2_at(f: &GridField, i: usize, j: usize) -> Vector2<f64> {
    Vector2::new(f.get(i, j, 0), f.get(i, j, 1))
}

impl TransformAtlas {
    /// Flat atlas of the identity map.
    pub fn identity(grid: &AnnulusGrid) -> Self {
        TransformAtlas::from_analytic(grid, &AnalyticMap::identity(), 0.0)
    }

    /// Atlas sampled from an analytic map: positions and Jacobians come
    /// from the closed forms, everything derived follows the same pipeline
    /// as the numeric path.
    pub fn from_analytic(grid: &AnnulusGrid, map: &AnalyticMap, t: f64) -> Self {
        let x = GridField::from_fn(grid, 2, |y, c| (map.x)(y)[c]);
        let x_jac = GridField::from_fn(grid, 4, |y, c| {
            let j = (map.jac)(y);
            j[(c / 2, c % 2)]
        });
        let xdot = GridField::from_fn(grid, 2, |y, c| (map.xdot)(y)[c]);
        TransformAtlas::finalize(grid.clone(), t, x, x_jac, xdot)
    }

    /// Atlas for the rigid map of a body state (exact in the rigid zone;
    /// used for verification against closed forms).
    pub fn rigid(grid: &AnnulusGrid, state: &RigidState) -> Self {
        let map = AnalyticMap::rigid(state.q2(), state.rot2(), state.a2(), state.omega.planar());
        TransformAtlas::from_analytic(grid, &map, state.t)
    }

    /// Derives Jacobians by differencing the position samples, then the
    /// metric pipeline. Numeric path used after flow-map advection.
    pub fn from_positions(grid: &AnnulusGrid, t: f64, x: GridField, xdot: GridField) -> Result<Self> {
        let blowup_radius = grid.r_outer + 3.0 * grid.dr;
        for i in 0..=grid.n_r + 1 {
            for j in 0..grid.n_theta {
                let r = vec2_at(&x, i, j).norm();
                if !r.is_finite() || r > blowup_radius {
                    return Err(Error::MapBlowup { t, radius: r });
                }
            }
        }
        let (xx, xy) = cartesian_gradient(&x, grid);
        let mut x_jac = GridField::zeros(grid, 4);
        for i in 0..=grid.n_r + 1 {
            for j in 0..grid.n_theta {
                // J[k][i] = dX_k/dy_i
                x_jac.set(i, j, 0, xx.get(i, j, 0));
                x_jac.set(i, j, 1, xy.get(i, j, 0));
                x_jac.set(i, j, 2, xx.get(i, j, 1));
                x_jac.set(i, j, 3, xy.get(i, j, 1));
            }
        }
        Ok(TransformAtlas::finalize(grid.clone(), t, x, x_jac, xdot))
    }

    fn finalize(grid: AnnulusGrid, t: f64, x: GridField, x_jac: GridField, xdot: GridField) -> Self {
        let n_r = grid.n_r;
        let n_t = grid.n_theta;

        let mut y_jac = GridField::zeros(&grid, 4);
        let mut g_lo = GridField::zeros(&grid, 4);
        let mut g_up = GridField::zeros(&grid, 4);
        for i in 0..=n_r + 1 {
            for j in 0..n_t {
                let jm = mat2_at(&x_jac, i, j);
                let ym = jm.try_inverse().unwrap_or_else(Matrix2::identity);
                set_mat2(&mut y_jac, i, j, &ym);
                let glo = jm.transpose() * jm;
                let gup = ym * ym.transpose();
                set_mat2(&mut g_lo, i, j, &glo);
                set_mat2(&mut g_up, i, j, &gup);
            }
        }

        // Hessian X_{l,ij} from the Jacobian samples, symmetrized in (i, j).
        let (jx, jy) = cartesian_gradient(&x_jac, &grid);
        let mut x_hess = GridField::zeros(&grid, 8);
        for i in 0..=n_r + 1 {
            for j in 0..n_t {
                for l in 0..2 {
                    for a in 0..2 {
                        for b in 0..2 {
                            // d(J[l][a])/dy_b, averaged with d(J[l][b])/dy_a
                            let dab = if b == 0 { jx.get(i, j, 2 * l + a) } else { jy.get(i, j, 2 * l + a) };
                            let dba = if a == 0 { jx.get(i, j, 2 * l + b) } else { jy.get(i, j, 2 * l + b) };
                            x_hess.set(i, j, 4 * l + 2 * a + b, 0.5 * (dab + dba));
                        }
                    }
                }
            }
        }

        // Christoffel symbols from the metric derivative formula.
        let (gx, gy) = cartesian_gradient(&g_lo, &grid);
        let dg = |i: usize, j: usize, a: usize, b: usize, l: usize| -> f64 {
            // d g_ab / dy_l
            if l == 0 {
                gx.get(i, j, 2 * a + b)
            } else {
                gy.get(i, j, 2 * a + b)
            }
        };
        let mut gamma = GridField::zeros(&grid, 8);
        for i in 0..=n_r + 1 {
            for j in 0..n_t {
                let gup = mat2_at(&g_up, i, j);
                for k in 0..2 {
                    for a in 0..2 {
                        for b in 0..2 {
                            let mut v = 0.0;
                            for l in 0..2 {
                                v += 0.5
                                    * gup[(k, l)]
                                    * (dg(i, j, a, l, b) + dg(i, j, b, l, a) - dg(i, j, a, b, l));
                            }
                            gamma.set(i, j, 4 * k + 2 * a + b, v);
                        }
                    }
                }
            }
        }

        // Time-derivative data and the cached Laplacian coefficient.
        let (dx_x, dx_y) = cartesian_gradient(&xdot, &grid);
        let mut dxdot = GridField::zeros(&grid, 4);
        let mut ydot = GridField::zeros(&grid, 2);
        for i in 0..=n_r + 1 {
            for j in 0..n_t {
                dxdot.set(i, j, 0, dx_x.get(i, j, 0));
                dxdot.set(i, j, 1, dx_y.get(i, j, 0));
                dxdot.set(i, j, 2, dx_x.get(i, j, 1));
                dxdot.set(i, j, 3, dx_y.get(i, j, 1));
                let ym = mat2_at(&y_jac, i, j);
                let yd = -ym * vec2_at(&xdot, i, j);
                ydot.set(i, j, 0, yd.x);
                ydot.set(i, j, 1, yd.y);
            }
        }

        let mut lcoef = GridField::zeros(&grid, 4);
        for ci in 0..2 {
            for cj in 0..2 {
                let mut w = GridField::zeros(&grid, 2);
                for i in 0..=n_r + 1 {
                    for j in 0..n_t {
                        let gup = mat2_at(&g_up, i, j);
                        for k in 0..2 {
                            let mut v = 0.0;
                            for l in 0..2 {
                                v += gup[(k, l)] * gamma.get(i, j, 4 * ci + 2 * cj + l);
                            }
                            w.set(i, j, k, v);
                        }
                    }
                }
                let div_w = divergence(&w, &grid).expect("2-component field");
                for i in 0..=n_r + 1 {
                    for j in 0..n_t {
                        let gup = mat2_at(&g_up, i, j);
                        let mut v = div_w.get(i, j, 0);
                        for k in 0..2 {
                            for l in 0..2 {
                                for m in 0..2 {
                                    v += gup[(k, l)]
                                        * gamma.get(i, j, 4 * m + 2 * cj + l)
                                        * gamma.get(i, j, 4 * ci + 2 * k + m);
                                }
                            }
                        }
                        lcoef.set(i, j, 2 * ci + cj, v);
                    }
                }
            }
        }

        TransformAtlas {
            grid,
            t,
            x,
            x_jac,
            y_jac,
            x_hess,
            g_lo,
            g_up,
            gamma,
            xdot,
            ydot,
            dxdot,
            lcoef,
        }
    }

    pub fn x_at(&self, i: usize, j: usize) -> Vector2<f64> {
        vec2_at(&self.x, i, j)
    }

    pub fn x_jac_at(&self, i: usize, j: usize) -> Matrix2<f64> {
        mat2_at(&self.x_jac, i, j)
    }

    pub fn y_jac_at(&self, i: usize, j: usize) -> Matrix2<f64> {
        mat2_at(&self.y_jac, i, j)
    }

    pub fn g_up_at(&self, i: usize, j: usize) -> Matrix2<f64> {
        mat2_at(&self.g_up, i, j)
    }

    pub fn xdot_at(&self, i: usize, j: usize) -> Vector2<f64> {
        vec2_at(&self.xdot, i, j)
    }

    /// Largest |det J_X - 1| over active nodes.
    pub fn max_det_deviation(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 1..=self.grid.n_r {
            for j in 0..self.grid.n_theta {
                m = m.max((self.x_jac_at(i, j).determinant() - 1.0).abs());
            }
        }
        m
    }

    /// Largest |g^ g_ - I| over active nodes.
    pub fn max_metric_product_deviation(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 1..=self.grid.n_r {
            for j in 0..self.grid.n_theta {
                let p = mat2_at(&self.g_up, i, j) * mat2_at(&self.g_lo, i, j) - Matrix2::identity();
                m = m.max(p.norm());
            }
        }
        m
    }

    /// Largest defect of the identity `Gamma^k_ij = Y_{k,l} X_{l,ij}`.
    pub fn max_christoffel_cross_check(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 1..=self.grid.n_r {
            for j in 0..self.grid.n_theta {
                let ym = mat2_at(&self.y_jac, i, j);
                for k in 0..2 {
                    for a in 0..2 {
                        for b in 0..2 {
                            let mut v = 0.0;
                            for l in 0..2 {
                                v += ym[(k, l)] * self.x_hess.get(i, j, 4 * l + 2 * a + b);
                            }
                            m = m.max((self.gamma.get(i, j, 4 * k + 2 * a + b) - v).abs());
                        }
                    }
                }
            }
        }
        m
    }

    /// Largest asymmetry of the stored Christoffel symbols (zero by
    /// construction).
    pub fn max_christoffel_asymmetry(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 1..=self.grid.n_r {
            for j in 0..self.grid.n_theta {
                for k in 0..2 {
                    m = m.max((self.gamma.get(i, j, 4 * k + 1) - self.gamma.get(i, j, 4 * k + 2)).abs());
                }
            }
        }
        m
    }

    /// Effective viscosity amplification: max eigenvalue of g^ij.
    pub fn max_metric_eigenvalue(&self) -> f64 {
        let mut m: f64 = 1.0;
        for i in 1..=self.grid.n_r {
            for j in 0..self.grid.n_theta {
                let g = mat2_at(&self.g_up, i, j);
                let tr = g.trace();
                let det = g.determinant();
                let disc = (0.25 * tr * tr - det).max(0.0).sqrt();
                m = m.max(0.5 * tr + disc);
            }
        }
        m
    }
}

/// One RK2 step of `dX/dt = Lambda(X)` per node in a frozen extension
/// field, followed by the metric rebuild.
pub fn advance_flow_map(atlas: &TransformAtlas, field: &ExtensionField, dt: f64) -> Result<TransformAtlas> {
    if dt <= 0.0 {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let grid = &atlas.grid;
    let mut x_new = GridField::zeros(grid, 2);
    let mut xdot_new = GridField::zeros(grid, 2);
    for i in 0..=grid.n_r + 1 {
        for j in 0..grid.n_theta {
            let x0 = atlas.x_at(i, j);
            let k1 = field.velocity(x0);
            let k2 = field.velocity(x0 + dt * k1);
            let x1 = x0 + 0.5 * dt * (k1 + k2);
            x_new.set(i, j, 0, x1.x);
            x_new.set(i, j, 1, x1.y);
            let v = field.velocity(x1);
            xdot_new.set(i, j, 0, v.x);
            xdot_new.set(i, j, 1, v.y);
        }
    }
    TransformAtlas::from_positions(grid, atlas.t + dt, x_new, xdot_new)
}

/// Refreshes the atlas velocity data against a new extension field without
/// moving the nodes (used when the body velocity changes within a step).
pub fn refresh_flow_velocity(atlas: &TransformAtlas, field: &ExtensionField) -> Result<TransformAtlas> {
    let grid = atlas.grid.clone();
    let mut xdot = GridField::zeros(&grid, 2);
    for i in 0..=grid.n_r + 1 {
        for j in 0..grid.n_theta {
            let v = field.velocity(atlas.x_at(i, j));
            xdot.set(i, j, 0, v.x);
            xdot.set(i, j, 1, v.y);
        }
    }
    TransformAtlas::from_positions(&grid, atlas.t, atlas.x.clone(), xdot)
}

/// Newton inversion of the sampled map: returns `y` with `|X(y) - x| <= tol`.
pub fn invert_map(atlas: &TransformAtlas, x: Vector2<f64>, tol: f64) -> Result<Vector2<f64>> {
    let grid = &atlas.grid;
    let mut y = x;
    let mut residual = f64::INFINITY;
    for _ in 0..50 {
        let xs = interpolate(&atlas.x, grid, y).map_err(|_| Error::InversionFailure {
            iters: 50,
            residual,
        })?;
        let r = Vector2::new(xs[0] - x.x, xs[1] - x.y);
        residual = r.norm();
        if residual <= tol {
            return Ok(y);
        }
        let js = interpolate(&atlas.x_jac, grid, y).map_err(|_| Error::InversionFailure {
            iters: 50,
            residual,
        })?;
        let jm = Matrix2::new(js[0], js[1], js[2], js[3]);
        let step = jm.try_inverse().ok_or(Error::InversionFailure { iters: 50, residual })? * r;
        y -= step;
    }
    Err(Error::InversionFailure { iters: 50, residual })
}

/// Transformed Laplacian minus the flat Laplacian. Zero on the flat atlas
/// by construction.
pub fn op_l_deviation(u: &GridField, atlas: &TransformAtlas) -> Result<GridField> {
    if u.comps != 2 {
        return Err(Error::ShapeMismatch(format!("op_l expects 2 components, got {}", u.comps)));
    }
    let grid = &atlas.grid;
    if u.n_r != grid.n_r || u.n_theta != grid.n_theta {
        return Err(Error::ShapeMismatch("field/atlas grid mismatch".into()));
    }
    let (ux, uy) = cartesian_gradient(u, grid);
    let du = |i: usize, j: usize, comp: usize, dir: usize| -> f64 {
        if dir == 0 {
            ux.get(i, j, comp)
        } else {
            uy.get(i, j, comp)
        }
    };
    let mut out = GridField::zeros(grid, 2);
    out.t = u.t;

    // divergence-form correction: d_j((g^{jk} - delta) d_k u_i)
    for ci in 0..2 {
        let mut w = GridField::zeros(grid, 2);
        for i in 0..=grid.n_r + 1 {
            for j in 0..grid.n_theta {
                let g = mat2_at(&atlas.g_up, i, j);
                for jj in 0..2 {
                    let mut v = 0.0;
                    for k in 0..2 {
                        let d = if jj == k { 1.0 } else { 0.0 };
                        v += (g[(jj, k)] - d) * du(i, j, ci, k);
                    }
                    w.set(i, j, jj, v);
                }
            }
        }
        let divw = divergence(&w, grid)?;
        for i in 1..=grid.n_r {
            for j in 0..grid.n_theta {
                out.set(i, j, ci, divw.get(i, j, 0));
            }
        }
    }

    // first-order and zero-order Christoffel terms
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            let g = mat2_at(&atlas.g_up, i, j);
            for ci in 0..2 {
                let mut v = out.get(i, j, ci);
                for k in 0..2 {
                    for l in 0..2 {
                        for jj in 0..2 {
                            v += 2.0 * g[(k, l)] * atlas.gamma.get(i, j, 4 * ci + 2 * jj + k) * du(i, j, jj, l);
                        }
                    }
                }
                for jj in 0..2 {
                    v += atlas.lcoef.get(i, j, 2 * ci + jj) * u.get(i, j, jj);
                }
                out.set(i, j, ci, v);
            }
        }
    }
    out.fill_ghosts_extrapolate();
    Ok(out)
}

/// Full transformed Laplacian.
pub fn op_l(u: &GridField, atlas: &TransformAtlas) -> Result<GridField> {
    let mut out = laplacian(u, &atlas.grid);
    let dev = op_l_deviation(u, atlas)?;
    out.scaled_add(&dev, 1.0);
    Ok(out)
}

/// Transformed convection. Returns `(full, tilde)` where
/// `full = u . grad u + tilde` and `tilde` carries the Christoffel part.
pub fn op_conv(u: &GridField, atlas: &TransformAtlas) -> Result<(GridField, GridField)> {
    if u.comps != 2 {
        return Err(Error::ShapeMismatch(format!("op_conv expects 2 components, got {}", u.comps)));
    }
    let grid = &atlas.grid;
    let (ux, uy) = cartesian_gradient(u, grid);
    let mut full = GridField::zeros(grid, 2);
    let mut tilde = GridField::zeros(grid, 2);
    full.t = u.t;
    tilde.t = u.t;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            let u0 = u.get(i, j, 0);
            let u1 = u.get(i, j, 1);
            for ci in 0..2 {
                let adv = u0 * ux.get(i, j, ci) + u1 * uy.get(i, j, ci);
                let mut chr = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        chr += atlas.gamma.get(i, j, 4 * ci + 2 * a + b) * u.get(i, j, a) * u.get(i, j, b);
                    }
                }
                tilde.set(i, j, ci, chr);
                full.set(i, j, ci, adv + chr);
            }
        }
    }
    full.fill_ghosts_extrapolate();
    tilde.fill_ghosts_extrapolate();
    Ok((full, tilde))
}

/// Transformed frame-motion operator (advection by the moving map plus the
/// Jacobian transport term). Zero on a static atlas.
pub fn op_m(u: &GridField, atlas: &TransformAtlas) -> Result<GridField> {
    if u.comps != 2 {
        return Err(Error::ShapeMismatch(format!("op_m expects 2 components, got {}", u.comps)));
    }
    let grid = &atlas.grid;
    let (ux, uy) = cartesian_gradient(u, grid);
    let mut out = GridField::zeros(grid, 2);
    out.t = u.t;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            let yd = vec2_at(&atlas.ydot, i, j);
            let ym = mat2_at(&atlas.y_jac, i, j);
            let dx = mat2_at(&atlas.dxdot, i, j);
            for ci in 0..2 {
                let mut v = yd.x * ux.get(i, j, ci) + yd.y * uy.get(i, j, ci);
                for jj in 0..2 {
                    let mut coef = 0.0;
                    for k in 0..2 {
                        coef += atlas.gamma.get(i, j, 4 * ci + 2 * jj + k) * yd[k];
                        coef += ym[(ci, k)] * dx[(k, jj)];
                    }
                    v += coef * u.get(i, j, jj);
                }
                out.set(i, j, ci, v);
            }
        }
    }
    out.fill_ghosts_extrapolate();
    Ok(out)
}

/// Transformed pressure gradient minus the flat gradient.
pub fn op_g_deviation(p: &GridField, atlas: &TransformAtlas) -> Result<GridField> {
    if p.comps != 1 {
        return Err(Error::ShapeMismatch(format!("op_g expects a scalar, got {} comps", p.comps)));
    }
    let grid = &atlas.grid;
    let (px, py) = cartesian_gradient(p, grid);
    let mut out = GridField::zeros(grid, 2);
    out.t = p.t;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            let g = mat2_at(&atlas.g_up, i, j);
            let dp = Vector2::new(px.get(i, j, 0), py.get(i, j, 0));
            let v = (g - Matrix2::identity()) * dp;
            out.set(i, j, 0, v.x);
            out.set(i, j, 1, v.y);
        }
    }
    out.fill_ghosts_extrapolate();
    Ok(out)
}

/// Full transformed pressure gradient `g^{ij} d_j p`.
pub fn op_g(p: &GridField, atlas: &TransformAtlas) -> Result<GridField> {
    let grid = &atlas.grid;
    let (px, py) = cartesian_gradient(p, grid);
    let mut out = op_g_deviation(p, atlas)?;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            out.set(i, j, 0, out.get(i, j, 0) + px.get(i, j, 0));
            out.set(i, j, 1, out.get(i, j, 1) + py.get(i, j, 0));
        }
    }
    out.fill_ghosts_extrapolate();
    Ok(out)
}

/// Physical-frame partial derivatives of a reference-sampled composite
/// field: `dF/dx_k = Y_{l,k} d_l F` chained through the atlas.
pub fn physical_gradient(f: &GridField, atlas: &TransformAtlas) -> (GridField, GridField) {
    let grid = &atlas.grid;
    let (fx, fy) = cartesian_gradient(f, grid);
    let mut out_x = GridField::zeros(grid, f.comps);
    let mut out_y = GridField::zeros(grid, f.comps);
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            let ym = mat2_at(&atlas.y_jac, i, j);
            for c in 0..f.comps {
                let d = Vector2::new(fx.get(i, j, c), fy.get(i, j, c));
                // dF/dx_k = sum_l (dY_l/dx_k) d_l F
                out_x.set(i, j, c, ym[(0, 0)] * d.x + ym[(1, 0)] * d.y);
                out_y.set(i, j, c, ym[(0, 1)] * d.x + ym[(1, 1)] * d.y);
            }
        }
    }
    out_x.fill_ghosts_extrapolate();
    out_y.fill_ghosts_extrapolate();
    (out_x, out_y)
}

/// Rigid relative map `X~2(x1) = q2 + Q2 Q1^T (x1 - q1)`.
pub fn compose_relative_map(state1: &RigidState, state2: &RigidState, x: Vector2<f64>) -> Vector2<f64> {
    let q = state2.rot2() * state1.rot2().transpose();
    state2.q2() + q * (x - state1.q2())
}

/// Inverse direction `X~1(x2) = q1 + Q1 Q2^T (x2 - q2)`.
pub fn compose_relative_map_inverse(state1: &RigidState, state2: &RigidState, x: Vector2<f64>) -> Vector2<f64> {
    let q = state1.rot2() * state2.rot2().transpose();
    state1.q2() + q * (x - state2.q2())
}

/// Numeric composition `X2(Y1(x))` through two atlases; used outside the
/// rigid neighborhood where the closed form does not apply.
pub fn compose_via_atlases(
    atlas1: &TransformAtlas,
    atlas2: &TransformAtlas,
    x: Vector2<f64>,
    tol: f64,
) -> Result<Vector2<f64>> {
    let y = invert_map(atlas1, x, tol)?;
    let xs = interpolate(&atlas2.x, &atlas2.grid, y)?;
    Ok(Vector2::new(xs[0], xs[1]))
}

/// Transformed normal and traction across the relative rigid map:
/// `n1 = Q^T n2`, transformed traction `T n1 = Q^T (T n2)`.
pub fn transform_traction_normal(
    n2: Vector2<f64>,
    traction2: Vector2<f64>,
    q: &Matrix2<f64>,
) -> (Vector2<f64>, Vector2<f64>) {
    (q.transpose() * n2, q.transpose() * traction2)
}

/// Strong solution of run 2 pulled into the frame of run 1, sampled at the
/// physical nodes `x1 = X1(y)` of run 1's map.
#[derive(Debug, Clone)]
pub struct TransformedSolution {
    /// `U2(x1)` per reference node.
    pub u: GridField,
    /// `P2(x1)` per reference node.
    pub p: GridField,
    /// Transformed translational velocity `A2 = Q^T a2`.
    pub a: Vector2<f64>,
    /// Transformed angular velocity (scalar in 2D, equal to omega2).
    pub omega: f64,
}

pub fn transform_strong_solution(
    u2: &GridField,
    p2: &GridField,
    state1: &RigidState,
    state2: &RigidState,
    atlas1: &TransformAtlas,
    atlas2: &TransformAtlas,
    tol: f64,
) -> Result<TransformedSolution> {
    let grid = &atlas1.grid;
    if u2.comps != 2 || p2.comps != 1 {
        return Err(Error::ShapeMismatch("expected velocity (2 comps) and pressure (1 comp)".into()));
    }
    let q_rel = state2.rot2() * state1.rot2().transpose();
    let mut u_out = GridField::zeros(grid, 2);
    let mut p_out = GridField::zeros(grid, 1);
    u_out.t = u2.t;
    p_out.t = p2.t;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            // x2 = X~2(x1) evaluated through the shared reference node:
            // x1 = X1(y) exactly, so Y1(x1) = y without an inner solve.
            let y = grid.node(i, j);
            let x2s = interpolate(&atlas2.x, grid, y)?;
            let x2 = Vector2::new(x2s[0], x2s[1]);
            let yb = invert_map(atlas2, x2, tol)?;

            let js = interpolate(&atlas2.x_jac, grid, yb)?;
            let x2_jac = Matrix2::new(js[0], js[1], js[2], js[3]);
            let us = interpolate(u2, grid, yb)?;
            let u_phys2 = x2_jac * Vector2::new(us[0], us[1]);

            let j1 = atlas1.x_jac_at(i, j);
            let jt = j1 * x2_jac.try_inverse().ok_or(Error::InversionFailure { iters: 0, residual: 0.0 })?;
            let v = jt * u_phys2;
            u_out.set(i, j, 0, v.x);
            u_out.set(i, j, 1, v.y);
            p_out.set(i, j, 0, interpolate(p2, grid, yb)?[0]);
        }
    }
    u_out.fill_ghosts_extrapolate();
    p_out.fill_ghosts_extrapolate();
    Ok(TransformedSolution {
        u: u_out,
        p: p_out,
        a: q_rel.transpose() * state2.a2(),
        omega: state2.omega.planar(),
    })
}

/// Transformed rigid velocity `U_s^2(x1) = A2 + Omega2 x (x1 - q1)`.
pub fn transformed_rigid_velocity(sol: &TransformedSolution, state1: &RigidState, x1: Vector2<f64>) -> Vector2<f64> {
    rigid_velocity_2d(state1.q2(), sol.a, sol.omega, x1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AnnulusGrid;
    use approx::assert_abs_diff_eq;

    fn grid(n: usize) -> AnnulusGrid {
        AnnulusGrid::new(n, 2 * n, 0.5, 2.0).unwrap()
    }

    fn default_extension(a: Vector2<f64>, omega: f64) -> ExtensionField {
        ExtensionField {
            q: Vector2::zeros(),
            a,
            omega,
            r_body: 0.5,
            r_wall: 2.0,
            delta0: 0.15,
        }
    }

    #[test]
    fn extension_zero_motion_is_zero() {
        let f = default_extension(Vector2::zeros(), 0.0);
        for r in [0.55, 1.0, 1.7, 1.97] {
            let v = f.velocity(Vector2::new(r, 0.3 * r));
            assert_eq!(v, Vector2::zeros());
        }
    }

    #[test]
    fn extension_rigid_near_body_zero_near_wall() {
        let f = default_extension(Vector2::new(1.0, -0.5), 0.7);
        // within delta0/4 of the body
        let x = Vector2::new(0.52, 0.0);
        let v = f.velocity(x);
        let rigid = rigid_velocity_2d(f.q, f.a, f.omega, x);
        assert!((v - rigid).norm() < 1e-14);
        // within delta0/4 of the wall
        let v = f.velocity(Vector2::new(1.97, 0.0));
        assert_eq!(v, Vector2::zeros());
    }

    fn max_divergence(f: &ExtensionField, n: usize) -> f64 {
        // centered-difference divergence oracle on an n x n Cartesian patch
        let h = 1e-2 / n as f64 * 128.0;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                let th = std::f64::consts::TAU * i as f64 / n as f64;
                let r = 0.55 + 1.4 * j as f64 / n as f64;
                let x = Vector2::new(r * th.cos(), r * th.sin());
                let div = (f.velocity(x + Vector2::new(h, 0.0)).x - f.velocity(x - Vector2::new(h, 0.0)).x
                    + f.velocity(x + Vector2::new(0.0, h)).y
                    - f.velocity(x - Vector2::new(0.0, h)).y)
                    / (2.0 * h);
                worst = worst.max(div.abs());
            }
        }
        worst
    }

    #[test]
    fn extension_divergence_free_second_order() {
        let f = default_extension(Vector2::new(1.0, 0.0), 0.0);
        let d1 = max_divergence(&f, 64);
        let d2 = max_divergence(&f, 128);
        // halving h divides the centered-difference defect by ~4
        assert!(d1 < 5e-3, "divergence defect {d1:.3e}");
        assert!(d1 / d2 > 3.0, "order check: {d1:.3e} vs {d2:.3e}");
    }

    #[test]
    fn build_extension_proximity_guard() {
        let s = RigidState::planar(Vector2::new(1.45, 0.0), Vector2::zeros(), 0.0);
        assert!(matches!(
            build_extension(&s, 0.5, 2.0, 0.15),
            Err(Error::Proximity { .. })
        ));
    }

    #[test]
    fn flat_atlas_identities() {
        let g = grid(16);
        let a = TransformAtlas::identity(&g);
        assert!(a.max_det_deviation() < 1e-12);
        assert!(a.max_metric_product_deviation() < 1e-12);
        assert!(a.max_christoffel_cross_check() < 1e-12);
        assert!(a.max_christoffel_asymmetry() == 0.0);
    }

    #[test]
    fn rigid_atlas_identities() {
        let g = grid(16);
        let th: f64 = 0.77;
        let rot = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        let map = AnalyticMap::rigid(Vector2::new(0.1, -0.05), rot, Vector2::new(0.3, 0.1), 0.9);
        let a = TransformAtlas::from_analytic(&g, &map, 0.0);
        assert!(a.max_det_deviation() < 1e-12);
        assert!(a.max_metric_product_deviation() < 1e-8);
        assert!(a.max_christoffel_cross_check() < 1e-8);
    }

    /// Analytic volume-preserving shear used to exercise the curved-metric
    /// pipeline: X = (y1 + eps sin(y2), y2).
    fn shear_map<'a>(eps: f64) -> AnalyticMap<'a> {
        AnalyticMap {
            x: Box::new(move |y| Vector2::new(y.x + eps * y.y.sin(), y.y)),
            jac: Box::new(move |y| Matrix2::new(1.0, eps * y.y.cos(), 0.0, 1.0)),
            xdot: Box::new(|_| Vector2::zeros()),
        }
    }

    #[test]
    fn shear_atlas_metric_identities() {
        let g = grid(24);
        let a = TransformAtlas::from_analytic(&g, &shear_map(0.2), 0.0);
        assert!(a.max_det_deviation() < 1e-12, "shear is volume preserving");
        assert!(a.max_metric_product_deviation() < 1e-10);
        // cross-check identity holds to discretization accuracy
        assert!(a.max_christoffel_cross_check() < 2e-3);
    }

    fn smooth_v(x: Vector2<f64>) -> Vector2<f64> {
        Vector2::new((0.8 * x.x).sin() * (0.6 * x.y).cos(), (0.5 * x.x).cos() * (0.7 * x.y).sin())
    }

    fn smooth_lap_v(x: Vector2<f64>) -> Vector2<f64> {
        Vector2::new(
            -(0.8 * 0.8 + 0.6 * 0.6) * (0.8 * x.x).sin() * (0.6 * x.y).cos(),
            -(0.5 * 0.5 + 0.7 * 0.7) * (0.5 * x.x).cos() * (0.7 * x.y).sin(),
        )
    }

    fn pullback(g: &AnnulusGrid, map: &AnalyticMap, v: impl Fn(Vector2<f64>) -> Vector2<f64>) -> GridField {
        GridField::from_fn(g, 2, |y, c| {
            let x = (map.x)(y);
            let j = (map.jac)(y);
            let w = j.try_inverse().unwrap() * v(x);
            w[c]
        })
    }

    fn op_l_pullback_error(n: usize, map: &AnalyticMap) -> f64 {
        let g = grid(n);
        let atlas = TransformAtlas::from_analytic(&g, map, 0.0);
        let u = pullback(&g, map, smooth_v);
        let lu = op_l(&u, &atlas).unwrap();
        let expect = pullback(&g, map, smooth_lap_v);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 1..=g.n_r {
            let w = g.cell_weight(i);
            for j in 0..g.n_theta {
                let e0 = lu.get(i, j, 0) - expect.get(i, j, 0);
                let e1 = lu.get(i, j, 1) - expect.get(i, j, 1);
                num += w * (e0 * e0 + e1 * e1);
                den += w;
            }
        }
        (num / den).sqrt()
    }

    #[test]
    fn op_l_matches_physical_laplacian_through_shear_map() {
        let e1 = op_l_pullback_error(24, &shear_map(0.15));
        let e2 = op_l_pullback_error(48, &shear_map(0.15));
        let slope = (e1 / e2).log2();
        assert!(slope >= 1.6, "op_l pullback slope {slope:.2} ({e1:.3e} -> {e2:.3e})");
    }

    #[test]
    fn op_conv_matches_physical_convection_through_shear_map() {
        let conv = |x: Vector2<f64>| -> Vector2<f64> {
            // (v . grad) v by finite differences of the analytic field
            let h = 1e-6;
            let v = smooth_v(x);
            let dx = (smooth_v(x + Vector2::new(h, 0.0)) - smooth_v(x - Vector2::new(h, 0.0))) / (2.0 * h);
            let dy = (smooth_v(x + Vector2::new(0.0, h)) - smooth_v(x - Vector2::new(0.0, h))) / (2.0 * h);
            v.x * dx + v.y * dy
        };
        let err = |n: usize| -> f64 {
            let g = grid(n);
            let map = shear_map(0.15);
            let atlas = TransformAtlas::from_analytic(&g, &map, 0.0);
            let u = pullback(&g, &map, smooth_v);
            let (full, _) = op_conv(&u, &atlas).unwrap();
            let expect = pullback(&g, &map, conv);
            let mut worst: f64 = 0.0;
            for i in 2..g.n_r {
                for j in 0..g.n_theta {
                    worst = worst
                        .max((full.get(i, j, 0) - expect.get(i, j, 0)).abs())
                        .max((full.get(i, j, 1) - expect.get(i, j, 1)).abs());
                }
            }
            worst
        };
        let e1 = err(24);
        let e2 = err(48);
        assert!((e1 / e2).log2() >= 1.6, "op_conv slope {:.2}", (e1 / e2).log2());
    }

    #[test]
    fn op_g_matches_physical_gradient_through_shear_map() {
        let p_fn = |x: Vector2<f64>| (0.9 * x.x).sin() * (0.4 * x.y).cos();
        let grad_p = |x: Vector2<f64>| {
            Vector2::new(
                0.9 * (0.9 * x.x).cos() * (0.4 * x.y).cos(),
                -0.4 * (0.9 * x.x).sin() * (0.4 * x.y).sin(),
            )
        };
        let err = |n: usize| -> f64 {
            let g = grid(n);
            let map = shear_map(0.15);
            let atlas = TransformAtlas::from_analytic(&g, &map, 0.0);
            let p = GridField::from_fn(&g, 1, |y, _| p_fn((map.x)(y)));
            let gp = op_g(&p, &atlas).unwrap();
            let mut worst: f64 = 0.0;
            for i in 2..g.n_r {
                for j in 0..g.n_theta {
                    let y = g.node(i, j);
                    let expect = (map.jac)(y).try_inverse().unwrap() * grad_p((map.x)(y));
                    worst = worst.max((gp.get(i, j, 0) - expect.x).abs()).max((gp.get(i, j, 1) - expect.y).abs());
                }
            }
            worst
        };
        let e1 = err(24);
        let e2 = err(48);
        assert!((e1 / e2).log2() >= 1.6, "op_g slope {:.2}", (e1 / e2).log2());
    }

    #[test]
    fn flat_atlas_reduction_is_exact() {
        let g = grid(12);
        let atlas = TransformAtlas::identity(&g);
        let u = GridField::from_fn(&g, 2, |x, c| if c == 0 { (x.x).sin() * x.y } else { x.x - 0.3 * x.y * x.y });
        let p = GridField::from_fn(&g, 1, |x, _| x.x * x.y);

        let lu = op_l(&u, &atlas).unwrap();
        let lap = laplacian(&u, &g);
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert_eq!(lu.get(i, j, 0), lap.get(i, j, 0));
                assert_eq!(lu.get(i, j, 1), lap.get(i, j, 1));
            }
        }

        let (full, tilde) = op_conv(&u, &atlas).unwrap();
        let (ux, uy) = cartesian_gradient(&u, &g);
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert_eq!(tilde.get(i, j, 0), 0.0);
                assert_eq!(tilde.get(i, j, 1), 0.0);
                let adv0 = u.get(i, j, 0) * ux.get(i, j, 0) + u.get(i, j, 1) * uy.get(i, j, 0);
                assert_eq!(full.get(i, j, 0), adv0);
            }
        }

        let mu = op_m(&u, &atlas).unwrap();
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert_eq!(mu.get(i, j, 0), 0.0);
                assert_eq!(mu.get(i, j, 1), 0.0);
            }
        }

        let gp = op_g(&p, &atlas).unwrap();
        let (px, py) = cartesian_gradient(&p, &g);
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert_eq!(gp.get(i, j, 0), px.get(i, j, 0));
                assert_eq!(gp.get(i, j, 1), py.get(i, j, 0));
            }
        }
    }

    #[test]
    fn op_m_uniform_translation() {
        // translating flat map: X = y + t*a. Ydot = -a, dXdot = 0,
        // so M u = -a . grad u.
        let g = grid(16);
        let a = Vector2::new(0.4, -0.2);
        let map = AnalyticMap {
            x: Box::new(move |y| y + 0.3 * a),
            jac: Box::new(|_| Matrix2::identity()),
            xdot: Box::new(move |_| a),
        };
        let atlas = TransformAtlas::from_analytic(&g, &map, 0.3);
        let u = GridField::from_fn(&g, 2, |x, c| if c == 0 { x.x * x.x } else { x.x * x.y });
        let mu = op_m(&u, &atlas).unwrap();
        let (ux, uy) = cartesian_gradient(&u, &g);
        for i in 2..g.n_r {
            for j in 0..g.n_theta {
                for c in 0..2 {
                    let expect = -(a.x * ux.get(i, j, c) + a.y * uy.get(i, j, c));
                    assert_abs_diff_eq!(mu.get(i, j, c), expect, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn advance_flow_map_pure_rotation() {
        let g = grid(24);
        let f = default_extension(Vector2::zeros(), 1.0);
        let mut atlas = TransformAtlas::identity(&g);
        let dt = 1e-2;
        let steps = 50;
        for _ in 0..steps {
            atlas = advance_flow_map(&atlas, &f, dt).unwrap();
        }
        let t = dt * steps as f64;
        // node on the inner circle rotates with the body (rigid zone)
        let y = g.node(1, 0);
        let x = atlas.x_at(1, 0);
        let expect = Vector2::new(y.x * t.cos() - y.y * t.sin(), y.x * t.sin() + y.y * t.cos());
        assert!((x - expect).norm() < 1e-4, "rotation defect {:.3e}", (x - expect).norm());
        // wall nodes stay put
        let x_wall = atlas.x_at(g.n_r, 3);
        assert!((x_wall - g.node(g.n_r, 3)).norm() < 1e-14);
    }

    #[test]
    fn advance_flow_map_volume_preservation() {
        let g = grid(32);
        let f = default_extension(Vector2::new(0.25, 0.1), 0.4);
        let mut atlas = TransformAtlas::identity(&g);
        // short translation run: q stays within the proximity floor
        for _ in 0..200 {
            atlas = advance_flow_map(&atlas, &f, 2e-3).unwrap();
        }
        // the bound tracks the Jacobian-differencing error at this resolution
        assert!(atlas.max_det_deviation() < 1e-2, "det defect {:.3e}", atlas.max_det_deviation());
    }

    #[test]
    fn invert_map_cases() {
        let g = grid(24);
        let atlas = TransformAtlas::identity(&g);
        let x = Vector2::new(1.1, 0.4);
        let y = invert_map(&atlas, x, 1e-12).unwrap();
        // the inverse is exact for the *sampled* map: the bilinear chord
        // deviates from the arc by O(dtheta^2), but the round trip closes
        let xs = interpolate(&atlas.x, &g, y).unwrap();
        assert!((Vector2::new(xs[0], xs[1]) - x).norm() <= 1e-12);
        assert!((y - x).norm() < 1e-2);

        let th: f64 = 0.3;
        let rot = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        let map = AnalyticMap::rigid(Vector2::zeros(), rot, Vector2::zeros(), 0.0);
        let atlas = TransformAtlas::from_analytic(&g, &map, 0.0);
        let x = Vector2::new(0.9, -0.7);
        let y = invert_map(&atlas, x, 1e-10).unwrap();
        let expect = rot.transpose() * x;
        // inverse matches the closed form up to interpolation error of X
        assert!((y - expect).norm() < 1e-2, "{:.3e}", (y - expect).norm());

        // round trip through the sampled map
        let xs = interpolate(&atlas.x, &g, y).unwrap();
        assert!((Vector2::new(xs[0], xs[1]) - x).norm() <= 1e-9);
    }

    #[test]
    fn compose_relative_map_round_trip() {
        let mut s1 = RigidState::planar(Vector2::new(0.05, 0.02), Vector2::zeros(), 0.0);
        let th: f64 = 0.4;
        s1.rot[(0, 0)] = th.cos();
        s1.rot[(0, 1)] = -th.sin();
        s1.rot[(1, 0)] = th.sin();
        s1.rot[(1, 1)] = th.cos();
        let mut s2 = RigidState::planar(Vector2::new(-0.03, 0.08), Vector2::zeros(), 0.0);
        let ph: f64 = -0.9;
        s2.rot[(0, 0)] = ph.cos();
        s2.rot[(0, 1)] = -ph.sin();
        s2.rot[(1, 0)] = ph.sin();
        s2.rot[(1, 1)] = ph.cos();

        let x = Vector2::new(0.6, -0.2);
        let fwd = compose_relative_map(&s1, &s2, x);
        let back = compose_relative_map_inverse(&s1, &s2, fwd);
        assert!((back - x).norm() < 1e-12);

        // identical states: identity map
        let same = compose_relative_map(&s1, &s1, x);
        assert!((same - x).norm() < 1e-14);

        // pure rotation about a common center
        let id = RigidState::planar(Vector2::zeros(), Vector2::zeros(), 0.0);
        let mut rotated = id.clone();
        rotated.rot = s2.rot.clone();
        let y = compose_relative_map(&id, &rotated, Vector2::new(1.0, 0.0));
        assert_abs_diff_eq!(y.x, ph.cos(), epsilon = 1e-14);
        assert_abs_diff_eq!(y.y, ph.sin(), epsilon = 1e-14);
    }

    #[test]
    fn traction_transform_properties() {
        let th: f64 = 1.1;
        let q = Matrix2::new(th.cos(), -th.sin(), th.sin(), th.cos());
        let n2 = Vector2::new(0.6, 0.8);
        let tr2 = Vector2::new(-0.3, 1.7);
        let (n1, tr1) = transform_traction_normal(n2, tr2, &q);
        assert_abs_diff_eq!(n1.norm(), 1.0, epsilon = 1e-14);
        // tangential component invariance for tau1 = Q^T tau2
        let tau2 = Vector2::new(-n2.y, n2.x);
        let tau1 = q.transpose() * tau2;
        assert_abs_diff_eq!(tr1.dot(&tau1), tr2.dot(&tau2), epsilon = 1e-13);

        let (n_id, tr_id) = transform_traction_normal(n2, tr2, &Matrix2::identity());
        assert_eq!(n_id, n2);
        assert_eq!(tr_id, tr2);
    }

    #[test]
    fn transform_strong_solution_identity() {
        let g = grid(16);
        let s = RigidState::planar(Vector2::zeros(), Vector2::new(0.1, 0.0), 0.3);
        let atlas = TransformAtlas::identity(&g);
        let u = GridField::from_fn(&g, 2, |x, c| if c == 0 { x.y } else { -x.x });
        let p = GridField::from_fn(&g, 1, |x, _| x.x);
        let sol = transform_strong_solution(&u, &p, &s, &s, &atlas, &atlas, 1e-12).unwrap();
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert!((sol.u.get(i, j, 0) - u.get(i, j, 0)).abs() < 1e-10);
                assert!((sol.u.get(i, j, 1) - u.get(i, j, 1)).abs() < 1e-10);
                assert!((sol.p.get(i, j, 0) - p.get(i, j, 0)).abs() < 1e-10);
            }
        }
        assert_abs_diff_eq!(sol.a.x, 0.1, epsilon = 1e-15);
        assert_abs_diff_eq!(sol.omega, 0.3, epsilon = 1e-15);
    }
}
