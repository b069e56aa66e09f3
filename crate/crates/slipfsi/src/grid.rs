//! Fixed reference-domain discretization: a polar annulus grid with
//! Cartesian-component fields, second-order stencils, boundary quadrature
//! and bilinear interpolation.
//!
//! Radial node rows are indexed 1..=n_r (row 1 on the inner circle, row n_r
//! on the outer circle); rows 0 and n_r+1 are ghost rings used by the radial
//! stencils. The angular index is periodic.

use crate::error::{Error, Result};
use nalgebra::Vector2;

#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusGrid {
    pub n_r: usize,
    pub n_theta: usize,
    pub r_inner: f64,
    pub r_outer: f64,
    pub dr: f64,
    pub dtheta: f64,
}

impl AnnulusGrid {
    pub fn new(n_r: usize, n_theta: usize, r_inner: f64, r_outer: f64) -> Result<Self> {
        if r_inner <= 0.0 || r_inner >= r_outer {
            return Err(Error::Config(format!(
                "need 0 < r_inner < r_outer, got {r_inner}, {r_outer}"
            )));
        }
        if n_r < 8 || n_theta < 8 {
            return Err(Error::Config(format!(
                "grid too coarse: n_r = {n_r}, n_theta = {n_theta} (minimum 8)"
            )));
        }
        Ok(AnnulusGrid {
            n_r,
            n_theta,
            r_inner,
            r_outer,
            dr: (r_outer - r_inner) / (n_r - 1) as f64,
            dtheta: std::f64::consts::TAU / n_theta as f64,
        })
    }

    /// Radius of node row `i` (ghost rows 0 and n_r+1 included).
    #[inline]
    pub fn radius(&self, i: usize) -> f64 {
        self.r_inner + (i as f64 - 1.0) * self.dr
    }

    #[inline]
    pub fn theta(&self, j: usize) -> f64 {
        j as f64 * self.dtheta
    }

    /// Cartesian position of node (i, j).
    #[inline]
    pub fn node(&self, i: usize, j: usize) -> Vector2<f64> {
        let r = self.radius(i);
        let th = self.theta(j);
        Vector2::new(r * th.cos(), r * th.sin())
    }

    /// Polar area weight of node (i, j): trapezoid in r, uniform in theta.
    #[inline]
    pub fn cell_weight(&self, i: usize) -> f64 {
        let half = if i == 1 || i == self.n_r { 0.5 } else { 1.0 };
        half * self.radius(i) * self.dr * self.dtheta
    }

    /// Smallest mesh spacing (radial vs inner-circle arc).
    pub fn h_min(&self) -> f64 {
        self.dr.min(self.r_inner * self.dtheta)
    }
}

/// Node-sampled field with `comps` components per node and ghost rings.
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    pub n_r: usize,
    pub n_theta: usize,
    pub comps: usize,
    pub t: f64,
    data: Vec<f64>,
}

impl GridField {
    /// Flat storage including ghost rows, row-major over (row, column, component).
    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn zeros(grid: &AnnulusGrid, comps: usize) -> Self {
        GridField {
            n_r: grid.n_r,
            n_theta: grid.n_theta,
            comps,
            t: 0.0,
            data: vec![0.0; (grid.n_r + 2) * grid.n_theta * comps],
        }
    }

    pub fn from_fn(grid: &AnnulusGrid, comps: usize, mut f: impl FnMut(Vector2<f64>, usize) -> f64) -> Self {
        let mut out = GridField::zeros(grid, comps);
        for i in 0..=grid.n_r + 1 {
            for j in 0..grid.n_theta {
                let x = grid.node(i, j);
                for c in 0..comps {
                    out.set(i, j, c, f(x, c));
                }
            }
        }
        out
    }

    #[inline]
    fn idx(&self, i: usize, j: usize, c: usize) -> usize {
        debug_assert!(i <= self.n_r + 1 && c < self.comps);
        let j = j.rem_euclid(self.n_theta);
        (i * self.n_theta + j) * self.comps + c
    }

    /// Angular index with signed wrap-around.
    #[inline]
    pub fn get_wrap(&self, i: usize, j: isize, c: usize) -> f64 {
        let j = j.rem_euclid(self.n_theta as isize) as usize;
        self.data[(i * self.n_theta + j) * self.comps + c]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, c: usize) -> f64 {
        self.data[self.idx(i, j, c)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, c: usize, v: f64) {
        let k = self.idx(i, j, c);
        self.data[k] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn assert_finite(&self) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::ContractViolation("field contains NaN/Inf".into()))
        }
    }

    /// Quadratic extrapolation of both ghost rings from the interior.
    pub fn fill_ghosts_extrapolate(&mut self) {
        let n = self.n_r;
        for j in 0..self.n_theta {
            for c in 0..self.comps {
                let inner = 4.0 * self.get(1, j, c) - 6.0 * self.get(2, j, c)
                    + 4.0 * self.get(3, j, c)
                    - self.get(4, j, c);
                let outer = 4.0 * self.get(n, j, c) - 6.0 * self.get(n - 1, j, c)
                    + 4.0 * self.get(n - 2, j, c)
                    - self.get(n - 3, j, c);
                self.set(0, j, c, inner);
                self.set(n + 1, j, c, outer);
            }
        }
    }

    pub fn scaled_add(&mut self, other: &GridField, s: f64) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }
}

/// Build the reference annulus grid from radii and node counts.
pub fn build_annulus_grid(n_r: usize, n_theta: usize, r_inner: f64, r_outer: f64) -> Result<AnnulusGrid> {
    AnnulusGrid::new(n_r, n_theta, r_inner, r_outer)
}

/// d/dr by centered differences; ghost rows of the input must be filled.
/// Ghost rows of the output are extrapolated so the result is chainable.
pub fn ddr(f: &GridField, grid: &AnnulusGrid) -> GridField {
    let mut out = GridField::zeros(grid, f.comps);
    out.t = f.t;
    let inv = 1.0 / (2.0 * grid.dr);
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            for c in 0..f.comps {
                out.set(i, j, c, (f.get(i + 1, j, c) - f.get(i - 1, j, c)) * inv);
            }
        }
    }
    out.fill_ghosts_extrapolate();
    out
}

/// d/dtheta by centered differences, periodic.
pub fn ddtheta(f: &GridField, grid: &AnnulusGrid) -> GridField {
    let mut out = GridField::zeros(grid, f.comps);
    out.t = f.t;
    let inv = 1.0 / (2.0 * grid.dtheta);
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            let j = j as isize;
            for c in 0..f.comps {
                out.set(i, j as usize, c, (f.get_wrap(i, j + 1, c) - f.get_wrap(i, j - 1, c)) * inv);
            }
        }
    }
    out.fill_ghosts_extrapolate();
    out
}

/// Cartesian partial derivatives (d/dx, d/dy) of every component, chained
/// through the polar layout. Returns one field per direction.
pub fn cartesian_gradient(f: &GridField, grid: &AnnulusGrid) -> (GridField, GridField) {
    let fr = ddr(f, grid);
    let ft = ddtheta(f, grid);
    let mut fx = GridField::zeros(grid, f.comps);
    let mut fy = GridField::zeros(grid, f.comps);
    fx.t = f.t;
    fy.t = f.t;
    for i in 1..=grid.n_r {
        let r = grid.radius(i);
        for j in 0..grid.n_theta {
            let th = grid.theta(j);
            let (s, c0) = th.sin_cos();
            for c in 0..f.comps {
                let dr = fr.get(i, j, c);
                let dt = ft.get(i, j, c);
                fx.set(i, j, c, c0 * dr - s / r * dt);
                fy.set(i, j, c, s * dr + c0 / r * dt);
            }
        }
    }
    fx.fill_ghosts_extrapolate();
    fy.fill_ghosts_extrapolate();
    (fx, fy)
}

/// Compact second-order Laplacian in polar form, applied componentwise.
/// Input ghosts must be filled.
pub fn laplacian(f: &GridField, grid: &AnnulusGrid) -> GridField {
    let mut out = GridField::zeros(grid, f.comps);
    out.t = f.t;
    let idr2 = 1.0 / (grid.dr * grid.dr);
    let idt2 = 1.0 / (grid.dtheta * grid.dtheta);
    for i in 1..=grid.n_r {
        let r = grid.radius(i);
        for j in 0..grid.n_theta {
            let j = j as isize;
            for c in 0..f.comps {
                let fc = f.get(i, j as usize, c);
                let frr = (f.get(i + 1, j as usize, c) - 2.0 * fc + f.get(i - 1, j as usize, c)) * idr2;
                let fr = (f.get(i + 1, j as usize, c) - f.get(i - 1, j as usize, c)) / (2.0 * grid.dr);
                let ftt = (f.get_wrap(i, j + 1, c) - 2.0 * fc + f.get_wrap(i, j - 1, c)) * idt2;
                out.set(i, j as usize, c, frr + fr / r + ftt / (r * r));
            }
        }
    }
    out.fill_ghosts_extrapolate();
    out
}

/// Divergence of a 2-component Cartesian vector field.
pub fn divergence(f: &GridField, grid: &AnnulusGrid) -> Result<GridField> {
    if f.comps != 2 {
        return Err(Error::ShapeMismatch(format!("divergence needs 2 components, got {}", f.comps)));
    }
    let (fx, fy) = cartesian_gradient(f, grid);
    let mut out = GridField::zeros(grid, 1);
    out.t = f.t;
    for i in 1..=grid.n_r {
        for j in 0..grid.n_theta {
            out.set(i, j, 0, fx.get(i, j, 0) + fy.get(i, j, 1));
        }
    }
    out.fill_ghosts_extrapolate();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Gradient,
    Divergence,
    Laplacian,
}

/// Dispatching wrapper over the individual stencils.
pub fn discrete_operator(f: &GridField, kind: OperatorKind, grid: &AnnulusGrid) -> Result<GridField> {
    f.assert_finite()?;
    match kind {
        OperatorKind::Gradient => {
            if f.comps != 1 {
                return Err(Error::ShapeMismatch("gradient expects a scalar field".into()));
            }
            let (fx, fy) = cartesian_gradient(f, grid);
            let mut out = GridField::zeros(grid, 2);
            out.t = f.t;
            for i in 0..=grid.n_r + 1 {
                for j in 0..grid.n_theta {
                    out.set(i, j, 0, fx.get(i, j, 0));
                    out.set(i, j, 1, fy.get(i, j, 0));
                }
            }
            Ok(out)
        }
        OperatorKind::Divergence => divergence(f, grid),
        OperatorKind::Laplacian => Ok(laplacian(f, grid)),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BoundaryNode {
    pub index_j: usize,
    pub point: Vector2<f64>,
    /// Unit normal. On the inner boundary it points toward the body center
    /// (into the body); on the outer boundary it points out of the fluid.
    pub normal: Vector2<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundarySide {
    Inner,
    Outer,
}

pub fn boundary_quadrature(grid: &AnnulusGrid, which: BoundarySide) -> Vec<BoundaryNode> {
    let (r, sign) = match which {
        BoundarySide::Inner => (grid.r_inner, -1.0),
        BoundarySide::Outer => (grid.r_outer, 1.0),
    };
    (0..grid.n_theta)
        .map(|j| {
            let th = grid.theta(j);
            let dir = Vector2::new(th.cos(), th.sin());
            BoundaryNode {
                index_j: j,
                point: r * dir,
                normal: sign * dir,
                weight: r * grid.dtheta,
            }
        })
        .collect()
}

/// Bilinear interpolation in (r, theta) at a Cartesian point of the
/// reference annulus. Half-cell tolerance at the radial boundaries (the
/// ghost rings participate there).
pub fn interpolate(f: &GridField, grid: &AnnulusGrid, point: Vector2<f64>) -> Result<Vec<f64>> {
    let r = point.norm();
    let s = (r - grid.r_inner) / grid.dr;
    if !(-0.5..=(grid.n_r as f64 - 0.5)).contains(&s) {
        return Err(Error::OutOfDomain(format!(
            "radius {r:.6e} outside [{:.6e}, {:.6e}] (half-cell tolerance)",
            grid.r_inner, grid.r_outer
        )));
    }
    let theta = point.y.atan2(point.x).rem_euclid(std::f64::consts::TAU);
    let ti = theta / grid.dtheta;

    // row index into storage (node row 1 is at s = 0)
    let i0 = (s.floor() as isize + 1).clamp(0, grid.n_r as isize) as usize;
    let fr = s - s.floor();
    let j0 = ti.floor() as isize;
    let ft = ti - ti.floor();

    let mut out = vec![0.0; f.comps];
    for c in 0..f.comps {
        let f00 = f.get_wrap(i0, j0, c);
        let f01 = f.get_wrap(i0, j0 + 1, c);
        let f10 = f.get_wrap(i0 + 1, j0, c);
        let f11 = f.get_wrap(i0 + 1, j0 + 1, c);
        out[c] = (1.0 - fr) * ((1.0 - ft) * f00 + ft * f01) + fr * ((1.0 - ft) * f10 + ft * f11);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid_8x16() -> AnnulusGrid {
        AnnulusGrid::new(8, 16, 1.0, 2.0).unwrap()
    }

    #[test]
    fn constructive_counts() {
        let g = grid_8x16();
        assert_eq!(g.n_r, 8);
        assert_eq!(g.n_theta, 16);
        assert_eq!(boundary_quadrature(&g, BoundarySide::Inner).len(), 16);
        assert!(AnnulusGrid::new(8, 16, 2.0, 1.0).is_err());
        assert!(AnnulusGrid::new(4, 16, 1.0, 2.0).is_err());
    }

    #[test]
    fn area_and_arc_closed_forms() {
        let g = AnnulusGrid::new(32, 64, 1.0, 2.0).unwrap();
        let mut area = 0.0;
        for i in 1..=g.n_r {
            for _ in 0..g.n_theta {
                area += g.cell_weight(i);
            }
        }
        let exact = std::f64::consts::PI * (4.0 - 1.0);
        assert!((area - exact).abs() < 1e-10, "trapezoid in r is exact for the area integrand");

        let quad = boundary_quadrature(&g, BoundarySide::Inner);
        let arc: f64 = quad.iter().map(|n| n.weight).sum();
        assert_abs_diff_eq!(arc, std::f64::consts::TAU, epsilon = 1e-12);
    }

    #[test]
    fn inner_normal_points_into_body() {
        let g = grid_8x16();
        let quad = boundary_quadrature(&g, BoundarySide::Inner);
        let n0 = quad[0].normal;
        assert_abs_diff_eq!(n0.x, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(n0.y, 0.0, epsilon = 1e-15);
        // closed-curve symmetry: sum of n dGamma = 0
        let sum: Vector2<f64> = quad.iter().map(|n| n.weight * n.normal).sum();
        assert!(sum.norm() < 1e-12);
    }

    #[test]
    fn constant_field_has_zero_gradient() {
        let g = grid_8x16();
        let f = GridField::from_fn(&g, 1, |_, _| 3.7);
        let grad = discrete_operator(&f, OperatorKind::Gradient, &g).unwrap();
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert!(grad.get(i, j, 0).abs() < 1e-12);
                assert!(grad.get(i, j, 1).abs() < 1e-12);
            }
        }
    }

    fn max_err_laplacian(n_r: usize, n_theta: usize) -> f64 {
        let g = AnnulusGrid::new(n_r, n_theta, 1.0, 2.0).unwrap();
        // f = x^2 + y^2 -> laplacian = 4
        let f = GridField::from_fn(&g, 1, |x, _| x.norm_squared());
        let lap = discrete_operator(&f, OperatorKind::Laplacian, &g).unwrap();
        let mut err: f64 = 0.0;
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                err = err.max((lap.get(i, j, 0) - 4.0).abs());
            }
        }
        err
    }

    #[test]
    fn laplacian_manufactured_quadratic() {
        // r^2 is quadratic in r and constant in theta: compact stencil is exact
        assert!(max_err_laplacian(16, 32) < 1e-10);
    }

    fn max_err_laplacian_smooth(n: usize) -> f64 {
        let g = AnnulusGrid::new(n, 2 * n, 1.0, 2.0).unwrap();
        let f = GridField::from_fn(&g, 1, |x, _| (x.x * 1.3).sin() * (x.y * 0.9).cos());
        let lap = discrete_operator(&f, OperatorKind::Laplacian, &g).unwrap();
        let exact = |x: Vector2<f64>| -(1.3f64 * 1.3 + 0.9 * 0.9) * (x.x * 1.3).sin() * (x.y * 0.9).cos();
        let mut err: f64 = 0.0;
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                err = err.max((lap.get(i, j, 0) - exact(g.node(i, j))).abs());
            }
        }
        err
    }

    #[test]
    fn laplacian_second_order_on_smooth_field() {
        let e1 = max_err_laplacian_smooth(24);
        let e2 = max_err_laplacian_smooth(48);
        let slope = (e1 / e2).log2();
        assert!(slope >= 1.8, "laplacian slope {slope:.2} (errors {e1:.3e}, {e2:.3e})");
    }

    #[test]
    fn rotation_field_is_divergence_free() {
        let g = AnnulusGrid::new(24, 48, 1.0, 2.0).unwrap();
        let f = GridField::from_fn(&g, 2, |x, c| if c == 0 { -x.y } else { x.x });
        let div = discrete_operator(&f, OperatorKind::Divergence, &g).unwrap();
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert!(div.get(i, j, 0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn stencils_commute_with_theta_shift() {
        let g = grid_8x16();
        let f = GridField::from_fn(&g, 1, |x, _| (x.x * 2.0).sin() + x.y);
        let mut shifted = GridField::zeros(&g, 1);
        for i in 0..=g.n_r + 1 {
            for j in 0..g.n_theta {
                shifted.set(i, (j + 1) % g.n_theta, 0, f.get(i, j, 0));
            }
        }
        // shift does not commute with Cartesian operators (the frame turns),
        // but it commutes exactly with the polar building blocks
        let a = ddtheta(&f, &g);
        let b = ddtheta(&shifted, &g);
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert_eq!(a.get(i, j, 0), b.get(i, (j + 1) % g.n_theta, 0));
            }
        }
        let a = ddr(&f, &g);
        let b = ddr(&shifted, &g);
        for i in 1..=g.n_r {
            for j in 0..g.n_theta {
                assert_eq!(a.get(i, j, 0), b.get(i, (j + 1) % g.n_theta, 0));
            }
        }
    }

    #[test]
    fn interpolation_node_and_affine_exactness() {
        let g = AnnulusGrid::new(16, 32, 1.0, 2.0).unwrap();
        // affine in (r, theta): bilinear reproduces exactly away from the seam
        let f = GridField::from_fn(&g, 1, |x, _| {
            let r = x.norm();
            let th = x.y.atan2(x.x).rem_euclid(std::f64::consts::TAU);
            2.0 * r + 0.1 * th
        });
        let node = g.node(5, 7);
        let v = interpolate(&f, &g, node).unwrap();
        assert_abs_diff_eq!(v[0], f.get(5, 7, 0), epsilon = 1e-13);

        let r = 1.33;
        let th: f64 = 0.71;
        let p = Vector2::new(r * th.cos(), r * th.sin());
        let v = interpolate(&f, &g, p).unwrap();
        assert_abs_diff_eq!(v[0], 2.0 * r + 0.1 * th, epsilon = 1e-12);

        assert!(interpolate(&f, &g, Vector2::new(0.2, 0.0)).is_err());
    }

    #[test]
    fn interpolation_second_order_on_smooth_field() {
        let err = |n: usize| -> f64 {
            let g = AnnulusGrid::new(n, 2 * n, 1.0, 2.0).unwrap();
            let f = GridField::from_fn(&g, 1, |x, _| (3.0 * x.x).sin() * x.y);
            let mut e: f64 = 0.0;
            for k in 0..200 {
                let r = 1.05 + 0.9 * (k as f64 / 200.0);
                let th = 0.37 + 6.0 * (k as f64 / 200.0) * 0.9;
                let p = Vector2::new(r * th.cos(), r * th.sin());
                let v = interpolate(&f, &g, p).unwrap()[0];
                e = e.max((v - (3.0 * p.x).sin() * p.y).abs());
            }
            e
        };
        let e1 = err(24);
        let e2 = err(48);
        assert!((e1 / e2).log2() >= 1.8, "interp slope {:.2}", (e1 / e2).log2());
    }
}
