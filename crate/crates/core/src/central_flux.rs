//! Second-order semi-discrete central scheme for space-dependent hyperbolic
//! fluxes, the diffusive flux, and the no-flux boundary closure.
//!
//! The numerical flux through a face is the average of the flux evaluated at
//! the two one-sided reconstruction limits; the local-speed dissipation term
//! `-a (u+ - u-)` attaches only to fluxes flagged as carrying it.  The cell
//! tendency is the conservative divergence of these face values.

use crate::limiter::{axis_face_limits, AxisFaceLimits, LimiterConfig};
use crate::mesh::{CellField, Grid, MAX_DIM};
use crate::{Error, Result};

/// Spatial evaluation point of a face (unused axes are 0).
pub type Point = [f64; MAX_DIM];

/// A scalar flux `f(xi, u)`, optionally carrying the central-scheme
/// dissipation term.
pub struct FluxFunction {
    eval: Box<dyn Fn(Point, f64) -> f64 + Send + Sync>,
    carries_dissipation: bool,
}

impl FluxFunction {
    pub fn new(eval: impl Fn(Point, f64) -> f64 + Send + Sync + 'static) -> FluxFunction {
        FluxFunction {
            eval: Box::new(eval),
            carries_dissipation: false,
        }
    }

    pub fn with_dissipation(
        eval: impl Fn(Point, f64) -> f64 + Send + Sync + 'static,
    ) -> FluxFunction {
        FluxFunction {
            eval: Box::new(eval),
            carries_dissipation: true,
        }
    }

    #[inline]
    pub fn eval(&self, xi: Point, u: f64) -> f64 {
        (self.eval)(xi, u)
    }

    pub fn carries_dissipation(&self) -> bool {
        self.carries_dissipation
    }
}

impl std::fmt::Debug for FluxFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FluxFunction")
            .field("carries_dissipation", &self.carries_dissipation)
            .finish()
    }
}

/// Numerical flux through one face from the one-sided limits:
/// `H = (f(xi, u+) + f(xi, u-)) / 2 - a (u+ - u-)` when the flux carries the
/// dissipation term, plain average otherwise.
pub fn face_flux(
    flux: &FluxFunction,
    xi_face: Point,
    u_minus: f64,
    u_plus: f64,
    a_bound: f64,
) -> Result<f64> {
    debug_assert!(a_bound >= 0.0);
    let mut h = 0.5 * (flux.eval(xi_face, u_plus) + flux.eval(xi_face, u_minus));
    if flux.carries_dissipation {
        h -= a_bound * (u_plus - u_minus);
    }
    if !h.is_finite() {
        return Err(Error::NonFinite {
            context: "face_flux",
        });
    }
    Ok(h)
}

/// Face values along one axis, stored line by line like [`AxisFaceLimits`].
#[derive(Debug, Clone)]
pub struct AxisFaces {
    pub axis: usize,
    pub values: Vec<f64>,
    faces_per_line: usize,
    n_lines: usize,
}

impl AxisFaces {
    pub fn zeros(grid: &Grid, axis: usize) -> AxisFaces {
        let (faces_per_line, n_lines) = grid.face_layout(axis);
        AxisFaces {
            axis,
            values: vec![0.0; faces_per_line * n_lines],
            faces_per_line,
            n_lines,
        }
    }

    pub fn faces_per_line(&self) -> usize {
        self.faces_per_line
    }

    pub fn n_lines(&self) -> usize {
        self.n_lines
    }

    #[inline]
    pub fn index(&self, face: usize, line: usize) -> usize {
        line * self.faces_per_line + face
    }

    /// Zeroes the two domain-boundary faces of every line.
    pub fn zero_boundary(&mut self) {
        for line in 0..self.n_lines {
            let base = line * self.faces_per_line;
            self.values[base] = 0.0;
            self.values[base + self.faces_per_line - 1] = 0.0;
        }
    }
}

/// Hyperbolic and diffusive face values on every axis of a grid.
#[derive(Debug, Clone)]
pub struct FaceFluxSet {
    pub hyperbolic: Vec<AxisFaces>,
    pub diffusive: Vec<AxisFaces>,
}

/// Sets all face values lying on the domain boundary to exactly zero.
/// Idempotent.
pub fn enforce_noflux(set: &mut FaceFluxSet) {
    for f in set.hyperbolic.iter_mut().chain(set.diffusive.iter_mut()) {
        f.zero_boundary();
    }
}

/// Evaluation point of face `face` in line `line` of `axis`: the face
/// coordinate along the axis, cell centers on the others.
#[inline]
pub fn face_point(grid: &Grid, axis: usize, face: usize, line: usize) -> Point {
    let mut xi = [0.0; MAX_DIM];
    xi[axis] = grid.face(axis, face);
    if grid.dim() == 2 {
        xi[1 - axis] = grid.center(1 - axis, line);
    }
    xi
}

/// Evaluates the numerical flux of `flux` on every face of `axis`, with the
/// boundary faces zeroed.
pub fn axis_face_values(
    flux: &FluxFunction,
    grid: &Grid,
    limits: &AxisFaceLimits,
    a_bound: f64,
) -> Result<AxisFaces> {
    let axis = limits.axis;
    let mut out = AxisFaces::zeros(grid, axis);
    for line in 0..out.n_lines() {
        for face in 1..out.faces_per_line() - 1 {
            let idx = out.index(face, line);
            let xi = face_point(grid, axis, face, line);
            out.values[idx] = face_flux(flux, xi, limits.minus[idx], limits.plus[idx], a_bound)?;
        }
    }
    Ok(out)
}

/// Divergence of per-axis face values: `out[k] += sign * (F_{k+1/2} - F_{k-1/2}) / dx`.
pub fn add_flux_divergence(grid: &Grid, faces: &AxisFaces, sign: f64, out: &mut [f64]) {
    let axis = faces.axis;
    let inv_dx = sign / grid.dx(axis);
    let cells = grid.cells(axis);
    for line in 0..faces.n_lines() {
        for pos in 0..cells {
            let lo = faces.values[faces.index(pos, line)];
            let hi = faces.values[faces.index(pos + 1, line)];
            out[grid.line_cell(axis, pos, line)] += inv_dx * (hi - lo);
        }
    }
}

/// Semi-discrete hyperbolic right-hand side
/// `du_k/dtau = -sum_j (H_{k^j+1/2} - H_{k^j-1/2}) / dx_j`
/// for a set of fluxes per axis, with no-flux boundaries.
pub fn hyperbolic_rhs(
    field: &CellField,
    fluxes_per_axis: &[Vec<&FluxFunction>],
    a_bound: f64,
    config: &LimiterConfig,
) -> Result<Vec<f64>> {
    let grid = field.grid();
    if fluxes_per_axis.len() != grid.dim() {
        return Err(Error::DimensionMismatch {
            context: "hyperbolic_rhs",
            expected: grid.dim(),
            got: fluxes_per_axis.len(),
        });
    }
    let mut out = vec![0.0; grid.total_cells()];
    for axis in 0..grid.dim() {
        let limits = axis_face_limits(field, axis, config)?;
        for flux in &fluxes_per_axis[axis] {
            let faces = axis_face_values(flux, grid, &limits, a_bound)?;
            add_flux_divergence(grid, &faces, -1.0, &mut out);
        }
    }
    Ok(out)
}

/// Diffusive face values `P_{k+1/2} = nu (v_{k+1} - v_k) / dx` on one axis,
/// zero on boundary faces.
pub fn diffusion_faces(field: &CellField, axis: usize, nu: f64) -> Result<AxisFaces> {
    if nu < 0.0 {
        return Err(Error::InvalidParameter {
            name: "nu",
            value: nu,
        });
    }
    let grid = field.grid();
    let mut out = AxisFaces::zeros(grid, axis);
    if nu == 0.0 {
        return Ok(out);
    }
    let inv_dx = nu / grid.dx(axis);
    let cells = grid.cells(axis);
    for line in 0..out.n_lines() {
        for face in 1..cells {
            let below = field.values()[grid.line_cell(axis, face - 1, line)];
            let above = field.values()[grid.line_cell(axis, face, line)];
            let idx = out.index(face, line);
            out.values[idx] = inv_dx * (above - below);
        }
    }
    Ok(out)
}

/// Diffusion tendency `sum_j (P_{k^j+1/2} - P_{k^j-1/2}) / dx_j` with no-flux
/// boundaries; linear in the field.
pub fn diffusion_rhs(field: &CellField, nu: f64) -> Result<Vec<f64>> {
    let grid = field.grid();
    let mut out = vec![0.0; grid.total_cells()];
    for axis in 0..grid.dim() {
        let faces = diffusion_faces(field, axis, nu)?;
        add_flux_divergence(grid, &faces, 1.0, &mut out);
    }
    Ok(out)
}
