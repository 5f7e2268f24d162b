//! Uniform cell-centered rectangular grids in one and two dimensions.
//!
//! An axis with parameter `n` carries `n + 2` cells: the two outermost cells
//! are the boundary layers of the index set, handled by zeroing their outer
//! face fluxes rather than by ghost cells.  Faces on axis `j` sit at
//! `lo + k * dx_j` for `k = 0..=n+2`, so the first and last face coordinates
//! reproduce the domain bounds exactly.

use crate::{Error, Result};

/// Maximum supported spatial dimension.
pub const MAX_DIM: usize = 2;

/// Fewest cells (parameter `n`) per axis; the minmod stencil needs two
/// neighbors on each side of an interior face.
pub const MIN_CELLS: usize = 4;

/// Uniform rectangular grid.  Axis 0 is the fastest-varying index in the
/// flattened cell ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    bounds: [(f64, f64); MAX_DIM],
    n: [usize; MAX_DIM],
    dx: [f64; MAX_DIM],
}

impl Grid {
    /// Builds a grid; `bounds[j]` and `n[j]` are read for `j < dim`.
    pub fn build(dim: usize, bounds: [(f64, f64); MAX_DIM], n: [usize; MAX_DIM]) -> Result<Grid> {
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::UnsupportedDim(dim));
        }
        let mut dx = [1.0; MAX_DIM];
        for axis in 0..dim {
            let (lo, hi) = bounds[axis];
            if !(lo.is_finite() && hi.is_finite()) || lo >= hi {
                return Err(Error::InvalidBounds { axis, lo, hi });
            }
            if n[axis] < MIN_CELLS {
                return Err(Error::TooFewCells {
                    axis,
                    got: n[axis],
                    min: MIN_CELLS,
                });
            }
            dx[axis] = (hi - lo) / (n[axis] + 2) as f64;
        }
        Ok(Grid {
            dim,
            bounds,
            n,
            dx,
        })
    }

    pub fn line(lo: f64, hi: f64, n: usize) -> Result<Grid> {
        Grid::build(1, [(lo, hi), (0.0, 1.0)], [n, 0])
    }

    pub fn rect(bounds_x: (f64, f64), bounds_y: (f64, f64), nx: usize, ny: usize) -> Result<Grid> {
        Grid::build(2, [bounds_x, bounds_y], [nx, ny])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bounds(&self, axis: usize) -> (f64, f64) {
        self.bounds[axis]
    }

    pub fn dx(&self, axis: usize) -> f64 {
        self.dx[axis]
    }

    pub fn min_dx(&self) -> f64 {
        (0..self.dim).map(|j| self.dx[j]).fold(f64::INFINITY, f64::min)
    }

    /// Number of cells along `axis`, including the two boundary-layer cells.
    pub fn cells(&self, axis: usize) -> usize {
        if axis < self.dim {
            self.n[axis] + 2
        } else {
            1
        }
    }

    pub fn total_cells(&self) -> usize {
        (0..self.dim).map(|j| self.cells(j)).product()
    }

    /// Volume of a single cell (all cells are congruent).
    pub fn cell_volume(&self) -> f64 {
        (0..self.dim).map(|j| self.dx[j]).product()
    }

    /// Coordinate of face `k` on `axis` (the left face of cell `k`),
    /// `k = 0..=cells(axis)`.
    pub fn face(&self, axis: usize, k: usize) -> f64 {
        self.bounds[axis].0 + k as f64 * self.dx[axis]
    }

    /// Center coordinate of cell `k` on `axis`.
    pub fn center(&self, axis: usize, k: usize) -> f64 {
        self.bounds[axis].0 + (k as f64 + 0.5) * self.dx[axis]
    }

    /// Center of the cell with multi-index `k` (unused axes give 0).
    pub fn cell_center(&self, k: [usize; MAX_DIM]) -> [f64; MAX_DIM] {
        let mut c = [0.0; MAX_DIM];
        for axis in 0..self.dim {
            c[axis] = self.center(axis, k[axis]);
        }
        c
    }

    /// Largest |coordinate| attained on `axis` over the closed domain.
    pub fn max_abs_coord(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        lo.abs().max(hi.abs())
    }

    /// Flattened index of multi-index `k`; axis 0 varies fastest.
    pub fn flatten(&self, k: [usize; MAX_DIM]) -> usize {
        if self.dim == 1 {
            k[0]
        } else {
            k[0] + self.cells(0) * k[1]
        }
    }

    pub fn unflatten(&self, idx: usize) -> [usize; MAX_DIM] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx % self.cells(0), idx / self.cells(0)]
        }
    }

    /// Face layout for sweeps along `axis`: `(faces_per_line, n_lines)`.
    /// A line is a 1d row of cells in the sweep direction.
    pub fn face_layout(&self, axis: usize) -> (usize, usize) {
        let faces = self.cells(axis) + 1;
        let lines = if self.dim == 1 { 1 } else { self.cells(1 - axis) };
        (faces, lines)
    }

    /// Flattened cell index of position `pos` along `axis` in line `line`.
    pub fn line_cell(&self, axis: usize, pos: usize, line: usize) -> usize {
        if self.dim == 1 {
            pos
        } else if axis == 0 {
            pos + self.cells(0) * line
        } else {
            line + self.cells(0) * pos
        }
    }
}

/// Cell-average values over a [`Grid`], flattened with axis 0 fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct CellField {
    grid: Grid,
    values: Vec<f64>,
}

impl CellField {
    pub fn zeros(grid: &Grid) -> CellField {
        CellField {
            grid: grid.clone(),
            values: vec![0.0; grid.total_cells()],
        }
    }

    pub fn from_values(grid: &Grid, values: Vec<f64>) -> Result<CellField> {
        if values.len() != grid.total_cells() {
            return Err(Error::DimensionMismatch {
                context: "CellField::from_values",
                expected: grid.total_cells(),
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "CellField::from_values",
            });
        }
        Ok(CellField {
            grid: grid.clone(),
            values,
        })
    }

    /// Initializes cell averages by midpoint sampling: second-order accurate
    /// and exact for affine data.
    pub fn from_fn(grid: &Grid, f: impl Fn([f64; MAX_DIM]) -> f64) -> Result<CellField> {
        let mut values = vec![0.0; grid.total_cells()];
        for (idx, value) in values.iter_mut().enumerate() {
            let k = grid.unflatten(idx);
            let v = f(grid.cell_center(k));
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "CellField::from_fn",
                });
            }
            *value = v;
        }
        Ok(CellField {
            grid: grid.clone(),
            values,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn at(&self, k: [usize; MAX_DIM]) -> f64 {
        self.values[self.grid.flatten(k)]
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Total mass: cell volume times the sum of all cell averages.
    pub fn mass(&self) -> f64 {
        self.grid.cell_volume() * self.values.iter().sum::<f64>()
    }

    /// Volume-weighted L2 norm.
    pub fn l2_norm(&self) -> f64 {
        (self.grid.cell_volume() * self.values.iter().map(|v| v * v).sum::<f64>()).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn faces_and_centers_1d() {
        // bounds (-5, 5), n = 8 -> 10 cells of width 1, faces at -5 + k.
        let g = Grid::line(-5.0, 5.0, 8).unwrap();
        assert_eq!(g.cells(0), 10);
        assert_eq!(g.dx(0), 1.0);
        for k in 0..=10 {
            assert_eq!(g.face(0, k), -5.0 + k as f64);
        }
        assert_eq!(g.face(0, 0), -5.0);
        assert_eq!(g.face(0, 10), 5.0);
        assert_eq!(g.center(0, 0), -4.5);
    }

    #[test]
    fn face_spacing_within_ulp() {
        let g = Grid::line(-5.0, 5.0, 98).unwrap();
        let dx = g.dx(0);
        for k in 0..g.cells(0) {
            let w = g.face(0, k + 1) - g.face(0, k);
            assert!((w - dx).abs() <= dx * f64::EPSILON * 4.0, "k = {k}: {w} vs {dx}");
        }
    }

    #[test]
    fn paper_domains() {
        let g = Grid::line(-5.0, 5.0, 198).unwrap();
        assert_eq!(g.bounds(0), (-5.0, 5.0));
        let g2 = Grid::rect((-5.0, 5.0), (-5.0, 5.0), 48, 48).unwrap();
        assert_eq!(g2.cells(0), 50);
        assert_eq!(g2.cells(1), 50);
        assert_eq!(g2.cell_volume(), 0.2 * 0.2);
    }

    #[test]
    fn invalid_inputs() {
        assert!(matches!(
            Grid::line(5.0, -5.0, 8),
            Err(Error::InvalidBounds { .. })
        ));
        assert!(matches!(
            Grid::line(-5.0, 5.0, 3),
            Err(Error::TooFewCells { .. })
        ));
        assert!(matches!(
            Grid::build(3, [(-1.0, 1.0), (-1.0, 1.0)], [8, 8]),
            Err(Error::UnsupportedDim(3))
        ));
    }

    #[test]
    fn flatten_unflatten_bijection() {
        let g = Grid::rect((-1.0, 1.0), (-2.0, 2.0), 6, 9).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = [rng.random_range(0..g.cells(0)), rng.random_range(0..g.cells(1))];
            assert_eq!(g.unflatten(g.flatten(k)), k);
        }
        for idx in 0..g.total_cells() {
            assert_eq!(g.flatten(g.unflatten(idx)), idx);
        }
    }

    #[test]
    fn midpoint_init_constant_and_linear() {
        let g = Grid::line(-5.0, 5.0, 8).unwrap();
        let c = CellField::from_fn(&g, |_| 3.25).unwrap();
        assert!(c.values().iter().all(|&v| v == 3.25));

        // u0(x) = x on cells of width 1: midpoint equals the exact average.
        let f = CellField::from_fn(&g, |x| x[0]).unwrap();
        assert_eq!(f.at([4, 0]), -0.5);
        assert_eq!(f.at([5, 0]), 0.5);
    }

    #[test]
    fn paper_1d_profile_samples() {
        // u0(x) = sin(2x) on [-pi/2, 0] plus sin(x) on [0, pi].
        let g = Grid::line(-5.0, 5.0, 198).unwrap();
        let u0 = |x: f64| {
            if (-std::f64::consts::FRAC_PI_2..=0.0).contains(&x) {
                (2.0 * x).sin()
            } else if (0.0..=std::f64::consts::PI).contains(&x) {
                x.sin()
            } else {
                0.0
            }
        };
        let f = CellField::from_fn(&g, |x| u0(x[0])).unwrap();
        for idx in 0..f.len() {
            let x = g.center(0, idx);
            assert_eq!(f.values()[idx], u0(x));
        }
        assert!(f.max_abs() <= 1.0);
    }

    #[test]
    fn from_fn_rejects_non_finite() {
        let g = Grid::line(-1.0, 1.0, 8).unwrap();
        let r = CellField::from_fn(&g, |x| 1.0 / x[0]);
        // centers avoid 0 on this grid; force a NaN instead
        assert!(r.is_ok());
        assert!(matches!(
            CellField::from_fn(&g, |_| f64::NAN),
            Err(Error::NonFinite { .. })
        ));
    }
}
