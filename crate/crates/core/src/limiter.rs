//! Minmod slopes and one-sided face limits of the piecewise-linear
//! reconstruction, per axis.

use crate::mesh::CellField;
use crate::{Error, Result};

/// Limiter steepness parameter; admissible range is `[1, 2]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LimiterConfig {
    theta: f64,
}

impl LimiterConfig {
    pub fn new(theta: f64) -> Result<LimiterConfig> {
        if !(1.0..=2.0).contains(&theta) {
            return Err(Error::InvalidParameter {
                name: "theta",
                value: theta,
            });
        }
        Ok(LimiterConfig { theta })
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }
}

impl Default for LimiterConfig {
    fn default() -> Self {
        LimiterConfig { theta: 1.5 }
    }
}

/// Minmod of `k >= 2` arguments: zero on sign disagreement, otherwise the
/// smallest magnitude.  Computed as
/// `max_i(min(a_i, 0)) + min_i(max(a_i, 0))`.
pub fn minmod(args: &[f64]) -> f64 {
    debug_assert!(args.len() >= 2);
    let mut neg = f64::NEG_INFINITY;
    let mut pos = f64::INFINITY;
    for &a in args {
        neg = neg.max(a.min(0.0));
        pos = pos.min(a.max(0.0));
    }
    neg + pos
}

/// One-sided face limits along one axis.  Face `i` of a line is the left
/// face of cell `i`; `minus` is the limit from below (from cell `i - 1`) and
/// `plus` the limit from above (from cell `i`).  Values at the two boundary
/// faces of each line are the adjacent cell averages (zero slope).
#[derive(Debug, Clone)]
pub struct AxisFaceLimits {
    pub axis: usize,
    pub minus: Vec<f64>,
    pub plus: Vec<f64>,
    faces_per_line: usize,
    n_lines: usize,
}

impl AxisFaceLimits {
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
}

/// Face limits of the minmod reconstruction on every axis.
#[derive(Debug, Clone)]
pub struct FaceLimits {
    pub per_axis: Vec<AxisFaceLimits>,
}

/// Undivided minmod slope of cell `i` in a line of values `u`.
/// Cells missing a second neighbor get zero slope.
#[inline]
fn cell_slope(u: &[f64], i: usize, theta: f64) -> f64 {
    if i == 0 || i + 1 >= u.len() {
        return 0.0;
    }
    minmod(&[
        theta * (u[i] - u[i - 1]),
        0.5 * (u[i + 1] - u[i - 1]),
        theta * (u[i + 1] - u[i]),
    ])
}

/// Computes the one-sided limits on every face of `axis`.
pub fn axis_face_limits(
    field: &CellField,
    axis: usize,
    config: &LimiterConfig,
) -> Result<AxisFaceLimits> {
    let grid = field.grid();
    let cells = grid.cells(axis);
    if cells < 4 {
        return Err(Error::GridTooSmall { axis, cells });
    }
    let (faces_per_line, n_lines) = grid.face_layout(axis);
    let theta = config.theta();
    let mut minus = vec![0.0; faces_per_line * n_lines];
    let mut plus = vec![0.0; faces_per_line * n_lines];
    let mut line_vals = vec![0.0; cells];
    for line in 0..n_lines {
        for pos in 0..cells {
            line_vals[pos] = field.values()[grid.line_cell(axis, pos, line)];
        }
        let base = line * faces_per_line;
        for face in 0..faces_per_line {
            // limit from below comes from cell face-1, from above from cell face
            let m = if face == 0 {
                line_vals[0]
            } else {
                line_vals[face - 1] + 0.5 * cell_slope(&line_vals, face - 1, theta)
            };
            let p = if face == cells {
                line_vals[cells - 1]
            } else {
                line_vals[face] - 0.5 * cell_slope(&line_vals, face, theta)
            };
            minus[base + face] = m;
            plus[base + face] = p;
        }
    }
    Ok(AxisFaceLimits {
        axis,
        minus,
        plus,
        faces_per_line,
        n_lines,
    })
}

/// Face limits on all axes of the field's grid.
pub fn face_limits(field: &CellField, config: &LimiterConfig) -> Result<FaceLimits> {
    let per_axis = (0..field.grid().dim())
        .map(|axis| axis_face_limits(field, axis, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(FaceLimits { per_axis })
}
