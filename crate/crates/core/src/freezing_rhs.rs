//! Assembly of the discrete freezing operator bundle for the d-dimensional
//! Burgers' equation in scaled/translated coordinates, together with the
//! wave-speed bound and the two phase conditions.
//!
//! The semi-discrete system reads `v' = -H0(v) - H1(v) mu + P v`, where the
//! `d + 1` columns of `H1` hold the flux differences of the scaling and
//! translation families (with the zero-order scaling source folded into the
//! first column) and `H0` holds the Burgers flux including the central-scheme
//! dissipation.

use crate::central_flux::{
    add_flux_divergence, face_point, AxisFaces, FluxFunction, Point,
};
use crate::limiter::{axis_face_limits, LimiterConfig};
use crate::linear_solvers::{solve_small, SmallSolve};
use crate::mesh::{CellField, Grid, MAX_DIM};
use crate::{Error, Result};
use nalgebra::DMatrix;

/// Which algebraic closure is imposed on the freezing system.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseCondition {
    /// Minimizes `||v_tau||` over mu at every instant (index 1).
    Orthogonal,
    /// Pins `v` to the hyperplane through a reference profile (index 2).
    Fixed,
}

/// Cached reference-side quantities of the fixed phase condition.
#[derive(Debug, Clone)]
pub struct FixedPhaseData {
    /// Columns of `H1` evaluated at the reference profile.
    pub psi: Vec<Vec<f64>>,
    /// Volume-weighted products `psi_i . u_hat`.
    pub psi_dot_ref: Vec<f64>,
    /// Column norms `||psi_i||` (volume weighted), for relative residuals.
    pub psi_norms: Vec<f64>,
    /// `||u_hat||` (volume weighted).
    pub ref_norm: f64,
    pub reference: CellField,
}

/// Physical and symmetry parameters of a freezing run.
#[derive(Debug, Clone)]
pub struct FreezingProblem {
    dim: usize,
    nu: f64,
    p: f64,
    a: [f64; MAX_DIM],
    grid: Grid,
    limiter: LimiterConfig,
    phase: PhaseCondition,
    fixed_data: Option<FixedPhaseData>,
    lambda_cfl: f64,
}

impl FreezingProblem {
    pub fn new(
        grid: Grid,
        nu: f64,
        p: f64,
        a: [f64; MAX_DIM],
        limiter: LimiterConfig,
        phase: PhaseCondition,
        reference: Option<CellField>,
        lambda_cfl: f64,
    ) -> Result<FreezingProblem> {
        let dim = grid.dim();
        if nu < 0.0 || !nu.is_finite() {
            return Err(Error::InvalidParameter {
                name: "nu",
                value: nu,
            });
        }
        if p <= 1.0 || !p.is_finite() {
            return Err(Error::InvalidParameter { name: "p", value: p });
        }
        if (0..dim).map(|j| a[j] * a[j]).sum::<f64>() == 0.0 {
            return Err(Error::InvalidParameter {
                name: "a",
                value: 0.0,
            });
        }
        if lambda_cfl <= 0.0 || !lambda_cfl.is_finite() {
            return Err(Error::InvalidParameter {
                name: "lambda_cfl",
                value: lambda_cfl,
            });
        }
        let mut problem = FreezingProblem {
            dim,
            nu,
            p,
            a,
            grid,
            limiter,
            phase,
            fixed_data: None,
            lambda_cfl,
        };
        if phase == PhaseCondition::Fixed {
            let reference = reference.ok_or(Error::MissingReference)?;
            if reference.len() != problem.grid.total_cells() {
                return Err(Error::DimensionMismatch {
                    context: "fixed-phase reference",
                    expected: problem.grid.total_cells(),
                    got: reference.len(),
                });
            }
            problem.fixed_data = Some(problem.build_fixed_data(reference)?);
        }
        Ok(problem)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn exponent(&self) -> f64 {
        self.p
    }

    pub fn direction(&self) -> [f64; MAX_DIM] {
        self.a
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn limiter(&self) -> &LimiterConfig {
        &self.limiter
    }

    pub fn phase(&self) -> PhaseCondition {
        self.phase
    }

    pub fn lambda_cfl(&self) -> f64 {
        self.lambda_cfl
    }

    /// Number of algebraic variables, `d + 1`.
    pub fn n_mu(&self) -> usize {
        self.dim + 1
    }

    /// Coefficient of the zero-order scaling source `f_{1,0}(v) = (1 - d(p-1)) v`.
    pub fn source_coeff(&self) -> f64 {
        1.0 - self.dim as f64 * (self.p - 1.0)
    }

    /// True iff `p = (d+1)/d`, in which case the source vanishes and the
    /// semi-discrete system conserves mass exactly.
    pub fn is_conservative(&self) -> bool {
        self.source_coeff() == 0.0
    }

    pub fn fixed_data(&self) -> Option<&FixedPhaseData> {
        self.fixed_data.as_ref()
    }

    fn build_fixed_data(&self, reference: CellField) -> Result<FixedPhaseData> {
        // the scaling/translation families carry no dissipation, so the
        // reference columns do not depend on any wave-speed bound
        let bundle = assemble_operators(self, &reference, 0.0)?;
        let vol = self.grid.cell_volume();
        let psi = bundle.h1;
        let psi_dot_ref: Vec<f64> = psi
            .iter()
            .map(|col| vol * dot(col, reference.values()))
            .collect();
        let psi_norms: Vec<f64> = psi
            .iter()
            .map(|col| (vol * dot(col, col)).sqrt())
            .collect();
        let ref_norm = reference.l2_norm();
        Ok(FixedPhaseData {
            psi,
            psi_dot_ref,
            psi_norms,
            ref_norm,
            reference,
        })
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `|v|^p` with an explicit zero branch (negative bases go through `abs`).
#[inline]
pub fn abs_pow(v: f64, p: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v.abs().powf(p)
    }
}

/// The flux functions of the freezing system as generic central-scheme
/// fluxes: `families[i][j]` is the flux of variable `mu_i` in direction `j`
/// (`i = 0` is the Burgers flux itself and the only family carrying the
/// dissipation term), plus the zero-order source coefficient.
pub struct FluxFamily {
    pub families: Vec<Vec<FluxFunction>>,
    pub source_coeff: f64,
}

pub fn flux_family(problem: &FreezingProblem) -> FluxFamily {
    let d = problem.dim();
    let p = problem.p;
    let mut families = Vec::with_capacity(d + 2);
    // i = 0: Burgers flux (a_j / p) |v|^p, carries the dissipation term
    families.push(
        (0..d)
            .map(|j| {
                let aj = problem.a[j];
                FluxFunction::with_dissipation(move |_xi: Point, v| aj / p * abs_pow(v, p))
            })
            .collect(),
    );
    // i = 1: scaling flux -(p-1) xi_j v
    families.push(
        (0..d)
            .map(|j| FluxFunction::new(move |xi: Point, v| -(p - 1.0) * xi[j] * v))
            .collect(),
    );
    // i = 1 + c: translation flux -v in direction c
    for c in 0..d {
        families.push(
            (0..d)
                .map(|j| {
                    if j == c {
                        FluxFunction::new(move |_xi: Point, v| -v)
                    } else {
                        FluxFunction::new(move |_xi: Point, _v| 0.0)
                    }
                })
                .collect(),
        );
    }
    FluxFamily {
        families,
        source_coeff: problem.source_coeff(),
    }
}

/// The assembled pieces of the semi-discrete right-hand side at one field:
/// `F(v, mu) = -h0 - H1 mu + pv`.
#[derive(Debug, Clone)]
pub struct OperatorBundle {
    /// Flux differences of the Burgers family, dissipation included.
    pub h0: Vec<f64>,
    /// Columns `0..=d`: scaling (source folded in) and translations.
    pub h1: Vec<Vec<f64>>,
    /// Diffusion tendency `P v`.
    pub pv: Vec<f64>,
}

impl OperatorBundle {
    /// `F(v, mu) = -h0 - H1 mu + pv`.
    pub fn rhs(&self, mu: &[f64]) -> Result<Vec<f64>> {
        if mu.len() != self.h1.len() {
            return Err(Error::DimensionMismatch {
                context: "OperatorBundle::rhs",
                expected: self.h1.len(),
                got: mu.len(),
            });
        }
        let n = self.h0.len();
        let mut out = vec![0.0; n];
        for k in 0..n {
            out[k] = -self.h0[k] + self.pv[k];
        }
        for (col, &m) in self.h1.iter().zip(mu) {
            if m != 0.0 {
                for k in 0..n {
                    out[k] -= m * col[k];
                }
            }
        }
        Ok(out)
    }

    /// `-h0 + pv`, the mu-independent part of the right-hand side.
    pub fn rhs_mu_free(&self) -> Vec<f64> {
        self.h0
            .iter()
            .zip(&self.pv)
            .map(|(h, p)| -h + p)
            .collect()
    }
}

/// Assembles `H0`, `H1` and `P v` for a field, enforcing no-flux boundaries.
/// `a_bound` is the current wave-speed bound entering the dissipation term.
pub fn assemble_operators(
    problem: &FreezingProblem,
    field: &CellField,
    a_bound: f64,
) -> Result<OperatorBundle> {
    let grid = problem.grid();
    if field.len() != grid.total_cells() {
        return Err(Error::DimensionMismatch {
            context: "assemble_operators",
            expected: grid.total_cells(),
            got: field.len(),
        });
    }
    let d = problem.dim();
    let n = grid.total_cells();
    let p = problem.p;
    let mut h0 = vec![0.0; n];
    let mut h1: Vec<Vec<f64>> = vec![vec![0.0; n]; d + 1];

    for axis in 0..d {
        let limits = axis_face_limits(field, axis, problem.limiter())?;
        let mut burgers = AxisFaces::zeros(grid, axis);
        let mut scaling = AxisFaces::zeros(grid, axis);
        let mut translation = AxisFaces::zeros(grid, axis);
        let aj = problem.a[axis];
        let inv_p = 1.0 / p;
        for line in 0..burgers.n_lines() {
            for face in 1..burgers.faces_per_line() - 1 {
                let idx = burgers.index(face, line);
                let um = limits.minus[idx];
                let up = limits.plus[idx];
                let xi = face_point(grid, axis, face, line)[axis];
                burgers.values[idx] = 0.5 * aj * inv_p * (abs_pow(up, p) + abs_pow(um, p))
                    - a_bound * (up - um);
                scaling.values[idx] = -0.5 * (p - 1.0) * xi * (up + um);
                translation.values[idx] = -0.5 * (up + um);
            }
        }
        add_flux_divergence(grid, &burgers, 1.0, &mut h0);
        add_flux_divergence(grid, &scaling, 1.0, &mut h1[0]);
        add_flux_divergence(grid, &translation, 1.0, &mut h1[1 + axis]);
    }
    // zero-order source, folded into the scaling column with a minus sign
    let s = problem.source_coeff();
    if s != 0.0 {
        for (col_val, v) in h1[0].iter_mut().zip(field.values()) {
            *col_val -= s * v;
        }
    }
    let pv = crate::central_flux::diffusion_rhs(field, problem.nu)?;
    if h0.iter().any(|v| !v.is_finite())
        || h1.iter().any(|c| c.iter().any(|v| !v.is_finite()))
        || pv.iter().any(|v| !v.is_finite())
    {
        return Err(Error::NonFinite {
            context: "assemble_operators",
        });
    }
    Ok(OperatorBundle { h0, h1, pv })
}

/// Full freezing tendency `F(v, mu) = -H0 - H1 mu + P v`.
pub fn freezing_rhs(
    problem: &FreezingProblem,
    field: &CellField,
    mu: &[f64],
    a_bound: f64,
) -> Result<Vec<f64>> {
    assemble_operators(problem, field, a_bound)?.rhs(mu)
}

/// Rough upper bound for the maximal wave speeds, from the current field and
/// the algebraic variables of the previous step.
pub fn wave_speed_bound(problem: &FreezingProblem, field: &CellField, mu: &[f64]) -> f64 {
    let grid = problem.grid();
    match problem.dim() {
        1 => {
            field.max_abs() + mu[0].abs() * grid.max_abs_coord(0) + mu[1].abs()
        }
        _ => {
            let sup_sqrt = field
                .values()
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()))
                .sqrt();
            let s1 = mu[0].abs() * grid.max_abs_coord(0) + mu[1].abs();
            let s2 = mu[0].abs() * grid.max_abs_coord(1) + mu[2].abs();
            sup_sqrt + s1.max(s2)
        }
    }
}

/// Volume-weighted dot product of an `H1` column set with a vector.
fn weighted_h1_dot(h1: &[Vec<f64>], vol: f64, x: &[f64]) -> Vec<f64> {
    h1.iter().map(|col| vol * dot(col, x)).collect()
}

/// Residual of the discrete phase condition.
///
/// Orthogonal: `H1(v)^T W F(v, mu)` (needs `mu` and the wave-speed bound for
/// the dissipation inside `F`).  Fixed: `Psi^T W (v - u_hat)`, independent of
/// both.
pub fn phase_residual(
    problem: &FreezingProblem,
    field: &CellField,
    mu: Option<&[f64]>,
    a_bound: f64,
) -> Result<Vec<f64>> {
    let vol = problem.grid().cell_volume();
    match problem.phase() {
        PhaseCondition::Orthogonal => {
            let mu = mu.ok_or(Error::DimensionMismatch {
                context: "phase_residual (orthogonal needs mu)",
                expected: problem.n_mu(),
                got: 0,
            })?;
            let bundle = assemble_operators(problem, field, a_bound)?;
            let f = bundle.rhs(mu)?;
            Ok(weighted_h1_dot(&bundle.h1, vol, &f))
        }
        PhaseCondition::Fixed => {
            let data = problem.fixed_data().ok_or(Error::MissingReference)?;
            let diff: Vec<f64> = field
                .values()
                .iter()
                .zip(data.reference.values())
                .map(|(v, r)| v - r)
                .collect();
            Ok(weighted_h1_dot(&data.psi, vol, &diff))
        }
    }
}

/// Solves the volume-weighted normal equations
/// `(H1^T W H1) mu = H1^T W (-H0 + P v)` of the orthogonal phase condition.
pub fn solve_mu_from_bundle(bundle: &OperatorBundle, vol: f64) -> Result<SmallSolve> {
    let m = bundle.h1.len();
    let mut gram = DMatrix::zeros(m, m);
    for i in 0..m {
        for j in i..m {
            let g = vol * dot(&bundle.h1[i], &bundle.h1[j]);
            gram[(i, j)] = g;
            gram[(j, i)] = g;
        }
    }
    let target = bundle.rhs_mu_free();
    let rhs: Vec<f64> = bundle.h1.iter().map(|col| vol * dot(col, &target)).collect();
    solve_small(&gram, &rhs)
}

/// Minimizer of `||F(v, mu)||` in the volume-weighted norm.
pub fn solve_mu_orthogonal(
    problem: &FreezingProblem,
    field: &CellField,
    a_bound: f64,
) -> Result<Vec<f64>> {
    let bundle = assemble_operators(problem, field, a_bound)?;
    Ok(solve_mu_from_bundle(&bundle, problem.grid().cell_volume())?.x)
}

/// Consistent initial algebraic variables.
///
/// Orthogonal phase: the least-squares solve itself.  Fixed phase: the
/// hidden constraint `0 = Psi^T W F(v0, mu0)`, a small unsymmetric solve.
pub fn consistent_initialize(
    problem: &FreezingProblem,
    field: &CellField,
    a_bound: f64,
) -> Result<Vec<f64>> {
    match problem.phase() {
        PhaseCondition::Orthogonal => solve_mu_orthogonal(problem, field, a_bound),
        PhaseCondition::Fixed => {
            let data = problem.fixed_data().ok_or(Error::MissingReference)?;
            let bundle = assemble_operators(problem, field, a_bound)?;
            let vol = problem.grid().cell_volume();
            let m = problem.n_mu();
            let mut mat = DMatrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    mat[(i, j)] = vol * dot(&data.psi[i], &bundle.h1[j]);
                }
            }
            let target = bundle.rhs_mu_free();
            let rhs: Vec<f64> = data.psi.iter().map(|col| vol * dot(col, &target)).collect();
            Ok(solve_small(&mat, &rhs)?.x)
        }
    }
}
