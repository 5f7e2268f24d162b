//! Factorization and solution of the implicit operator `I - h a P`, where
//! `P` is the discrete no-flux diffusion operator, plus the small dense
//! systems arising from the phase conditions.
//!
//! The implicit matrix is symmetric positive definite with all eigenvalues
//! at least 1 (Gershgorin), so 1d uses an unpivoted tridiagonal
//! factorization, 2d a banded Cholesky factorization by default and
//! conjugate gradients above [`DIRECT_LIMIT`] unknowns.

use crate::mesh::Grid;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Largest 2d system solved by the banded direct factorization; bigger
/// systems fall back to conjugate gradients.
pub const DIRECT_LIMIT: usize = 100_000;

/// Relative residual tolerance honored by every solve path.
pub const SOLVE_TOL: f64 = 1e-12;

/// The discrete diffusion operator `P = nu * (no-flux Laplacian)`,
/// materialized once per grid; field independent.
#[derive(Debug, Clone)]
pub struct DiffusionOperator {
    grid: Grid,
    nu: f64,
}

impl DiffusionOperator {
    pub fn new(grid: &Grid, nu: f64) -> Result<DiffusionOperator> {
        if nu < 0.0 || !nu.is_finite() {
            return Err(Error::InvalidParameter {
                name: "nu",
                value: nu,
            });
        }
        Ok(DiffusionOperator {
            grid: grid.clone(),
            nu,
        })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn len(&self) -> usize {
        self.grid.total_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `out = P v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if self.nu == 0.0 {
            return;
        }
        for axis in 0..self.grid.dim() {
            let w = self.nu / (self.grid.dx(axis) * self.grid.dx(axis));
            let cells = self.grid.cells(axis);
            let (_, n_lines) = self.grid.face_layout(axis);
            for line in 0..n_lines {
                for pos in 0..cells {
                    let c = self.grid.line_cell(axis, pos, line);
                    let vc = v[c];
                    let mut acc = 0.0;
                    if pos > 0 {
                        acc += v[self.grid.line_cell(axis, pos - 1, line)] - vc;
                    }
                    if pos + 1 < cells {
                        acc += v[self.grid.line_cell(axis, pos + 1, line)] - vc;
                    }
                    out[c] += w * acc;
                }
            }
        }
    }

    /// Row `k` of `I - coeff P` as (diagonal, per-axis neighbor weight).
    fn shifted_row(&self, coeff: f64, idx: usize) -> (f64, [f64; 2]) {
        let k = self.grid.unflatten(idx);
        let mut diag = 1.0;
        let mut offs = [0.0; 2];
        for axis in 0..self.grid.dim() {
            let w = coeff * self.nu / (self.grid.dx(axis) * self.grid.dx(axis));
            let cells = self.grid.cells(axis);
            let mut faces = 0.0;
            if k[axis] > 0 {
                faces += 1.0;
            }
            if k[axis] + 1 < cells {
                faces += 1.0;
            }
            diag += w * faces;
            offs[axis] = -w;
        }
        (diag, offs)
    }
}

#[derive(Debug)]
enum FactorKind {
    Identity,
    /// Unpivoted LU of a tridiagonal system (strictly diagonally dominant).
    Tridiagonal {
        diag: Vec<f64>,
        sub: Vec<f64>,
        sup: Vec<f64>,
    },
    /// Lower-band Cholesky, band stored by diagonal offset.
    Banded {
        bands: Vec<Vec<f64>>,
        bandwidth: usize,
    },
    /// Matrix-free conjugate gradients on `I - coeff P`.
    ConjugateGradient { op: DiffusionOperator },
}

/// A factorization of `I - h a_hat P`, valid for the step size it was built
/// with.
#[derive(Debug)]
pub struct ImplicitFactor {
    coeff: f64,
    n: usize,
    kind: FactorKind,
}

impl ImplicitFactor {
    /// The product `h * a_hat` this factorization was built for.
    pub fn coeff(&self) -> f64 {
        self.coeff
    }

    pub fn matches(&self, coeff: f64) -> bool {
        self.coeff == coeff
    }
}

/// Builds the factorization of `I - h a_hat P`.
pub fn factor_implicit(op: &DiffusionOperator, h: f64, a_hat: f64) -> Result<ImplicitFactor> {
    let coeff = h * a_hat;
    if coeff < 0.0 || !coeff.is_finite() {
        return Err(Error::InvalidParameter {
            name: "h * a_hat",
            value: coeff,
        });
    }
    let n = op.len();
    if coeff == 0.0 || op.nu() == 0.0 {
        return Ok(ImplicitFactor {
            coeff,
            n,
            kind: FactorKind::Identity,
        });
    }
    // Gershgorin check: every row must keep all eigenvalues >= 1.
    for idx in 0..n {
        let (diag, offs) = op.shifted_row(coeff, idx);
        let off_sum: f64 = (0..op.grid().dim()).map(|a| 2.0 * offs[a].abs()).sum();
        if diag <= 0.0 || diag - off_sum < 1.0 - 1e-9 {
            return Err(Error::NotSpd { row: idx });
        }
    }
    let kind = match op.grid().dim() {
        1 => factor_tridiagonal(op, coeff)?,
        2 if n <= DIRECT_LIMIT => factor_banded(op, coeff)?,
        _ => FactorKind::ConjugateGradient { op: op.clone() },
    };
    Ok(ImplicitFactor { coeff, n, kind })
}

fn factor_tridiagonal(op: &DiffusionOperator, coeff: f64) -> Result<FactorKind> {
    let n = op.len();
    let mut diag = vec![0.0; n];
    let mut sub = vec![0.0; n];
    let mut sup = vec![0.0; n];
    for idx in 0..n {
        let (d, offs) = op.shifted_row(coeff, idx);
        diag[idx] = d;
        if idx > 0 {
            sub[idx] = offs[0];
        }
        if idx + 1 < n {
            sup[idx] = offs[0];
        }
    }
    // in-place LU sweep
    for i in 1..n {
        let m = sub[i] / diag[i - 1];
        diag[i] -= m * sup[i - 1];
        sub[i] = m;
        if diag[i] <= 0.0 {
            return Err(Error::NotSpd { row: i });
        }
    }
    Ok(FactorKind::Tridiagonal { diag, sub, sup })
}

fn factor_banded(op: &DiffusionOperator, coeff: f64) -> Result<FactorKind> {
    let n = op.len();
    let grid = op.grid();
    let bandwidth = grid.cells(0);
    // bands[d][i] holds entry (i + d, i) of the matrix, d = 0..=bandwidth
    let mut bands = vec![vec![0.0; n]; bandwidth + 1];
    for idx in 0..n {
        let (d, offs) = op.shifted_row(coeff, idx);
        bands[0][idx] = d;
        let k = grid.unflatten(idx);
        if k[0] + 1 < grid.cells(0) {
            bands[1][idx] = offs[0];
        }
        if k[1] + 1 < grid.cells(1) {
            bands[bandwidth][idx] = offs[1];
        }
    }
    // banded Cholesky: L L^T with L in the same band layout
    for j in 0..n {
        let mut d = bands[0][j];
        let lo = j.saturating_sub(bandwidth);
        for p in lo..j {
            let l = bands[j - p][p];
            d -= l * l;
        }
        if d <= 0.0 {
            return Err(Error::NotSpd { row: j });
        }
        let d = d.sqrt();
        bands[0][j] = d;
        let hi = (j + bandwidth).min(n - 1);
        for i in j + 1..=hi {
            let mut s = bands[i - j][j];
            let lo = i.saturating_sub(bandwidth).max(lo);
            for p in lo..j {
                if i - p <= bandwidth {
                    s -= bands[i - p][p] * bands[j - p][p];
                }
            }
            bands[i - j][j] = s / d;
        }
    }
    Ok(FactorKind::Banded { bands, bandwidth })
}

/// Solves `(I - h a_hat P) x = rhs` with the given factorization.
pub fn solve_implicit(factor: &ImplicitFactor, rhs: &[f64]) -> Result<Vec<f64>> {
    if rhs.len() != factor.n {
        return Err(Error::DimensionMismatch {
            context: "solve_implicit",
            expected: factor.n,
            got: rhs.len(),
        });
    }
    match &factor.kind {
        FactorKind::Identity => Ok(rhs.to_vec()),
        FactorKind::Tridiagonal { diag, sub, sup } => {
            let n = rhs.len();
            let mut x = rhs.to_vec();
            for i in 1..n {
                x[i] -= sub[i] * x[i - 1];
            }
            x[n - 1] /= diag[n - 1];
            for i in (0..n - 1).rev() {
                x[i] = (x[i] - sup[i] * x[i + 1]) / diag[i];
            }
            Ok(x)
        }
        FactorKind::Banded { bands, bandwidth } => {
            let n = rhs.len();
            let bw = *bandwidth;
            let mut x = rhs.to_vec();
            // forward: L y = rhs
            for i in 0..n {
                let lo = i.saturating_sub(bw);
                let mut s = x[i];
                for p in lo..i {
                    s -= bands[i - p][p] * x[p];
                }
                x[i] = s / bands[0][i];
            }
            // backward: L^T x = y
            for i in (0..n).rev() {
                let hi = (i + bw).min(n - 1);
                let mut s = x[i];
                for r in i + 1..=hi {
                    s -= bands[r - i][i] * x[r];
                }
                x[i] = s / bands[0][i];
            }
            Ok(x)
        }
        FactorKind::ConjugateGradient { op } => cg_solve(op, factor.coeff, rhs),
    }
}

fn cg_solve(op: &DiffusionOperator, coeff: f64, rhs: &[f64]) -> Result<Vec<f64>> {
    let n = rhs.len();
    let apply = |v: &[f64], out: &mut [f64]| {
        op.apply(v, out);
        for i in 0..n {
            out[i] = v[i] - coeff * out[i];
        }
    };
    let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
    if rhs_norm == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut x = vec![0.0; n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr: f64 = r.iter().map(|v| v * v).sum();
    let max_iters = 20 * n;
    for _ in 0..max_iters {
        if rr.sqrt() <= SOLVE_TOL * rhs_norm {
            return Ok(x);
        }
        apply(&p, &mut ap);
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    if rr.sqrt() <= SOLVE_TOL * rhs_norm {
        Ok(x)
    } else {
        Err(Error::NoConvergence {
            residual: rr.sqrt() / rhs_norm,
            iters: max_iters,
        })
    }
}

/// Solution of a small dense system together with a 1-norm condition
/// estimate.
#[derive(Debug, Clone)]
pub struct SmallSolve {
    pub x: Vec<f64>,
    pub cond: f64,
}

/// Direct solve of an `m x m` system, `m <= 3`, with partial pivoting.
pub fn solve_small(matrix: &DMatrix<f64>, rhs: &[f64]) -> Result<SmallSolve> {
    let m = matrix.nrows();
    debug_assert!(m <= 3, "solve_small is for the (d+1)-sized phase systems");
    if matrix.ncols() != m || rhs.len() != m {
        return Err(Error::DimensionMismatch {
            context: "solve_small",
            expected: m,
            got: rhs.len(),
        });
    }
    if m == 0 {
        return Ok(SmallSolve {
            x: Vec::new(),
            cond: 1.0,
        });
    }
    let norm = matrix_norm1(matrix);
    let lu = matrix.clone().lu();
    let inv = match lu.try_inverse() {
        Some(inv) => inv,
        None => return Err(Error::SingularGram { cond: f64::INFINITY }),
    };
    let cond = norm * matrix_norm1(&inv);
    if !cond.is_finite() || cond > 1.0 / f64::EPSILON {
        return Err(Error::SingularGram { cond });
    }
    let x = lu
        .solve(&DVector::from_column_slice(rhs))
        .ok_or(Error::SingularGram { cond })?;
    Ok(SmallSolve {
        x: x.iter().copied().collect(),
        cond,
    })
}

fn matrix_norm1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn dense_shifted(op: &DiffusionOperator, coeff: f64) -> DMatrix<f64> {
        let n = op.len();
        let mut m = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e.fill(0.0);
            e[j] = 1.0;
            op.apply(&e, &mut col);
            for i in 0..n {
                m[(i, j)] = if i == j { 1.0 } else { 0.0 } - coeff * col[i];
            }
        }
        m
    }

    #[test]
    fn zero_viscosity_is_identity() {
        let g = Grid::line(-1.0, 1.0, 4).unwrap();
        let op = DiffusionOperator::new(&g, 0.0).unwrap();
        let f = factor_implicit(&op, 0.3, 0.5).unwrap();
        let rhs = vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0];
        assert_eq!(solve_implicit(&f, &rhs).unwrap(), rhs);

        let op = DiffusionOperator::new(&g, 1.0).unwrap();
        let f = factor_implicit(&op, 0.0, 0.5).unwrap();
        assert_eq!(solve_implicit(&f, &rhs).unwrap(), rhs);
    }

    #[test]
    fn tridiagonal_matches_dense_oracle() {
        // 1d, nu = 1, dx = 1, h a_hat = 0.5: rows follow the no-flux
        // Laplacian
        let g = Grid::line(0.0, 6.0, 4).unwrap();
        assert_eq!(g.dx(0), 1.0);
        let op = DiffusionOperator::new(&g, 1.0).unwrap();
        let f = factor_implicit(&op, 1.0, 0.5).unwrap();
        let dense = dense_shifted(&op, 0.5);
        assert_relative_eq!(dense[(0, 0)], 1.5);
        assert_relative_eq!(dense[(1, 1)], 2.0);
        assert_relative_eq!(dense[(1, 0)], -0.5);

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let rhs: Vec<f64> = (0..op.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = solve_implicit(&f, &rhs).unwrap();
            let oracle = dense
                .clone()
                .lu()
                .solve(&DVector::from_column_slice(&rhs))
                .unwrap();
            for i in 0..x.len() {
                assert_relative_eq!(x[i], oracle[i], epsilon = 1e-13, max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn banded_cholesky_matches_dense_oracle() {
        let g = Grid::rect((0.0, 3.0), (0.0, 2.0), 4, 4).unwrap();
        let op = DiffusionOperator::new(&g, 0.8).unwrap();
        let f = factor_implicit(&op, 0.05, 0.5).unwrap();
        let dense = dense_shifted(&op, 0.025);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let rhs: Vec<f64> = (0..op.len()).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = solve_implicit(&f, &rhs).unwrap();
            let oracle = dense
                .clone()
                .lu()
                .solve(&DVector::from_column_slice(&rhs))
                .unwrap();
            for i in 0..x.len() {
                assert_relative_eq!(x[i], oracle[i], epsilon = 1e-12, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn cg_matches_banded() {
        let g = Grid::rect((0.0, 1.0), (0.0, 1.0), 6, 5).unwrap();
        let op = DiffusionOperator::new(&g, 0.4).unwrap();
        let coeff = 0.02;
        let banded = factor_implicit(&op, coeff, 1.0).unwrap();
        let cg = ImplicitFactor {
            coeff,
            n: op.len(),
            kind: FactorKind::ConjugateGradient { op: op.clone() },
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let rhs: Vec<f64> = (0..op.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xb = solve_implicit(&banded, &rhs).unwrap();
        let xc = solve_implicit(&cg, &rhs).unwrap();
        for i in 0..xb.len() {
            assert_relative_eq!(xb[i], xc[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn residual_contract() {
        let g = Grid::rect((-2.0, 2.0), (-1.0, 1.0), 8, 6).unwrap();
        let op = DiffusionOperator::new(&g, 1.3).unwrap();
        let f = factor_implicit(&op, 0.1, 0.5).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let rhs: Vec<f64> = (0..op.len()).map(|_| rng.random_range(-5.0..5.0)).collect();
        let x = solve_implicit(&f, &rhs).unwrap();
        let mut px = vec![0.0; x.len()];
        op.apply(&x, &mut px);
        let rhs_norm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        let res: f64 = (0..x.len())
            .map(|i| {
                let r = x[i] - 0.05 * px[i] - rhs[i];
                r * r
            })
            .sum::<f64>()
            .sqrt();
        assert!(res <= SOLVE_TOL * rhs_norm, "residual {res}");
    }

    #[test]
    fn constant_solution_for_constant_rhs() {
        // constants are in the kernel of P, so (I - cP) c0 = c0
        let g = Grid::line(-3.0, 3.0, 10).unwrap();
        let op = DiffusionOperator::new(&g, 2.0).unwrap();
        let f = factor_implicit(&op, 0.2, 0.5).unwrap();
        let rhs = vec![4.2; op.len()];
        let x = solve_implicit(&f, &rhs).unwrap();
        for v in x {
            assert_relative_eq!(v, 4.2, epsilon = 1e-12);
        }
        let zero = solve_implicit(&f, &vec![0.0; op.len()]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn small_solve_cases() {
        let m = DMatrix::identity(3, 3);
        let s = solve_small(&m, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.x, vec![1.0, 2.0, 3.0]);
        assert_relative_eq!(s.cond, 1.0);

        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 4.0]);
        let s = solve_small(&m, &[2.0, 8.0]).unwrap();
        assert_eq!(s.x, vec![1.0, 2.0]);

        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(matches!(
            solve_small(&sing, &[1.0, 1.0]),
            Err(Error::SingularGram { .. })
        ));
    }

    #[test]
    fn small_solve_matches_adjugate_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let a: Vec<f64> = (0..9).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = DMatrix::from_row_slice(3, 3, &a);
            let det = a[0] * (a[4] * a[8] - a[5] * a[7]) - a[1] * (a[3] * a[8] - a[5] * a[6])
                + a[2] * (a[3] * a[7] - a[4] * a[6]);
            if det.abs() < 0.05 {
                continue;
            }
            let rhs = [
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            ];
            // adjugate (cofactor) solve
            let adj = [
                a[4] * a[8] - a[5] * a[7],
                a[2] * a[7] - a[1] * a[8],
                a[1] * a[5] - a[2] * a[4],
                a[5] * a[6] - a[3] * a[8],
                a[0] * a[8] - a[2] * a[6],
                a[2] * a[3] - a[0] * a[5],
                a[3] * a[7] - a[4] * a[6],
                a[1] * a[6] - a[0] * a[7],
                a[0] * a[4] - a[1] * a[3],
            ];
            let oracle: Vec<f64> = (0..3)
                .map(|i| (0..3).map(|j| adj[3 * i + j] * rhs[j]).sum::<f64>() / det)
                .collect();
            let s = solve_small(&m, &rhs).unwrap();
            for i in 0..3 {
                assert_relative_eq!(s.x[i], oracle[i], epsilon = 1e-13, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn factor_records_coefficient() {
        let g = Grid::line(0.0, 1.0, 4).unwrap();
        let op = DiffusionOperator::new(&g, 1.0).unwrap();
        let f = factor_implicit(&op, 0.1, 0.5).unwrap();
        assert!(f.matches(0.05));
        assert!(!f.matches(0.06));
    }
}
