//! Self-contained manufactured DAEs that measure the temporal convergence
//! orders of the IMEX stepper, independent of the PDE machinery.
//!
//! Reference solutions come from the same integrator at a 64x smaller step;
//! order measurement only needs relative decay of the error.

use crate::imex_dae::{group_time_step, imex_dae_step, ButcherPair, ConstraintKind, ImexDaeSystem, StageData};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

type VecFn = Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
type MatFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + Send + Sync>;

/// A small dense DAE in the half-explicit IMEX form, with hand-picked parts.
pub struct ManufacturedDae {
    pub name: &'static str,
    n_diff: usize,
    n_alg: usize,
    kind: ConstraintKind,
    /// Stiff linear part as a dense matrix.
    p_mat: DMatrix<f64>,
    /// `H0(V) - G(V)`.
    h0g: VecFn,
    /// Columns of `H1(V)`.
    h1: MatFn,
    /// Index-1 closure `mu(v)` solving `Psi(v, mu) = 0`.
    solve_mu: Option<VecFn>,
    /// Index-2 data: constraint rows and right-hand side.
    psi: Vec<Vec<f64>>,
    psi_rhs: Vec<f64>,
    /// Consistent initial value.
    pub v0: Vec<f64>,
    /// Exponent in the group reconstruction `r_alg`/`r_time`.
    pub group_exponent: f64,
}

impl ImexDaeSystem for ManufacturedDae {
    fn n_diff(&self) -> usize {
        self.n_diff
    }

    fn n_alg(&self) -> usize {
        self.n_alg
    }

    fn constraint(&self) -> ConstraintKind {
        self.kind
    }

    fn eval(&self, v: &[f64]) -> Result<StageData> {
        let pv = &self.p_mat * DVector::from_column_slice(v);
        Ok(StageData {
            h0g: (self.h0g)(v),
            h1: (self.h1)(v),
            pv: pv.iter().copied().collect(),
        })
    }

    fn solve_stiff(&mut self, coeff: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_diff;
        let shifted = DMatrix::identity(n, n) - &self.p_mat * coeff;
        let x = shifted
            .lu()
            .solve(&DVector::from_column_slice(rhs))
            .ok_or(Error::SingularSystem {
                context: "manufactured stiff solve",
            })?;
        Ok(x.iter().copied().collect())
    }

    fn solve_index1_mu(&self, v: &[f64], _data: &StageData) -> Result<Vec<f64>> {
        match &self.solve_mu {
            Some(f) => Ok(f(v)),
            None => Err(Error::SingularSystem {
                context: "manufactured index-1 closure",
            }),
        }
    }

    fn index2_psi_dot(&self, x: &[f64]) -> Vec<f64> {
        self.psi
            .iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn index2_rhs(&self) -> Vec<f64> {
        self.psi_rhs.clone()
    }
}

/// Index-1 example: `V' = -V + mu`, `Psi(V, mu) = mu - V^2`.
pub fn index1_example() -> ManufacturedDae {
    ManufacturedDae {
        name: "index1",
        n_diff: 1,
        n_alg: 1,
        kind: ConstraintKind::Index1,
        p_mat: DMatrix::from_row_slice(1, 1, &[-1.0]),
        h0g: Box::new(|_| vec![0.0]),
        h1: Box::new(|_| vec![vec![-1.0]]),
        solve_mu: Some(Box::new(|v: &[f64]| vec![v[0] * v[0]])),
        psi: Vec::new(),
        psi_rhs: Vec::new(),
        v0: vec![0.5],
        group_exponent: 2.0,
    }
}

/// Index-2 example: `V' = P V + mu e` with `P = [[-1, 1], [0, -2]]`,
/// `e = (1, 1)` and the linear constraint `V_1 = 1`.
pub fn index2_example() -> ManufacturedDae {
    ManufacturedDae {
        name: "index2",
        n_diff: 2,
        n_alg: 1,
        kind: ConstraintKind::Index2,
        p_mat: DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -2.0]),
        h0g: Box::new(|_| vec![0.0, 0.0]),
        h1: Box::new(|_| vec![vec![-1.0, -1.0]]),
        solve_mu: None,
        psi: vec![vec![1.0, 0.0]],
        psi_rhs: vec![1.0],
        v0: vec![1.0, 0.5],
        group_exponent: 2.0,
    }
}

/// Linear pure-diffusion case `V' = lambda V` without algebraic variables;
/// each step is exactly one Crank-Nicolson update.
pub fn pure_diffusion_example(lambda: f64) -> ManufacturedDae {
    ManufacturedDae {
        name: "pure-diffusion",
        n_diff: 1,
        n_alg: 0,
        kind: ConstraintKind::Index1,
        p_mat: DMatrix::from_row_slice(1, 1, &[lambda]),
        h0g: Box::new(|_| vec![0.0]),
        h1: Box::new(|_| Vec::new()),
        solve_mu: Some(Box::new(|_| Vec::new())),
        psi: Vec::new(),
        psi_rhs: Vec::new(),
        v0: vec![1.0],
        group_exponent: 2.0,
    }
}

/// Final values of one fixed-step integration.
#[derive(Debug, Clone)]
pub struct DaeEndpoint {
    pub v: Vec<f64>,
    pub mu: Vec<f64>,
    pub alpha: f64,
    pub t: f64,
}

/// Consistent initial `mu` of a manufactured DAE.
pub fn initial_mu(dae: &ManufacturedDae) -> Result<Vec<f64>> {
    match dae.kind {
        ConstraintKind::Index1 => {
            let data = dae.eval(&dae.v0)?;
            dae.solve_index1_mu(&dae.v0, &data)
        }
        ConstraintKind::Index2 => {
            // hidden constraint: 0 = Psi (P v0 - H0 - H1 mu)
            let data = dae.eval(&dae.v0)?;
            let target: Vec<f64> = data
                .pv
                .iter()
                .zip(&data.h0g)
                .map(|(p, h)| p - h)
                .collect();
            let p = dae.n_alg;
            let mut m = DMatrix::zeros(p, p);
            for (c, col) in data.h1.iter().enumerate() {
                let pd = dae.index2_psi_dot(col);
                for r in 0..p {
                    m[(r, c)] = pd[r];
                }
            }
            let rhs = dae.index2_psi_dot(&target);
            let x = m
                .lu()
                .solve(&DVector::from_column_slice(&rhs))
                .ok_or(Error::SingularSystem {
                    context: "manufactured hidden constraint",
                })?;
            Ok(x.iter().copied().collect())
        }
    }
}

/// Integrates with `n` equal steps to `horizon`.
pub fn integrate_fixed(
    dae: &mut ManufacturedDae,
    horizon: f64,
    n_steps: usize,
    tab: &ButcherPair,
) -> Result<DaeEndpoint> {
    let h = horizon / n_steps as f64;
    let mut v = dae.v0.clone();
    let mut mu = initial_mu(dae)?;
    let mut alpha = 1.0;
    let mut t = 0.0;
    let has_group = dae.n_alg >= 1;
    let b0: Vec<f64> = vec![0.0; dae.n_alg.saturating_sub(1)];
    let mut b = b0.clone();
    for _ in 0..n_steps {
        let out = imex_dae_step(dae, tab, &v, h)?;
        if has_group {
            let (a_new, b_new, t_new) =
                group_time_step(alpha, &b, t, &out.stage_mu, h, tab, dae.group_exponent)?;
            alpha = a_new;
            b = b_new;
            t = t_new;
        }
        v = out.v;
        mu = out.mu;
    }
    Ok(DaeEndpoint { v, mu, alpha, t })
}

/// One row of the order table.
#[derive(Debug, Clone)]
pub struct OrderRow {
    pub h: f64,
    pub err_v: f64,
    pub err_mu: f64,
    pub err_g: f64,
    pub err_t: f64,
}

/// Observed convergence orders per variable class.
#[derive(Debug, Clone)]
pub struct OrderStudy {
    pub rows: Vec<OrderRow>,
    pub slope_v: Option<f64>,
    pub slope_mu: Option<f64>,
    pub slope_g: Option<f64>,
    pub slope_t: Option<f64>,
}

impl OrderStudy {
    /// Per-h error table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,err_V,err_mu,err_g,err_t\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                r.h, r.err_v, r.err_mu, r.err_g, r.err_t
            ));
        }
        out
    }
}

/// Least-squares slope of `log(err)` against `log(h)`.  `None` when any
/// error sits at round-off level (no usable decay signal).
pub fn fit_log_slope(h: &[f64], err: &[f64]) -> Option<f64> {
    if h.len() != err.len() || h.len() < 2 {
        return None;
    }
    if err.iter().any(|&e| !(e > 1e-14)) {
        return None;
    }
    let xs: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = err.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let xm = xs.iter().sum::<f64>() / n;
    let ym = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - xm) * (x - xm)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    Some(sxy / sxx)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Runs the study: integrates to `horizon` for every step size, compares
/// against a reference at `min(h) / 64`, and fits log-log slopes for the
/// differential, algebraic, group and time variables.
pub fn order_study(dae: &mut ManufacturedDae, h_list: &[f64], horizon: f64) -> Result<OrderStudy> {
    if h_list.len() < 4 {
        return Err(Error::TooFewStepSizes {
            min: 4,
            got: h_list.len(),
        });
    }
    let tab = ButcherPair::heun_crank_nicolson();
    let h_min = h_list.iter().fold(f64::INFINITY, |m, &h| m.min(h));
    let n_ref = (horizon / (h_min / 64.0)).round() as usize;
    let reference = integrate_fixed(dae, horizon, n_ref, &tab)?;

    let mut rows = Vec::with_capacity(h_list.len());
    for &h in h_list {
        let n = (horizon / h).round().max(1.0) as usize;
        let end = integrate_fixed(dae, horizon, n, &tab)?;
        rows.push(OrderRow {
            h: horizon / n as f64,
            err_v: max_abs_diff(&end.v, &reference.v),
            err_mu: max_abs_diff(&end.mu, &reference.mu),
            err_g: (end.alpha - reference.alpha).abs(),
            err_t: (end.t - reference.t).abs(),
        });
    }
    let hs: Vec<f64> = rows.iter().map(|r| r.h).collect();
    let study = OrderStudy {
        slope_v: fit_log_slope(&hs, &rows.iter().map(|r| r.err_v).collect::<Vec<_>>()),
        slope_mu: fit_log_slope(&hs, &rows.iter().map(|r| r.err_mu).collect::<Vec<_>>()),
        slope_g: fit_log_slope(&hs, &rows.iter().map(|r| r.err_g).collect::<Vec<_>>()),
        slope_t: fit_log_slope(&hs, &rows.iter().map(|r| r.err_t).collect::<Vec<_>>()),
        rows,
    };
    Ok(study)
}
