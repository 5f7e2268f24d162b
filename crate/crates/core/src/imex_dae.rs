//! Half-explicit IMEX-Runge-Kutta time stepping for semi-explicit DAEs of
//! the form
//!
//! ```text
//! V' = P(V) - H1(V) mu - H0(V) + G(V),
//! 0  = Psi(V, mu)          (index 1)   or   0 = Psi^T V - Psi^T U  (index 2)
//! ```
//!
//! with the stiff linear part `P` treated by the diagonally implicit tableau
//! and everything else by the explicit one.  The default pair couples Heun's
//! method with Crank-Nicolson.  Group reconstruction (`alpha`, `b`, `t`) and
//! CFL-adaptive step control for the freezing system live here as well.

use crate::freezing_rhs::{
    consistent_initialize, wave_speed_bound, FreezingProblem, OperatorBundle, PhaseCondition,
};
use crate::linear_solvers::{factor_implicit, solve_implicit, solve_small, DiffusionOperator, ImplicitFactor};
use crate::mesh::CellField;
use crate::{Error, Result};
use nalgebra::DMatrix;

/// The explicit/diagonally-implicit tableau pair.  Row `s` of each matrix is
/// the weight vector of the final update.
#[derive(Debug, Clone)]
pub struct ButcherPair {
    pub c: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub a_hat: Vec<Vec<f64>>,
}

impl ButcherPair {
    /// Heun coupled with Crank-Nicolson; the diagonal implicit entries are
    /// both 1/2 so a single factorization serves all stages.
    pub fn heun_crank_nicolson() -> ButcherPair {
        ButcherPair {
            c: vec![0.0, 1.0, 1.0],
            a: vec![
                vec![0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0],
                vec![0.5, 0.5, 0.0],
            ],
            a_hat: vec![
                vec![0.0, 0.0, 0.0],
                vec![0.5, 0.5, 0.0],
                vec![0.5, 0.0, 0.5],
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.c.len();
        if m < 2 || self.a.len() != m || self.a_hat.len() != m {
            return Err(Error::DimensionMismatch {
                context: "ButcherPair",
                expected: m,
                got: self.a.len(),
            });
        }
        for i in 0..m {
            if self.a[i].len() != m || self.a_hat[i].len() != m {
                return Err(Error::DimensionMismatch {
                    context: "ButcherPair rows",
                    expected: m,
                    got: self.a[i].len(),
                });
            }
            for j in 0..m {
                if j >= i && self.a[i][j] != 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "explicit tableau triangularity",
                        value: self.a[i][j],
                    });
                }
                if j > i && self.a_hat[i][j] != 0.0 {
                    return Err(Error::InvalidParameter {
                        name: "implicit tableau triangularity",
                        value: self.a_hat[i][j],
                    });
                }
            }
        }
        Ok(())
    }

    /// Number of stages `s` (the tableaux are `(s+1) x (s+1)`).
    pub fn stages(&self) -> usize {
        self.c.len() - 1
    }
}

/// Operator data evaluated at one stage value.
#[derive(Debug, Clone)]
pub struct StageData {
    /// `H0(V) - G(V)`, the mu-independent explicit part.
    pub h0g: Vec<f64>,
    /// Columns of `H1(V)`.
    pub h1: Vec<Vec<f64>>,
    /// `P V`.
    pub pv: Vec<f64>,
}

/// Differentiation index of the algebraic closure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Index1,
    Index2,
}

/// A DAE in the half-explicit IMEX form.  `solve_stiff` must solve
/// `(I - coeff P) x = rhs`; implementations cache factorizations per
/// coefficient.
pub trait ImexDaeSystem {
    fn n_diff(&self) -> usize;
    fn n_alg(&self) -> usize;
    fn constraint(&self) -> ConstraintKind;
    fn eval(&self, v: &[f64]) -> Result<StageData>;
    fn solve_stiff(&mut self, coeff: f64, rhs: &[f64]) -> Result<Vec<f64>>;

    /// Index-1 closure: solve `0 = Psi(v, mu)` for `mu` at a known `v`.
    fn solve_index1_mu(&self, _v: &[f64], _data: &StageData) -> Result<Vec<f64>> {
        Err(Error::SingularSystem {
            context: "index-1 closure not provided",
        })
    }

    /// Index-2 closure: the weighted products `Psi^T x`.
    fn index2_psi_dot(&self, _x: &[f64]) -> Vec<f64> {
        Vec::new()
    }

    /// Index-2 closure: the constant right-hand side `Psi^T U`.
    fn index2_rhs(&self) -> Vec<f64> {
        Vec::new()
    }
}

/// Inputs of one stage solve: the accumulated explicit right-hand side and
/// the operator data at the previous stage value.
#[derive(Debug)]
pub struct StageInputs<'a> {
    /// `R^1_i`: start value minus all fully known explicit/implicit terms.
    pub r1: &'a [f64],
    /// Operator data at `V_{i-1}`.
    pub data_prev: &'a StageData,
    /// `V_{i-1}` itself (nonlinear index-1 closures need it).
    pub v_prev: &'a [f64],
    /// `h * a_hat_{ii}`, the implicit diagonal weight.
    pub coeff_implicit: f64,
    /// `h * a_{i,i-1}`, the weight of the newest explicit `H1 mu` term.
    pub coeff_h1: f64,
}

#[inline]
fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Solves one stage by block elimination and returns `(V_i, mu_{i-1})`.
///
/// Index 1: the small Gram system at `V_{i-1}` yields `mu_{i-1}`, then one
/// large solve yields `V_i`.  Index 2: `d + 2` large solves build the
/// eliminated columns, a small solve yields `mu_{i-1}`, and `V_i` follows by
/// substitution.
pub fn stage_solve<S: ImexDaeSystem + ?Sized>(
    sys: &mut S,
    inputs: &StageInputs<'_>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let p = sys.n_alg();
    match sys.constraint() {
        ConstraintKind::Index1 => {
            let mu = sys.solve_index1_mu(inputs.v_prev, inputs.data_prev)?;
            let mut rhs = inputs.r1.to_vec();
            for (col, &m) in inputs.data_prev.h1.iter().zip(&mu) {
                axpy(&mut rhs, -inputs.coeff_h1 * m, col);
            }
            let v = sys.solve_stiff(inputs.coeff_implicit, &rhs)?;
            Ok((v, mu))
        }
        ConstraintKind::Index2 => {
            if inputs.coeff_h1 == 0.0 || p == 0 {
                return Err(Error::SingularSystem {
                    context: "index-2 stage elimination",
                });
            }
            let mut a_star: Vec<Vec<f64>> = Vec::with_capacity(p);
            for col in &inputs.data_prev.h1 {
                let scaled: Vec<f64> = col.iter().map(|x| inputs.coeff_h1 * x).collect();
                a_star.push(sys.solve_stiff(inputs.coeff_implicit, &scaled)?);
            }
            let v_star = sys.solve_stiff(inputs.coeff_implicit, inputs.r1)?;
            let mut m = DMatrix::zeros(p, p);
            for (c, col) in a_star.iter().enumerate() {
                let pd = sys.index2_psi_dot(col);
                for r in 0..p {
                    m[(r, c)] = pd[r];
                }
            }
            let psi_v = sys.index2_psi_dot(&v_star);
            let r2 = sys.index2_rhs();
            let rhs: Vec<f64> = (0..p).map(|r| psi_v[r] - r2[r]).collect();
            let mu = solve_small(&m, &rhs)?.x;
            let mut v = v_star;
            for (col, &mc) in a_star.iter().zip(&mu) {
                axpy(&mut v, -mc, col);
            }
            Ok((v, mu))
        }
    }
}

/// Result of one IMEX step on the `(V, mu)` variables.
#[derive(Debug)]
pub struct StepOutcome {
    pub v: Vec<f64>,
    /// `mu^{n+1}`: re-solved at `V^{n+1}` (index 1) or the last internal
    /// stage value (index 2).
    pub mu: Vec<f64>,
    /// Internal values `mu_0 .. mu_{s-1}`, as needed by the group update.
    pub stage_mu: Vec<Vec<f64>>,
    /// Operator data at the new value, when the constraint solve already
    /// required it (index 1).
    pub end_data: Option<StageData>,
}

/// Performs one step of size `h` from the consistent value `v0`.
pub fn imex_dae_step<S: ImexDaeSystem + ?Sized>(
    sys: &mut S,
    tab: &ButcherPair,
    v0: &[f64],
    h: f64,
) -> Result<StepOutcome> {
    let s = tab.stages();
    let mut v_st: Vec<Vec<f64>> = Vec::with_capacity(s + 1);
    let mut data: Vec<StageData> = Vec::with_capacity(s + 1);
    let mut stage_mu: Vec<Vec<f64>> = Vec::with_capacity(s);
    v_st.push(v0.to_vec());
    data.push(sys.eval(v0)?);

    for i in 1..=s {
        let mut r1 = v0.to_vec();
        for nu in 0..i {
            let aw = tab.a[i][nu];
            if aw != 0.0 {
                axpy(&mut r1, -h * aw, &data[nu].h0g);
                if nu + 1 < i {
                    for (col, &m) in data[nu].h1.iter().zip(&stage_mu[nu]) {
                        axpy(&mut r1, -h * aw * m, col);
                    }
                }
            }
            let ahw = tab.a_hat[i][nu];
            if ahw != 0.0 {
                axpy(&mut r1, h * ahw, &data[nu].pv);
            }
        }
        let inputs = StageInputs {
            r1: &r1,
            data_prev: &data[i - 1],
            v_prev: &v_st[i - 1],
            coeff_implicit: h * tab.a_hat[i][i],
            coeff_h1: h * tab.a[i][i - 1],
        };
        let (v_i, mu_im1) = stage_solve(sys, &inputs)?;
        if v_i.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteStage { stage: i });
        }
        stage_mu.push(mu_im1);
        if i < s {
            data.push(sys.eval(&v_i)?);
        }
        v_st.push(v_i);
    }

    let v_new = v_st.pop().expect("at least one stage");
    let (mu_new, end_data) = match sys.constraint() {
        ConstraintKind::Index1 => {
            let d = sys.eval(&v_new)?;
            let mu = sys.solve_index1_mu(&v_new, &d)?;
            (mu, Some(d))
        }
        ConstraintKind::Index2 => (stage_mu[s - 1].clone(), None),
    };
    Ok(StepOutcome {
        v: v_new,
        mu: mu_new,
        stage_mu,
        end_data,
    })
}

/// Explicit-tableau update of the group variables `g = (alpha, b)` and the
/// reconstructed time, using the internal `mu` values of the step:
/// `alpha' = mu_1 alpha`, `b' = alpha^{p-1} mu_{2:}`, `t' = alpha^{2p-2}`.
pub fn group_time_step(
    alpha0: f64,
    b0: &[f64],
    t0: f64,
    stage_mu: &[Vec<f64>],
    h: f64,
    tab: &ButcherPair,
    p_exp: f64,
) -> Result<(f64, Vec<f64>, f64)> {
    let s = tab.stages();
    debug_assert_eq!(stage_mu.len(), s);
    let d = b0.len();
    let mut alpha = Vec::with_capacity(s + 1);
    let mut b = Vec::with_capacity(s + 1);
    let mut t = Vec::with_capacity(s + 1);
    alpha.push(alpha0);
    b.push(b0.to_vec());
    t.push(t0);
    for i in 1..=s {
        let mut ai = alpha0;
        let mut bi = b0.to_vec();
        let mut ti = t0;
        for nu in 0..i {
            let w = tab.a[i][nu];
            if w == 0.0 {
                continue;
            }
            let an = alpha[nu];
            if an <= 0.0 {
                return Err(Error::NonPositiveScaling { alpha: an });
            }
            let mu = &stage_mu[nu];
            ai += h * w * mu[0] * an;
            let scale = an.powf(p_exp - 1.0);
            for c in 0..d {
                bi[c] += h * w * scale * mu[1 + c];
            }
            ti += h * w * an.powf(2.0 * p_exp - 2.0);
        }
        alpha.push(ai);
        b.push(bi);
        t.push(ti);
    }
    let a_new = alpha[s];
    if a_new <= 0.0 || !a_new.is_finite() {
        return Err(Error::NonPositiveScaling { alpha: a_new });
    }
    Ok((a_new, b[s].clone(), t[s]))
}

/// The semi-discrete freezing system as an IMEX DAE, with factorization
/// caching and an optional pinned `mu` (used for direct, non-freezing runs).
pub struct FreezingSystem {
    problem: FreezingProblem,
    diffusion: DiffusionOperator,
    a_bound: f64,
    factors: Vec<ImplicitFactor>,
    mu_pin: Option<Vec<f64>>,
}

impl FreezingSystem {
    pub fn new(problem: FreezingProblem) -> Result<FreezingSystem> {
        let diffusion = DiffusionOperator::new(problem.grid(), problem.nu())?;
        Ok(FreezingSystem {
            problem,
            diffusion,
            a_bound: 0.0,
            factors: Vec::new(),
            mu_pin: None,
        })
    }

    /// Pins the algebraic variables: the system integrates
    /// `v' = -H0 - H1 mu_pin + P v` without any phase condition.
    pub fn with_pinned_mu(problem: FreezingProblem, mu: Vec<f64>) -> Result<FreezingSystem> {
        let mut sys = FreezingSystem::new(problem)?;
        sys.mu_pin = Some(mu);
        Ok(sys)
    }

    pub fn problem(&self) -> &FreezingProblem {
        &self.problem
    }

    pub fn is_pinned(&self) -> bool {
        self.mu_pin.is_some()
    }

    pub fn wave_speed(&self) -> f64 {
        self.a_bound
    }

    pub fn set_wave_speed(&mut self, a: f64) {
        self.a_bound = a;
    }

    pub fn invalidate_factors(&mut self) {
        self.factors.clear();
    }

    fn field(&self, v: &[f64]) -> Result<CellField> {
        CellField::from_values(self.problem.grid(), v.to_vec())
    }

    /// Volume-weighted Gram solve of the orthogonal phase condition.
    fn orthogonal_mu(&self, data: &StageData) -> Result<Vec<f64>> {
        let vol = self.problem.grid().cell_volume();
        let m = data.h1.len();
        let mut gram = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in i..m {
                let g = vol * dot(&data.h1[i], &data.h1[j]);
                gram[(i, j)] = g;
                gram[(j, i)] = g;
            }
        }
        let target: Vec<f64> = data
            .pv
            .iter()
            .zip(&data.h0g)
            .map(|(p, h)| p - h)
            .collect();
        let rhs: Vec<f64> = data.h1.iter().map(|col| vol * dot(col, &target)).collect();
        Ok(solve_small(&gram, &rhs)?.x)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl ImexDaeSystem for FreezingSystem {
    fn n_diff(&self) -> usize {
        self.problem.grid().total_cells()
    }

    fn n_alg(&self) -> usize {
        self.problem.n_mu()
    }

    fn constraint(&self) -> ConstraintKind {
        if self.mu_pin.is_some() {
            return ConstraintKind::Index1;
        }
        match self.problem.phase() {
            PhaseCondition::Orthogonal => ConstraintKind::Index1,
            PhaseCondition::Fixed => ConstraintKind::Index2,
        }
    }

    fn eval(&self, v: &[f64]) -> Result<StageData> {
        let field = self.field(v)?;
        let bundle = crate::freezing_rhs::assemble_operators(&self.problem, &field, self.a_bound)?;
        let OperatorBundle { h0, h1, pv } = bundle;
        Ok(StageData { h0g: h0, h1, pv })
    }

    fn solve_stiff(&mut self, coeff: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        if let Some(f) = self.factors.iter().find(|f| f.matches(coeff)) {
            return solve_implicit(f, rhs);
        }
        let factor = factor_implicit(&self.diffusion, coeff, 1.0)?;
        let x = solve_implicit(&factor, rhs)?;
        self.factors.push(factor);
        Ok(x)
    }

    fn solve_index1_mu(&self, _v: &[f64], data: &StageData) -> Result<Vec<f64>> {
        if let Some(pin) = &self.mu_pin {
            return Ok(pin.clone());
        }
        self.orthogonal_mu(data)
    }

    fn index2_psi_dot(&self, x: &[f64]) -> Vec<f64> {
        let data = self
            .problem
            .fixed_data()
            .expect("index-2 requires fixed-phase data");
        let vol = self.problem.grid().cell_volume();
        data.psi.iter().map(|col| vol * dot(col, x)).collect()
    }

    fn index2_rhs(&self) -> Vec<f64> {
        self.problem
            .fixed_data()
            .expect("index-2 requires fixed-phase data")
            .psi_dot_ref
            .clone()
    }
}

/// Full state of a freezing run.
#[derive(Debug, Clone)]
pub struct FreezingState {
    pub v: CellField,
    pub mu: Vec<f64>,
    pub alpha: f64,
    pub b: Vec<f64>,
    pub t: f64,
    pub tau: f64,
    pub dtau: f64,
}

/// Plain-number record emitted after every accepted step.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub tau: f64,
    pub dtau: f64,
    pub t: f64,
    pub alpha: f64,
    pub b: Vec<f64>,
    pub mu: Vec<f64>,
    /// Relative phase-condition residual.
    pub res_phase: f64,
    /// Max norm of the freezing right-hand side.
    pub res_rhs: f64,
    pub mass: f64,
}

/// Stop when `||F||_inf <= tol (1 + ||v||_inf)` for `consecutive` steps.
#[derive(Debug, Clone)]
pub struct StationarityRule {
    pub tol: f64,
    pub consecutive: usize,
}

impl Default for StationarityRule {
    fn default() -> Self {
        StationarityRule {
            tol: 1e-10,
            consecutive: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntegrateOptions {
    pub max_steps: usize,
    pub stationarity: Option<StationarityRule>,
    /// Abort when the CFL step size falls below this floor.
    pub dtau_floor: f64,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        IntegrateOptions {
            max_steps: 50_000_000,
            stationarity: Some(StationarityRule::default()),
            dtau_floor: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: usize,
    pub final_tau: f64,
    pub stopped_stationary: bool,
}

/// Drives [`FreezingSystem`] with CFL-adaptive half-explicit IMEX steps.
pub struct Integrator {
    system: FreezingSystem,
    tableau: ButcherPair,
    options: IntegrateOptions,
}

impl Integrator {
    pub fn new(problem: FreezingProblem) -> Result<Integrator> {
        Integrator::with_options(problem, IntegrateOptions::default())
    }

    pub fn with_options(problem: FreezingProblem, options: IntegrateOptions) -> Result<Integrator> {
        let tableau = ButcherPair::heun_crank_nicolson();
        tableau.validate()?;
        Ok(Integrator {
            system: FreezingSystem::new(problem)?,
            tableau,
            options,
        })
    }

    /// A non-freezing run of the same discretization: `mu` pinned to zero,
    /// so `t` advances with `tau` and the group stays at the identity.
    pub fn direct(problem: FreezingProblem, options: IntegrateOptions) -> Result<Integrator> {
        let n_mu = problem.n_mu();
        let tableau = ButcherPair::heun_crank_nicolson();
        Ok(Integrator {
            system: FreezingSystem::with_pinned_mu(problem, vec![0.0; n_mu])?,
            tableau,
            options,
        })
    }

    pub fn problem(&self) -> &FreezingProblem {
        self.system.problem()
    }

    pub fn options(&self) -> &IntegrateOptions {
        &self.options
    }

    /// Builds the initial state: consistent `mu`, identity group element and
    /// a CFL-sized first step.
    pub fn consistent_initialize(&mut self, v0: &CellField) -> Result<FreezingState> {
        let problem = self.system.problem();
        let d = problem.dim();
        let mu0 = if let Some(pin) = &self.system.mu_pin {
            pin.clone()
        } else {
            // bootstrap the dissipation bound with mu = 0, then solve
            let a0 = wave_speed_bound(problem, v0, &vec![0.0; problem.n_mu()]);
            consistent_initialize(problem, v0, a0)?
        };
        let a = wave_speed_bound(problem, v0, &mu0);
        let dtau = problem.lambda_cfl() * problem.grid().min_dx() / a.max(1e-14);
        Ok(FreezingState {
            v: v0.clone(),
            mu: mu0,
            alpha: 1.0,
            b: vec![0.0; d],
            t: 0.0,
            tau: 0.0,
            dtau,
        })
    }

    /// CFL policy: keep the current step size unless it violates the target
    /// (then reduce to it) or the target allows doubling.  Any change
    /// invalidates cached factorizations.
    pub fn adapt_timestep(&mut self, state: &mut FreezingState) {
        let (a, target) = {
            let problem = self.system.problem();
            let a = wave_speed_bound(problem, &state.v, &state.mu);
            let target = problem.lambda_cfl() * problem.grid().min_dx() / a.max(1e-14);
            (a, target)
        };
        self.system.set_wave_speed(a);
        let old = state.dtau;
        if state.dtau > target {
            state.dtau = target;
        } else if target >= 2.0 * state.dtau {
            state.dtau *= 2.0;
        }
        if state.dtau != old {
            self.system.invalidate_factors();
        }
    }

    /// One IMEX step of size `h` including the group/time update.  The
    /// wave-speed bound must be current (set by [`Self::adapt_timestep`]).
    pub fn step(&mut self, state: &FreezingState, h: f64) -> Result<(FreezingState, StepDiagnostics)> {
        let out = imex_dae_step(&mut self.system, &self.tableau, state.v.values(), h)?;
        let p_exp = self.system.problem().exponent();
        let (alpha, b, t) = group_time_step(
            state.alpha,
            &state.b,
            state.t,
            &out.stage_mu,
            h,
            &self.tableau,
            p_exp,
        )?;
        let diagnostics = self.diagnostics(&out)?;
        let v = CellField::from_values(self.system.problem().grid(), out.v)?;
        Ok((
            FreezingState {
                v,
                mu: out.mu,
                alpha,
                b,
                t,
                tau: state.tau + h,
                dtau: state.dtau,
            },
            diagnostics,
        ))
    }

    fn diagnostics(&self, out: &StepOutcome) -> Result<StepDiagnostics> {
        let problem = self.system.problem();
        let vol = problem.grid().cell_volume();
        let data = match &out.end_data {
            Some(d) => d.clone(),
            None => self.system.eval(&out.v)?,
        };
        // F = -h0g - H1 mu + pv at the new value
        let n = data.h0g.len();
        let mut f = vec![0.0; n];
        for k in 0..n {
            f[k] = -data.h0g[k] + data.pv[k];
        }
        for (col, &m) in data.h1.iter().zip(&out.mu) {
            axpy(&mut f, -m, col);
        }
        let res_rhs = f.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let f_norm = (vol * dot(&f, &f)).sqrt();

        let res_phase = if self.system.is_pinned() {
            0.0
        } else {
            match problem.phase() {
                PhaseCondition::Orthogonal => {
                    let mut worst = 0.0f64;
                    for col in &data.h1 {
                        let r = vol * dot(col, &f);
                        let col_norm = (vol * dot(col, col)).sqrt();
                        worst = worst.max(r.abs() / (col_norm * f_norm).max(1e-300));
                    }
                    worst
                }
                PhaseCondition::Fixed => {
                    let fixed = problem.fixed_data().ok_or(Error::MissingReference)?;
                    let diff: Vec<f64> = out
                        .v
                        .iter()
                        .zip(fixed.reference.values())
                        .map(|(v, r)| v - r)
                        .collect();
                    let mut worst = 0.0f64;
                    for (i, col) in fixed.psi.iter().enumerate() {
                        let r = vol * dot(col, &diff);
                        let scale = (fixed.psi_norms[i] * fixed.ref_norm).max(1e-300);
                        worst = worst.max(r.abs() / scale);
                    }
                    worst
                }
            }
        };
        Ok(StepDiagnostics { res_phase, res_rhs })
    }

    /// Runs from `v0` until `tau_end` (the last step is shortened to land
    /// exactly) or until the stationarity rule fires.
    pub fn integrate(
        &mut self,
        v0: &CellField,
        tau_end: f64,
        on_step: &mut dyn FnMut(&StepRecord, &FreezingState),
    ) -> Result<(RunSummary, FreezingState)> {
        let mut state = self.consistent_initialize(v0)?;
        let mut steps = 0usize;
        let mut quiet = 0usize;
        let mut stationary = false;
        let end_tol = 1e-12 * (1.0 + tau_end.abs());
        while state.tau < tau_end - end_tol && steps < self.options.max_steps {
            self.adapt_timestep(&mut state);
            if state.dtau < self.options.dtau_floor {
                return Err(Error::StepSizeUnderflow {
                    tau: state.tau,
                    dtau: state.dtau,
                });
            }
            let h = state.dtau.min(tau_end - state.tau);
            let (next, diag) = self.step(&state, h).map_err(|e| Error::StepFailed {
                step: steps,
                tau: state.tau,
                source: Box::new(e),
            })?;
            state = next;
            steps += 1;
            let record = StepRecord {
                step: steps,
                tau: state.tau,
                dtau: state.dtau,
                t: state.t,
                alpha: state.alpha,
                b: state.b.clone(),
                mu: state.mu.clone(),
                res_phase: diag.res_phase,
                res_rhs: diag.res_rhs,
                mass: state.v.mass(),
            };
            on_step(&record, &state);
            if let Some(rule) = &self.options.stationarity {
                if diag.res_rhs <= rule.tol * (1.0 + state.v.max_abs()) {
                    quiet += 1;
                    if quiet >= rule.consecutive {
                        stationary = true;
                        break;
                    }
                } else {
                    quiet = 0;
                }
            }
        }
        Ok((
            RunSummary {
                steps,
                final_tau: state.tau,
                stopped_stationary: stationary,
            },
            state,
        ))
    }
}

/// Residual norms attached to an accepted step.
#[derive(Debug, Clone, Copy)]
pub struct StepDiagnostics {
    pub res_phase: f64,
    pub res_rhs: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::limiter::LimiterConfig;
    use crate::mesh::Grid;
    use approx::assert_relative_eq;

    #[test]
    fn default_tableau_entries() {
        let tab = ButcherPair::heun_crank_nicolson();
        tab.validate().unwrap();
        assert_eq!(tab.stages(), 2);
        assert_eq!(tab.a[1], vec![1.0, 0.0, 0.0]);
        assert_eq!(tab.a[2], vec![0.5, 0.5, 0.0]);
        assert_eq!(tab.a_hat[1], vec![0.5, 0.5, 0.0]);
        assert_eq!(tab.a_hat[2], vec![0.5, 0.0, 0.5]);
        assert_eq!(tab.c, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn tableau_triangularity_enforced() {
        let mut tab = ButcherPair::heun_crank_nicolson();
        tab.a[1][1] = 0.1;
        assert!(tab.validate().is_err());
        let mut tab = ButcherPair::heun_crank_nicolson();
        tab.a_hat[1][2] = 0.1;
        assert!(tab.validate().is_err());
    }

    /// Scalar test system: V' = lambda V (stiff) + rate V (explicit), no
    /// algebraic variables.
    struct Scalar {
        lambda: f64,
        rate: f64,
    }

    impl ImexDaeSystem for Scalar {
        fn n_diff(&self) -> usize {
            1
        }
        fn n_alg(&self) -> usize {
            0
        }
        fn constraint(&self) -> ConstraintKind {
            ConstraintKind::Index1
        }
        fn eval(&self, v: &[f64]) -> Result<StageData> {
            Ok(StageData {
                h0g: vec![-self.rate * v[0]],
                h1: Vec::new(),
                pv: vec![self.lambda * v[0]],
            })
        }
        fn solve_stiff(&mut self, coeff: f64, rhs: &[f64]) -> Result<Vec<f64>> {
            Ok(vec![rhs[0] / (1.0 - coeff * self.lambda)])
        }
        fn solve_index1_mu(&self, _v: &[f64], _data: &StageData) -> Result<Vec<f64>> {
            Ok(Vec::new())
        }
    }

    #[test]
    fn pure_diffusion_reduces_to_crank_nicolson() {
        // V' = lambda V: V1 = (1 + h lambda / 2) / (1 - h lambda / 2) V0
        let mut sys = Scalar {
            lambda: -1.0,
            rate: 0.0,
        };
        let tab = ButcherPair::heun_crank_nicolson();
        let out = imex_dae_step(&mut sys, &tab, &[1.0], 0.1).unwrap();
        let cn = (1.0 - 0.05) / (1.0 + 0.05);
        assert_relative_eq!(out.v[0], cn, epsilon = 1e-15);
        assert_relative_eq!(out.v[0], 0.9047619047619048, epsilon = 1e-14);
    }

    #[test]
    fn pure_explicit_reduces_to_heun() {
        // V' = V: V1 = 1.1, V2 = 1 + 0.05 (1 + 1.1) = 1.105
        let mut sys = Scalar {
            lambda: 0.0,
            rate: 1.0,
        };
        let tab = ButcherPair::heun_crank_nicolson();
        let out = imex_dae_step(&mut sys, &tab, &[1.0], 0.1).unwrap();
        assert_relative_eq!(out.v[0], 1.105, epsilon = 1e-15);
    }

    #[test]
    fn zero_rhs_keeps_state() {
        let mut sys = Scalar {
            lambda: 0.0,
            rate: 0.0,
        };
        let tab = ButcherPair::heun_crank_nicolson();
        let out = imex_dae_step(&mut sys, &tab, &[3.5], 0.25).unwrap();
        assert_eq!(out.v[0], 3.5);
    }

    #[test]
    fn group_update_oracle() {
        // p = 2, mu_1 = 1 at both stages, alpha0 = 1, h = 0.1:
        // alpha stages 1.1 then 1.105; t with t' = alpha^2: 0.1105
        let tab = ButcherPair::heun_crank_nicolson();
        let stage_mu = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let (alpha, b, t) =
            group_time_step(1.0, &[0.0], 0.0, &stage_mu, 0.1, &tab, 2.0).unwrap();
        assert_relative_eq!(alpha, 1.105, epsilon = 1e-15);
        assert_relative_eq!(t, 0.1105, epsilon = 1e-15);
        assert_eq!(b, vec![0.0]);
    }

    #[test]
    fn group_update_zero_mu() {
        let tab = ButcherPair::heun_crank_nicolson();
        let stage_mu = vec![vec![0.0, 0.5], vec![0.0, 0.5]];
        let (alpha, b, t) =
            group_time_step(2.0, &[1.0], 0.3, &stage_mu, 0.2, &tab, 2.0).unwrap();
        assert_eq!(alpha, 2.0);
        // b' = alpha mu_2 = 1.0 per stage, both stages alpha = 2
        assert_relative_eq!(b[0], 1.0 + 0.2 * 2.0 * 0.5, epsilon = 1e-15);
        // t' = alpha^2 = 4
        assert_relative_eq!(t, 0.3 + 0.2 * 4.0, epsilon = 1e-15);
    }

    fn gaussian_problem(nu: f64, phase: PhaseCondition) -> (FreezingProblem, CellField) {
        let grid = Grid::line(-5.0, 5.0, 58).unwrap();
        let v0 = CellField::from_fn(&grid, |x| (-x[0] * x[0]).exp()).unwrap();
        let reference = match phase {
            PhaseCondition::Fixed => Some(v0.clone()),
            PhaseCondition::Orthogonal => None,
        };
        let problem = FreezingProblem::new(
            grid,
            nu,
            2.0,
            [1.0, 0.0],
            LimiterConfig::default(),
            phase,
            reference,
            1.0 / 3.0,
        )
        .unwrap();
        (problem, v0)
    }

    #[test]
    fn adapt_timestep_policy() {
        let (problem, v0) = gaussian_problem(0.4, PhaseCondition::Orthogonal);
        let mut integrator = Integrator::new(problem).unwrap();
        let mut state = integrator.consistent_initialize(&v0).unwrap();
        // target = lambda * dx / a
        let a = wave_speed_bound(integrator.problem(), &state.v, &state.mu);
        let dx = integrator.problem().grid().dx(0);
        assert_relative_eq!(state.dtau, dx / (3.0 * a), epsilon = 1e-15);

        // inflate dtau: must be clipped back to the target
        state.dtau = 10.0;
        integrator.adapt_timestep(&mut state);
        assert_relative_eq!(state.dtau, dx / (3.0 * a), epsilon = 1e-15);

        // tiny dtau: doubles while the target allows it
        let before = state.dtau / 8.0;
        state.dtau = before;
        integrator.adapt_timestep(&mut state);
        assert_relative_eq!(state.dtau, 2.0 * before, epsilon = 1e-15);
    }

    #[test]
    fn cfl_target_example() {
        // dx = 0.1, a = 5.5, lambda = 1/3 -> 6.0606e-3
        let target = (1.0 / 3.0) * 0.1 / 5.5;
        assert_relative_eq!(target, 6.0606060606060606e-3, epsilon = 1e-15);
    }

    #[test]
    fn integrate_zero_horizon_returns_consistent_init() {
        let (problem, v0) = gaussian_problem(0.4, PhaseCondition::Orthogonal);
        let mut integrator = Integrator::new(problem).unwrap();
        let (summary, state) = integrator.integrate(&v0, 0.0, &mut |_, _| {}).unwrap();
        assert_eq!(summary.steps, 0);
        assert_eq!(state.tau, 0.0);
        assert_eq!(state.alpha, 1.0);
        // mu satisfies the orthogonality condition at the bootstrap bound
        // it was solved with
        let n_mu = integrator.problem().n_mu();
        let a0 = wave_speed_bound(integrator.problem(), &state.v, &vec![0.0; n_mu]);
        let res = crate::freezing_rhs::phase_residual(
            integrator.problem(),
            &state.v,
            Some(&state.mu),
            a0,
        )
        .unwrap();
        for r in res {
            assert!(r.abs() < 1e-10);
        }
    }

    #[test]
    fn short_freezing_run_keeps_constraints() {
        for phase in [PhaseCondition::Orthogonal, PhaseCondition::Fixed] {
            let (problem, v0) = gaussian_problem(0.4, phase);
            let mut integrator = Integrator::new(problem).unwrap();
            let mut worst: f64 = 0.0;
            let (summary, state) = integrator
                .integrate(&v0, 0.3, &mut |rec, _| {
                    worst = worst.max(rec.res_phase);
                })
                .unwrap();
            assert!(summary.steps > 0);
            assert!(state.tau >= 0.3 - 1e-12);
            assert!(state.v.is_finite());
            match phase {
                PhaseCondition::Orthogonal => assert!(worst <= 1e-8, "orthogonal residual {worst}"),
                PhaseCondition::Fixed => assert!(worst <= 1e-10, "fixed residual {worst}"),
            }
        }
    }

    #[test]
    fn conservative_run_preserves_mass() {
        let (problem, v0) = gaussian_problem(0.01, PhaseCondition::Orthogonal);
        let mass0 = v0.mass();
        let mut integrator = Integrator::new(problem).unwrap();
        let (_, state) = integrator.integrate(&v0, 0.5, &mut |_, _| {}).unwrap();
        assert_relative_eq!(state.v.mass(), mass0, max_relative = 1e-10);
    }

    #[test]
    fn direct_run_tracks_physical_time() {
        let (problem, v0) = gaussian_problem(0.4, PhaseCondition::Orthogonal);
        let mut integrator = Integrator::direct(problem, IntegrateOptions::default()).unwrap();
        let (summary, state) = integrator.integrate(&v0, 0.2, &mut |_, _| {}).unwrap();
        assert!(summary.steps > 0);
        assert_relative_eq!(state.t, state.tau, epsilon = 1e-12);
        assert_eq!(state.alpha, 1.0);
        assert!(state.mu.iter().all(|&m| m == 0.0));
    }

    #[test]
    fn pure_diffusion_flattens_to_mean() {
        // mu pinned to zero and a vanishing advective direction: the no-flux
        // heat flow relaxes to the constant state mass / |Omega|
        let grid = Grid::line(-2.0, 2.0, 30).unwrap();
        let v0 = CellField::from_fn(&grid, |x| 1.0 + (-4.0 * x[0] * x[0]).exp()).unwrap();
        let problem = FreezingProblem::new(
            grid.clone(),
            2.0,
            2.0,
            [1e-12, 0.0],
            LimiterConfig::default(),
            PhaseCondition::Orthogonal,
            None,
            1.0 / 3.0,
        )
        .unwrap();
        let mass0 = v0.mass();
        let mean = mass0 / (grid.bounds(0).1 - grid.bounds(0).0);
        let mut integrator = Integrator::direct(problem, IntegrateOptions::default()).unwrap();
        let (_, state) = integrator.integrate(&v0, 15.0, &mut |_, _| {}).unwrap();
        for &v in state.v.values() {
            assert_relative_eq!(v, mean, max_relative = 1e-6);
        }
        assert_relative_eq!(state.v.mass(), mass0, max_relative = 1e-11);
    }
}
