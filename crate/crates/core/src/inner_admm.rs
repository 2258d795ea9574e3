//! Two-block ADMM over the split robust subproblem, and the joint solve used
//! once the split residual is small.
//!
//! Block 1 owns the feedback gains `K` and the slack `p_tilde` of the robust
//! SOC rows; block 2 owns the nominal step `du` and the slack `p` of the
//! linearized nominal rows. Consensus `p = p_tilde` recovers the unsplit
//! problem.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::conic::{self, AffineExpr, ConicProgram, ConicSolution};
use crate::constraints::{ControlBounds, LinearizedConstraintData};
use crate::error::{Error, Result};
use crate::lintraj::{PolicyMatrix, StackedBlocks};
use crate::uncertainty::{ErrorEllipsoid, UncertaintySet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmState {
    pub lambda: DVector<f64>,
    pub p: DVector<f64>,
    pub p_tilde: DVector<f64>,
    pub rho: f64,
    pub residual_history: Vec<f64>,
}

impl AdmmState {
    pub fn new(n_g: usize, rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::invalid(format!("penalty must be positive, got {rho}")));
        }
        Ok(Self {
            lambda: DVector::zeros(n_g),
            p: DVector::zeros(n_g),
            p_tilde: DVector::zeros(n_g),
            rho,
            residual_history: Vec::new(),
        })
    }

    /// `||p - p_tilde||`
    pub fn residual(&self) -> f64 {
        (&self.p - &self.p_tilde).norm()
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }
}

/// `lambda += rho (p - p_tilde)`; records the residual.
pub fn dual_update(state: &mut AdmmState) {
    let diff = &state.p - &state.p_tilde;
    state.lambda += state.rho * &diff;
    state.residual_history.push(diff.norm());
}

/// The two minimizations of one sweep. `block1` returns the new `p_tilde`,
/// `block2` the new `p`; anything else they produce is kept by the
/// implementor.
pub trait AdmmBlocks {
    fn block1(&mut self, state: &AdmmState, iteration: usize) -> Result<DVector<f64>>;
    fn block2(&mut self, state: &AdmmState, iteration: usize) -> Result<DVector<f64>>;
}

/// Sweep until `||p - p_tilde|| <= eps_p` or `max_iter` sweeps. Returns the
/// number of sweeps performed.
pub fn run_sweeps<B: AdmmBlocks>(state: &mut AdmmState, blocks: &mut B, max_iter: usize, eps_p: f64) -> Result<usize> {
    if max_iter == 0 {
        return Err(Error::invalid("inner iteration cap must be positive"));
    }
    for l in 1..=max_iter {
        state.p_tilde = blocks.block1(state, l)?;
        state.p = blocks.block2(state, l)?;
        dual_update(state);
        let res = *state.residual_history.last().unwrap_or(&0.0);
        log::trace!("admm {l}: residual {res:.3e}");
        if res <= eps_p {
            return Ok(l);
        }
    }
    Ok(max_iter)
}

/// Per-step quadratic weights: `Q_u = sum (u_k)' R_u^k u_k` and
/// `Q_K = sum ||R_K^k K_k||_F^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct CostWeights {
    pub r_u: Vec<DMatrix<f64>>,
    pub r_k: Vec<DMatrix<f64>>,
}

impl CostWeights {
    pub fn scalar(horizon: usize, n_u: usize, r_u: f64, r_k: f64) -> Self {
        Self {
            r_u: vec![DMatrix::identity(n_u, n_u) * r_u; horizon],
            r_k: vec![DMatrix::identity(n_u, n_u) * r_k; horizon],
        }
    }

    pub fn validate(&self, horizon: usize, n_u: usize) -> Result<()> {
        if self.r_u.len() != horizon || self.r_k.len() != horizon {
            return Err(Error::invalid(format!("expected {horizon} cost weight matrices per kind")));
        }
        for m in self.r_u.iter().chain(&self.r_k) {
            if m.shape() != (n_u, n_u) || m.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("cost weights must be finite {n_u}x{n_u} matrices")));
            }
        }
        for m in &self.r_u {
            let sym = (m + m.transpose()) * 0.5;
            if sym.symmetric_eigenvalues().min() < -1e-12 {
                return Err(Error::invalid("control weights must be positive semidefinite"));
            }
        }
        Ok(())
    }

    /// `Q_u(u_hat + du)`
    pub fn control_cost(&self, u: &DVector<f64>) -> f64 {
        let n_u = self.r_u.first().map_or(0, |m| m.nrows());
        self.r_u
            .iter()
            .enumerate()
            .map(|(k, r)| {
                let uk = u.rows(k * n_u, n_u);
                (uk.transpose() * r * uk)[0]
            })
            .sum()
    }

    /// `Q_K(K)`
    pub fn gain_cost(&self, gains: &PolicyMatrix) -> f64 {
        self.r_k.iter().zip(&gains.blocks).map(|(r, k)| (r * k).norm_squared()).sum()
    }
}

/// Everything the convex subproblems of one outer iteration need.
pub struct SubproblemContext<'a> {
    pub data: &'a LinearizedConstraintData,
    pub blocks: &'a StackedBlocks,
    pub set: &'a UncertaintySet,
    pub error_sets: Option<&'a [ErrorEllipsoid]>,
    pub weights: &'a CostWeights,
    pub u_hat: &'a DVector<f64>,
    pub r_trust: f64,
    pub control_bounds: Option<&'a ControlBounds>,
}

/// One robust row as `||constant + M vec(K)|| <= p_tilde_j - offset`.
struct RobustRow {
    constant: Vec<f64>,
    /// `(vec(K) index, coefficient column)`
    coeffs: Vec<(usize, Vec<f64>)>,
    offset: f64,
}

impl SubproblemContext<'_> {
    fn horizon(&self) -> usize {
        self.blocks.horizon()
    }

    fn n_u(&self) -> usize {
        self.blocks.n_u()
    }

    fn n_x(&self) -> usize {
        self.blocks.n_x()
    }

    fn n_k(&self) -> usize {
        self.horizon() * self.n_u() * self.n_x()
    }

    fn check(&self) -> Result<()> {
        let t = self.horizon();
        if self.data.horizon() != t || self.u_hat.len() != t * self.n_u() {
            return Err(Error::invalid("subproblem data disagree on horizon or control size"));
        }
        if self.set.dim() != (t + 1) * self.n_x() {
            return Err(Error::invalid(format!(
                "uncertainty set dimension {} does not match (T+1) n_x = {}",
                self.set.dim(),
                (t + 1) * self.n_x()
            )));
        }
        if !(self.r_trust.is_finite() && self.r_trust > 0.0) {
            return Err(Error::invalid("trust radius must be positive"));
        }
        self.weights.validate(t, self.n_u())
    }

    fn robust_rows(&self) -> Result<Vec<RobustRow>> {
        let (t, n_u, n_x) = (self.horizon(), self.n_u(), self.n_x());
        let w = self.set.whitened_gamma_t() * self.set.tau().sqrt();
        let active = self.set.tau() > 0.0;
        let mut out = Vec::with_capacity(self.data.len());
        for j in 0..self.data.len() {
            let offset = match self.error_sets {
                Some(e) => self.data.error_term(j, e)?,
                None => 0.0,
            };
            if !active {
                out.push(RobustRow { constant: Vec::new(), coeffs: Vec::new(), offset });
                continue;
            }
            let a = self.data.j_u.row(j);
            let c = self.data.j_zeta.row(j).transpose();
            let constant = (&w * c).as_slice().to_vec();
            let mut coeffs = Vec::new();
            for k in 0..t {
                for r in 0..n_u {
                    let ak = a[k * n_u + r];
                    if ak == 0.0 {
                        continue;
                    }
                    for col in 0..n_x {
                        let idx = k * n_u * n_x + col * n_u + r;
                        let wc = w.column(k * n_x + col);
                        coeffs.push((idx, wc.iter().map(|v| ak * v).collect()));
                    }
                }
            }
            out.push(RobustRow { constant, coeffs, offset });
        }
        Ok(out)
    }

    fn add_gain_cost(&self, prog: &mut ConicProgram, k0: usize) {
        let (n_u, n_x) = (self.n_u(), self.n_x());
        for (k, r) in self.weights.r_k.iter().enumerate() {
            let h = r.transpose() * r * 2.0;
            for col in 0..n_x {
                let base = k0 + k * n_u * n_x + col * n_u;
                let idx: Vec<usize> = (base..base + n_u).collect();
                prog.add_p_block(&idx, &h);
            }
        }
    }

    fn add_control_cost(&self, prog: &mut ConicProgram, u0: usize) {
        let n_u = self.n_u();
        for (k, r) in self.weights.r_u.iter().enumerate() {
            let h = r + r.transpose();
            let idx: Vec<usize> = (u0 + k * n_u..u0 + (k + 1) * n_u).collect();
            prog.add_p_block(&idx, &h);
            let lin = &h * self.u_hat.rows(k * n_u, n_u);
            for (i, &v) in idx.iter().zip(lin.iter()) {
                prog.add_q(*i, v);
            }
        }
    }

    /// `g_hat + J_u du + p <= 0`
    fn add_nominal_rows(&self, prog: &mut ConicProgram, u0: usize, p0: usize) {
        let rows = (0..self.data.len())
            .map(|j| {
                let mut terms: Vec<(usize, f64)> = self
                    .data
                    .j_u
                    .row(j)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(i, &v)| (u0 + i, v))
                    .collect();
                terms.push((p0 + j, 1.0));
                AffineExpr::new(terms, self.data.g_hat[j])
            })
            .collect();
        prog.add_le("nominal", rows);
    }

    /// `||F_u du|| <= r_trust` and `lower <= u_hat + du <= upper`.
    fn add_step_limits(&self, prog: &mut ConicProgram, u0: usize) {
        let fu = &self.blocks.fu;
        let v = (0..fu.nrows())
            .filter_map(|i| {
                let terms: Vec<(usize, f64)> = fu
                    .row(i)
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0.0)
                    .map(|(c, &v)| (u0 + c, v))
                    .collect();
                (!terms.is_empty()).then(|| AffineExpr::new(terms, 0.0))
            })
            .collect::<Vec<_>>();
        if !v.is_empty() {
            prog.add_soc("trust", AffineExpr::constant(self.r_trust), v);
        }
        if let Some(cb) = self.control_bounds {
            let n_u = self.n_u();
            let n = self.u_hat.len();
            if let Some(lo) = &cb.lower {
                prog.add_ge(
                    "control_lower",
                    (0..n).map(|i| AffineExpr::new(vec![(u0 + i, 1.0)], self.u_hat[i] - lo[i % n_u])).collect(),
                );
            }
            if let Some(hi) = &cb.upper {
                prog.add_le(
                    "control_upper",
                    (0..n).map(|i| AffineExpr::new(vec![(u0 + i, 1.0)], self.u_hat[i] - hi[i % n_u])).collect(),
                );
            }
        }
    }

    /// `||constant + M vec(K)|| <= slack_j - offset` for every row.
    fn add_robust_rows(&self, prog: &mut ConicProgram, rows: &[RobustRow], k0: usize, s0: usize) {
        let mut plain = Vec::new();
        for (j, row) in rows.iter().enumerate() {
            let t = AffineExpr::new(vec![(s0 + j, 1.0)], -row.offset);
            if row.constant.is_empty() {
                plain.push(t);
                continue;
            }
            let v = (0..row.constant.len())
                .map(|i| {
                    let terms = row
                        .coeffs
                        .iter()
                        .filter(|(_, c)| c[i] != 0.0)
                        .map(|(idx, c)| (k0 + idx, c[i]))
                        .collect();
                    AffineExpr::new(terms, row.constant[i])
                })
                .collect();
            prog.add_soc(&format!("robust_{j}"), t, v);
        }
        prog.add_ge("robust", plain);
    }
}

fn checked(sol: ConicSolution, iteration: usize) -> Result<ConicSolution> {
    if sol.is_usable() {
        Ok(sol)
    } else {
        Err(Error::InnerSolver { status: sol.status, iteration })
    }
}

/// Programs and last iterates of one ADMM run.
pub struct RobustAdmm<'a, 'b> {
    ctx: &'b SubproblemContext<'a>,
    rows: Vec<RobustRow>,
    pub gains: PolicyMatrix,
    pub delta_u: DVector<f64>,
    pub block_objectives: (f64, f64),
    warm: (Option<ConicSolution>, Option<ConicSolution>),
    dump: Option<&'b mut Vec<String>>,
}

impl<'a, 'b> RobustAdmm<'a, 'b> {
    pub fn new(ctx: &'b SubproblemContext<'a>) -> Result<Self> {
        ctx.check()?;
        Ok(Self {
            rows: ctx.robust_rows()?,
            gains: PolicyMatrix::zeros(ctx.horizon(), ctx.n_u(), ctx.n_x()),
            delta_u: DVector::zeros(ctx.u_hat.len()),
            block_objectives: (0.0, 0.0),
            warm: (None, None),
            dump: None,
            ctx,
        })
    }

    /// Collect a text summary of every conic program built.
    pub fn with_dump(mut self, dump: &'b mut Vec<String>) -> Self {
        self.dump = Some(dump);
        self
    }

    fn block1_program(&self, state: &AdmmState) -> ConicProgram {
        let ctx = self.ctx;
        let mut prog = ConicProgram::new();
        let k0 = prog.add_vars("K", ctx.n_k()).start;
        let s0 = prog.add_vars("p_tilde", state.len()).start;
        ctx.add_gain_cost(&mut prog, k0);
        for j in 0..state.len() {
            prog.add_p(s0 + j, s0 + j, state.rho);
            prog.add_q(s0 + j, -(state.lambda[j] + state.rho * state.p[j]));
        }
        ctx.add_robust_rows(&mut prog, &self.rows, k0, s0);
        prog
    }

    fn block2_program(&self, state: &AdmmState) -> ConicProgram {
        let ctx = self.ctx;
        let mut prog = ConicProgram::new();
        let u0 = prog.add_vars("du", ctx.u_hat.len()).start;
        let p0 = prog.add_vars("p", state.len()).start;
        ctx.add_control_cost(&mut prog, u0);
        for j in 0..state.len() {
            prog.add_p(p0 + j, p0 + j, state.rho);
            prog.add_q(p0 + j, state.lambda[j] - state.rho * state.p_tilde[j]);
        }
        ctx.add_nominal_rows(&mut prog, u0, p0);
        ctx.add_step_limits(&mut prog, u0);
        prog
    }

    fn record(&mut self, tag: &str, prog: &ConicProgram) {
        if let Some(d) = self.dump.as_deref_mut() {
            d.push(format!("# {tag}\n{}", prog.summary()));
        }
    }
}

impl AdmmBlocks for RobustAdmm<'_, '_> {
    fn block1(&mut self, state: &AdmmState, iteration: usize) -> Result<DVector<f64>> {
        let prog = self.block1_program(state);
        self.record(&format!("block1 sweep {iteration}"), &prog);
        let sol = checked(conic::solve(&prog, self.warm.0.as_ref())?, iteration)?;
        let ctx = self.ctx;
        self.gains = PolicyMatrix::from_vectorized(sol.group(&prog, "K"), ctx.horizon(), ctx.n_u(), ctx.n_x())?;
        let p_tilde = DVector::from_column_slice(sol.group(&prog, "p_tilde"));
        self.block_objectives.0 = sol.objective;
        self.warm.0 = Some(sol);
        Ok(p_tilde)
    }

    fn block2(&mut self, state: &AdmmState, iteration: usize) -> Result<DVector<f64>> {
        let prog = self.block2_program(state);
        self.record(&format!("block2 sweep {iteration}"), &prog);
        let sol = checked(conic::solve(&prog, self.warm.1.as_ref())?, iteration)?;
        self.delta_u = DVector::from_column_slice(sol.group(&prog, "du"));
        let p = DVector::from_column_slice(sol.group(&prog, "p"));
        self.block_objectives.1 = sol.objective;
        log::debug!(
            "admm sweep {iteration}: block objectives {:.6e} / {:.6e}",
            self.block_objectives.0,
            self.block_objectives.1
        );
        self.warm.1 = Some(sol);
        Ok(p)
    }
}

/// Minimizer of block 1 for the current state: `(K, p_tilde)`.
pub fn block1_update(state: &AdmmState, ctx: &SubproblemContext<'_>) -> Result<(PolicyMatrix, DVector<f64>)> {
    let mut admm = RobustAdmm::new(ctx)?;
    let p_tilde = admm.block1(state, 0)?;
    Ok((admm.gains, p_tilde))
}

/// Minimizer of block 2 for the current state: `(du, p)`.
pub fn block2_update(state: &AdmmState, ctx: &SubproblemContext<'_>) -> Result<(DVector<f64>, DVector<f64>)> {
    let mut admm = RobustAdmm::new(ctx)?;
    let p = admm.block2(state, 0)?;
    Ok((admm.delta_u, p))
}

#[derive(Debug, Clone)]
pub struct AdmmOutcome {
    pub delta_u: DVector<f64>,
    pub gains: PolicyMatrix,
    pub iterations: usize,
}

/// Up to `max_iter` sweeps starting from (and updating) `state`.
pub fn run_admm(
    state: &mut AdmmState,
    ctx: &SubproblemContext<'_>,
    max_iter: usize,
    eps_p: f64,
    dump: Option<&mut Vec<String>>,
) -> Result<AdmmOutcome> {
    if state.len() != ctx.data.len() {
        return Err(Error::invalid("ADMM state size differs from the number of constraint rows"));
    }
    let mut admm = RobustAdmm::new(ctx)?;
    if let Some(d) = dump {
        admm = admm.with_dump(d);
    }
    let iterations = run_sweeps(state, &mut admm, max_iter, eps_p)?;
    Ok(AdmmOutcome { delta_u: admm.delta_u, gains: admm.gains, iterations })
}

#[derive(Debug, Clone)]
pub struct DirectOutcome {
    pub delta_u: DVector<f64>,
    pub gains: PolicyMatrix,
    pub p: DVector<f64>,
    pub objective: f64,
}

/// Solve the unsplit subproblem over `(du, K, p)` in one conic program.
/// `Ok(None)` when it is infeasible; the caller decides how to recover.
pub fn direct_solve(ctx: &SubproblemContext<'_>, dump: Option<&mut Vec<String>>) -> Result<Option<DirectOutcome>> {
    ctx.check()?;
    let rows = ctx.robust_rows()?;
    let n_g = ctx.data.len();
    let mut prog = ConicProgram::new();
    let u0 = prog.add_vars("du", ctx.u_hat.len()).start;
    let k0 = prog.add_vars("K", ctx.n_k()).start;
    let p0 = prog.add_vars("p", n_g).start;
    ctx.add_control_cost(&mut prog, u0);
    ctx.add_gain_cost(&mut prog, k0);
    ctx.add_nominal_rows(&mut prog, u0, p0);
    ctx.add_robust_rows(&mut prog, &rows, k0, p0);
    ctx.add_step_limits(&mut prog, u0);
    if let Some(d) = dump {
        d.push(format!("# direct\n{}", prog.summary()));
    }
    let sol = conic::solve(&prog, None)?;
    match sol.status {
        conic::ConicStatus::Optimal | conic::ConicStatus::Inaccurate => {}
        conic::ConicStatus::PrimalInfeasible => return Ok(None),
        status => return Err(Error::InnerSolver { status, iteration: 0 }),
    }
    // constant part of Q_u dropped by the program
    let constant = ctx.weights.control_cost(ctx.u_hat);
    Ok(Some(DirectOutcome {
        delta_u: DVector::from_column_slice(sol.group(&prog, "du")),
        gains: PolicyMatrix::from_vectorized(sol.group(&prog, "K"), ctx.horizon(), ctx.n_u(), ctx.n_x())?,
        p: DVector::from_column_slice(sol.group(&prog, "p")),
        objective: sol.objective + constant,
    }))
}
