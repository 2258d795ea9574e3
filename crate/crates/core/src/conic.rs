//! Quadratic objective over zero, nonnegative and second-order cone
//! constraints.
//!
//! Constraints are written as affine expressions `e(x) = a'x + c` that must lie
//! in a cone: `e = 0`, `e >= 0`, or `e_0 >= ||(e_1, .., e_m)||`. Solving is
//! delegated to Clarabel; the solution is then re-checked against the
//! original data so `Optimal` always means residuals within [`KKT_TOL`].

use std::fmt::Write as _;
use std::ops::Range;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative KKT tolerance an `Optimal` solution is guaranteed to meet.
pub const KKT_TOL: f64 = 1e-7;

/// Looser residual bound under which a stalled solve is still usable.
pub const INACCURATE_TOL: f64 = 1e-5;

const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConeKind {
    Zero,
    NonNeg,
    Soc,
}

/// `sum terms + constant`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AffineExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl AffineExpr {
    pub fn new(terms: Vec<(usize, f64)>, constant: f64) -> Self {
        Self { terms, constant }
    }

    pub fn constant(c: f64) -> Self {
        Self { terms: Vec::new(), constant: c }
    }

    pub fn var(i: usize) -> Self {
        Self { terms: vec![(i, 1.0)], constant: 0.0 }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().fold(self.constant, |acc, &(i, a)| acc + a * x[i])
    }

    fn negated(mut self) -> Self {
        self.constant = -self.constant;
        for t in &mut self.terms {
            t.1 = -t.1;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintBlock {
    pub kind: ConeKind,
    pub rows: Vec<AffineExpr>,
    pub label: String,
}

/// Named index ranges of the decision vector.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct VarLayout {
    groups: Vec<(String, Range<usize>)>,
}

impl VarLayout {
    pub fn get(&self, name: &str) -> Option<Range<usize>> {
        self.groups.iter().find(|(n, _)| n == name).map(|(_, r)| r.clone())
    }

    pub fn groups(&self) -> &[(String, Range<usize>)] {
        &self.groups
    }
}

/// `min 1/2 x'Px + q'x` subject to the constraint blocks.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConicProgram {
    n: usize,
    /// Upper-triangular entries `(i, j, v)` with `i <= j`; duplicates add up.
    p_upper: Vec<(usize, usize, f64)>,
    q: Vec<f64>,
    blocks: Vec<ConstraintBlock>,
    layout: VarLayout,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a named group of `len` variables and return its range.
    pub fn add_vars(&mut self, name: &str, len: usize) -> Range<usize> {
        let r = self.n..self.n + len;
        self.n += len;
        self.q.resize(self.n, 0.0);
        self.layout.groups.push((name.to_string(), r.clone()));
        r
    }

    pub fn num_vars(&self) -> usize {
        self.n
    }

    pub fn layout(&self) -> &VarLayout {
        &self.layout
    }

    pub fn blocks(&self) -> &[ConstraintBlock] {
        &self.blocks
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Add `v` to both `P[i][j]` and `P[j][i]` (once when `i == j`).
    pub fn add_p(&mut self, i: usize, j: usize, v: f64) {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        self.p_upper.push((i, j, v));
    }

    pub fn add_q(&mut self, i: usize, v: f64) {
        self.q[i] += v;
    }

    /// Add a dense symmetric block `m` to `P` on the index list `idx`.
    pub fn add_p_block(&mut self, idx: &[usize], m: &DMatrix<f64>) {
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate().skip(a) {
                if m[(a, b)] != 0.0 {
                    self.add_p(i, j, m[(a, b)]);
                }
            }
        }
    }

    pub fn add_eq(&mut self, label: &str, rows: Vec<AffineExpr>) {
        self.push_block(ConeKind::Zero, label, rows);
    }

    /// Each expression `<= 0`.
    pub fn add_le(&mut self, label: &str, rows: Vec<AffineExpr>) {
        let rows = rows.into_iter().map(AffineExpr::negated).collect();
        self.push_block(ConeKind::NonNeg, label, rows);
    }

    /// Each expression `>= 0`.
    pub fn add_ge(&mut self, label: &str, rows: Vec<AffineExpr>) {
        self.push_block(ConeKind::NonNeg, label, rows);
    }

    /// `||v|| <= t`.
    pub fn add_soc(&mut self, label: &str, t: AffineExpr, v: Vec<AffineExpr>) {
        let mut rows = Vec::with_capacity(v.len() + 1);
        rows.push(t);
        rows.extend(v);
        self.push_block(ConeKind::Soc, label, rows);
    }

    fn push_block(&mut self, kind: ConeKind, label: &str, rows: Vec<AffineExpr>) {
        if rows.is_empty() {
            return;
        }
        self.blocks.push(ConstraintBlock { kind, rows, label: label.to_string() });
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let mut val: f64 = self.q.iter().zip(x).map(|(q, x)| q * x).sum();
        for &(i, j, v) in &self.p_upper {
            val += if i == j { 0.5 * v * x[i] * x[i] } else { v * x[i] * x[j] };
        }
        val
    }

    fn p_times(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for &(i, j, v) in &self.p_upper {
            out[i] += v * x[j];
            if i != j {
                out[j] += v * x[i];
            }
        }
        out
    }

    /// Check indices, cone arities and positive semidefiniteness of `P`.
    pub fn validate(&self) -> Result<()> {
        if self.q.len() != self.n {
            return Err(Error::invalid("linear cost length differs from variable count"));
        }
        let bad = |msg: String| Err(Error::invalid(msg));
        for &(i, j, v) in &self.p_upper {
            if i >= self.n || j >= self.n || !v.is_finite() {
                return bad(format!("P entry ({i}, {j}) = {v} is out of range or not finite"));
            }
        }
        for b in &self.blocks {
            if b.kind == ConeKind::Soc && b.rows.len() < 2 {
                return bad(format!("cone '{}' needs arity >= 2", b.label));
            }
            for r in &b.rows {
                if !r.constant.is_finite() || r.terms.iter().any(|&(i, a)| i >= self.n || !a.is_finite()) {
                    return bad(format!("block '{}' has an invalid coefficient", b.label));
                }
            }
        }
        self.check_psd()
    }

    /// Eigenvalue check per connected component of the sparsity graph of `P`.
    fn check_psd(&self) -> Result<()> {
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for &(i, j, _) in &self.p_upper {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
            }
        }
        let mut members: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        let touched: std::collections::BTreeSet<usize> =
            self.p_upper.iter().flat_map(|&(i, j, _)| [i, j]).collect();
        for i in touched {
            let r = find(&mut parent, i);
            members.entry(r).or_default().push(i);
        }
        let mut entries: std::collections::BTreeMap<usize, Vec<(usize, usize, f64)>> = Default::default();
        for &(i, j, v) in &self.p_upper {
            entries.entry(find(&mut parent, i)).or_default().push((i, j, v));
        }
        for (root, idx) in members {
            let pos = |k: usize| idx.binary_search(&k).expect("member index");
            let mut m: DMatrix<f64> = DMatrix::zeros(idx.len(), idx.len());
            for &(i, j, v) in &entries[&root] {
                let (a, b) = (pos(i), pos(j));
                m[(a, b)] += v;
                if a != b {
                    m[(b, a)] += v;
                }
            }
            let scale = m.amax().max(1.0);
            let min_eig = SymmetricEigen::new(m).eigenvalues.min();
            if min_eig < -PSD_TOL * scale {
                return Err(Error::invalid(format!(
                    "P is not positive semidefinite (eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(())
    }

    /// Human-readable description of dimensions and cone layout.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let nnz_a: usize = self.blocks.iter().flat_map(|b| &b.rows).map(|r| r.terms.len()).sum();
        let rows: usize = self.blocks.iter().map(|b| b.rows.len()).sum();
        let _ = writeln!(s, "variables {}", self.n);
        for (name, r) in &self.layout.groups {
            let _ = writeln!(s, "  group {name} [{}, {})", r.start, r.end);
        }
        let _ = writeln!(s, "P nnz(upper) {}", self.p_upper.len());
        let _ = writeln!(s, "q nnz {}", self.q.iter().filter(|v| **v != 0.0).count());
        let _ = writeln!(s, "constraint rows {rows}, A nnz {nnz_a}");
        for b in &self.blocks {
            let nnz: usize = b.rows.iter().map(|r| r.terms.len()).sum();
            let _ = writeln!(s, "  {:?} {} rows={} nnz={}", b.kind, b.label, b.rows.len(), nnz);
        }
        s
    }

    /// Equivalent program with a linear objective: `P` is factored as `F'F`
    /// and `1/2 ||F x||^2 <= t` is imposed as a second-order cone.
    pub fn epigraph_form(&self) -> Result<ConicProgram> {
        self.validate()?;
        let mut out = ConicProgram {
            n: self.n,
            p_upper: Vec::new(),
            q: self.q.clone(),
            blocks: self.blocks.clone(),
            layout: self.layout.clone(),
        };
        let t = out.add_vars("epigraph", 1).start;
        out.q[t] = 1.0;
        let mut dense: DMatrix<f64> = DMatrix::zeros(self.n, self.n);
        for &(i, j, v) in &self.p_upper {
            dense[(i, j)] += v;
            if i != j {
                dense[(j, i)] += v;
            }
        }
        let active: Vec<usize> = (0..self.n)
            .filter(|&i| dense.row(i).iter().any(|&v| v != 0.0))
            .collect();
        let sub = DMatrix::from_fn(active.len(), active.len(), |a, b| dense[(active[a], active[b])]);
        let eig = SymmetricEigen::new(sub);
        let scale = eig.eigenvalues.amax().max(1.0);
        // ||(F x, t - 1/2)|| <= t + 1/2  <=>  ||F x||^2 <= 2t
        let mut v_rows = Vec::new();
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam <= PSD_TOL * scale {
                continue;
            }
            let w = lam.sqrt();
            let terms = active
                .iter()
                .enumerate()
                .map(|(a, &i)| (i, w * eig.eigenvectors[(a, k)]))
                .filter(|&(_, c)| c != 0.0)
                .collect();
            v_rows.push(AffineExpr::new(terms, 0.0));
        }
        v_rows.push(AffineExpr::new(vec![(t, 1.0)], -0.5));
        out.add_soc("epigraph", AffineExpr::new(vec![(t, 1.0)], 0.5), v_rows);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConicStatus {
    Optimal,
    /// Stalled short of [`KKT_TOL`] but within [`INACCURATE_TOL`].
    Inaccurate,
    PrimalInfeasible,
    DualInfeasible,
    IterationLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KktResiduals {
    pub primal: f64,
    pub dual: f64,
    pub gap: f64,
}

impl KktResiduals {
    pub fn within(&self, tol: f64) -> bool {
        self.primal <= tol && self.dual <= tol && self.gap <= tol
    }

    pub fn worst(&self) -> f64 {
        self.primal.max(self.dual).max(self.gap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: ConicStatus,
    pub primal: Vec<f64>,
    /// Cone multipliers, one vector per constraint block.
    pub duals: Vec<Vec<f64>>,
    pub objective: f64,
    pub residuals: KktResiduals,
    pub iterations: u32,
}

impl ConicSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == ConicStatus::Optimal
    }

    /// Optimal, or inaccurate but close enough to act on.
    pub fn is_usable(&self) -> bool {
        matches!(self.status, ConicStatus::Optimal | ConicStatus::Inaccurate)
    }

    pub fn group<'a>(&'a self, prog: &ConicProgram, name: &str) -> &'a [f64] {
        let r = prog.layout().get(name).unwrap_or(0..0);
        &self.primal[r]
    }
}

struct Assembled {
    p: CscMatrix<f64>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
}

fn assemble(prog: &ConicProgram) -> Assembled {
    let (mut pi, mut pj, mut pv) = (Vec::new(), Vec::new(), Vec::new());
    for &(i, j, v) in &prog.p_upper {
        pi.push(i);
        pj.push(j);
        pv.push(v);
    }
    let p = CscMatrix::new_from_triplets(prog.n, prog.n, pi, pj, pv);
    let (mut ai, mut aj, mut av, mut b, mut cones) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut row = 0;
    for blk in &prog.blocks {
        for r in &blk.rows {
            // s = b - A x = e(x)
            for &(i, a) in &r.terms {
                ai.push(row);
                aj.push(i);
                av.push(-a);
            }
            b.push(r.constant);
            row += 1;
        }
        let m = blk.rows.len();
        cones.push(match blk.kind {
            ConeKind::Zero => SupportedConeT::ZeroConeT(m),
            ConeKind::NonNeg => SupportedConeT::NonnegativeConeT(m),
            ConeKind::Soc => SupportedConeT::SecondOrderConeT(m),
        });
    }
    let a = CscMatrix::new_from_triplets(row, prog.n, ai, aj, av);
    Assembled { p, a, b, cones }
}

fn cone_violation(kind: ConeKind, e: &[f64]) -> f64 {
    match kind {
        ConeKind::Zero => e.iter().fold(0.0, |m, v| m.max(v.abs())),
        ConeKind::NonNeg => e.iter().fold(0.0, |m, v| m.max(-v)),
        ConeKind::Soc => {
            let tail = e[1..].iter().map(|v| v * v).sum::<f64>().sqrt();
            (tail - e[0]).max(0.0)
        }
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Absolute primal cone violation of `x`, max over all blocks.
pub fn max_violation(prog: &ConicProgram, x: &[f64]) -> f64 {
    prog.blocks
        .iter()
        .map(|b| {
            let e: Vec<f64> = b.rows.iter().map(|r| r.eval(x)).collect();
            cone_violation(b.kind, &e)
        })
        .fold(0.0, f64::max)
}

fn kkt_residuals(prog: &ConicProgram, x: &[f64], z: &[f64]) -> KktResiduals {
    let b_norm = inf_norm(&prog.blocks.iter().flat_map(|b| &b.rows).map(|r| r.constant).collect::<Vec<_>>());
    let primal = max_violation(prog, x) / (1.0 + b_norm);

    let px = prog.p_times(x);
    // gradient of the Lagrangian: P x + q + A' z with A = -coefficients
    let mut atz = vec![0.0; prog.n];
    let mut btz = 0.0;
    let mut row = 0;
    for blk in &prog.blocks {
        for r in &blk.rows {
            for &(i, a) in &r.terms {
                atz[i] -= a * z[row];
            }
            btz += r.constant * z[row];
            row += 1;
        }
    }
    let grad: Vec<f64> = (0..prog.n).map(|i| px[i] + prog.q[i] + atz[i]).collect();
    let dual = inf_norm(&grad) / (1.0 + inf_norm(&px).max(inf_norm(&prog.q)).max(inf_norm(&atz)));

    let xpx: f64 = x.iter().zip(&px).map(|(a, b)| a * b).sum();
    let qx: f64 = x.iter().zip(&prog.q).map(|(a, b)| a * b).sum();
    let primal_obj = 0.5 * xpx + qx;
    let dual_obj = -0.5 * xpx - btz;
    // scaled by the terms, not their sum, which can cancel
    let scale = primal_obj.abs().max(dual_obj.abs()).max(xpx.abs()).max(qx.abs()).max(btz.abs());
    let gap = (primal_obj - dual_obj).abs() / (1.0 + scale);
    KktResiduals { primal, dual, gap }
}

fn run_backend(prog: &ConicProgram) -> Result<ConicSolution> {
    let asm = assemble(prog);
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(400)
        .tol_gap_abs(1e-12)
        .tol_gap_rel(1e-12)
        .tol_feas(1e-11)
        .tol_ktratio(1e-8)
        .reduced_tol_gap_abs(1e-9)
        .reduced_tol_gap_rel(1e-9)
        .reduced_tol_feas(1e-9)
        .reduced_tol_ktratio(1e-6)
        .max_threads(1)
        .build()
        .map_err(|e| Error::invalid(format!("solver settings: {e}")))?;
    let mut solver = DefaultSolver::new(&asm.p, prog.q.as_slice(), &asm.a, &asm.b, &asm.cones, settings)
        .map_err(|e| Error::invalid(format!("conic program rejected by backend: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    let x = sol.x.clone();
    let z = sol.z.clone();
    let residuals = kkt_residuals(prog, &x, &z);
    log::debug!("backend {:?} after {} iterations, residuals {:?}", sol.status, sol.iterations, residuals);
    let status = match sol.status {
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => ConicStatus::PrimalInfeasible,
        SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => ConicStatus::DualInfeasible,
        // the backend may stop short of its own targets with an iterate that
        // already meets ours
        _ if residuals.within(KKT_TOL) => ConicStatus::Optimal,
        _ => ConicStatus::IterationLimit,
    };
    let mut duals = Vec::with_capacity(prog.blocks.len());
    let mut off = 0;
    for blk in &prog.blocks {
        duals.push(z[off..off + blk.rows.len()].to_vec());
        off += blk.rows.len();
    }
    let objective = prog.objective(&x);
    Ok(ConicSolution { status, primal: x, duals, objective, residuals, iterations: sol.iterations })
}

/// Solve `prog`.
///
/// The interior-point backend does not use warm starts; the hint is accepted
/// so callers can pass their previous iterate unconditionally. If the native
/// quadratic solve breaks down numerically, the epigraph form is tried once.
pub fn solve(prog: &ConicProgram, _warm_start: Option<&ConicSolution>) -> Result<ConicSolution> {
    prog.validate()?;
    let first = run_backend(prog)?;
    if first.status != ConicStatus::IterationLimit || prog.p_upper.is_empty() {
        return Ok(downgrade(first));
    }
    log::debug!("native solve stalled ({:?}); retrying in epigraph form", first.residuals);
    let epi = prog.epigraph_form()?;
    let second = run_backend(&epi)?;
    if matches!(second.status, ConicStatus::PrimalInfeasible | ConicStatus::DualInfeasible) {
        // the reformulation has the same feasible set, so its certificate
        // settles a native solve that broke down
        if first.residuals.within(INACCURATE_TOL) {
            return Ok(downgrade(first));
        }
        return Ok(ConicSolution { status: second.status, ..first });
    }
    let x = second.primal[..prog.n].to_vec();
    // multipliers of the original blocks are unchanged by the reformulation
    let duals = second.duals[..prog.blocks.len()].to_vec();
    let z: Vec<f64> = duals.iter().flatten().copied().collect();
    let residuals = kkt_residuals(prog, &x, &z);
    log::debug!("epigraph solution mapped back: residuals {residuals:?}");
    let status = if residuals.within(KKT_TOL) { ConicStatus::Optimal } else { ConicStatus::IterationLimit };
    let second = ConicSolution {
        status,
        objective: prog.objective(&x),
        primal: x,
        duals,
        residuals,
        iterations: first.iterations + second.iterations,
    };
    let best = if second.status == ConicStatus::Optimal || second.residuals.worst() < first.residuals.worst() { second } else { first };
    Ok(downgrade(best))
}

fn downgrade(mut sol: ConicSolution) -> ConicSolution {
    if sol.status == ConicStatus::IterationLimit && sol.residuals.within(INACCURATE_TOL) {
        log::warn!("conic solve stalled at residuals {:?}; using the inaccurate iterate", sol.residuals);
        sol.status = ConicStatus::Inaccurate;
    }
    sol
}
