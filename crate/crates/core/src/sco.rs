//! Outer successive-convexification loop with trust-region and penalty
//! adaptation.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::inner_admm::{self, AdmmState, CostWeights, SubproblemContext};
use crate::lintraj::{linearize_dynamics, PolicyMatrix};
use crate::models::{split, stack, DynamicsModel};
use crate::monte::Policy;
use crate::uncertainty::{ErrorEllipsoid, UncertaintySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Mode {
    /// Ignore the disturbance (`tau = 0`).
    #[serde(rename = "nto")]
    Nto,
    #[default]
    #[serde(rename = "nrto")]
    Nrto,
    /// Robust rows tightened by fitted linearization-error ellipsoids.
    #[serde(rename = "nrto-le")]
    NrtoLe,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Nto => "nto",
            Mode::Nrto => "nrto",
            Mode::NrtoLe => "nrto-le",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nto" => Ok(Mode::Nto),
            "nrto" => Ok(Mode::Nrto),
            "nrto-le" => Ok(Mode::NrtoLe),
            other => Err(Error::invalid(format!("unknown mode '{other}' (expected nto, nrto or nrto-le)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuterParams {
    /// Initial trust radius.
    pub r_trust: f64,
    pub rho0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub eta1: f64,
    pub eta2: f64,
    pub r_min: f64,
    pub rho_max: f64,
    pub eps_p: f64,
    pub eps_u: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Use `min(alpha r, r_min)` and `max(beta rho, rho_max)` as printed
    /// instead of the clamped updates.
    pub literal_updates: bool,
}

impl Default for OuterParams {
    fn default() -> Self {
        Self {
            r_trust: 5.0,
            rho0: 1.0,
            alpha: 0.7,
            beta: 5.0,
            eta1: 10.0,
            eta2: 0.1,
            r_min: 1e-3,
            rho_max: 1e6,
            eps_p: 1e-5,
            eps_u: 1e-4,
            max_outer: 100,
            max_inner: 50,
            literal_updates: false,
        }
    }
}

impl OuterParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("r_trust", self.r_trust),
            ("rho0", self.rho0),
            ("eta1", self.eta1),
            ("eta2", self.eta2),
            ("r_min", self.r_min),
            ("rho_max", self.rho_max),
            ("eps_p", self.eps_p),
            ("eps_u", self.eps_u),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.5..1.0).contains(&self.alpha) {
            return Err(Error::Validation(format!("alpha must lie in [0.5, 1), got {}", self.alpha)));
        }
        if !(self.beta > 1.0 && self.beta.is_finite()) {
            return Err(Error::Validation(format!("beta must exceed 1, got {}", self.beta)));
        }
        if self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Validation("iteration caps must be positive".into()));
        }
        Ok(())
    }
}

/// Trust radius and penalty as they evolve over the outer loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptive {
    pub r_trust: f64,
    pub rho: f64,
}

/// Shrink the radius when the step dominates the split residual.
pub fn update_trust_region(params: &OuterParams, r_trust: f64, delta_u_norm: f64, residual: f64) -> f64 {
    if delta_u_norm < params.eta1 * residual {
        return r_trust;
    }
    if params.literal_updates {
        (params.alpha * r_trust).min(params.r_min)
    } else {
        (params.alpha * r_trust).max(params.r_min)
    }
}

/// Raise the penalty when the split residual dominates the step.
pub fn update_penalty(params: &OuterParams, rho: f64, delta_u_norm: f64, residual: f64) -> f64 {
    if delta_u_norm > params.eta2 * residual {
        return rho;
    }
    if params.literal_updates {
        (params.beta * rho).max(params.rho_max)
    } else {
        (params.beta * rho).min(params.rho_max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepPath {
    Admm,
    Direct,
    /// The direct solve was infeasible and ADMM ran instead.
    DirectInfeasibleAdmm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub delta_u_norm: f64,
    pub residual: f64,
    pub r_trust: f64,
    pub rho: f64,
    pub inner_iterations: usize,
    pub path: StepPath,
    /// `Q_u(u_hat + du) + Q_K(K)` of the step.
    pub objective: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    /// Iteration cap hit; the returned policy is the last iterate that
    /// came out of a direct solve (or the last iterate if none did).
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveLog {
    pub records: Vec<IterationRecord>,
    pub status: Option<SolveStatus>,
}

/// Data of one trajectory optimization problem.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: DynamicsModel,
    pub x_bar0: DVector<f64>,
    /// Set used for the robust rows; its `tau` is ignored in NTO mode.
    pub set: UncertaintySet,
    pub constraints: ConstraintSet,
    pub weights: CostWeights,
    /// Initial nominal controls, `T` vectors.
    pub u_init: Vec<DVector<f64>>,
}

impl Problem {
    pub fn horizon(&self) -> usize {
        self.u_init.len()
    }

    fn check(&self) -> Result<()> {
        let t = self.horizon();
        let (n_x, n_u) = (self.model.n_x(), self.model.n_u());
        if t == 0 || t != self.constraints.horizon() {
            return Err(Error::invalid("initial controls and constraints disagree on the horizon"));
        }
        if self.u_init.iter().any(|u| u.len() != n_u) || self.x_bar0.len() != n_x {
            return Err(Error::invalid("initial controls or x_bar0 have the wrong size"));
        }
        if self.set.dim() != (t + 1) * n_x {
            return Err(Error::invalid("uncertainty set dimension does not match the horizon"));
        }
        self.weights.validate(t, n_u)
    }
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub policy: Policy,
    pub log: SolveLog,
}

impl SolveOutcome {
    pub fn converged(&self) -> bool {
        self.log.status == Some(SolveStatus::Converged)
    }
}

/// Run the outer loop. `error_sets` must be given exactly in NRTO-LE mode.
pub fn optimize(
    problem: &Problem,
    params: &OuterParams,
    mode: Mode,
    error_sets: Option<&[ErrorEllipsoid]>,
    mut dump: Option<&mut Vec<String>>,
) -> Result<SolveOutcome> {
    problem.check()?;
    params.validate()?;
    match (mode, error_sets) {
        (Mode::NrtoLe, None) => return Err(Error::invalid("nrto-le needs linearization-error sets")),
        (Mode::Nto | Mode::Nrto, Some(_)) => return Err(Error::invalid("error sets are only used in nrto-le mode")),
        _ => {}
    }
    let set = match mode {
        Mode::Nto => problem.set.with_tau(0.0)?,
        _ => problem.set.clone(),
    };
    let model = &problem.model;
    let (t, n_u, n_x) = (problem.horizon(), model.n_u(), model.n_x());
    let n_g = problem.constraints.len();

    let mut u_hat = stack(&problem.u_init);
    let mut gains = PolicyMatrix::zeros(t, n_u, n_x);
    let mut state = AdmmState::new(n_g, params.rho0)?;
    let mut adaptive = Adaptive { r_trust: params.r_trust, rho: params.rho0 };
    let mut log = SolveLog { records: Vec::new(), status: None };
    let mut best: Option<(DVector<f64>, PolicyMatrix)> = None;

    let fail = |e: Error, log: &SolveLog| Error::Solve { source: Box::new(e), log: Box::new(log.clone()) };

    for iteration in 1..=params.max_outer {
        let controls = split(&u_hat, n_u);
        let nominal = model.rollout(&problem.x_bar0, &controls).map_err(|e| fail(e, &log))?;
        let blocks = linearize_dynamics(model, &nominal).map_err(|e| fail(e, &log))?;
        let data = problem.constraints.linearize(&nominal, &blocks).map_err(|e| fail(e, &log))?;
        let ctx = SubproblemContext {
            data: &data,
            blocks: &blocks,
            set: &set,
            error_sets,
            weights: &problem.weights,
            u_hat: &u_hat,
            r_trust: adaptive.r_trust,
            control_bounds: problem.constraints.control_bounds.as_ref(),
        };
        state.rho = adaptive.rho;

        let mut path = StepPath::Admm;
        let mut step = None;
        if state.residual() <= params.eps_p {
            match inner_admm::direct_solve(&ctx, dump.as_deref_mut()).map_err(|e| fail(e, &log))? {
                Some(out) => {
                    state.p = out.p.clone();
                    state.p_tilde = out.p;
                    step = Some((out.delta_u, out.gains, 0));
                    path = StepPath::Direct;
                }
                None => path = StepPath::DirectInfeasibleAdmm,
            }
        }
        let (delta_u, new_gains, inner) = match step {
            Some(s) => s,
            None => {
                let out = inner_admm::run_admm(&mut state, &ctx, params.max_inner, params.eps_p, dump.as_deref_mut())
                    .map_err(|e| fail(e, &log))?;
                (out.delta_u, out.gains, out.iterations)
            }
        };

        u_hat += &delta_u;
        gains = new_gains;
        let du_norm = delta_u.norm();
        let residual = state.residual();
        let objective = problem.weights.control_cost(&u_hat) + problem.weights.gain_cost(&gains);
        log.records.push(IterationRecord {
            iteration,
            delta_u_norm: du_norm,
            residual,
            r_trust: adaptive.r_trust,
            rho: adaptive.rho,
            inner_iterations: inner,
            path,
            objective,
        });
        log::info!(
            "outer {iteration}: |du| {du_norm:.3e} |p-pt| {residual:.3e} r {:.3e} rho {:.3e} {path:?}",
            adaptive.r_trust,
            adaptive.rho
        );
        let consensus = state.p == state.p_tilde;
        if consensus {
            best = Some((u_hat.clone(), gains.clone()));
        }
        if du_norm <= params.eps_u && consensus {
            log.status = Some(SolveStatus::Converged);
            let policy = Policy::new(model, &problem.x_bar0, split(&u_hat, n_u), gains).map_err(|e| fail(e, &log))?;
            return Ok(SolveOutcome { policy, log });
        }
        if du_norm >= params.eta1 * residual {
            adaptive.r_trust = update_trust_region(params, adaptive.r_trust, du_norm, residual);
        } else {
            adaptive.rho = update_penalty(params, adaptive.rho, du_norm, residual);
        }
    }

    log.status = Some(SolveStatus::MaxIterations);
    log::warn!("outer loop hit its cap of {} iterations", params.max_outer);
    let (u_best, k_best) = best.unwrap_or((u_hat, gains));
    let policy = Policy::new(model, &problem.x_bar0, split(&u_best, n_u), k_best).map_err(|e| fail(e, &log))?;
    Ok(SolveOutcome { policy, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constraints::{ConstraintSet, ConstraintSpec};
    use nalgebra::DMatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trust_region_updates() {
        let p = OuterParams { alpha: 0.5, r_min: 0.1, eta1: 10.0, ..Default::default() };
        assert_eq!(update_trust_region(&p, 1.0, 0.1, 1.0), 1.0);
        assert_eq!(update_trust_region(&p, 1.0, 10.0, 1.0), 0.5);
        assert_eq!(update_trust_region(&p, 0.15, 10.0, 1.0), 0.1);
        let lit = OuterParams { literal_updates: true, ..p };
        assert_eq!(update_trust_region(&lit, 1.0, 10.0, 1.0), 0.1);
    }

    #[test]
    fn penalty_updates() {
        let p = OuterParams { beta: 10.0, rho_max: 1e6, eta2: 0.1, ..Default::default() };
        assert_eq!(update_penalty(&p, 1.0, 1.0, 1.0), 1.0);
        assert_eq!(update_penalty(&p, 1.0, 0.01, 1.0), 10.0);
        assert_eq!(update_penalty(&p, 5e5, 0.01, 1.0), 1e6);
        let lit = OuterParams { literal_updates: true, ..p };
        assert_eq!(update_penalty(&lit, 1.0, 0.01, 1.0), 1e6);
    }

    #[test]
    fn params_validation() {
        assert!(OuterParams::default().validate().is_ok());
        assert!(OuterParams { alpha: 1.0, ..Default::default() }.validate().is_err());
        assert!(OuterParams { beta: 1.0, ..Default::default() }.validate().is_err());
        assert!(OuterParams { eps_u: 0.0, ..Default::default() }.validate().is_err());
        let json = serde_json::to_string(&OuterParams::default()).unwrap();
        assert_eq!(serde_json::from_str::<OuterParams>(&json).unwrap(), OuterParams::default());
        assert_eq!("nrto-le".parse::<Mode>().unwrap(), Mode::NrtoLe);
        assert!("robust".parse::<Mode>().is_err());
    }

    fn linear_problem(tau: f64, specs: &[ConstraintSpec]) -> Problem {
        let model = DynamicsModel::double_integrator(0.1).unwrap();
        let t = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gamma = UncertaintySet::random_gamma(&mut rng, (t + 1) * 4, 3) * 0.01;
        Problem {
            set: UncertaintySet::new(gamma, DMatrix::identity(3, 3), tau).unwrap(),
            constraints: ConstraintSet::from_specs(specs, 4, 2, t, None).unwrap(),
            weights: CostWeights::scalar(t, 2, 1.0, 1.0),
            u_init: vec![DVector::zeros(2); t],
            x_bar0: DVector::zeros(4),
            model,
        }
    }

    #[test]
    fn unconstrained_linear_converges_immediately() {
        let prob = linear_problem(0.0, &[]);
        let out = optimize(&prob, &OuterParams::default(), Mode::Nto, None, None).unwrap();
        assert!(out.converged());
        assert_eq!(out.log.records.len(), 1);
        assert!(out.log.records[0].delta_u_norm < 1e-7);
    }

    fn boxed() -> Vec<ConstraintSpec> {
        vec![ConstraintSpec::TerminalBox { components: vec![0, 1], lower: vec![0.1, -0.05], upper: vec![0.2, 0.05] }]
    }

    #[test]
    fn invariants_along_the_loop() {
        let prob = linear_problem(0.5, &boxed());
        let params = OuterParams::default();
        let out = optimize(&prob, &params, Mode::Nrto, None, None).unwrap();
        assert!(out.converged());
        let recs = &out.log.records;
        for w in recs.windows(2) {
            assert!(w[1].r_trust <= w[0].r_trust);
            assert!(w[1].rho >= w[0].rho);
        }
        assert!(recs.iter().all(|r| r.r_trust >= params.r_min && r.rho <= params.rho_max));
        let last = recs.last().unwrap();
        assert!(last.delta_u_norm <= params.eps_u);
        assert_eq!(last.residual, 0.0);
        let again = optimize(&prob, &params, Mode::Nrto, None, None).unwrap();
        assert_eq!(again.log, out.log);
    }

    #[test]
    fn nto_equals_nrto_at_zero_tau() {
        let prob = linear_problem(0.0, &boxed());
        let a = optimize(&prob, &OuterParams::default(), Mode::Nto, None, None).unwrap();
        let b = optimize(&prob, &OuterParams::default(), Mode::Nrto, None, None).unwrap();
        assert_eq!(a.policy, b.policy);
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn mode_and_error_sets_must_agree() {
        let prob = linear_problem(0.1, &boxed());
        assert!(optimize(&prob, &OuterParams::default(), Mode::NrtoLe, None, None).is_err());
        let e: Vec<_> = (0..7).map(|_| ErrorEllipsoid::trivial(4)).collect();
        assert!(optimize(&prob, &OuterParams::default(), Mode::Nrto, Some(&e), None).is_err());
        let le = optimize(&prob, &OuterParams::default(), Mode::NrtoLe, Some(&e), None).unwrap();
        let plain = optimize(&prob, &OuterParams::default(), Mode::Nrto, None, None).unwrap();
        // trivial error sets change nothing
        assert!((stack(&le.policy.u_bar) - stack(&plain.policy.u_bar)).amax() < 1e-6);
    }

    #[test]
    fn cap_returns_flagged_iterate() {
        let prob = linear_problem(0.5, &boxed());
        let params = OuterParams { max_outer: 1, r_trust: 1e-3, ..Default::default() };
        let out = optimize(&prob, &params, Mode::Nrto, None, None).unwrap();
        assert_eq!(out.log.status, Some(SolveStatus::MaxIterations));
        assert_eq!(out.log.records.len(), 1);
    }
}
