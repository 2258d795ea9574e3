//! State constraints `g(x) <= 0`, their linearization around a nominal
//! trajectory, and the robust margins used by the convex subproblems.
//!
//! Each row is a scalar function of a single state `x_k`; positions are the
//! first two state components for every model.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lintraj::{PolicyMatrix, StackedBlocks};
use crate::models::{DynamicsModel, NominalTrajectory};
use crate::monte::{self, Policy, SatisfactionReport};
use crate::uncertainty::{ErrorEllipsoid, UncertaintySet};

/// Constraint geometry as written in a scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConstraintSpec {
    /// Keep the position outside a disk. Applies to every timestep in
    /// `[first, last]` (default: the whole trajectory).
    CircularObstacle {
        center: [f64; 2],
        radius: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        timesteps: Option<[usize; 2]>,
    },
    /// `lower[i] <= x_T[components[i]] <= upper[i]`, one row per face.
    TerminalBox {
        components: Vec<usize>,
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// `coeffs . x_k <= bound`.
    LinearState {
        timestep: usize,
        coeffs: Vec<f64>,
        bound: f64,
    },
}

/// Per-step bounds on the nominal controls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlBounds {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upper: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowKind {
    /// `r^2 - ||p_k - c||^2`
    CircularObstacle { center: [f64; 2], radius: f64 },
    /// `x_k[i] - b` (upper) or `b - x_k[i]` (lower)
    TerminalBoxFace { component: usize, bound: f64, upper: bool },
    /// `a . x_k - b`
    LinearState { coeffs: DVector<f64>, bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintRow {
    pub kind: RowKind,
    pub timestep: usize,
    /// Index of the [`ConstraintSpec`] this row came from.
    pub source: usize,
}

impl ConstraintRow {
    pub fn value(&self, x_k: &DVector<f64>) -> f64 {
        match &self.kind {
            RowKind::CircularObstacle { center, radius } => {
                let dx = x_k[0] - center[0];
                let dy = x_k[1] - center[1];
                radius * radius - (dx * dx + dy * dy)
            }
            RowKind::TerminalBoxFace { component, bound, upper } => {
                if *upper {
                    x_k[*component] - bound
                } else {
                    bound - x_k[*component]
                }
            }
            RowKind::LinearState { coeffs, bound } => coeffs.dot(x_k) - bound,
        }
    }

    /// Gradient with respect to `x_k` (the only state the row depends on).
    pub fn gradient(&self, x_k: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x_k.len());
        match &self.kind {
            RowKind::CircularObstacle { center, .. } => {
                g[0] = -2.0 * (x_k[0] - center[0]);
                g[1] = -2.0 * (x_k[1] - center[1]);
            }
            RowKind::TerminalBoxFace { component, upper, .. } => {
                g[*component] = if *upper { 1.0 } else { -1.0 };
            }
            RowKind::LinearState { coeffs, .. } => g.copy_from(coeffs),
        }
        g
    }

    /// Column name shared by all timesteps of the same template row.
    pub fn template_label(&self) -> String {
        match &self.kind {
            RowKind::CircularObstacle { .. } => format!("obs{}", self.source),
            RowKind::TerminalBoxFace { component, upper, .. } => {
                format!("box{}_x{}_{}", self.source, component, if *upper { "upper" } else { "lower" })
            }
            RowKind::LinearState { .. } => format!("lin{}", self.source),
        }
    }

    pub fn label(&self) -> String {
        format!("{}@{}", self.template_label(), self.timestep)
    }

    pub fn is_linear(&self) -> bool {
        !matches!(self.kind, RowKind::CircularObstacle { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    rows: Vec<ConstraintRow>,
    n_x: usize,
    horizon: usize,
    pub control_bounds: Option<ControlBounds>,
}

impl ConstraintSet {
    pub fn from_specs(
        specs: &[ConstraintSpec],
        n_x: usize,
        n_u: usize,
        horizon: usize,
        control_bounds: Option<ControlBounds>,
    ) -> Result<Self> {
        let mut rows = Vec::new();
        for (source, spec) in specs.iter().enumerate() {
            match spec {
                ConstraintSpec::CircularObstacle { center, radius, timesteps } => {
                    if n_x < 2 {
                        return Err(Error::invalid("obstacles need a planar position state"));
                    }
                    if !(radius.is_finite() && *radius > 0.0) {
                        return Err(Error::invalid(format!("obstacle radius must be positive, got {radius}")));
                    }
                    let [first, last] = timesteps.unwrap_or([0, horizon]);
                    if first > last || last > horizon {
                        return Err(Error::invalid(format!(
                            "obstacle timesteps [{first}, {last}] outside 0..={horizon}"
                        )));
                    }
                    rows.extend((first..=last).map(|timestep| ConstraintRow {
                        kind: RowKind::CircularObstacle { center: *center, radius: *radius },
                        timestep,
                        source,
                    }));
                }
                ConstraintSpec::TerminalBox { components, lower, upper } => {
                    if components.len() != lower.len() || components.len() != upper.len() {
                        return Err(Error::invalid("terminal box components/lower/upper lengths differ"));
                    }
                    for ((&c, &lo), &hi) in components.iter().zip(lower).zip(upper) {
                        if c >= n_x {
                            return Err(Error::invalid(format!("terminal box component {c} >= n_x = {n_x}")));
                        }
                        if lo > hi {
                            return Err(Error::invalid(format!("terminal box component {c} has lower > upper")));
                        }
                        for (bound, up) in [(hi, true), (lo, false)] {
                            rows.push(ConstraintRow {
                                kind: RowKind::TerminalBoxFace { component: c, bound, upper: up },
                                timestep: horizon,
                                source,
                            });
                        }
                    }
                }
                ConstraintSpec::LinearState { timestep, coeffs, bound } => {
                    if *timestep > horizon || coeffs.len() != n_x {
                        return Err(Error::invalid(format!(
                            "linear state row needs timestep <= {horizon} and {n_x} coefficients"
                        )));
                    }
                    rows.push(ConstraintRow {
                        kind: RowKind::LinearState {
                            coeffs: DVector::from_column_slice(coeffs),
                            bound: *bound,
                        },
                        timestep: *timestep,
                        source,
                    });
                }
            }
        }
        if let Some(cb) = &control_bounds {
            for v in [&cb.lower, &cb.upper].into_iter().flatten() {
                if v.len() != n_u {
                    return Err(Error::invalid(format!("control bounds need {n_u} entries")));
                }
            }
        }
        Ok(Self { rows, n_x, horizon, control_bounds })
    }

    pub fn rows(&self) -> &[ConstraintRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Distinct template labels in first-appearance order.
    pub fn template_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            let l = r.template_label();
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    fn check_len(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != (self.horizon + 1) * self.n_x {
            return Err(Error::invalid(format!(
                "stacked state has length {}, expected {}",
                x.len(),
                (self.horizon + 1) * self.n_x
            )));
        }
        Ok(())
    }

    /// Exact constraint values on a stacked trajectory; `<= 0` is satisfied.
    pub fn evaluate(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(x)?;
        let n = self.n_x;
        Ok(DVector::from_iterator(
            self.rows.len(),
            self.rows
                .iter()
                .map(|r| r.value(&x.rows(r.timestep * n, n).into_owned())),
        ))
    }

    pub fn evaluate_states(&self, states: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(self.rows.len(), self.rows.iter().map(|r| r.value(&states[r.timestep])))
    }

    /// Full gradient of row `j` split per timestep.
    pub fn gradient_slices(&self, j: usize, states: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let r = &self.rows[j];
        let mut slices = vec![DVector::zeros(self.n_x); self.horizon + 1];
        slices[r.timestep] = r.gradient(&states[r.timestep]);
        slices
    }

    /// Linearize every row around `nominal`.
    pub fn linearize(&self, nominal: &NominalTrajectory, blocks: &StackedBlocks) -> Result<LinearizedConstraintData> {
        if nominal.states.len() != self.horizon + 1 || blocks.horizon() != self.horizon {
            return Err(Error::invalid("nominal trajectory and blocks must match the constraint horizon"));
        }
        let n_g = self.rows.len();
        let nu_t = blocks.horizon() * blocks.n_u();
        let nz = (self.horizon + 1) * self.n_x;
        let mut g_hat = DVector::zeros(n_g);
        let mut j_u = DMatrix::zeros(n_g, nu_t);
        let mut j_zeta = DMatrix::zeros(n_g, nz);
        let mut grads = Vec::with_capacity(n_g);
        for (j, r) in self.rows.iter().enumerate() {
            let x_k = &nominal.states[r.timestep];
            g_hat[j] = r.value(x_k);
            let g = r.gradient(x_k);
            let slices = {
                let mut s = vec![DVector::zeros(self.n_x); self.horizon + 1];
                s[r.timestep] = g.clone();
                s
            };
            j_u.row_mut(j).tr_copy_from(&blocks.grad_times_fu(&slices));
            j_zeta.row_mut(j).tr_copy_from(&blocks.grad_times_fzeta(&slices));
            grads.push((r.timestep, g));
        }
        Ok(LinearizedConstraintData { g_hat, j_u, j_zeta, grads, n_x: self.n_x, horizon: self.horizon })
    }

    /// Monte-Carlo check of a policy on the true nonlinear closed loop.
    pub fn check_robust_sampled<R: Rng + ?Sized>(
        &self,
        model: &DynamicsModel,
        policy: &Policy,
        set: &UncertaintySet,
        x_bar0: &DVector<f64>,
        n_samples: usize,
        boundary: bool,
        rng: &mut R,
    ) -> Result<SatisfactionReport> {
        let mut records = Vec::with_capacity(n_samples);
        for zeta in set.sample(rng, n_samples, boundary) {
            let mut rec = monte::simulate_closed_loop(model, policy, &zeta, x_bar0)?;
            rec.constraint_values = self.evaluate_states(&rec.states);
            records.push(rec);
        }
        monte::evaluate_satisfaction(&records, self)
    }
}

/// Constraint values and gradients at one linearization point.
#[derive(Debug, Clone)]
pub struct LinearizedConstraintData {
    /// `g(x_hat)`
    pub g_hat: DVector<f64>,
    /// `grad g(x_hat) F_u`
    pub j_u: DMatrix<f64>,
    /// `grad g(x_hat) F_zeta`
    pub j_zeta: DMatrix<f64>,
    /// Nonzero gradient slice of each row: `(timestep, d g_j / d x_k)`.
    pub grads: Vec<(usize, DVector<f64>)>,
    n_x: usize,
    horizon: usize,
}

impl LinearizedConstraintData {
    pub fn len(&self) -> usize {
        self.g_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.g_hat.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn gradient_slices(&self, j: usize) -> Vec<DVector<f64>> {
        let mut s = vec![DVector::zeros(self.n_x); self.horizon + 1];
        let (k, g) = &self.grads[j];
        s[*k] = g.clone();
        s
    }

    /// `(F_u K + F_zeta)' grad g_j`, the direction whose support bounds the
    /// disturbance contribution to row `j`.
    pub fn disturbance_direction(&self, j: usize, gains: &PolicyMatrix) -> DVector<f64> {
        let a = self.j_u.row(j).transpose();
        let mut c = self.j_zeta.row(j).transpose();
        if let Some(first) = gains.blocks.first() {
            let (n_u, n_x) = first.shape();
            for (k, kk) in gains.blocks.iter().enumerate() {
                let ak = a.rows(k * n_u, n_u);
                let mut ck = c.rows_mut(k * n_x, n_x);
                ck.gemv_tr(1.0, kk, &ak, 1.0);
            }
        }
        c
    }

    /// `g(x_hat) + grad g (F_u (du + K zeta) + F_zeta zeta)`.
    pub fn eval_linear(&self, delta_u: &DVector<f64>, gains: &PolicyMatrix, zeta: &DVector<f64>) -> DVector<f64> {
        &self.g_hat + &self.j_u * (delta_u + gains.apply(zeta)) + &self.j_zeta * zeta
    }

    /// `sum_k max_{e_k in E_k} grad_{x_k} g_j' e_k` for row `j`.
    pub fn error_term(&self, j: usize, error_sets: &[ErrorEllipsoid]) -> Result<f64> {
        if error_sets.len() != self.horizon + 1 {
            return Err(Error::invalid(format!(
                "expected {} error ellipsoids, got {}",
                self.horizon + 1,
                error_sets.len()
            )));
        }
        let (k, g) = &self.grads[j];
        if g.len() != error_sets[*k].dim() {
            return Err(Error::invalid("error ellipsoid dimension differs from n_x"));
        }
        Ok(error_sets[*k].support(g))
    }
}

/// Worst-case disturbance contribution to row `j` under gains `K`:
/// `sqrt(tau) ||Gamma' (F_u K + F_zeta)' grad g_j||_{S^{-1}}`.
pub fn tractable_row(j: usize, data: &LinearizedConstraintData, set: &UncertaintySet, gains: &PolicyMatrix) -> Result<f64> {
    set.support(&data.disturbance_direction(j, gains))
}

/// [`tractable_row`] plus the linearization-error term when error sets are
/// given.
pub fn robust_margin_le(
    j: usize,
    data: &LinearizedConstraintData,
    set: &UncertaintySet,
    gains: &PolicyMatrix,
    error_sets: Option<&[ErrorEllipsoid]>,
) -> Result<f64> {
    let base = tractable_row(j, data, set, gains)?;
    match error_sets {
        Some(e) => Ok(base + data.error_term(j, e)?),
        None => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lintraj::StackedBlocks;
    use crate::models::DynamicsModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn unicycle_setup(t: usize) -> (DynamicsModel, NominalTrajectory, StackedBlocks) {
        let m = DynamicsModel::unicycle(0.1).unwrap();
        let controls: Vec<_> = (0..t).map(|k| v(&[1.0 + 0.1 * k as f64, 0.3])).collect();
        let nom = m.rollout(&v(&[0.0, 0.0, 0.2]), &controls).unwrap();
        let blocks = crate::lintraj::linearize_dynamics(&m, &nom).unwrap();
        (m, nom, blocks)
    }

    fn specs() -> Vec<ConstraintSpec> {
        vec![
            ConstraintSpec::CircularObstacle { center: [0.5, 0.2], radius: 0.3, timesteps: None },
            ConstraintSpec::TerminalBox { components: vec![0, 1], lower: vec![0.0, -1.0], upper: vec![2.0, 1.0] },
            ConstraintSpec::LinearState { timestep: 2, coeffs: vec![1.0, -1.0, 0.0], bound: 0.5 },
        ]
    }

    #[test]
    fn row_layout() {
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        // 5 obstacle rows, 4 faces, 1 linear row
        assert_eq!(cs.len(), 10);
        assert!(cs.rows()[5..9].iter().all(|r| r.timestep == 4));
        assert!(ConstraintSet::from_specs(
            &[ConstraintSpec::TerminalBox { components: vec![5], lower: vec![0.0], upper: vec![1.0] }],
            3, 2, 4, None
        )
        .is_err());
        let bad_bounds = ControlBounds { lower: Some(vec![0.0]), upper: None };
        assert!(ConstraintSet::from_specs(&[], 3, 2, 4, Some(bad_bounds)).is_err());
    }

    #[test]
    fn boundary_values_are_zero() {
        let cs = ConstraintSet::from_specs(&specs()[..2], 3, 2, 1, None).unwrap();
        // x_0 on the obstacle boundary, x_1[0] on the upper face
        let x = v(&[0.8, 0.2, 0.0, 2.0, 0.0, 0.0]);
        let g = cs.evaluate(&x).unwrap();
        assert!(g[0].abs() < 1e-15);
        assert_eq!(g[2], 0.0);
        assert!(cs.evaluate(&v(&[0.0; 5])).is_err());
    }

    #[test]
    fn evaluate_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        let x = DVector::from_fn(15, |_, _| rng.gen_range(-2.0..2.0));
        let g = cs.evaluate(&x).unwrap();
        for k in 0..=4 {
            let (px, py) = (x[3 * k], x[3 * k + 1]);
            let want = 0.09 - ((px - 0.5) * (px - 0.5) + (py - 0.2) * (py - 0.2));
            assert_eq!(g[k], want);
        }
        assert_eq!(g[5], x[12] - 2.0);
        assert_eq!(g[6], 0.0 - x[12]);
        assert_eq!(g[7], x[13] - 1.0);
        assert_eq!(g[8], -1.0 - x[13]);
        assert_eq!(g[9], x[6] - x[7] - 0.5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        for _ in 0..20 {
            let states: Vec<_> = (0..5).map(|_| DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0))).collect();
            for (j, r) in cs.rows().iter().enumerate() {
                let g = cs.gradient_slices(j, &states);
                for k in 0..5 {
                    for i in 0..3 {
                        let h = 1e-6;
                        let mut sp = states.clone();
                        let mut sm = states.clone();
                        sp[k][i] += h;
                        sm[k][i] -= h;
                        let fd = (cs.evaluate_states(&sp)[j] - cs.evaluate_states(&sm)[j]) / (2.0 * h);
                        let err = (g[k][i] - fd).abs() / fd.abs().max(1.0);
                        assert!(err < 1e-6, "row {j} ({:?}) k={k} i={i}: {err}", r.kind);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_rows_linearize_exactly() {
        let (_, nom, blocks) = unicycle_setup(4);
        let cs = ConstraintSet::from_specs(&specs()[1..], 3, 2, 4, None).unwrap();
        let data = cs.linearize(&nom, &blocks).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let du = DVector::from_fn(8, |_, _| rng.gen_range(-1.0..1.0));
        let predicted = &data.g_hat + &data.j_u * &du;
        let moved = nom.stacked_states() + &blocks.fu * &du;
        let exact = cs.evaluate(&moved).unwrap();
        assert!((predicted - exact).amax() < 1e-12);
    }

    #[test]
    fn state_independent_row_has_zero_sensitivity() {
        let (_, nom, blocks) = unicycle_setup(3);
        let spec = [ConstraintSpec::LinearState { timestep: 1, coeffs: vec![0.0, 0.0, 0.0], bound: -1.0 }];
        let cs = ConstraintSet::from_specs(&spec, 3, 2, 3, None).unwrap();
        let data = cs.linearize(&nom, &blocks).unwrap();
        assert!(data.j_u.iter().all(|&v| v == 0.0));
        assert_eq!(data.g_hat[0], 1.0);
    }

    fn random_set(rng: &mut ChaCha8Rng, dim: usize, n_z: usize, tau: f64) -> UncertaintySet {
        let gamma = UncertaintySet::random_gamma(rng, dim, n_z);
        UncertaintySet::new(gamma, DMatrix::identity(n_z, n_z), tau).unwrap()
    }

    fn random_gains(rng: &mut ChaCha8Rng, t: usize) -> PolicyMatrix {
        PolicyMatrix { blocks: (0..t).map(|_| DMatrix::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0))).collect() }
    }

    #[test]
    fn tractable_row_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (_, nom, blocks) = unicycle_setup(4);
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        let data = cs.linearize(&nom, &blocks).unwrap();
        let set = random_set(&mut rng, 15, 3, 0.4);
        let gains = random_gains(&mut rng, 4);
        let zero_tau = set.with_tau(0.0).unwrap();
        let zero_k = PolicyMatrix::zeros(4, 2, 3);
        for j in 0..cs.len() {
            assert_eq!(tractable_row(j, &data, &zero_tau, &gains).unwrap(), 0.0);
            let open_loop = set.support(&data.j_zeta.row(j).transpose()).unwrap();
            assert_eq!(tractable_row(j, &data, &set, &zero_k).unwrap(), open_loop);
        }
    }

    #[test]
    fn tractable_row_matches_sampled_worst_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (_, nom, blocks) = unicycle_setup(4);
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        let data = cs.linearize(&nom, &blocks).unwrap();
        let set = random_set(&mut rng, 15, 3, 0.3);
        let gains = random_gains(&mut rng, 4);
        let samples = set.sample(&mut rng, 100_000, true);
        let kz = PolicyMatrix::assembled(&gains);
        let m = &data.j_u * kz + &data.j_zeta;
        for j in 0..cs.len() {
            let analytic = tractable_row(j, &data, &set, &gains).unwrap();
            let row = m.row(j);
            let sampled = samples.iter().map(|z| (row * z)[0]).fold(f64::NEG_INFINITY, f64::max);
            assert!(analytic >= sampled - 1e-12, "row {j}");
            assert!(analytic - sampled <= 0.01 * analytic, "row {j}: {analytic} vs {sampled}");
        }
    }

    #[test]
    fn error_margin_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (_, nom, blocks) = unicycle_setup(4);
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        let data = cs.linearize(&nom, &blocks).unwrap();
        let set = random_set(&mut rng, 15, 3, 0.3);
        let gains = random_gains(&mut rng, 4);
        let trivial: Vec<_> = (0..5).map(|_| ErrorEllipsoid::trivial(3)).collect();
        for j in 0..cs.len() {
            assert_eq!(
                robust_margin_le(j, &data, &set, &gains, Some(&trivial)).unwrap(),
                tractable_row(j, &data, &set, &gains).unwrap()
            );
        }
        // a lone center shifts the margin by grad' center
        let mut shifted = trivial.clone();
        let center = v(&[0.1, -0.2, 0.05]);
        shifted[4] = ErrorEllipsoid::new(center.clone(), DMatrix::identity(3, 3), 0.0).unwrap();
        for j in 0..cs.len() {
            let base = tractable_row(j, &data, &set, &gains).unwrap();
            let (k, g) = &data.grads[j];
            let want = if *k == 4 { base + g.dot(&center) } else { base };
            let got = robust_margin_le(j, &data, &set, &gains, Some(&shifted)).unwrap();
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn error_margin_dominates_center_only_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (_, nom, blocks) = unicycle_setup(4);
        let cs = ConstraintSet::from_specs(&specs(), 3, 2, 4, None).unwrap();
        let data = cs.linearize(&nom, &blocks).unwrap();
        for _ in 0..100 {
            let tau = rng.gen_range(0.01..1.0);
            let set = random_set(&mut rng, 15, 3, tau);
            let gains = random_gains(&mut rng, 4);
            let (full, centers): (Vec<_>, Vec<_>) = (0..5)
                .map(|_| {
                    let c = DVector::from_fn(3, |_, _| rng.gen_range(-0.2..0.2));
                    let m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
                    let s = &m * m.transpose() + DMatrix::identity(3, 3);
                    (
                        ErrorEllipsoid::new(c.clone(), s.clone(), rng.gen_range(0.0..0.5)).unwrap(),
                        ErrorEllipsoid::new(c, s, 0.0).unwrap(),
                    )
                })
                .unzip();
            for j in 0..cs.len() {
                let with_err = robust_margin_le(j, &data, &set, &gains, Some(&full)).unwrap();
                let center_only = robust_margin_le(j, &data, &set, &gains, Some(&centers)).unwrap();
                let nrto = tractable_row(j, &data, &set, &gains).unwrap();
                assert!(with_err >= center_only - 1e-14);
                // error term is a support function evaluated at the gradient
                let (k, g) = &data.grads[j];
                assert!((with_err - nrto - full[*k].support(g)).abs() < 1e-12);
            }
        }
    }
}
