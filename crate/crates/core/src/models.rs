//! Discrete-time dynamics models with analytic Jacobians.
//!
//! Every model maps `(x_k, u_k)` to `x_{k+1}`. Angles are never wrapped so the
//! maps stay smooth along a trajectory.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rolling-distance formula for the kinematic car's rear axle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CarFormula {
    /// `c_b = c_f cos(w) + L - sqrt(L^2 - (c_f cos(w))^2)`, which tends to the
    /// front rolling distance for small steps.
    #[default]
    Corrected,
    /// Same expression with `+ sqrt(..)`, kept for reproducing the printed model.
    PaperVerbatim,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelKind {
    /// State `(x, y, theta)`, control `(v, omega)`.
    Unicycle,
    /// State `(x, y, theta, v)`, control `(omega, a)`.
    Car { c_len: f64, formula: CarFormula },
    /// `x+ = A x + B u`.
    Linear { a: DMatrix<f64>, b: DMatrix<f64> },
}

/// Optional model parameters as they appear in a scenario file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_len: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub car_formula: Option<CarFormula>,
    /// Row-major state matrix for the `linear` model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<Vec<Vec<f64>>>,
    /// Row-major input matrix for the `linear` model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
}

pub const DEFAULT_CAR_LENGTH: f64 = 0.75;

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsModel {
    kind: ModelKind,
    n_x: usize,
    n_u: usize,
    dt: f64,
}

type Constructor = fn(f64, &ModelParams) -> Result<DynamicsModel>;

/// Models addressable by name from a scenario file.
const REGISTRY: &[(&str, Constructor)] = &[
    ("unicycle", |dt, _| DynamicsModel::unicycle(dt)),
    ("car", |dt, p| {
        DynamicsModel::car(
            dt,
            p.c_len.unwrap_or(DEFAULT_CAR_LENGTH),
            p.car_formula.unwrap_or_default(),
        )
    }),
    ("double_integrator", |dt, _| DynamicsModel::double_integrator(dt)),
    ("linear", |dt, p| {
        let a = p
            .a
            .as_ref()
            .ok_or_else(|| Error::invalid("linear model requires params.a"))?;
        let b = p
            .b
            .as_ref()
            .ok_or_else(|| Error::invalid("linear model requires params.b"))?;
        DynamicsModel::linear(rows_to_matrix(a)?, rows_to_matrix(b)?, dt)
    }),
];

pub fn model_names() -> impl Iterator<Item = &'static str> {
    REGISTRY.iter().map(|(name, _)| *name)
}

/// Look up a model constructor by name.
pub fn build_model(name: &str, dt: f64, params: &ModelParams) -> Result<DynamicsModel> {
    let (_, ctor) = REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            Error::invalid(format!(
                "unknown model '{name}' (known: {})",
                model_names().collect::<Vec<_>>().join(", ")
            ))
        })?;
    ctor(dt, params)
}

pub(crate) fn rows_to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::invalid("matrix rows must be nonempty and of equal length"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

fn check_dt(dt: f64) -> Result<()> {
    if dt.is_finite() && dt > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("dt must be positive, got {dt}")))
    }
}

impl DynamicsModel {
    pub fn unicycle(dt: f64) -> Result<Self> {
        check_dt(dt)?;
        Ok(Self { kind: ModelKind::Unicycle, n_x: 3, n_u: 2, dt })
    }

    pub fn car(dt: f64, c_len: f64, formula: CarFormula) -> Result<Self> {
        check_dt(dt)?;
        if !(c_len.is_finite() && c_len > 0.0) {
            return Err(Error::invalid(format!("c_len must be positive, got {c_len}")));
        }
        Ok(Self { kind: ModelKind::Car { c_len, formula }, n_x: 4, n_u: 2, dt })
    }

    pub fn linear(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        check_dt(dt)?;
        let n_x = a.nrows();
        if n_x == 0 || a.ncols() != n_x || b.nrows() != n_x || b.ncols() == 0 {
            return Err(Error::invalid(format!(
                "linear model needs square A and matching B, got A {}x{}, B {}x{}",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let n_u = b.ncols();
        Ok(Self { kind: ModelKind::Linear { a, b }, n_x, n_u, dt })
    }

    /// Planar double integrator: state `(px, py, vx, vy)`, control `(ax, ay)`,
    /// exact zero-order-hold discretization.
    pub fn double_integrator(dt: f64) -> Result<Self> {
        check_dt(dt)?;
        let mut a = DMatrix::identity(4, 4);
        a[(0, 2)] = dt;
        a[(1, 3)] = dt;
        let mut b = DMatrix::zeros(4, 2);
        b[(0, 0)] = 0.5 * dt * dt;
        b[(1, 1)] = 0.5 * dt * dt;
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        Self::linear(a, b, dt)
    }

    pub fn kind(&self) -> &ModelKind {
        &self.kind
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kind, ModelKind::Linear { .. })
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.n_x || u.len() != self.n_u {
            return Err(Error::invalid(format!(
                "expected x[{}] and u[{}], got x[{}] and u[{}]",
                self.n_x,
                self.n_u,
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// One step of the disturbance-free dynamics.
    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        let dt = self.dt;
        match &self.kind {
            ModelKind::Unicycle => {
                let (v, w, th) = (u[0], u[1], x[2]);
                Ok(DVector::from_vec(vec![
                    x[0] + v * th.cos() * dt,
                    x[1] + v * th.sin() * dt,
                    th + w * dt,
                ]))
            }
            ModelKind::Car { c_len, formula } => {
                let g = CarGeometry::new(x[3], u[0], dt, *c_len, *formula)?;
                let th = x[2];
                Ok(DVector::from_vec(vec![
                    x[0] + g.c_b * th.cos(),
                    x[1] + g.c_b * th.sin(),
                    th + g.heading_change,
                    x[3] + u[1] * dt,
                ]))
            }
            ModelKind::Linear { a, b } => Ok(a * x + b * u),
        }
    }

    /// Analytic `(df/dx, df/du)` at `(x, u)`.
    pub fn jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(x, u)?;
        let dt = self.dt;
        match &self.kind {
            ModelKind::Unicycle => {
                let (v, th) = (u[0], x[2]);
                let (s, c) = th.sin_cos();
                let mut a = DMatrix::identity(3, 3);
                a[(0, 2)] = -v * s * dt;
                a[(1, 2)] = v * c * dt;
                let mut b = DMatrix::zeros(3, 2);
                b[(0, 0)] = c * dt;
                b[(1, 0)] = s * dt;
                b[(2, 1)] = dt;
                Ok((a, b))
            }
            ModelKind::Car { c_len, formula } => {
                let g = CarGeometry::new(x[3], u[0], dt, *c_len, *formula)?;
                let (s, c) = x[2].sin_cos();
                let mut a = DMatrix::identity(4, 4);
                a[(0, 2)] = -g.c_b * s;
                a[(1, 2)] = g.c_b * c;
                a[(0, 3)] = g.dcb_dv * c;
                a[(1, 3)] = g.dcb_dv * s;
                a[(2, 3)] = g.dheading_dv;
                let mut b = DMatrix::zeros(4, 2);
                b[(0, 0)] = g.dcb_dw * c;
                b[(1, 0)] = g.dcb_dw * s;
                b[(2, 0)] = g.dheading_dw;
                b[(3, 1)] = dt;
                Ok((a, b))
            }
            ModelKind::Linear { a, b } => Ok((a.clone(), b.clone())),
        }
    }

    /// Disturbance-free rollout from `x0` under `controls`.
    pub fn rollout(
        &self,
        x0: &DVector<f64>,
        controls: &[DVector<f64>],
    ) -> Result<NominalTrajectory> {
        if controls.is_empty() {
            return Err(Error::invalid("rollout needs at least one control"));
        }
        if x0.len() != self.n_x {
            return Err(Error::invalid(format!(
                "initial state has length {}, model expects {}",
                x0.len(),
                self.n_x
            )));
        }
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for (k, u) in controls.iter().enumerate() {
            let next = self.step(&states[k], u).map_err(|e| e.at_step(k))?;
            states.push(next);
        }
        Ok(NominalTrajectory { states, controls: controls.to_vec() })
    }
}

/// Intermediate quantities of the car update and their derivatives.
struct CarGeometry {
    c_b: f64,
    heading_change: f64,
    dcb_dv: f64,
    dcb_dw: f64,
    dheading_dv: f64,
    dheading_dw: f64,
}

impl CarGeometry {
    fn new(v: f64, w: f64, dt: f64, c_len: f64, formula: CarFormula) -> Result<Self> {
        let c_f = v * dt;
        let (sw, cw) = w.sin_cos();
        let q = c_f * cw;
        let disc = c_len * c_len - q * q;
        if disc <= 0.0 {
            return Err(Error::Domain {
                step: None,
                msg: format!("car rolling distance undefined: |v dt cos w| = {} >= c_len", q.abs()),
            });
        }
        let root = disc.sqrt();
        let ratio = sw * c_f / c_len;
        if ratio.abs() >= 1.0 {
            return Err(Error::Domain {
                step: None,
                msg: format!("car heading change undefined: |sin(w) v dt / c_len| = {}", ratio.abs()),
            });
        }
        let (c_b, dcb_dq) = match formula {
            CarFormula::Corrected => (q + c_len - root, 1.0 + q / root),
            CarFormula::PaperVerbatim => (q + c_len + root, 1.0 - q / root),
        };
        let asin_scale = 1.0 / (1.0 - ratio * ratio).sqrt();
        Ok(Self {
            c_b,
            heading_change: ratio.asin(),
            dcb_dv: dcb_dq * dt * cw,
            dcb_dw: -dcb_dq * c_f * sw,
            dheading_dv: asin_scale * sw * dt / c_len,
            dheading_dw: asin_scale * cw * c_f / c_len,
        })
    }
}

/// Disturbance-free state/control sequence used as the linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct NominalTrajectory {
    /// `T + 1` states.
    pub states: Vec<DVector<f64>>,
    /// `T` controls.
    pub controls: Vec<DVector<f64>>,
}

impl NominalTrajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// States stacked into one `(T+1) n_x` vector.
    pub fn stacked_states(&self) -> DVector<f64> {
        stack(&self.states)
    }
}

pub(crate) fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(n);
    let mut off = 0;
    for b in blocks {
        out.rows_mut(off, b.len()).copy_from(b);
        off += b.len();
    }
    out
}

pub(crate) fn split(v: &DVector<f64>, block: usize) -> Vec<DVector<f64>> {
    (0..v.len() / block)
        .map(|k| v.rows(k * block, block).into_owned())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn central_diff(
        m: &DynamicsModel,
        x: &DVector<f64>,
        u: &DVector<f64>,
        h: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut a = DMatrix::zeros(m.n_x(), m.n_x());
        for i in 0..m.n_x() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[i] += h;
            xm[i] -= h;
            let d = (m.step(&xp, u).unwrap() - m.step(&xm, u).unwrap()) / (2.0 * h);
            a.set_column(i, &d);
        }
        let mut b = DMatrix::zeros(m.n_x(), m.n_u());
        for i in 0..m.n_u() {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[i] += h;
            um[i] -= h;
            let d = (m.step(x, &up).unwrap() - m.step(x, &um).unwrap()) / (2.0 * h);
            b.set_column(i, &d);
        }
        (a, b)
    }

    fn max_rel_err(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) -> f64 {
        analytic
            .iter()
            .zip(fd.iter())
            .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
            .fold(0.0, f64::max)
    }

    #[test]
    fn unicycle_step_examples() {
        let m = DynamicsModel::unicycle(0.01).unwrap();
        let x = m.step(&v(&[0.0, 0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(x, v(&[0.01, 0.0, 0.0]));
        let x = m.step(&v(&[0.0, 0.0, FRAC_PI_2]), &v(&[2.0, 1.0])).unwrap();
        assert!(x[0].abs() < 1e-17);
        assert!((x[1] - 0.02).abs() < 1e-17);
        assert!((x[2] - (FRAC_PI_2 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn car_step_corrected_formula() {
        let m = DynamicsModel::car(0.03, 0.75, CarFormula::Corrected).unwrap();
        let x = m.step(&v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        // scalar oracle
        let c_f: f64 = 1.0 * 0.03;
        let c_b = c_f + 0.75 - (0.75f64 * 0.75 - c_f * c_f).sqrt();
        assert!((c_b - 0.03060).abs() < 1e-5);
        assert_eq!(x[0], c_b);
        assert_eq!(x[1], 0.0);
        assert_eq!(x[2], 0.0);
        assert_eq!(x[3], 1.0);
    }

    #[test]
    fn car_paper_verbatim_formula_differs() {
        let m = DynamicsModel::car(0.03, 0.75, CarFormula::PaperVerbatim).unwrap();
        let x = m.step(&v(&[0.0, 0.0, 0.0, 1.0]), &v(&[0.0, 0.0])).unwrap();
        let c_b = 0.03 + 0.75 + (0.75f64 * 0.75 - 0.03 * 0.03).sqrt();
        assert_eq!(x[0], c_b);
    }

    #[test]
    fn car_domain_error_names_step() {
        let m = DynamicsModel::car(0.03, 0.75, CarFormula::Corrected).unwrap();
        let controls = vec![v(&[0.0, 0.0]), v(&[0.0, 2000.0])];
        // second step pushes v to 60 m/s, which breaks the square root on step 2
        let controls = [controls, vec![v(&[0.0, 0.0])]].concat();
        match m.rollout(&v(&[0.0, 0.0, 0.0, 1.0]), &controls) {
            Err(Error::Domain { step: Some(2), .. }) => {}
            other => panic!("expected domain error at step 2, got {other:?}"),
        }
    }

    #[test]
    fn step_rejects_bad_dimensions() {
        let m = DynamicsModel::unicycle(0.01).unwrap();
        assert!(matches!(
            m.step(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(Error::InvalidArgument(_))
        ));
        assert!(m.jacobians(&v(&[0.0, 0.0, 0.0]), &v(&[1.0])).is_err());
    }

    #[test]
    fn unicycle_jacobian_by_hand() {
        let dt = 0.01;
        let m = DynamicsModel::unicycle(dt).unwrap();
        let (a, b) = m.jacobians(&v(&[0.0, 0.0, 0.0]), &v(&[1.0, 0.0])).unwrap();
        assert_eq!(a[(0, 2)], 0.0);
        assert_eq!(a[(1, 2)], dt);
        assert_eq!(b[(0, 0)], dt);
        assert_eq!(b[(2, 1)], dt);
        let th = 0.3;
        let (_, b) = m.jacobians(&v(&[0.0, 0.0, th]), &v(&[0.0, 0.5])).unwrap();
        assert_eq!(b[(0, 0)], th.cos() * dt);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let models = [
            DynamicsModel::unicycle(0.01).unwrap(),
            DynamicsModel::car(0.03, 0.75, CarFormula::Corrected).unwrap(),
            DynamicsModel::car(0.03, 0.75, CarFormula::PaperVerbatim).unwrap(),
            DynamicsModel::double_integrator(0.1).unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for m in &models {
            let mut worst = 0.0f64;
            for _ in 0..100 {
                let x = DVector::from_fn(m.n_x(), |_, _| rng.gen_range(-3.0..3.0));
                let u = DVector::from_fn(m.n_u(), |_, _| rng.gen_range(-1.2..1.2));
                let (a, b) = m.jacobians(&x, &u).unwrap();
                let (fa, fb) = central_diff(m, &x, &u, 1e-6);
                worst = worst.max(max_rel_err(&a, &fa)).max(max_rel_err(&b, &fb));
            }
            assert!(worst < 1e-5, "{:?}: worst rel err {worst}", m.kind());
        }
    }

    #[test]
    fn rollout_examples() {
        let m = DynamicsModel::unicycle(0.01).unwrap();
        let x0 = v(&[0.0, 0.0, 0.0]);
        let one = m.rollout(&x0, &[v(&[0.4, -0.2])]).unwrap();
        assert_eq!(one.states, vec![x0.clone(), m.step(&x0, &v(&[0.4, -0.2])).unwrap()]);

        let traj = m.rollout(&x0, &vec![v(&[1.0, 0.0]); 30]).unwrap();
        let last = traj.states.last().unwrap();
        assert!((last[0] - 0.3).abs() < 1e-14);
        assert_eq!(last[1], 0.0);
        assert_eq!(last[2], 0.0);
        for k in 0..30 {
            assert_eq!(m.step(&traj.states[k], &traj.controls[k]).unwrap(), traj.states[k + 1]);
        }
        assert!(m.rollout(&x0, &[]).is_err());
    }

    #[test]
    fn registry_resolves_names() {
        let m = build_model("car", 0.03, &ModelParams::default()).unwrap();
        assert_eq!(
            m.kind(),
            &ModelKind::Car { c_len: DEFAULT_CAR_LENGTH, formula: CarFormula::Corrected }
        );
        assert!(build_model("boat", 0.1, &ModelParams::default()).is_err());
        let p = ModelParams {
            a: Some(vec![vec![1.0]]),
            b: Some(vec![vec![0.5]]),
            ..Default::default()
        };
        let lin = build_model("linear", 0.1, &p).unwrap();
        assert_eq!((lin.n_x(), lin.n_u()), (1, 1));
        assert!(build_model("linear", 0.1, &ModelParams::default()).is_err());
        assert!(DynamicsModel::unicycle(0.0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn straight_unicycle_stays_on_line(
            x0 in -5.0..5.0f64, y0 in -5.0..5.0f64, th in -3.0..3.0f64,
            speeds in proptest::collection::vec(-3.0..3.0f64, 1..40),
        ) {
            let m = DynamicsModel::unicycle(0.01).unwrap();
            let controls: Vec<_> = speeds.iter().map(|&s| v(&[s, 0.0])).collect();
            let start = v(&[x0, y0, th]);
            let a = m.rollout(&start, &controls).unwrap();
            let b = m.rollout(&start, &controls).unwrap();
            proptest::prop_assert_eq!(&a, &b);
            let (s, c) = th.sin_cos();
            for st in &a.states {
                // cross product with the heading direction
                let off = (st[0] - x0) * s - (st[1] - y0) * c;
                proptest::prop_assert!(off.abs() < 1e-12);
                proptest::prop_assert_eq!(st[2], th);
            }
        }
    }
}
