//! Scenario files: everything needed to reproduce a run, as JSON.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraints::{ConstraintSet, ConstraintSpec, ControlBounds};
use crate::error::{Error, Result};
use crate::inner_admm::CostWeights;
use crate::models::{build_model, model_names, rows_to_matrix, DynamicsModel, ModelParams};
use crate::sco::{Mode, OuterParams, Problem};
use crate::uncertainty::UncertaintySet;

/// A per-step weight: one scalar (times identity), one matrix for every
/// step, or one matrix per step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WeightSpec {
    Scalar(f64),
    Matrix(Vec<Vec<f64>>),
    PerStep(Vec<Vec<Vec<f64>>>),
}

impl WeightSpec {
    fn expand(&self, field: &str, horizon: usize, n: usize) -> Result<Vec<DMatrix<f64>>> {
        let check = |m: DMatrix<f64>| {
            if m.shape() != (n, n) {
                Err(Error::Validation(format!("{field}: expected {n}x{n} matrices, got {}x{}", m.nrows(), m.ncols())))
            } else {
                Ok(m)
            }
        };
        let to_matrix = |rows: &Vec<Vec<f64>>| rows_to_matrix(rows).map_err(|e| Error::Validation(format!("{field}: {e}")));
        match self {
            WeightSpec::Scalar(s) => {
                if !s.is_finite() || *s < 0.0 {
                    return Err(Error::Validation(format!("{field}: weight must be finite and nonnegative")));
                }
                Ok(vec![DMatrix::identity(n, n) * *s; horizon])
            }
            WeightSpec::Matrix(rows) => Ok(vec![check(to_matrix(rows)?)?; horizon]),
            WeightSpec::PerStep(list) => {
                if list.len() != horizon {
                    return Err(Error::Validation(format!("{field}: expected {horizon} per-step matrices, got {}", list.len())));
                }
                list.iter().map(|rows| check(to_matrix(rows)?)).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default = "default_weight")]
    pub r_u: WeightSpec,
    #[serde(default = "default_weight")]
    pub r_k: WeightSpec,
}

fn default_weight() -> WeightSpec {
    WeightSpec::Scalar(1.0)
}

impl Default for CostSpec {
    fn default() -> Self {
        Self { r_u: default_weight(), r_k: default_weight() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NamedShape {
    #[serde(rename = "identity")]
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ShapeSpec {
    Named(NamedShape),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    pub tau: f64,
    #[serde(default = "default_n_z")]
    pub n_z: usize,
    /// Seed for a uniform(-1, 1) `Gamma` when `gamma` is absent.
    #[serde(default)]
    pub gamma_seed: u64,
    /// Row-major explicit `Gamma` of size `(T+1) n_x` by `n_z`.
    #[serde(default)]
    pub gamma: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_shape")]
    pub s: ShapeSpec,
}

fn default_n_z() -> usize {
    3
}

fn default_shape() -> ShapeSpec {
    ShapeSpec::Named(NamedShape::Identity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialControls {
    Zeros,
    /// The same control at every step.
    Constant { value: Vec<f64> },
    Explicit { controls: Vec<Vec<f64>> },
}

impl Default for InitialControls {
    fn default() -> Self {
        InitialControls::Zeros
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorFitSpec {
    /// Rollouts of the first-phase policy used to fit the error sets.
    pub samples: usize,
    /// Multiplier on the largest observed Mahalanobis residual.
    pub inflation: f64,
    /// Fit from disturbances on the boundary of the uncertainty set.
    pub boundary: bool,
    /// Maximum fit/solve rounds. Round one fits the NRTO policy's errors.
    /// While the newest NRTO-LE policy has errors outside the sets it was
    /// solved with, the next round adds them to the pool and solves again.
    pub rounds: usize,
}

impl Default for ErrorFitSpec {
    fn default() -> Self {
        Self { samples: 1500, inflation: 1.0, boundary: false, rounds: 1 }
    }
}

/// `start, start + step, .., stop` over a scenario parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: String,
    pub start: f64,
    pub step: f64,
    pub stop: f64,
}

impl SweepSpec {
    /// Parse `tau=a:step:b`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("sweep '{s}' is not of the form name=start:step:stop"));
        let (param, range) = s.split_once('=').ok_or_else(bad)?;
        let parts: Vec<f64> = range
            .split(':')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if parts.len() != 3 {
            return Err(bad());
        }
        let spec = Self { param: param.trim().to_string(), start: parts[0], step: parts[1], stop: parts[2] };
        spec.values()?;
        Ok(spec)
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if self.param != "tau" {
            return Err(Error::Validation(format!("only tau can be swept, got '{}'", self.param)));
        }
        if !(self.step > 0.0 && self.start.is_finite() && self.stop >= self.start) {
            return Err(Error::Validation("sweep needs step > 0 and stop >= start".into()));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize;
        // values built from the index so they do not drift
        Ok((0..=n).map(|i| {
            let v = self.start + i as f64 * self.step;
            (v * 1e12).round() / 1e12
        }).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub model: String,
    #[serde(default)]
    pub model_params: ModelParams,
    pub dt: f64,
    pub horizon: usize,
    pub x_bar0: Vec<f64>,
    #[serde(default)]
    pub cost: CostSpec,
    pub uncertainty: UncertaintySpec,
    #[serde(default)]
    pub constraints: Vec<ConstraintSpec>,
    #[serde(default)]
    pub control_bounds: Option<ControlBounds>,
    #[serde(default)]
    pub initial_controls: InitialControls,
    #[serde(default)]
    pub outer: OuterParams,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default)]
    pub boundary_sampling: bool,
    #[serde(default)]
    pub error_fit: ErrorFitSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_seed() -> u64 {
    7
}

fn default_samples() -> usize {
    1000
}

impl Scenario {
    /// Parse and validate. Syntax errors carry line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let scn: Scenario = serde_json::from_str(text).map_err(|e| Error::Validation(format!("scenario: {e}")))?;
        scn.validate()?;
        Ok(scn)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Pretty JSON with every default spelled out.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn build_model(&self) -> Result<DynamicsModel> {
        if !model_names().any(|n| n == self.model) {
            return Err(Error::Validation(format!(
                "model: unknown '{}' (known: {})",
                self.model,
                model_names().collect::<Vec<_>>().join(", ")
            )));
        }
        build_model(&self.model, self.dt, &self.model_params).map_err(|e| Error::Validation(format!("model: {e}")))
    }

    pub fn uncertainty_set(&self, n_x: usize) -> Result<UncertaintySet> {
        let u = &self.uncertainty;
        let v = |m: String| Error::Validation(format!("uncertainty: {m}"));
        if !(u.tau.is_finite() && u.tau >= 0.0) {
            return Err(v(format!("tau must be nonnegative, got {}", u.tau)));
        }
        let rows = (self.horizon + 1) * n_x;
        let gamma = match &u.gamma {
            Some(g) => rows_to_matrix(g).map_err(|e| v(e.to_string()))?,
            None => {
                if u.n_z == 0 {
                    return Err(v("n_z must be positive".into()));
                }
                UncertaintySet::random_gamma(&mut ChaCha8Rng::seed_from_u64(u.gamma_seed), rows, u.n_z)
            }
        };
        if gamma.nrows() != rows {
            return Err(v(format!("gamma must have (T+1) n_x = {rows} rows, got {}", gamma.nrows())));
        }
        let s = match &u.s {
            ShapeSpec::Named(NamedShape::Identity) => DMatrix::identity(gamma.ncols(), gamma.ncols()),
            ShapeSpec::Matrix(m) => rows_to_matrix(m).map_err(|e| v(e.to_string()))?,
        };
        UncertaintySet::new(gamma, s, u.tau).map_err(|e| v(e.to_string()))
    }

    fn initial_controls(&self, n_u: usize) -> Result<Vec<DVector<f64>>> {
        let v = |m: String| Error::Validation(format!("initial_controls: {m}"));
        match &self.initial_controls {
            InitialControls::Zeros => Ok(vec![DVector::zeros(n_u); self.horizon]),
            InitialControls::Constant { value } => {
                if value.len() != n_u {
                    return Err(v(format!("expected {n_u} entries")));
                }
                Ok(vec![DVector::from_column_slice(value); self.horizon])
            }
            InitialControls::Explicit { controls } => {
                if controls.len() != self.horizon || controls.iter().any(|c| c.len() != n_u) {
                    return Err(v(format!("expected {} controls of length {n_u}", self.horizon)));
                }
                Ok(controls.iter().map(|c| DVector::from_column_slice(c)).collect())
            }
        }
    }

    /// Assemble the optimization problem described by this scenario.
    pub fn problem(&self) -> Result<Problem> {
        let model = self.build_model()?;
        let (n_x, n_u) = (model.n_x(), model.n_u());
        if self.horizon == 0 {
            return Err(Error::Validation("horizon must be positive".into()));
        }
        if self.x_bar0.len() != n_x || self.x_bar0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("x_bar0: expected {n_x} finite entries")));
        }
        let weights = CostWeights {
            r_u: self.cost.r_u.expand("cost.r_u", self.horizon, n_u)?,
            r_k: self.cost.r_k.expand("cost.r_k", self.horizon, n_u)?,
        };
        weights.validate(self.horizon, n_u).map_err(|e| Error::Validation(format!("cost: {e}")))?;
        let constraints = ConstraintSet::from_specs(&self.constraints, n_x, n_u, self.horizon, self.control_bounds.clone())
            .map_err(|e| Error::Validation(format!("constraints: {e}")))?;
        let u_init = self.initial_controls(n_u)?;
        if let Some(cb) = &self.control_bounds {
            let (lo, hi) = (cb.lower.as_deref(), cb.upper.as_deref());
            for u in &u_init {
                for i in 0..n_u {
                    if lo.is_some_and(|l| u[i] < l[i]) || hi.is_some_and(|h| u[i] > h[i]) {
                        return Err(Error::Validation("initial_controls violate control_bounds".into()));
                    }
                }
            }
        }
        Ok(Problem {
            set: self.uncertainty_set(n_x)?,
            x_bar0: DVector::from_column_slice(&self.x_bar0),
            constraints,
            weights,
            u_init,
            model,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.outer.validate()?;
        if self.samples == 0 {
            return Err(Error::Validation("samples must be positive".into()));
        }
        if !(self.error_fit.inflation.is_finite() && self.error_fit.inflation >= 1.0) {
            return Err(Error::Validation("error_fit.inflation must be >= 1".into()));
        }
        if self.error_fit.rounds == 0 {
            return Err(Error::Validation("error_fit.rounds must be positive".into()));
        }
        if let Some(sw) = &self.sweep {
            sw.values()?;
        }
        self.problem().map(|_| ())
    }
}

/// JSON schema of the scenario format, shipped alongside the binary.
pub const SCHEMA: &str = include_str!("../scenario.schema.json");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const MINIMAL: &str = r#"{"model": "unicycle", "horizon": 5, "dt": 0.1, "x_bar0": [0, 0, 0],
        "uncertainty": {"tau": 0.05}}"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let s = Scenario::from_json(MINIMAL).unwrap();
        assert_eq!(s.outer, OuterParams::default());
        assert_eq!(s.uncertainty.n_z, 3);
        assert_eq!(s.mode, Mode::Nrto);
        assert_eq!(s.samples, 1000);
        let p = s.problem().unwrap();
        assert_eq!(p.set.dim(), 18);
        assert_eq!(p.set.s(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn validation_errors() {
        let neg = MINIMAL.replace("0.05", "-0.1");
        assert!(matches!(Scenario::from_json(&neg), Err(Error::Validation(m)) if m.contains("tau")));
        let bad_s = MINIMAL.replace(r#""tau": 0.05"#, r#""tau": 0.05, "n_z": 2, "s": [[1, 2], [2, 1]]"#);
        assert!(matches!(Scenario::from_json(&bad_s), Err(Error::Validation(_))));
        let unknown = MINIMAL.replace(r#""dt""#, r#""dtt": 1, "dt""#);
        let err = Scenario::from_json(&unknown).unwrap_err().to_string();
        assert!(err.contains("dtt") && err.contains("line"), "{err}");
        let model = MINIMAL.replace("unicycle", "boat");
        assert!(Scenario::from_json(&model).unwrap_err().to_string().contains("boat"));
        let x0 = MINIMAL.replace("[0, 0, 0]", "[0, 0]");
        assert!(Scenario::from_json(&x0).unwrap_err().to_string().contains("x_bar0"));
    }

    #[test]
    fn weights_expand() {
        let w = WeightSpec::Matrix(vec![vec![2.0, 0.0], vec![0.0, 1.0]]).expand("w", 3, 2).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[2][(0, 0)], 2.0);
        assert!(WeightSpec::PerStep(vec![vec![vec![1.0]]]).expand("w", 3, 1).is_err());
        let json = r#"{"r_u": 0.5, "r_k": [[1, 0], [0, 1]]}"#;
        let c: CostSpec = serde_json::from_str(json).unwrap();
        assert_eq!(c.r_u, WeightSpec::Scalar(0.5));
    }

    #[test]
    fn sweep_parsing() {
        let s = SweepSpec::parse("tau=0.01:0.01:0.10").unwrap();
        let v = s.values().unwrap();
        assert_eq!(v.len(), 10);
        assert_eq!(v[0], 0.01);
        assert_eq!(v[9], 0.1);
        assert_eq!(v[2], 0.03);
        assert!(SweepSpec::parse("rho=1:1:2").is_err());
        assert!(SweepSpec::parse("tau=1:2").is_err());
    }

    #[test]
    fn gallery_scenarios_parse() {
        let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios");
        let mut n = 0;
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "json") {
                Scenario::from_path(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
                n += 1;
            }
        }
        assert!(n >= 5);
    }

    #[test]
    fn schema_is_json() {
        let v: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
        assert_eq!(v["type"], "object");
    }

    proptest! {
        #[test]
        fn round_trip(tau in 0.0f64..1.0, n_z in 1usize..5, seed in 0u64..1000, r_u in 0.0f64..10.0,
                      cx in -5.0f64..5.0, radius in 0.01f64..2.0, samples in 1usize..5000, boundary: bool) {
            let mut s = Scenario::from_json(MINIMAL).unwrap();
            s.uncertainty.tau = tau;
            s.uncertainty.n_z = n_z;
            s.uncertainty.gamma_seed = seed;
            s.cost.r_u = WeightSpec::Scalar(r_u);
            s.constraints.push(ConstraintSpec::CircularObstacle { center: [cx, 1.0], radius, timesteps: None });
            s.samples = samples;
            s.boundary_sampling = boundary;
            let back = Scenario::from_json(&s.to_json()).unwrap();
            prop_assert_eq!(&back, &s);
            let again = Scenario::from_json(&back.to_json()).unwrap();
            prop_assert_eq!(again, back);
        }
    }
}
