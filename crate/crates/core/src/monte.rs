//! Closed-loop simulation of affine disturbance-feedback policies on the
//! nonlinear model, and the Monte-Carlo harness built on it.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::lintraj::{stacked_response, PolicyMatrix, StackedBlocks};
use crate::models::{rows_to_matrix, split, DynamicsModel, NominalTrajectory};
use crate::uncertainty::UncertaintySet;

/// `u_k = u_bar_k + K_k d_{k-1}` together with its disturbance-free rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub u_bar: Vec<DVector<f64>>,
    pub gains: PolicyMatrix,
    pub nominal: NominalTrajectory,
}

impl Policy {
    pub fn new(model: &DynamicsModel, x_bar0: &DVector<f64>, u_bar: Vec<DVector<f64>>, gains: PolicyMatrix) -> Result<Self> {
        if gains.horizon() != u_bar.len() {
            return Err(Error::invalid("gain count differs from the control horizon"));
        }
        if gains.blocks.iter().any(|k| k.shape() != (model.n_u(), model.n_x())) {
            return Err(Error::invalid(format!("gains must be {}x{}", model.n_u(), model.n_x())));
        }
        let nominal = model.rollout(x_bar0, &u_bar)?;
        Ok(Self { u_bar, gains, nominal })
    }

    pub fn horizon(&self) -> usize {
        self.u_bar.len()
    }

    pub fn to_record(&self) -> PolicyRecord {
        PolicyRecord {
            horizon: self.horizon(),
            u_bar: self.u_bar.iter().map(|u| u.as_slice().to_vec()).collect(),
            gains: self
                .gains
                .blocks
                .iter()
                .map(|k| k.row_iter().map(|r| r.iter().copied().collect()).collect())
                .collect(),
            nominal_states: self.nominal.states.iter().map(|x| x.as_slice().to_vec()).collect(),
        }
    }

    /// Rebuild from a record; the nominal trajectory is recomputed and must
    /// match the stored one.
    pub fn from_record(model: &DynamicsModel, rec: &PolicyRecord) -> Result<Self> {
        let u_bar: Vec<_> = rec.u_bar.iter().map(|u| DVector::from_column_slice(u)).collect();
        let gains = PolicyMatrix {
            blocks: rec.gains.iter().map(|k| rows_to_matrix(k)).collect::<Result<Vec<DMatrix<f64>>>>()?,
        };
        let x0 = rec
            .nominal_states
            .first()
            .map(|x| DVector::from_column_slice(x))
            .ok_or_else(|| Error::invalid("policy record has no nominal states"))?;
        let policy = Self::new(model, &x0, u_bar, gains)?;
        if policy.to_record() != *rec {
            return Err(Error::invalid("policy record is inconsistent with its own rollout"));
        }
        Ok(policy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyRecord {
    pub horizon: usize,
    pub u_bar: Vec<Vec<f64>>,
    /// Row-major `K_k` for each step.
    pub gains: Vec<Vec<Vec<f64>>>,
    pub nominal_states: Vec<Vec<f64>>,
}

/// One realization of the closed loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub zeta: DVector<f64>,
    /// `d0_bar, d_0, .., d_{T-1}` as recovered from the observed states.
    pub reconstructed: Vec<DVector<f64>>,
    /// Filled by [`run_monte_carlo`]; empty otherwise.
    pub constraint_values: DVector<f64>,
    /// Filled by [`linearization_errors`] callers; empty otherwise.
    pub lin_errors: Vec<DVector<f64>>,
}

/// Run the policy on the nonlinear model with disturbance `zeta`.
///
/// The controller only sees states: `d_{k-1}` is recomputed as
/// `x_k - f(x_{k-1}, u_{k-1})` (and `d0_bar = x_0 - x_bar0`).
pub fn simulate_closed_loop(
    model: &DynamicsModel,
    policy: &Policy,
    zeta: &DVector<f64>,
    x_bar0: &DVector<f64>,
) -> Result<RolloutRecord> {
    let (n_x, t) = (model.n_x(), policy.horizon());
    if zeta.len() != (t + 1) * n_x || x_bar0.len() != n_x {
        return Err(Error::invalid(format!(
            "disturbance must have length {} and x_bar0 length {n_x}",
            (t + 1) * n_x
        )));
    }
    let d = split(zeta, n_x);
    let mut states = Vec::with_capacity(t + 1);
    let mut controls = Vec::with_capacity(t);
    let mut reconstructed = Vec::with_capacity(t + 1);
    states.push(x_bar0 + &d[0]);
    reconstructed.push(&states[0] - x_bar0);
    for k in 0..t {
        let u = &policy.u_bar[k] + &policy.gains.blocks[k] * &reconstructed[k];
        let free = model.step(&states[k], &u).map_err(|e| e.at_step(k))?;
        let next = &free + &d[k + 1];
        reconstructed.push(&next - &free);
        states.push(next);
        controls.push(u);
    }
    Ok(RolloutRecord {
        states,
        controls,
        zeta: zeta.clone(),
        reconstructed,
        constraint_values: DVector::zeros(0),
        lin_errors: Vec::new(),
    })
}

/// `x_k - x_bar_k - [F_u K zeta + F_zeta zeta]_k` for each `k`.
pub fn linearization_errors(blocks: &StackedBlocks, policy: &Policy, record: &RolloutRecord) -> Result<Vec<DVector<f64>>> {
    let n_x = blocks.n_x();
    let du = DVector::zeros(blocks.horizon() * blocks.n_u());
    let pred = stacked_response(blocks, &policy.gains, &du, &record.zeta)?;
    Ok(record
        .states
        .iter()
        .zip(&policy.nominal.states)
        .enumerate()
        .map(|(k, (x, xb))| (x - xb) - pred.rows(k * n_x, n_x))
        .collect())
}

/// Linearization-error samples grouped per timestep (`T + 1` collections).
pub fn collect_linearization_errors(
    model: &DynamicsModel,
    policy: &Policy,
    blocks: &StackedBlocks,
    samples: &[DVector<f64>],
    x_bar0: &DVector<f64>,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let per_sample = samples
        .par_iter()
        .map(|z| {
            let rec = simulate_closed_loop(model, policy, z, x_bar0)?;
            linearization_errors(blocks, policy, &rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let t1 = policy.horizon() + 1;
    let mut out = vec![Vec::with_capacity(samples.len()); t1];
    for errs in per_sample {
        for (k, e) in errs.into_iter().enumerate() {
            out[k].push(e);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatisfactionReport {
    pub n_samples: usize,
    pub n_satisfied: usize,
    /// Share of realizations with every row `<= 0`.
    pub fraction: f64,
    pub per_row_violations: Vec<usize>,
    /// Largest observed value of each row (positive means violated).
    pub worst_margins: Vec<f64>,
    /// `max(0, max_j worst_margins[j])`.
    pub worst_violation: f64,
}

pub fn evaluate_satisfaction(records: &[RolloutRecord], cs: &ConstraintSet) -> Result<SatisfactionReport> {
    if records.is_empty() {
        return Err(Error::invalid("no rollouts to evaluate"));
    }
    let n_g = cs.len();
    let mut per_row = vec![0usize; n_g];
    let mut worst = vec![f64::NEG_INFINITY; n_g];
    let mut n_satisfied = 0;
    for rec in records {
        let values = if rec.constraint_values.len() == n_g {
            rec.constraint_values.clone()
        } else {
            cs.evaluate_states(&rec.states)
        };
        let mut ok = true;
        for (j, &g) in values.iter().enumerate() {
            worst[j] = worst[j].max(g);
            if g > 0.0 {
                per_row[j] += 1;
                ok = false;
            }
        }
        n_satisfied += usize::from(ok);
    }
    let worst_violation = worst.iter().copied().fold(0.0, f64::max);
    Ok(SatisfactionReport {
        n_samples: records.len(),
        n_satisfied,
        fraction: n_satisfied as f64 / records.len() as f64,
        per_row_violations: per_row,
        worst_margins: worst,
        worst_violation,
    })
}

/// Disturbance samples where sample `i` uses its own ChaCha stream
/// `stream_offset + i` of `seed`, so the draw is independent of scheduling.
pub fn sample_disturbances(set: &UncertaintySet, n: usize, seed: u64, stream_offset: u64, boundary: bool) -> Vec<DVector<f64>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream_offset + i as u64);
            set.sample(&mut rng, 1, boundary).remove(0)
        })
        .collect()
}

/// Simulate every disturbance and evaluate the constraints on each rollout.
pub fn run_monte_carlo(
    model: &DynamicsModel,
    policy: &Policy,
    cs: &ConstraintSet,
    x_bar0: &DVector<f64>,
    zetas: &[DVector<f64>],
    parallel: bool,
) -> Result<(Vec<RolloutRecord>, SatisfactionReport)> {
    let one = |z: &DVector<f64>| {
        let mut rec = simulate_closed_loop(model, policy, z, x_bar0)?;
        rec.constraint_values = cs.evaluate_states(&rec.states);
        Ok(rec)
    };
    let records = if parallel {
        zetas.par_iter().map(one).collect::<Result<Vec<_>>>()?
    } else {
        zetas.iter().map(one).collect::<Result<Vec<_>>>()?
    };
    let report = evaluate_satisfaction(&records, cs)?;
    Ok((records, report))
}
