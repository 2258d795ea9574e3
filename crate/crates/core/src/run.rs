//! Run orchestration: solve, validate by Monte Carlo, fit error sets and
//! re-solve (nrto-le), then write the artifacts.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::constraints::ConstraintSet;
use crate::error::{Error, Result};
use crate::lintraj::linearize_dynamics;
use crate::monte::{collect_linearization_errors, run_monte_carlo, sample_disturbances, Policy, PolicyRecord, RolloutRecord, SatisfactionReport};
use crate::scenario::Scenario;
use crate::sco::{optimize, Mode, Problem, SolveLog, SolveOutcome, SolveStatus};
use crate::uncertainty::{fit_error_ellipsoids, ErrorEllipsoid, ErrorEllipsoidRecord};

/// Stream offset of the error-fit disturbances, disjoint from validation draws.
pub const FIT_STREAM_OFFSET: u64 = 1 << 32;

/// One solve followed by its Monte-Carlo validation.
#[derive(Debug, Clone)]
pub struct Phase {
    pub mode: Mode,
    pub solve: SolveOutcome,
    pub records: Vec<RolloutRecord>,
    pub report: SatisfactionReport,
}

/// In-memory result of a full pipeline run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub scenario: Scenario,
    pub constraints: ConstraintSet,
    /// One phase, or in nrto-le the NRTO solve followed by one NRTO-LE
    /// solve per error-fit round.
    pub phases: Vec<Phase>,
    pub error_sets: Option<Vec<ErrorEllipsoid>>,
    pub conic_dump: Option<Vec<String>>,
}

impl RunResult {
    pub fn final_phase(&self) -> &Phase {
        self.phases.last().expect("at least one phase")
    }
}

/// Execute the pipeline of `scn.mode` without touching the filesystem.
pub fn execute(scn: &Scenario, dump_conic: bool) -> Result<RunResult> {
    scn.validate()?;
    let problem = scn.problem()?;
    let mut dump = dump_conic.then(Vec::new);
    let zetas = sample_disturbances(&problem.set, scn.samples, scn.seed, 0, scn.boundary_sampling);

    let first_mode = if scn.mode == Mode::Nto { Mode::Nto } else { Mode::Nrto };
    let first = solve_and_validate(&problem, scn, first_mode, None, &zetas, dump.as_mut())?;
    let mut phases = vec![first];
    let mut error_sets = None;

    if scn.mode == Mode::NrtoLe {
        let fit = sample_disturbances(&problem.set, scn.error_fit.samples, scn.seed, FIT_STREAM_OFFSET, scn.error_fit.boundary);
        let mut errs = fit_errors(&problem, &phases[0].solve.policy, &fit)?;
        let mut pool: Vec<Vec<DVector<f64>>> = vec![Vec::new(); errs.len()];
        for round in 1..=scn.error_fit.rounds {
            for (acc, e) in pool.iter_mut().zip(errs) {
                acc.extend(e);
            }
            let sets = fit_error_ellipsoids(&pool, scn.error_fit.inflation)?;
            log::info!("round {round}: fitted {} error sets from {} samples per step", sets.len(), pool[0].len());
            let phase = solve_and_validate(&problem, scn, Mode::NrtoLe, Some(&sets), &zetas, dump.as_mut())?;
            phases.push(phase);
            let sets = error_sets.insert(sets);
            if round == scn.error_fit.rounds {
                break;
            }
            errs = fit_errors(&problem, &phases.last().expect("phase").solve.policy, &fit)?;
            if contained(&errs, sets) {
                log::info!("round {round}: errors of the new policy lie inside its error sets");
                break;
            }
        }
    }

    Ok(RunResult { scenario: scn.clone(), constraints: problem.constraints, phases, error_sets, conic_dump: dump })
}

fn fit_errors(problem: &Problem, policy: &Policy, fit: &[DVector<f64>]) -> Result<Vec<Vec<DVector<f64>>>> {
    let blocks = linearize_dynamics(&problem.model, &policy.nominal)?;
    collect_linearization_errors(&problem.model, policy, &blocks, fit, &problem.x_bar0)
}

/// Relative slack on the set level when testing containment between rounds.
pub const CONTAINMENT_SLACK: f64 = 1e-2;

/// Whether every error sample lies in the (slightly relaxed) set of its timestep.
fn contained(errs: &[Vec<DVector<f64>>], sets: &[ErrorEllipsoid]) -> bool {
    let mut ok = true;
    for (k, (es, set)) in errs.iter().zip(sets).enumerate() {
        let worst = es.iter().map(|e| set.membership(e)).fold(0.0, f64::max);
        if worst > set.level() * (1.0 + CONTAINMENT_SLACK) + 1e-12 {
            log::debug!("timestep {k}: error membership {worst:.6e} exceeds level {:.6e}", set.level());
            ok = false;
        }
    }
    ok
}

fn solve_and_validate(
    problem: &Problem,
    scn: &Scenario,
    mode: Mode,
    error_sets: Option<&[ErrorEllipsoid]>,
    zetas: &[DVector<f64>],
    dump: Option<&mut Vec<String>>,
) -> Result<Phase> {
    let solve = optimize(problem, &scn.outer, mode, error_sets, dump)?;
    log::info!(
        "{} solve: {:?} after {} outer iterations",
        mode.as_str(),
        solve.log.status,
        solve.log.records.len()
    );
    let (records, report) = run_monte_carlo(&problem.model, &solve.policy, &problem.constraints, &problem.x_bar0, zetas, true)?;
    log::info!("{} satisfaction {}/{}", mode.as_str(), report.n_satisfied, report.n_samples);
    Ok(Phase { mode, solve, records, report })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowStats {
    pub label: String,
    pub violations: usize,
    pub worst_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseStats {
    pub mode: Mode,
    pub solve_status: Option<SolveStatus>,
    pub outer_iterations: usize,
    pub n_samples: usize,
    pub n_satisfied: usize,
    pub satisfaction: f64,
    pub worst_violation: f64,
    pub rows: Vec<RowStats>,
}

/// Contents of `stats.json`; deterministic given the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub scenario: String,
    pub mode: Mode,
    pub tau: f64,
    pub seed: u64,
    pub boundary_sampling: bool,
    pub n_samples: usize,
    pub n_satisfied: usize,
    pub satisfaction: f64,
    pub worst_violation: f64,
    pub solve_status: Option<SolveStatus>,
    pub outer_iterations: usize,
    pub rows: Vec<RowStats>,
    /// The NRTO phase of an nrto-le run.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_phase: Option<PhaseStats>,
}

fn phase_stats(phase: &Phase, cs: &ConstraintSet) -> PhaseStats {
    let r = &phase.report;
    PhaseStats {
        mode: phase.mode,
        solve_status: phase.solve.log.status,
        outer_iterations: phase.solve.log.records.len(),
        n_samples: r.n_samples,
        n_satisfied: r.n_satisfied,
        satisfaction: r.fraction,
        worst_violation: r.worst_violation,
        rows: cs
            .rows()
            .iter()
            .enumerate()
            .map(|(j, row)| RowStats { label: row.label(), violations: r.per_row_violations[j], worst_margin: r.worst_margins[j] })
            .collect(),
    }
}

impl RunResult {
    pub fn stats(&self) -> Stats {
        let last = phase_stats(self.final_phase(), &self.constraints);
        let first_phase = (self.phases.len() > 1).then(|| phase_stats(&self.phases[0], &self.constraints));
        Stats {
            scenario: self.scenario.name.clone(),
            mode: self.scenario.mode,
            tau: self.scenario.uncertainty.tau,
            seed: self.scenario.seed,
            boundary_sampling: self.scenario.boundary_sampling,
            n_samples: last.n_samples,
            n_satisfied: last.n_satisfied,
            satisfaction: last.satisfaction,
            worst_violation: last.worst_violation,
            solve_status: last.solve_status,
            outer_iterations: last.outer_iterations,
            rows: last.rows,
            first_phase,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseLog {
    pub mode: Mode,
    pub log: SolveLog,
}

/// Contents of `manifest.json`: the effective scenario plus bookkeeping.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    /// Every effective parameter, defaults included; `run --manifest` replays it.
    pub scenario: Scenario,
    pub artifacts: Vec<String>,
    /// True when the run stopped before writing every artifact.
    pub partial: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
    }
}

/// Write `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let mut tmp = tempfile_in(dir, name)?;
    tmp.1.write_all(bytes)?;
    tmp.1.sync_all()?;
    drop(tmp.1);
    fs::rename(&tmp.0, dir.join(name))?;
    Ok(())
}

fn tempfile_in(dir: &Path, name: &str) -> Result<(PathBuf, fs::File)> {
    let path = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let file = fs::File::create(&path)?;
    Ok((path, file))
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("artifact serializes");
    s.push('\n');
    s.into_bytes()
}

/// CSV of every rollout: `sample,timestep,x0..,u0..,<row template>..`.
/// Controls are empty at the final timestep, constraint cells are empty at
/// timesteps where the template has no row. Floats use 17 significant digits.
pub fn rollouts_csv(records: &[RolloutRecord], cs: &ConstraintSet) -> String {
    let templates = cs.template_labels();
    let (n_x, n_u) = match records.first() {
        Some(r) => (r.states[0].len(), r.controls.first().map_or(0, DVector::len)),
        None => (0, 0),
    };
    let mut out = String::from("sample,timestep");
    for i in 0..n_x {
        write!(out, ",x{i}").unwrap();
    }
    for i in 0..n_u {
        write!(out, ",u{i}").unwrap();
    }
    for t in &templates {
        write!(out, ",{t}").unwrap();
    }
    out.push('\n');

    // (timestep, template column) -> row index
    let horizon = cs.horizon();
    let mut cell: Vec<Vec<Option<usize>>> = vec![vec![None; templates.len()]; horizon + 1];
    for (j, row) in cs.rows().iter().enumerate() {
        let col = templates.iter().position(|t| *t == row.template_label()).expect("template listed");
        cell[row.timestep][col] = Some(j);
    }

    for (s, rec) in records.iter().enumerate() {
        let values = if rec.constraint_values.len() == cs.len() { rec.constraint_values.clone() } else { cs.evaluate_states(&rec.states) };
        for (k, x) in rec.states.iter().enumerate() {
            write!(out, "{s},{k}").unwrap();
            for v in x.iter() {
                write!(out, ",{v:.16e}").unwrap();
            }
            for i in 0..n_u {
                match rec.controls.get(k) {
                    Some(u) => write!(out, ",{:.16e}", u[i]).unwrap(),
                    None => out.push(','),
                }
            }
            for c in cell[k].iter() {
                match c {
                    Some(j) => write!(out, ",{:.16e}", values[*j]).unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Outcome of [`run_to_dir`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub stats: Stats,
}

fn manifest(scn: &Scenario, artifacts: &[&str], partial: bool, error: Option<String>) -> Manifest {
    Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        scenario: scn.clone(),
        artifacts: artifacts.iter().map(|s| s.to_string()).collect(),
        partial,
        error,
    }
}

/// Run one scenario (no sweep) and write its artifacts to `out_dir`.
/// On failure a partial manifest with the error and any solve log is written
/// before the error is returned.
pub fn run_to_dir(scn: &Scenario, out_dir: &Path, dump_conic: bool) -> Result<RunSummary> {
    fs::create_dir_all(out_dir)?;
    let result = match execute(scn, dump_conic) {
        Ok(r) => r,
        Err(e) => {
            let mut written = Vec::new();
            if let Error::Solve { log, .. } = &e {
                write_atomic(out_dir, "solve_log.json", &json(&[PhaseLog { mode: scn.mode, log: (**log).clone() }]))?;
                written.push("solve_log.json");
            }
            write_atomic(out_dir, "manifest.json", &json(&manifest(scn, &written, true, Some(e.to_string()))))?;
            return Err(e);
        }
    };
    let cs = &result.constraints;
    let last = result.final_phase();
    let mut artifacts = vec!["policy.json", "solve_log.json", "rollouts.csv", "stats.json"];

    let policy: PolicyRecord = last.solve.policy.to_record();
    write_atomic(out_dir, "policy.json", &json(&policy))?;
    let logs: Vec<PhaseLog> = result.phases.iter().map(|p| PhaseLog { mode: p.mode, log: p.solve.log.clone() }).collect();
    write_atomic(out_dir, "solve_log.json", &json(&logs))?;
    write_atomic(out_dir, "rollouts.csv", rollouts_csv(&last.records, cs).as_bytes())?;
    if let Some(sets) = &result.error_sets {
        let recs: Vec<ErrorEllipsoidRecord> = sets.iter().enumerate().map(|(k, e)| e.to_record(k)).collect();
        write_atomic(out_dir, "error_sets.json", &json(&recs))?;
        write_atomic(out_dir, "rollouts_nrto.csv", rollouts_csv(&result.phases[0].records, cs).as_bytes())?;
        artifacts.extend(["error_sets.json", "rollouts_nrto.csv"]);
    }
    if let Some(d) = &result.conic_dump {
        write_atomic(out_dir, "conic_dump.txt", d.join("\n").as_bytes())?;
        artifacts.push("conic_dump.txt");
    }
    let stats = result.stats();
    write_atomic(out_dir, "stats.json", &json(&stats))?;
    artifacts.push("manifest.json");
    write_atomic(out_dir, "manifest.json", &json(&manifest(scn, &artifacts, false, None)))?;
    Ok(RunSummary { out_dir: out_dir.to_path_buf(), stats })
}

/// One line of `sweep.json` / `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub mode: Mode,
    pub satisfaction: f64,
    pub n_satisfied: usize,
    pub n_samples: usize,
    /// NRTO satisfaction of the first phase in nrto-le runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_phase_satisfaction: Option<f64>,
    pub dir: String,
}

/// Directory name used for one sweep point.
pub fn sweep_dir_name(tau: f64) -> String {
    format!("tau_{tau}")
}

/// Run every point of `scn.sweep` into its own subdirectory and write
/// `sweep.json` and `sweep.csv` next to them.
pub fn run_sweep(scn: &Scenario, out_dir: &Path, dump_conic: bool) -> Result<Vec<SweepRow>> {
    let sweep = scn.sweep.clone().ok_or_else(|| Error::invalid("scenario has no sweep"))?;
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for tau in sweep.values()? {
        let mut point = scn.clone();
        point.sweep = None;
        point.uncertainty.tau = tau;
        if !point.name.is_empty() {
            point.name = format!("{}@tau={tau}", scn.name);
        }
        let dir = sweep_dir_name(tau);
        log::info!("sweep point tau = {tau}");
        let summary = run_to_dir(&point, &out_dir.join(&dir), dump_conic)?;
        rows.push(SweepRow {
            tau,
            mode: point.mode,
            satisfaction: summary.stats.satisfaction,
            n_satisfied: summary.stats.n_satisfied,
            n_samples: summary.stats.n_samples,
            first_phase_satisfaction: summary.stats.first_phase.as_ref().map(|p| p.satisfaction),
            dir,
        });
    }
    write_atomic(out_dir, "sweep.json", &json(&rows))?;
    let mut csv = String::from("tau,mode,satisfaction,n_satisfied,n_samples,first_phase_satisfaction\n");
    for r in &rows {
        let first = r.first_phase_satisfaction.map(|v| format!("{v:.16e}")).unwrap_or_default();
        writeln!(csv, "{:.16e},{},{:.16e},{},{},{first}", r.tau, r.mode.as_str(), r.satisfaction, r.n_satisfied, r.n_samples).unwrap();
    }
    write_atomic(out_dir, "sweep.csv", csv.as_bytes())?;
    write_atomic(out_dir, "manifest.json", &json(&manifest(scn, &["sweep.json", "sweep.csv", "manifest.json"], false, None)))?;
    Ok(rows)
}
