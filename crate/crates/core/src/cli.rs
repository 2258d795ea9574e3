//! Command-line front end of the `rtopt` binary.

use std::path::PathBuf;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::models::model_names;
use crate::run::{run_sweep, run_to_dir, Manifest};
use crate::scenario::{Scenario, SweepSpec, SCHEMA};
use crate::sco::Mode;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_GATE: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "rtopt", version, about = "Robust trajectory optimization with affine disturbance feedback")]
pub struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a scenario, validate it by Monte Carlo and write artifacts.
    Run(RunArgs),
    /// Parse and validate a scenario, printing it with defaults filled in.
    Validate {
        scenario: PathBuf,
    },
    /// Print the JSON schema of scenario files.
    Schema,
    /// List the available dynamics models.
    Models,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Scenario JSON file.
    #[arg(long, required_unless_present = "manifest", conflicts_with = "manifest")]
    pub scenario: Option<PathBuf>,
    /// Replay the effective scenario recorded in a previous run's manifest.json.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Number of validation rollouts.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Master seed of the validation and error-fit disturbances.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// Sweep a parameter, e.g. `tau=0.01:0.01:0.10`.
    #[arg(long)]
    pub sweep: Option<String>,
    /// Draw validation disturbances on the boundary of the uncertainty set.
    #[arg(long)]
    pub boundary_sampling: bool,
    /// Write every conic subproblem summary to conic_dump.txt.
    #[arg(long)]
    pub dump_conic: bool,
    /// Fail with exit code 4 unless the final satisfaction passes, e.g. `>=0.97`.
    #[arg(long)]
    pub gate: Option<Gate>,
}

/// A threshold on the satisfaction fraction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub op: GateOp,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateOp {
    Ge,
    Gt,
    Le,
    Lt,
}

impl Gate {
    pub fn passes(&self, x: f64) -> bool {
        match self.op {
            GateOp::Ge => x >= self.value,
            GateOp::Gt => x > self.value,
            GateOp::Le => x <= self.value,
            GateOp::Lt => x < self.value,
        }
    }
}

impl FromStr for Gate {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim();
        let (op, rest) = [(">=", GateOp::Ge), ("<=", GateOp::Le), (">", GateOp::Gt), ("<", GateOp::Lt)]
            .into_iter()
            .find_map(|(p, op)| s.strip_prefix(p).map(|r| (op, r)))
            .ok_or_else(|| format!("gate '{s}' must start with >=, >, <= or <"))?;
        let value: f64 = rest.trim().parse().map_err(|_| format!("gate '{s}' has no numeric threshold"))?;
        Ok(Gate { op, value })
    }
}

/// Exit code for an error raised by a run.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Validation(_) | Error::InvalidArgument(_) | Error::Json(_) => EXIT_VALIDATION,
        _ => EXIT_SOLVER,
    }
}

/// Scenario for `run`, with command-line overrides applied.
pub fn effective_scenario(args: &RunArgs) -> Result<Scenario> {
    let mut scn = match (&args.scenario, &args.manifest) {
        (Some(p), _) => Scenario::from_path(p)?,
        (None, Some(m)) => Manifest::from_path(m)?.scenario,
        (None, None) => return Err(Error::Validation("either --scenario or --manifest is required".into())),
    };
    if let Some(m) = args.mode {
        scn.mode = m;
    }
    if let Some(n) = args.samples {
        scn.samples = n;
    }
    if let Some(s) = args.seed {
        scn.seed = s;
    }
    if args.boundary_sampling {
        scn.boundary_sampling = true;
    }
    if let Some(sw) = &args.sweep {
        scn.sweep = Some(SweepSpec::parse(sw)?);
    }
    scn.validate()?;
    Ok(scn)
}

/// Run the parsed command and return the process exit code.
pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Schema => {
            print!("{SCHEMA}");
            EXIT_OK
        }
        Command::Models => {
            for m in model_names() {
                println!("{m}");
            }
            EXIT_OK
        }
        Command::Validate { scenario } => match Scenario::from_path(&scenario) {
            Ok(s) => {
                println!("{}", s.to_json());
                EXIT_OK
            }
            Err(e) => report(&e),
        },
        Command::Run(args) => run(&args),
    }
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

fn run(args: &RunArgs) -> i32 {
    let scn = match effective_scenario(args) {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    let satisfactions: Vec<f64> = if scn.sweep.is_some() {
        match run_sweep(&scn, &args.out_dir, args.dump_conic) {
            Ok(rows) => {
                for r in &rows {
                    println!("tau {}: {} satisfaction {:.4} ({}/{})", r.tau, r.mode.as_str(), r.satisfaction, r.n_satisfied, r.n_samples);
                }
                rows.iter().map(|r| r.satisfaction).collect()
            }
            Err(e) => return report(&e),
        }
    } else {
        match run_to_dir(&scn, &args.out_dir, args.dump_conic) {
            Ok(s) => {
                if let Some(f) = &s.stats.first_phase {
                    println!("{}: satisfaction {:.4} ({}/{})", f.mode.as_str(), f.satisfaction, f.n_satisfied, f.n_samples);
                }
                let st = &s.stats;
                println!("{}: satisfaction {:.4} ({}/{})", st.mode.as_str(), st.satisfaction, st.n_satisfied, st.n_samples);
                println!("artifacts in {}", s.out_dir.display());
                vec![st.satisfaction]
            }
            Err(e) => return report(&e),
        }
    };
    match args.gate {
        Some(g) if !satisfactions.iter().all(|&x| g.passes(x)) => {
            eprintln!("gate failed: satisfaction {satisfactions:?} does not satisfy {g:?}");
            EXIT_GATE
        }
        _ => EXIT_OK,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn gate_parsing() {
        let g: Gate = ">=0.97".parse().unwrap();
        assert_eq!(g, Gate { op: GateOp::Ge, value: 0.97 });
        assert!(g.passes(0.97) && !g.passes(0.969));
        let g: Gate = "< 0.2".parse().unwrap();
        assert!(g.passes(0.1) && !g.passes(0.2));
        assert!("0.5".parse::<Gate>().is_err());
        assert!(">=x".parse::<Gate>().is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Validation("x".into())), EXIT_VALIDATION);
        assert_eq!(exit_code(&Error::Domain { step: Some(1), msg: "x".into() }), EXIT_SOLVER);
    }
}
