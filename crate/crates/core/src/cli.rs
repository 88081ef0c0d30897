//! `codesign` command line. Exit codes: 0 success, 1 domain failure
//! (infeasible, diverged, invalid model), 2 usage or input-format error.
//! Every run ends with a one-line JSON summary on stdout.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde_json::{json, Value};

use crate::codesign::{render_table, run_study, CodesignReport, StudySpec};
use crate::model::{load_model, validate_model, RobotModel, Transmission, NUM_GEARS};
use crate::ocp::{build_nlp, Integrator, OcProblemSpec, Space, Trajectory, TrajectoryFile};
use crate::solver::{rollout, solve_motion, SolverConfig};

#[derive(Debug, Parser)]
#[command(name = "codesign", version, about = "Gear-ratio and motion co-design for belt-driven arms")]
pub struct Cli {
    /// Worker threads for concurrent solves (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a model file against all invariants.
    ModelValidate {
        /// Model JSON; the bundled reference arm when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Solve one motion problem for fixed gear ratios.
    Motion(MotionArgs),
    /// Run the bi-level gear-ratio search.
    Codesign(CodesignArgs),
    /// Re-simulate a stored trajectory and report its deviation.
    Rollout(RolloutArgs),
    /// Convert a trajectory between JSON and CSV, or dump generation logs.
    Export(ExportArgs),
    /// Summarize a co-design report.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long)]
    pub max_outer: Option<usize>,
    #[arg(long)]
    pub max_inner: Option<usize>,
    #[arg(long)]
    pub tol_con: Option<f64>,
    #[arg(long)]
    pub tol_stat: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let d = SolverConfig::default();
        SolverConfig {
            max_outer_iters: self.max_outer.unwrap_or(d.max_outer_iters),
            max_inner_iters: self.max_inner.unwrap_or(d.max_inner_iters),
            tol_constraint: self.tol_con.unwrap_or(d.tol_constraint),
            tol_stationarity: self.tol_stat.unwrap_or(d.tol_stationarity),
            ..d
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ProblemArgs {
    /// Motion duration in seconds.
    #[arg(long)]
    pub horizon: Option<f64>,
    /// Number of transcription intervals.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub integrator: Option<Integrator>,
}

impl ProblemArgs {
    fn spec(&self, space: Space) -> OcProblemSpec {
        let mut spec = OcProblemSpec::pick_and_place(space);
        if let Some(h) = self.horizon {
            spec.horizon = h;
        }
        if let Some(n) = self.steps {
            spec.steps = n;
        }
        if let Some(i) = self.integrator {
            spec.integrator = i;
        }
        spec
    }
}

#[derive(Debug, Args)]
pub struct MotionArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, default_value = "actuation")]
    pub space: Space,
    /// Payload mass, kg.
    #[arg(long, default_value_t = 0.0)]
    pub payload: f64,
    /// Four comma-separated gear ratios; the model's own when omitted.
    #[arg(long, value_parser = parse_gears)]
    pub gears: Option<Gears>,
    /// Trajectory JSON path; a CSV with the same stem is written next to it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct CodesignArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Formulations to search; both when omitted.
    #[arg(long, value_delimiter = ',')]
    pub space: Vec<Space>,
    /// Comma-separated payload masses, kg.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 1.0, 3.0])]
    pub payloads: Vec<f64>,
    /// Independent runs per cell.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    /// First seed; run `s` uses `seed + s`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub pop: usize,
    #[arg(long, default_value_t = 30)]
    pub gens: usize,
    /// Initial step size relative to the design box.
    #[arg(long, default_value_t = 0.3)]
    pub sigma0: f64,
    /// Report JSON path; generation logs go to `<stem>_logs/`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub problem: ProblemArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Trajectory JSON written by `motion`.
    #[arg(long)]
    pub traj: PathBuf,
    /// Largest accepted state deviation.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("input").required(true).args(["traj", "report"])))]
pub struct ExportArgs {
    /// Trajectory JSON or CSV.
    #[arg(long)]
    pub traj: Option<PathBuf>,
    /// Co-design report; its generation logs are written as CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Format,
    /// Output file, or directory for generation logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Space of a CSV trajectory being converted to JSON.
    #[arg(long, default_value = "joint")]
    pub space: Space,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Print the before/after table.
    #[arg(long)]
    pub table: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gears(pub [f64; NUM_GEARS]);

fn parse_gears(s: &str) -> Result<Gears, String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    let arr: [f64; NUM_GEARS] =
        vals.try_into().map_err(|v: Vec<f64>| format!("expected {NUM_GEARS} gear ratios, got {}", v.len()))?;
    Ok(Gears(arr))
}

/// Failure of a subcommand, carrying the summary fields gathered so far.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
    pub summary: Value,
}

impl Failure {
    fn usage(message: impl ToString) -> Self {
        Failure { code: 2, message: message.to_string(), summary: json!({}) }
    }

    fn domain(message: impl ToString, summary: Value) -> Self {
        Failure { code: 1, message: message.to_string(), summary }
    }
}

type Outcome = Result<Value, Failure>;

/// Parses `args`, runs the subcommand and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            let mut summary = json!({ "command": Value::Null, "ok": code == 0, "exit_code": code });
            if code != 0 {
                summary["error"] = json!(e.kind().to_string());
            }
            println!("{summary}");
            return code;
        }
    };
    if let Some(j) = cli.jobs {
        if j == 0 {
            return finish("", Err(Failure::usage("--jobs must be at least 1")));
        }
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let (name, outcome) = match &cli.command {
        Command::ModelValidate { model } => ("model-validate", model_validate(model.as_deref())),
        Command::Motion(a) => ("motion", motion(a)),
        Command::Codesign(a) => ("codesign", codesign(a)),
        Command::Rollout(a) => ("rollout", rollout_cmd(a)),
        Command::Export(a) => ("export", export(a)),
        Command::Report(a) => ("report", report(a)),
    };
    finish(name, outcome)
}

fn finish(name: &str, outcome: Outcome) -> i32 {
    let (code, mut summary) = match outcome {
        Ok(v) => (0, v),
        Err(f) => {
            eprintln!("error: {}", f.message);
            let mut v = f.summary;
            v["error"] = json!(f.message);
            (f.code, v)
        }
    };
    let mut line = json!({ "command": name, "ok": code == 0, "exit_code": code });
    if let (Value::Object(dst), Value::Object(src)) = (&mut line, &mut summary) {
        dst.append(src);
    }
    println!("{line}");
    code
}

fn model_or_reference(path: Option<&Path>) -> Result<RobotModel, Failure> {
    match path {
        Some(p) => load_model(p).map_err(Failure::usage),
        None => Ok(RobotModel::reference()),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn read_file(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))
}

fn model_validate(path: Option<&Path>) -> Outcome {
    let text = match path {
        Some(p) => read_file(p)?,
        None => RobotModel::reference().to_json_string(),
    };
    let model: RobotModel = serde_json::from_str(&text)
        .map_err(|e| Failure::domain(format!("cannot parse model: {e}"), json!({ "valid": false })))?;
    let diags = validate_model(&model);
    for d in &diags {
        println!("{d}");
    }
    let summary = json!({ "valid": diags.is_empty(), "name": model.name, "diagnostics": diags });
    if diags.is_empty() {
        println!("model '{}' is valid ({} joints)", model.name, model.n_joints());
        Ok(summary)
    } else {
        Err(Failure::domain(format!("{} invariant violation(s)", diags.len()), summary))
    }
}

/// Peak `|tau_u,i| / limit_i` per motor over the trajectory.
fn torque_utilization(model: &RobotModel, tr: &Transmission, traj: &Trajectory) -> Vec<f64> {
    let lim = &model.limits;
    let cap: Vec<f64> = lim.tau_u_min.iter().zip(&lim.tau_u_max).map(|(lo, hi)| lo.abs().max(hi.abs())).collect();
    let mut peak = vec![0.0_f64; cap.len()];
    for u in &traj.controls {
        let u = DVector::from_column_slice(u);
        let tau_u = match traj.space {
            Space::Actuation => u,
            Space::Joint => tr.motor_torque(&u),
        };
        for (p, t) in peak.iter_mut().zip(tau_u.iter()) {
            *p = p.max(t.abs());
        }
    }
    peak.iter().zip(&cap).map(|(p, c)| if *c > 0.0 { p / c } else { 0.0 }).collect()
}

fn motion(a: &MotionArgs) -> Outcome {
    let model = model_or_reference(a.model.as_deref())?;
    if !(a.payload >= 0.0 && a.payload.is_finite()) {
        return Err(Failure::usage("--payload must be a finite value >= 0"));
    }
    let config = a.solver.config();
    config.validate().map_err(Failure::usage)?;
    let gears = a.gears.map_or(model.transmission.gear_ratios, |g| g.0);
    let tr = Transmission::from_gears(&gears).map_err(Failure::usage)?;
    let spec = a.problem.spec(a.space);
    let loaded = model.with_payload(a.payload);
    let (nlp, result) = solve_motion(&loaded, &tr, &spec, &config).map_err(Failure::usage)?;
    let audit = rollout(&nlp, &result.trajectory);
    let util = torque_utilization(&loaded, &tr, &result.trajectory);
    let summary = json!({
        "space": a.space,
        "payload": a.payload,
        "gear_ratios": gears,
        "status": result.status,
        "cost": result.objective,
        "constraint_violation": result.constraint_violation,
        "stationarity": result.stationarity,
        "max_state_deviation": audit.max_state_deviation,
        "terminal_error": audit.terminal_error,
        "max_torque_utilization": util,
        "iterations": result.iterations,
        "wall_time": result.wall_time,
    });
    println!("status: {}", result.status);
    println!("cost: {:.6}", result.objective);
    let util_txt: Vec<String> = util.iter().map(|u| format!("{:.1}%", 100.0 * u)).collect();
    println!("max torque utilization per motor: [{}]", util_txt.join(", "));
    if let Some(out) = &a.out {
        let file = TrajectoryFile {
            model: model.name.clone(),
            gear_ratios: gears.to_vec(),
            payload_mass: a.payload,
            spec,
            cost: Some(result.objective),
            status: Some(result.status.to_string()),
            trajectory: result.trajectory.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("trajectory serializes");
        write_file(out, text.as_bytes())?;
        let mut csv = Vec::new();
        result.trajectory.write_csv(&mut csv).map_err(Failure::usage)?;
        write_file(&out.with_extension("csv"), &csv)?;
    }
    if result.converged() {
        Ok(summary)
    } else {
        Err(Failure::domain(format!("solver did not converge: {}", result.status), summary))
    }
}

fn codesign(a: &CodesignArgs) -> Outcome {
    let model = model_or_reference(a.model.as_deref())?;
    let spaces = if a.space.is_empty() { vec![Space::Joint, Space::Actuation] } else { a.space.clone() };
    let mut study = StudySpec {
        model_path: a.model.clone(),
        spaces,
        payloads: a.payloads.clone(),
        seeds: a.seeds,
        solver: a.solver.config(),
        ocp: a.problem.spec(Space::Joint),
        ..StudySpec::default()
    };
    study.cmaes.population = a.pop;
    study.cmaes.generations = a.gens;
    study.cmaes.sigma0 = a.sigma0;
    study.cmaes.seed = a.seed;
    study.cmaes.bounds_lo = model.transmission.bounds_lo.to_vec();
    study.cmaes.bounds_hi = model.transmission.bounds_hi.to_vec();
    study.validate().map_err(Failure::usage)?;
    let report = run_study(&study, &model).map_err(Failure::usage)?;
    print!("{}", render_table(&report));

    let mut logs = Vec::new();
    if let Some(out) = &a.out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(out, text.as_bytes())?;
        logs = write_logs(&report, &log_dir(out))?;
    }
    let feasible = report.cells.iter().filter(|c| c.best.is_some()).count();
    let rows = row_summaries(&report);
    let summary = json!({
        "cells": report.cells.len(),
        "feasible_cells": feasible,
        "rows": rows,
        "report": a.out,
        "logs": logs.len(),
    });
    if feasible == 0 {
        Err(Failure::domain("every cell is infeasible", summary))
    } else {
        Ok(summary)
    }
}

fn row_summaries(report: &CodesignReport) -> Vec<Value> {
    report
        .rows
        .iter()
        .map(|r| {
            json!({
                "space": r.space,
                "payload": r.payload,
                "before_cost": r.before_cost,
                "after_cost": r.after.as_ref().map(|c| c.fitness),
                "after_gears": r.after.as_ref().map(|c| c.gear_ratios),
            })
        })
        .collect()
}

fn log_dir(report_path: &Path) -> PathBuf {
    let stem = report_path.file_stem().map_or("report".into(), |s| s.to_string_lossy().into_owned());
    report_path.with_file_name(format!("{stem}_logs"))
}

fn write_logs(report: &CodesignReport, dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut written = Vec::new();
    for cell in &report.cells {
        let path = dir.join(format!("{}_{}kg_seed{}.csv", cell.space, cell.payload, cell.seed));
        let mut buf = Vec::new();
        cell.write_log_csv(&mut buf).map_err(Failure::usage)?;
        write_file(&path, &buf)?;
        written.push(path);
    }
    Ok(written)
}

fn rollout_cmd(a: &RolloutArgs) -> Outcome {
    let model = model_or_reference(a.model.as_deref())?;
    let file: TrajectoryFile = serde_json::from_str(&read_file(&a.traj)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.traj.display())))?;
    let gears: [f64; NUM_GEARS] = file
        .gear_ratios
        .as_slice()
        .try_into()
        .map_err(|_| Failure::usage("trajectory file must carry four gear ratios"))?;
    let tr = Transmission::from_gears(&gears).map_err(Failure::usage)?;
    let loaded = model.with_payload(file.payload_mass);
    let nlp = build_nlp(&loaded, &tr, &file.spec).map_err(Failure::usage)?;
    nlp.pack(&file.trajectory).map_err(Failure::usage)?;
    let audit = rollout(&nlp, &file.trajectory);
    let summary = json!({
        "max_state_deviation": audit.max_state_deviation,
        "max_bound_violation": audit.max_bound_violation,
        "terminal_error": audit.terminal_error,
        "diverged": audit.diverged,
    });
    println!(
        "max state deviation {:.3e}, bound violation {:.3e}, terminal error {:.3e}",
        audit.max_state_deviation, audit.max_bound_violation, audit.terminal_error
    );
    if audit.diverged || !(audit.max_state_deviation <= a.tol) {
        Err(Failure::domain("rollout does not reproduce the stored states", summary))
    } else {
        Ok(summary)
    }
}

fn export(a: &ExportArgs) -> Outcome {
    if let Some(path) = &a.report {
        if a.format != Format::Csv {
            return Err(Failure::usage("generation logs export only as csv"));
        }
        let report: CodesignReport = serde_json::from_str(&read_file(path)?)
            .map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?;
        let logs = write_logs(&report, &a.out)?;
        return Ok(json!({ "logs": logs }));
    }
    let path = a.traj.as_ref().expect("clap enforces one input");
    let text = read_file(path)?;
    let traj = match serde_json::from_str::<Value>(&text) {
        Ok(v) if v.get("trajectory").is_some() => {
            serde_json::from_value::<TrajectoryFile>(v).map_err(Failure::usage)?.trajectory
        }
        Ok(v) => serde_json::from_value::<Trajectory>(v).map_err(Failure::usage)?,
        Err(_) => Trajectory::read_csv(text.as_bytes(), a.space).map_err(Failure::usage)?,
    };
    if traj.states.len() != traj.controls.len() + 1 || traj.times.len() != traj.states.len() {
        return Err(Failure::usage("trajectory needs N+1 states and times and N controls"));
    }
    let bytes = match a.format {
        Format::Csv => {
            let mut buf = Vec::new();
            traj.write_csv(&mut buf).map_err(Failure::usage)?;
            buf
        }
        Format::Json => serde_json::to_vec_pretty(&traj).expect("trajectory serializes"),
    };
    write_file(&a.out, &bytes)?;
    Ok(json!({ "out": a.out, "nodes": traj.states.len() }))
}

fn report(a: &ReportArgs) -> Outcome {
    let report: CodesignReport = serde_json::from_str(&read_file(&a.input)?)
        .map_err(|e| Failure::usage(format!("{}: {e}", a.input.display())))?;
    if a.table {
        print!("{}", render_table(&report));
    }
    let rows = row_summaries(&report);
    Ok(json!({ "rows": rows, "table_rows": 2 * report.rows.len() }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gear_parsing() {
        assert_eq!(parse_gears("6,3,1,1").unwrap(), Gears([6.0, 3.0, 1.0, 1.0]));
        assert!(parse_gears("6,3,1").is_err());
        assert!(parse_gears("6,3,x,1").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
