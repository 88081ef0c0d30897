//! Bi-level co-design: CMA-ES proposes gear ratios, each proposal is scored by
//! the cost of an optimal motion for the resulting transmission.

use std::io::Write;
use std::path::PathBuf;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmaes::{penalized_fitness, Cmaes, CmaesConfig, CmaesError, DesignCandidate};
use crate::model::{check_design, joint_limits_from_actuation, load_model, ModelError, RobotModel, Transmission, NUM_GEARS};
use crate::ocp::{OcProblemSpec, OcpError, Space};
use crate::solver::{solve_motion, SolveResult, SolveStatus, SolverConfig};

#[derive(Debug, Error)]
pub enum CodesignError {
    #[error("invalid study: {0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cmaes(#[from] CmaesError),
    #[error(transparent)]
    Ocp(#[from] OcpError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// What to run: every combination of space, payload and seed is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySpec {
    /// Model file; the bundled reference arm when absent.
    pub model_path: Option<PathBuf>,
    pub spaces: Vec<Space>,
    /// Payload masses in kg.
    pub payloads: Vec<f64>,
    /// Number of seeds; cell `s` uses `cmaes.seed + s`.
    pub seeds: usize,
    pub cmaes: CmaesConfig,
    pub solver: SolverConfig,
    /// Motion problem; its `space` is overridden per cell.
    pub ocp: OcProblemSpec,
}

impl Default for StudySpec {
    fn default() -> Self {
        StudySpec {
            model_path: None,
            spaces: vec![Space::Joint, Space::Actuation],
            payloads: vec![0.0, 1.0, 3.0],
            seeds: 5,
            cmaes: CmaesConfig::default(),
            solver: SolverConfig::default(),
            ocp: OcProblemSpec::pick_and_place(Space::Joint),
        }
    }
}

impl StudySpec {
    /// 20 candidates for 10 generations, 2 seeds.
    pub fn desk_scale(payloads: Vec<f64>) -> Self {
        StudySpec { payloads, seeds: 2, cmaes: CmaesConfig::desk_scale(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), CodesignError> {
        let bad = |m: &str| Err(CodesignError::Invalid(m.to_string()));
        if self.spaces.is_empty() {
            return bad("at least one space is required");
        }
        if self.payloads.is_empty() || self.payloads.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return bad("payloads must be a non-empty list of finite values >= 0");
        }
        if self.seeds == 0 {
            return bad("at least one seed is required");
        }
        if self.cmaes.bounds_lo.len() != NUM_GEARS {
            return bad("design bounds must have four entries");
        }
        self.cmaes.validate()?;
        self.solver.validate().map_err(CodesignError::Invalid)?;
        Ok(())
    }

    pub fn load_model(&self) -> Result<RobotModel, CodesignError> {
        Ok(match &self.model_path {
            Some(p) => load_model(p)?,
            None => RobotModel::reference(),
        })
    }
}

/// Outcome of scoring one design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignEvaluation {
    pub cost: f64,
    pub feasible: bool,
    /// `None` when the design was rejected before solving.
    pub status: Option<SolveStatus>,
    #[serde(skip)]
    pub result: Option<SolveResult>,
}

/// Scores gear ratios `g` for one formulation and payload: the motion cost
/// if the inner solve converges, the penalty otherwise.
pub fn evaluate_design(
    g: &[f64; NUM_GEARS],
    space: Space,
    payload: f64,
    model: &RobotModel,
    ocp: &OcProblemSpec,
    solver: &SolverConfig,
    penalty: f64,
) -> DesignEvaluation {
    let tr = &model.transmission;
    let rejected = DesignEvaluation { cost: penalty, feasible: false, status: None, result: None };
    if check_design(g, &tr.bounds_lo, &tr.bounds_hi).is_err() {
        return rejected;
    }
    let Ok(transmission) = Transmission::from_gears(g) else {
        return rejected;
    };
    let loaded = model.with_payload(payload);
    match solve_motion(&loaded, &transmission, &ocp.with_space(space), solver) {
        Ok((_, result)) => {
            let ok = result.converged() && result.objective.is_finite();
            DesignEvaluation {
                cost: if ok { result.objective } else { penalty },
                feasible: ok,
                status: Some(result.status),
                result: Some(result),
            }
        }
        Err(_) => DesignEvaluation { status: Some(SolveStatus::NumericalFailure), ..rejected },
    }
}

/// One row of the generation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// 1-based generation.
    pub generation: usize,
    /// 0-based index over all evaluations of the cell.
    pub eval_index: usize,
    pub gear_ratios: [f64; NUM_GEARS],
    pub fitness: f64,
    pub feasible: bool,
    pub status: Option<SolveStatus>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSummary {
    pub generation: usize,
    pub generation_best: f64,
    pub best_so_far: f64,
    pub feasible: usize,
    pub sigma: f64,
    pub mean: Vec<f64>,
}

/// Result of one (space, payload, seed) search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub space: Space,
    pub payload: f64,
    pub seed: u64,
    /// Best candidate found by the search, penalized ones included.
    pub search_best: DesignCandidate,
    /// Reported design: the better of the search result and the original
    /// design, `None` if neither is feasible.
    pub best: Option<DesignCandidate>,
    /// Set when the original design beat every searched candidate.
    pub baseline_retained: bool,
    pub generations: Vec<GenerationSummary>,
    pub evaluations: Vec<EvaluationRecord>,
}

impl CellReport {
    pub fn best_cost(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.fitness)
    }

    /// Writes the generation log: `generation, eval_index, g1..g4, fitness, feasible`.
    pub fn write_log_csv<W: Write>(&self, w: W) -> Result<(), CodesignError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["generation", "eval_index", "g1", "g2", "g3", "g4", "fitness", "feasible"])?;
        for e in &self.evaluations {
            let mut row = vec![e.generation.to_string(), e.eval_index.to_string()];
            row.extend(e.gear_ratios.iter().map(|v| format!("{v:?}")));
            row.push(format!("{:?}", e.fitness));
            row.push(e.feasible.to_string());
            wr.write_record(&row)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Before/after summary of one (space, payload) pair across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub space: Space,
    pub payload: f64,
    pub before_gears: [f64; NUM_GEARS],
    pub before_cost: Option<f64>,
    pub before_status: Option<SolveStatus>,
    /// Best design over all seeds; `None` when every seed is infeasible.
    pub after: Option<DesignCandidate>,
    /// Reported cost per seed, in seed order.
    pub after_per_seed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesignReport {
    pub study: StudySpec,
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellReport>,
}

impl CodesignReport {
    pub fn cell(&self, space: Space, payload: f64, seed: u64) -> Option<&CellReport> {
        self.cells.iter().find(|c| c.space == space && c.payload == payload && c.seed == seed)
    }

    pub fn row(&self, space: Space, payload: f64) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.space == space && r.payload == payload)
    }
}

fn candidate(g: [f64; NUM_GEARS], e: &DesignEvaluation) -> DesignCandidate {
    DesignCandidate { gear_ratios: g, fitness: e.cost, feasible: e.feasible, solve_status: e.status.map(|s| s.to_string()) }
}

fn to_gears(x: &[f64]) -> [f64; NUM_GEARS] {
    let mut g = [0.0; NUM_GEARS];
    g.copy_from_slice(&x[..NUM_GEARS]);
    g
}

/// Runs CMA-ES for one cell. `baseline` is the evaluation of the original design.
pub fn run_cell(
    study: &StudySpec,
    model: &RobotModel,
    space: Space,
    payload: f64,
    seed: u64,
    baseline: &DesignCandidate,
) -> Result<CellReport, CodesignError> {
    let cfg = CmaesConfig { seed, ..study.cmaes.clone() };
    let mut es = Cmaes::new(&cfg)?;
    let lo = model.transmission.bounds_lo;
    let hi = model.transmission.bounds_hi;
    let mut evaluations = Vec::with_capacity(cfg.population * cfg.generations);
    let mut generations = Vec::with_capacity(cfg.generations);
    let mut search_best: Option<DesignCandidate> = None;
    for gen in 1..=cfg.generations {
        let xs = es.ask();
        let scored: Vec<(f64, DesignEvaluation)> = xs
            .par_iter()
            .map(|x| {
                let g = to_gears(x);
                let mut eval = None;
                let f = penalized_fitness(&g, &lo, &hi, cfg.penalty_value, |g| {
                    let e = evaluate_design(g, space, payload, model, &study.ocp, &study.solver, cfg.penalty_value);
                    let cost = e.feasible.then_some(e.cost);
                    eval = Some(e);
                    cost
                });
                let eval = eval.unwrap_or(DesignEvaluation {
                    cost: cfg.penalty_value,
                    feasible: false,
                    status: None,
                    result: None,
                });
                (f, eval)
            })
            .collect();
        let fitness: Vec<f64> = scored.iter().map(|(f, _)| *f).collect();
        es.tell(&fitness)?;
        let mut feasible = 0;
        for (x, (f, e)) in xs.iter().zip(&scored) {
            let g = to_gears(x);
            feasible += e.feasible as usize;
            let c = DesignCandidate { fitness: *f, ..candidate(g, e) };
            if search_best.as_ref().is_none_or(|b| c.fitness < b.fitness) {
                search_best = Some(c);
            }
            evaluations.push(EvaluationRecord {
                generation: gen,
                eval_index: evaluations.len(),
                gear_ratios: g,
                fitness: *f,
                feasible: e.feasible,
                status: e.status,
            });
        }
        generations.push(GenerationSummary {
            generation: gen,
            generation_best: fitness.iter().copied().fold(f64::INFINITY, f64::min),
            best_so_far: es.best().map_or(f64::INFINITY, |(_, f)| f),
            feasible,
            sigma: es.sigma(),
            mean: es.mean(),
        });
    }
    let search_best = search_best.expect("at least one generation");
    let search_ok = search_best.feasible.then_some(&search_best);
    let base_ok = baseline.feasible.then_some(baseline);
    let (best, baseline_retained) = match (search_ok, base_ok) {
        (Some(s), Some(b)) if b.fitness < s.fitness => (Some(b.clone()), true),
        (Some(s), _) => (Some(s.clone()), false),
        (None, Some(b)) => (Some(b.clone()), true),
        (None, None) => (None, false),
    };
    Ok(CellReport { space, payload, seed, search_best, best, baseline_retained, generations, evaluations })
}

/// Runs every cell of the study. Cell failures are recorded as infeasible
/// results; only an invalid study is an error.
pub fn run_study(study: &StudySpec, model: &RobotModel) -> Result<CodesignReport, CodesignError> {
    study.validate()?;
    let original = model.transmission.gear_ratios;
    let penalty = study.cmaes.penalty_value;
    let pairs: Vec<(Space, f64)> =
        study.spaces.iter().flat_map(|&s| study.payloads.iter().map(move |&p| (s, p))).collect();
    let baselines: Vec<DesignCandidate> = pairs
        .par_iter()
        .map(|&(space, payload)| {
            let e = evaluate_design(&original, space, payload, model, &study.ocp, &study.solver, penalty);
            candidate(original, &e)
        })
        .collect();
    let jobs: Vec<(usize, u64)> = (0..pairs.len())
        .flat_map(|i| (0..study.seeds as u64).map(move |s| (i, study.cmaes.seed + s)))
        .collect();
    let cells = jobs
        .par_iter()
        .map(|&(i, seed)| run_cell(study, model, pairs[i].0, pairs[i].1, seed, &baselines[i]))
        .collect::<Result<Vec<_>, _>>()?;

    let rows = pairs
        .iter()
        .zip(&baselines)
        .map(|(&(space, payload), base)| {
            let mine: Vec<&CellReport> = cells.iter().filter(|c| c.space == space && c.payload == payload).collect();
            let after = mine
                .iter()
                .filter_map(|c| c.best.clone())
                .min_by(|a, b| a.fitness.total_cmp(&b.fitness));
            SummaryRow {
                space,
                payload,
                before_gears: original,
                before_cost: base.feasible.then_some(base.fitness),
                before_status: base.solve_status.as_deref().and_then(parse_status),
                after,
                after_per_seed: mine.iter().map(|c| c.best_cost()).collect(),
            }
        })
        .collect();
    Ok(CodesignReport { study: study.clone(), rows, cells })
}

fn parse_status(s: &str) -> Option<SolveStatus> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).ok()
}

/// Largest differential wrist torque `|tau_4|` the control box of `space`
/// admits with gear ratios `g`.
pub fn max_differential_torque(model: &RobotModel, g: &[f64; NUM_GEARS], space: Space) -> Result<f64, CodesignError> {
    let tr = Transmission::from_gears(g).map_err(OcpError::from)?;
    let lim = &model.limits;
    let last = model.n_joints() - 1;
    Ok(match space {
        Space::Joint => {
            let jl = joint_limits_from_actuation(tr.g(), &lim.tau_u_min, &lim.tau_u_max, &lim.qd_u_min, &lim.qd_u_max)
                .map_err(OcpError::from)?;
            jl.tau_min[last].abs().max(jl.tau_max[last].abs())
        }
        Space::Actuation => {
            // tau_4 = column 4 of G dotted with tau_u; maximize over the motor box.
            let col: DVector<f64> = tr.g().column(last).into();
            let reach = |sign: f64| -> f64 {
                col.iter()
                    .zip(lim.tau_u_min.iter().zip(&lim.tau_u_max))
                    .map(|(a, (lo, hi))| (sign * a * lo).max(sign * a * hi))
                    .sum()
            };
            reach(1.0).max(reach(-1.0))
        }
    })
}

/// Feasibility of the original design in both spaces at one payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub payload: f64,
    pub joint: DesignEvaluation,
    pub actuation: DesignEvaluation,
}

pub fn payload_sweep(
    model: &RobotModel,
    g: &[f64; NUM_GEARS],
    payloads: &[f64],
    ocp: &OcProblemSpec,
    solver: &SolverConfig,
) -> Vec<SweepPoint> {
    payloads
        .par_iter()
        .map(|&payload| {
            let eval = |space| evaluate_design(g, space, payload, model, ocp, solver, crate::cmaes::PENALTY);
            SweepPoint { payload, joint: eval(Space::Joint), actuation: eval(Space::Actuation) }
        })
        .collect()
}

/// Smallest swept payload at which the joint-space formulation fails while
/// the actuation-space formulation succeeds.
pub fn joint_threshold(sweep: &[SweepPoint]) -> Option<f64> {
    sweep
        .iter()
        .filter(|p| !p.joint.feasible && p.actuation.feasible)
        .map(|p| p.payload)
        .min_by(f64::total_cmp)
}

/// `[9, 5.62, 3, 1.8]` style: at most two decimals, trailing zeros dropped.
pub fn format_gears(g: &[f64]) -> String {
    let parts: Vec<String> = g
        .iter()
        .map(|v| {
            let s = format!("{v:.2}");
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        })
        .collect();
    format!("[{}]", parts.join(", "))
}

fn format_payload(p: f64) -> String {
    let s = format!("{p:.2}");
    format!("{} kg", s.trim_end_matches('0').trim_end_matches('.'))
}

/// Fixed-width table with one row per (payload, space, before/after);
/// infeasible entries show `-`.
pub fn render_table(report: &CodesignReport) -> String {
    let header = ["Payload", "Space", "Before/After", "Gear Ratios", "Cost"];
    let mut rows: Vec<[String; 5]> = Vec::new();
    let mut payloads: Vec<f64> = Vec::new();
    for r in &report.rows {
        if !payloads.contains(&r.payload) {
            payloads.push(r.payload);
        }
    }
    for &p in &payloads {
        for r in report.rows.iter().filter(|r| r.payload == p) {
            let space = match r.space {
                Space::Joint => "Joint",
                Space::Actuation => "Actuation",
            };
            let (bg, bc) = match r.before_cost {
                Some(c) => (format_gears(&r.before_gears), format!("{c:.2}")),
                None => ("-".into(), "-".into()),
            };
            rows.push([format_payload(p), space.into(), "Before".into(), bg, bc]);
            let (ag, ac) = match &r.after {
                Some(a) => (format_gears(&a.gear_ratios), format!("{:.2}", a.fitness)),
                None => ("-".into(), "-".into()),
            };
            rows.push([format_payload(p), space.into(), "After".into(), ag, ac]);
        }
    }
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: [&str; 5]| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(widths).enumerate() {
            if i + 1 == cells.len() {
                s.push_str(&format!("{c:>w$}"));
            } else {
                s.push_str(&format!("{c:<w$}  "));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header);
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
    out.push('\n');
    for r in &rows {
        out.push_str(&line([&r[0], &r[1], &r[2], &r[3], &r[4]]));
    }
    out
}
