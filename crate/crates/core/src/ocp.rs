//! Direct transcription of the point-to-point motion problem.
//!
//! The decision vector is laid out as `[x_0 .. x_N, u_0 .. u_{N-1}]` with
//! `x = [q, qd]`. Equality constraints are ordered as the initial-state block,
//! the `N` dynamics defects `x_{k+1} - f(x_k, u_k)`, then the final-state block.
//!
//! In joint space the controls are joint torques limited by `G^T tau_u` boxes
//! and the dynamics are the plain tree model. In actuation space the controls
//! are motor torques limited by the motor box and the dynamics go through the
//! transmission. Both formulations share the joint velocity box `G^-1 qd_u`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{self, DynamicsError, Multibody};
use crate::model::{joint_limits_from_actuation, DesignError, RobotModel, Transmission};
use crate::solver::{NlpProblem, SparseRows};

/// Finite-difference step for the dynamics Jacobians.
pub const FD_STEP: f64 = 1e-6;
/// Step used for second differences.
const FD2_STEP: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum OcpError {
    #[error("invalid problem: {0}")]
    InvalidSpec(String),
    #[error("{which} state violates the {field} box at index {index}: {value} not in [{lo}, {hi}]")]
    InfeasibleBoundary {
        which: &'static str,
        field: &'static str,
        index: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension { what: &'static str, expected: usize, got: usize },
    #[error(transparent)]
    Design(#[from] DesignError),
    #[error("dynamics evaluation failed: {0}")]
    Dynamics(#[from] DynamicsError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed trajectory file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Joint,
    Actuation,
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Space::Joint => "joint",
            Space::Actuation => "actuation",
        })
    }
}

impl FromStr for Space {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "joint" => Ok(Space::Joint),
            "actuation" => Ok(Space::Actuation),
            other => Err(format!("unknown space '{other}' (expected joint or actuation)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    SemiImplicitEuler,
    Rk4,
}

impl FromStr for Integrator {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "semi_implicit_euler" | "euler" => Ok(Integrator::SemiImplicitEuler),
            "rk4" => Ok(Integrator::Rk4),
            other => Err(format!("unknown integrator '{other}'")),
        }
    }
}

/// Penalized box on one end-effector coordinate (0 = x, 1 = y, 2 = z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CartesianBox {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    /// Penalty weight on the squared violation.
    pub weight: f64,
}

impl CartesianBox {
    /// Signed distance outside the box, zero inside.
    pub fn violation(&self, p: f64) -> f64 {
        if p < self.lo {
            p - self.lo
        } else if p > self.hi {
            p - self.hi
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcProblemSpec {
    pub space: Space,
    /// Horizon, s.
    pub horizon: f64,
    pub steps: usize,
    /// Diagonal of the 2n x 2n state weight.
    pub state_weight: Vec<f64>,
    /// Diagonal of the m x m control weight.
    pub control_weight: Vec<f64>,
    pub cartesian: Vec<CartesianBox>,
    /// Also penalize the Cartesian box at the terminal node `N`.
    #[serde(default = "yes")]
    pub cartesian_terminal: bool,
    pub x_init: Vec<f64>,
    pub x_final: Vec<f64>,
    #[serde(default)]
    pub integrator: Integrator,
}

fn yes() -> bool {
    true
}

/// Pick pose of the reference task: fruit grasped low and in front, gripper
/// nearly level.
pub const PICK_POSE: [f64; 4] = [0.7, 0.2, -0.6, 0.0];
/// Place pose of the reference task: container above, gripper level.
pub const PLACE_POSE: [f64; 4] = [-1.0, 1.5, -0.5, 0.0];

impl OcProblemSpec {
    /// Reference pick-and-place task: 0.7 s, 50 steps, rest to rest,
    /// `Q = 1e-2 I`, `R = 1e-3 I`, `rho = diag(1e3, 1e3)` on the x/z plane.
    pub fn pick_and_place(space: Space) -> Self {
        let rest = |q: [f64; 4]| q.iter().copied().chain([0.0; 4]).collect::<Vec<_>>();
        OcProblemSpec {
            space,
            horizon: 0.7,
            steps: 50,
            state_weight: vec![1e-2; 8],
            control_weight: vec![1e-3; 4],
            cartesian: vec![
                CartesianBox { axis: 0, lo: 0.1, hi: 0.75, weight: 1e3 },
                CartesianBox { axis: 2, lo: -0.45, hi: 0.35, weight: 1e3 },
            ],
            cartesian_terminal: true,
            x_init: rest(PICK_POSE),
            x_final: rest(PLACE_POSE),
            integrator: Integrator::SemiImplicitEuler,
        }
    }

    pub fn with_space(&self, space: Space) -> Self {
        OcProblemSpec { space, ..self.clone() }
    }

    pub fn step_size(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Checks sizes and weights against a robot with `n` joints.
    pub fn validate(&self, n: usize) -> Result<(), OcpError> {
        let bad = |m: &str| Err(OcpError::InvalidSpec(m.to_string()));
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return bad("horizon must be positive");
        }
        if self.steps < 2 {
            return bad("at least two steps are required");
        }
        let dims: [(&'static str, usize, usize); 4] = [
            ("state_weight", 2 * n, self.state_weight.len()),
            ("control_weight", n, self.control_weight.len()),
            ("x_init", 2 * n, self.x_init.len()),
            ("x_final", 2 * n, self.x_final.len()),
        ];
        for (what, expected, got) in dims {
            if expected != got {
                return Err(OcpError::Dimension { what, expected, got });
            }
        }
        let weights = self
            .state_weight
            .iter()
            .chain(&self.control_weight)
            .chain(self.cartesian.iter().map(|c| &c.weight));
        for w in weights {
            if !(*w >= 0.0) || !w.is_finite() {
                return bad("weights must be finite and non-negative");
            }
        }
        for c in &self.cartesian {
            if c.axis > 2 || !(c.lo <= c.hi) {
                return bad("cartesian box needs axis in 0..=2 and lo <= hi");
            }
        }
        Ok(())
    }
}

/// States `(N+1) x 2n` and controls `N x m` on a uniform time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub space: Space,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.controls.len()
    }

    pub fn final_state(&self) -> &[f64] {
        self.states.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// One row per node: `t, q1..qn, qd1..qdn, u1..um`; the final node has no control.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), OcpError> {
        let n = self.states.first().map_or(0, |s| s.len() / 2);
        let m = self.controls.first().map_or(n, Vec::len);
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("q{i}")));
        header.extend((1..=n).map(|i| format!("qd{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        wr.write_record(&header)?;
        for (k, (t, x)) in self.times.iter().zip(&self.states).enumerate() {
            let mut row = vec![format_float(*t)];
            row.extend(x.iter().map(|v| format_float(*v)));
            match self.controls.get(k) {
                Some(u) => row.extend(u.iter().map(|v| format_float(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), m)),
            }
            wr.write_record(&row)?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R, space: Space) -> Result<Self, OcpError> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        let n = header.iter().filter(|h| h.starts_with("qd")).count();
        let m = header.iter().filter(|h| h.starts_with('u')).count();
        if header.len() != 1 + 2 * n + m || header.get(0) != Some("t") {
            return Err(OcpError::Format(format!("unexpected header {header:?}")));
        }
        let mut traj = Trajectory { space, times: vec![], states: vec![], controls: vec![] };
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|e| OcpError::Format(format!("bad number '{s}': {e}")))
            };
            traj.times.push(parse(&rec[0])?);
            traj.states.push((1..=2 * n).map(|i| parse(&rec[i])).collect::<Result<_, _>>()?);
            let u: Vec<&str> = (1 + 2 * n..1 + 2 * n + m).map(|i| &rec[i]).collect();
            if u.iter().all(|s| s.is_empty()) {
                continue;
            }
            traj.controls.push(u.into_iter().map(parse).collect::<Result<_, _>>()?);
        }
        if traj.controls.len() + 1 != traj.states.len() {
            return Err(OcpError::Format("expected exactly one node without control".into()));
        }
        Ok(traj)
    }
}

/// Shortest decimal that round-trips to the same `f64`.
fn format_float(v: f64) -> String {
    format!("{v:?}")
}

/// Trajectory JSON document: the trajectory plus the problem that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub model: String,
    pub gear_ratios: Vec<f64>,
    pub payload_mass: f64,
    pub spec: OcProblemSpec,
    pub cost: Option<f64>,
    pub status: Option<String>,
    pub trajectory: Trajectory,
}

/// Joint accelerations for control `u` interpreted according to `space`.
pub fn accelerations(
    mb: &Multibody,
    tr: &Transmission,
    space: Space,
    x: &[f64],
    u: &[f64],
) -> Result<DVector<f64>, OcpError> {
    let n = mb.dof();
    if x.len() != 2 * n || u.len() != n {
        return Err(OcpError::Dimension { what: "state/control", expected: 2 * n, got: x.len() });
    }
    let q = DVector::from_column_slice(&x[..n]);
    let qd = DVector::from_column_slice(&x[n..]);
    let u = DVector::from_column_slice(u);
    Ok(match space {
        Space::Joint => dynamics::forward_dynamics_joint(mb, &q, &qd, &u)?,
        Space::Actuation => dynamics::forward_dynamics_actuation(mb, tr, &q, &qd, &u)?,
    })
}

/// One integration step `x_{k+1} = f(x_k, u_k)`.
pub fn step(
    mb: &Multibody,
    tr: &Transmission,
    space: Space,
    x: &[f64],
    u: &[f64],
    h: f64,
    integrator: Integrator,
) -> Result<Vec<f64>, OcpError> {
    if !(h > 0.0) {
        return Err(OcpError::InvalidSpec(format!("step size {h} must be positive")));
    }
    let n = mb.dof();
    let out = match integrator {
        Integrator::SemiImplicitEuler => {
            let a = accelerations(mb, tr, space, x, u)?;
            let mut next = vec![0.0; 2 * n];
            for i in 0..n {
                let qd = x[n + i] + h * a[i];
                next[n + i] = qd;
                next[i] = x[i] + h * qd;
            }
            next
        }
        Integrator::Rk4 => {
            let deriv = |s: &[f64]| -> Result<Vec<f64>, OcpError> {
                let a = accelerations(mb, tr, space, s, u)?;
                Ok(s[n..].iter().copied().chain(a.iter().copied()).collect())
            };
            let axpy = |s: &[f64], k: &[f64], c: f64| -> Vec<f64> {
                s.iter().zip(k).map(|(a, b)| a + c * b).collect()
            };
            let k1 = deriv(x)?;
            let k2 = deriv(&axpy(x, &k1, h / 2.0))?;
            let k3 = deriv(&axpy(x, &k2, h / 2.0))?;
            let k4 = deriv(&axpy(x, &k3, h))?;
            (0..2 * n)
                .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    };
    if out.iter().any(|v| !v.is_finite()) {
        return Err(OcpError::Dynamics(DynamicsError::NonFinite("next state")));
    }
    Ok(out)
}

/// Cartesian box violations of the end effector at `x`.
pub fn cartesian_violation(mb: &Multibody, spec: &OcProblemSpec, x: &[f64]) -> Vec<f64> {
    let n = mb.dof();
    let p = dynamics::fk(mb, &DVector::from_column_slice(&x[..n]));
    spec.cartesian.iter().map(|c| c.violation(p[c.axis])).collect()
}

fn node_cost(mb: &Multibody, spec: &OcProblemSpec, x: &[f64], u: Option<&[f64]>) -> f64 {
    let mut total = 0.0;
    if let Some(u) = u {
        total += x.iter().zip(&spec.state_weight).map(|(v, w)| w * v * v).sum::<f64>();
        total += u.iter().zip(&spec.control_weight).map(|(v, w)| w * v * v).sum::<f64>();
    }
    if u.is_some() || spec.cartesian_terminal {
        let viol = cartesian_violation(mb, spec, x);
        total += viol.iter().zip(&spec.cartesian).map(|(v, c)| c.weight * v * v).sum::<f64>();
    }
    total
}

/// Motion cost: state and control regularization over nodes `0..N` plus the
/// Cartesian box penalty (also at node `N` when `cartesian_terminal`).
pub fn cost(mb: &Multibody, spec: &OcProblemSpec, traj: &Trajectory) -> Result<f64, OcpError> {
    let n = mb.dof();
    if traj.states.len() != traj.controls.len() + 1 {
        return Err(OcpError::Dimension {
            what: "trajectory nodes",
            expected: traj.controls.len() + 1,
            got: traj.states.len(),
        });
    }
    for x in &traj.states {
        if x.len() != 2 * n {
            return Err(OcpError::Dimension { what: "state", expected: 2 * n, got: x.len() });
        }
    }
    for u in &traj.controls {
        if u.len() != spec.control_weight.len() {
            return Err(OcpError::Dimension {
                what: "control",
                expected: spec.control_weight.len(),
                got: u.len(),
            });
        }
    }
    let mut total = 0.0;
    for (k, x) in traj.states.iter().enumerate() {
        total += node_cost(mb, spec, x, traj.controls.get(k).map(Vec::as_slice));
    }
    Ok(total)
}

/// Variable boxes of the transcribed problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableBoxes {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub qd_min: Vec<f64>,
    pub qd_max: Vec<f64>,
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
}

impl VariableBoxes {
    pub fn new(model: &RobotModel, tr: &Transmission, space: Space) -> Result<Self, OcpError> {
        let lim = &model.limits;
        let jl = joint_limits_from_actuation(tr.g(), &lim.tau_u_min, &lim.tau_u_max, &lim.qd_u_min, &lim.qd_u_max)?;
        let (u_min, u_max) = match space {
            Space::Joint => (jl.tau_min, jl.tau_max),
            Space::Actuation => (lim.tau_u_min.clone(), lim.tau_u_max.clone()),
        };
        Ok(VariableBoxes {
            q_min: lim.q_min.clone(),
            q_max: lim.q_max.clone(),
            qd_min: jl.qd_min,
            qd_max: jl.qd_max,
            u_min,
            u_max,
        })
    }
}

/// Transcribed nonlinear program for one design and one formulation.
#[derive(Debug, Clone)]
pub struct Nlp {
    mb: Multibody,
    tr: Transmission,
    spec: OcProblemSpec,
    boxes: VariableBoxes,
    lo: Vec<f64>,
    hi: Vec<f64>,
    n: usize,
}

/// Builds the transcription; rejects boundary states outside the variable boxes.
pub fn build_nlp(model: &RobotModel, tr: &Transmission, spec: &OcProblemSpec) -> Result<Nlp, OcpError> {
    let n = model.n_joints();
    spec.validate(n)?;
    if tr.dim() != n {
        return Err(OcpError::Dimension { what: "transmission", expected: n, got: tr.dim() });
    }
    let boxes = VariableBoxes::new(model, tr, spec.space)?;
    for (i, (lo, hi)) in boxes.qd_min.iter().zip(&boxes.qd_max).enumerate() {
        if lo > hi {
            return Err(OcpError::InvalidSpec(format!("empty velocity box for joint {}", i + 1)));
        }
    }
    for (which, x) in [("initial", &spec.x_init), ("final", &spec.x_final)] {
        for i in 0..n {
            let checks = [
                ("position", x[i], boxes.q_min[i], boxes.q_max[i]),
                ("velocity", x[n + i], boxes.qd_min[i], boxes.qd_max[i]),
            ];
            for (field, value, lo, hi) in checks {
                if value < lo || value > hi {
                    return Err(OcpError::InfeasibleBoundary { which, field, index: i, value, lo, hi });
                }
            }
        }
    }
    let steps = spec.steps;
    let mut lo = Vec::with_capacity((steps + 1) * 2 * n + steps * n);
    let mut hi = Vec::with_capacity(lo.capacity());
    for _ in 0..=steps {
        lo.extend(&boxes.q_min);
        lo.extend(&boxes.qd_min);
        hi.extend(&boxes.q_max);
        hi.extend(&boxes.qd_max);
    }
    for _ in 0..steps {
        lo.extend(&boxes.u_min);
        hi.extend(&boxes.u_max);
    }
    Ok(Nlp {
        mb: Multibody::new(model),
        tr: tr.clone(),
        spec: spec.clone(),
        boxes,
        lo,
        hi,
        n,
    })
}

/// Partial derivatives of one step with respect to state and control.
struct StepJacobian {
    dx: DMatrix<f64>,
    du: DMatrix<f64>,
}

impl Nlp {
    pub fn spec(&self) -> &OcProblemSpec {
        &self.spec
    }

    pub fn multibody(&self) -> &Multibody {
        &self.mb
    }

    pub fn transmission(&self) -> &Transmission {
        &self.tr
    }

    pub fn boxes(&self) -> &VariableBoxes {
        &self.boxes
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    pub fn control_dim(&self) -> usize {
        self.n
    }

    pub fn x_offset(&self, k: usize) -> usize {
        k * 2 * self.n
    }

    pub fn u_offset(&self, k: usize) -> usize {
        (self.spec.steps + 1) * 2 * self.n + k * self.n
    }

    /// Number of equality-constraint blocks (initial, defects, final).
    pub fn constraint_blocks(&self) -> usize {
        self.spec.steps + 2
    }

    pub fn pack(&self, traj: &Trajectory) -> Result<Vec<f64>, OcpError> {
        let steps = self.spec.steps;
        if traj.states.len() != steps + 1 || traj.controls.len() != steps {
            return Err(OcpError::Dimension { what: "trajectory steps", expected: steps, got: traj.controls.len() });
        }
        let mut z = Vec::with_capacity(self.num_variables());
        for x in &traj.states {
            if x.len() != self.state_dim() {
                return Err(OcpError::Dimension { what: "state", expected: self.state_dim(), got: x.len() });
            }
            z.extend(x);
        }
        for u in &traj.controls {
            if u.len() != self.control_dim() {
                return Err(OcpError::Dimension { what: "control", expected: self.control_dim(), got: u.len() });
            }
            z.extend(u);
        }
        Ok(z)
    }

    pub fn unpack(&self, z: &[f64]) -> Trajectory {
        let steps = self.spec.steps;
        let h = self.spec.step_size();
        let nx = self.state_dim();
        let nu = self.control_dim();
        Trajectory {
            space: self.spec.space,
            times: (0..=steps).map(|k| k as f64 * h).collect(),
            states: (0..=steps).map(|k| z[self.x_offset(k)..self.x_offset(k) + nx].to_vec()).collect(),
            controls: (0..steps).map(|k| z[self.u_offset(k)..self.u_offset(k) + nu].to_vec()).collect(),
        }
    }

    fn x_at<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        &z[self.x_offset(k)..self.x_offset(k) + self.state_dim()]
    }

    fn u_at<'z>(&self, z: &'z [f64], k: usize) -> &'z [f64] {
        &z[self.u_offset(k)..self.u_offset(k) + self.control_dim()]
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, OcpError> {
        step(&self.mb, &self.tr, self.spec.space, x, u, self.spec.step_size(), self.spec.integrator)
    }

    fn step_jacobian(&self, x: &[f64], u: &[f64]) -> Result<StepJacobian, OcpError> {
        let n = self.n;
        let nx = 2 * n;
        let h = self.spec.step_size();
        match self.spec.integrator {
            Integrator::SemiImplicitEuler => {
                // a(x, u): central differences in x, exact in u (a is affine in u).
                let space = self.spec.space;
                let mut da_dx = DMatrix::zeros(n, nx);
                let mut xp = x.to_vec();
                for j in 0..nx {
                    xp[j] = x[j] + FD_STEP;
                    let ap = accelerations(&self.mb, &self.tr, space, &xp, u)?;
                    xp[j] = x[j] - FD_STEP;
                    let am = accelerations(&self.mb, &self.tr, space, &xp, u)?;
                    xp[j] = x[j];
                    da_dx.set_column(j, &((ap - am) / (2.0 * FD_STEP)));
                }
                let q = DVector::from_column_slice(&x[..n]);
                let hm = dynamics::mass_matrix(&self.mb, &q);
                let chol = hm.cholesky().ok_or(DynamicsError::NotPositiveDefinite("mass"))?;
                let da_du = match space {
                    Space::Joint => chol.inverse(),
                    Space::Actuation => chol.solve(&self.tr.g().transpose()),
                };
                let mut dx = DMatrix::zeros(nx, nx);
                let mut du = DMatrix::zeros(nx, n);
                for i in 0..n {
                    for j in 0..nx {
                        dx[(n + i, j)] = h * da_dx[(i, j)];
                        dx[(i, j)] = h * h * da_dx[(i, j)];
                    }
                    dx[(n + i, n + i)] += 1.0;
                    dx[(i, i)] += 1.0;
                    dx[(i, n + i)] += h;
                    for j in 0..n {
                        du[(n + i, j)] = h * da_du[(i, j)];
                        du[(i, j)] = h * h * da_du[(i, j)];
                    }
                }
                Ok(StepJacobian { dx, du })
            }
            Integrator::Rk4 => {
                let mut dx = DMatrix::zeros(nx, nx);
                let mut du = DMatrix::zeros(nx, n);
                let mut xp = x.to_vec();
                for j in 0..nx {
                    xp[j] = x[j] + FD_STEP;
                    let fp = self.step(&xp, u)?;
                    xp[j] = x[j] - FD_STEP;
                    let fm = self.step(&xp, u)?;
                    xp[j] = x[j];
                    for i in 0..nx {
                        dx[(i, j)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
                    }
                }
                let mut up = u.to_vec();
                for j in 0..n {
                    up[j] = u[j] + FD_STEP;
                    let fp = self.step(x, &up)?;
                    up[j] = u[j] - FD_STEP;
                    let fm = self.step(x, &up)?;
                    up[j] = u[j];
                    for i in 0..nx {
                        du[(i, j)] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
                    }
                }
                Ok(StepJacobian { dx, du })
            }
        }
    }

    /// Hessian of `y . f(x, u)` over `(x, u)` for one integration step.
    fn stage_hessian(&self, x: &[f64], u: &[f64], y: &[f64]) -> Result<DMatrix<f64>, OcpError> {
        let n = self.n;
        let nx = 2 * n;
        match self.spec.integrator {
            Integrator::SemiImplicitEuler => {
                // f is affine in a = H^-1 (P u - C): beta . a = r . (P u - C)
                // with r = H^-1 beta, so only (q, qd) needs perturbing.
                let h = self.spec.step_size();
                let beta = DVector::from_iterator(n, (0..n).map(|i| h * h * y[i] + h * y[n + i]));
                let u = DVector::from_column_slice(u);
                let eval = |xs: &[f64]| -> Result<(f64, DVector<f64>), OcpError> {
                    let q = DVector::from_column_slice(&xs[..n]);
                    let qd = DVector::from_column_slice(&xs[n..]);
                    let terms = dynamics::dynamics_terms(&self.mb, &q, &qd);
                    let chol = terms.h.cholesky().ok_or(DynamicsError::NotPositiveDefinite("mass"))?;
                    let r = chol.solve(&beta);
                    let pr = match self.spec.space {
                        Space::Joint => r.clone(),
                        Space::Actuation => self.tr.g() * &r,
                    };
                    let val = pr.dot(&u) - r.dot(&terms.c);
                    if !val.is_finite() {
                        return Err(DynamicsError::NonFinite("qdd").into());
                    }
                    Ok((val, pr))
                };
                let mut xs = x.to_vec();
                let steps: Vec<f64> = xs.iter().map(|v| FD2_STEP * v.abs().max(1.0)).collect();
                let (f0, _) = eval(&xs)?;
                let mut out = DMatrix::zeros(nx + n, nx + n);
                let mut fwd = vec![0.0; nx];
                for i in 0..nx {
                    let xi = xs[i];
                    xs[i] = xi + steps[i];
                    let (fp, pp) = eval(&xs)?;
                    xs[i] = xi - steps[i];
                    let (fm, pm) = eval(&xs)?;
                    xs[i] = xi;
                    fwd[i] = fp;
                    out[(i, i)] = (fp - 2.0 * f0 + fm) / (steps[i] * steps[i]);
                    // The input map depends on q only.
                    if i < n {
                        for j in 0..n {
                            let v = (pp[j] - pm[j]) / (2.0 * steps[i]);
                            out[(i, nx + j)] = v;
                            out[(nx + j, i)] = v;
                        }
                    }
                }
                for i in 0..nx {
                    for j in 0..i {
                        let (xi, xj) = (xs[i], xs[j]);
                        xs[i] = xi + steps[i];
                        xs[j] = xj + steps[j];
                        let fij = eval(&xs);
                        xs[i] = xi;
                        xs[j] = xj;
                        let v = (fij?.0 - fwd[i] - fwd[j] + f0) / (steps[i] * steps[j]);
                        out[(i, j)] = v;
                        out[(j, i)] = v;
                    }
                }
                Ok(out)
            }
            Integrator::Rk4 => {
                let mut w: Vec<f64> = x.iter().chain(u).copied().collect();
                let psi = |w: &[f64]| -> Result<f64, OcpError> {
                    let f = self.step(&w[..nx], &w[nx..])?;
                    Ok(f.iter().zip(y).map(|(a, b)| a * b).sum())
                };
                second_differences(psi, &mut w)
            }
        }
    }

    fn penalized_node(&self, k: usize) -> bool {
        k < self.spec.steps || self.spec.cartesian_terminal
    }

    /// Rows of the end-effector Jacobian for the boxed coordinates whose box is violated.
    fn cartesian_terms(&self, x: &[f64]) -> Vec<(f64, f64, Vec<f64>)> {
        let n = self.n;
        let q = DVector::from_column_slice(&x[..n]);
        let p = dynamics::fk(&self.mb, &q);
        let mut out = Vec::new();
        let mut jac = None;
        for c in &self.spec.cartesian {
            let v = c.violation(p[c.axis]);
            if v != 0.0 && c.weight != 0.0 {
                let j = jac.get_or_insert_with(|| dynamics::ee_jacobian(&self.mb, &q));
                out.push((c.weight, v, j.row(c.axis).iter().copied().collect()));
            }
        }
        out
    }
}

/// Second differences of `psi` at `w`: central on the diagonal, forward
/// mixed differences off it.
fn second_differences<F>(psi: F, w: &mut [f64]) -> Result<DMatrix<f64>, OcpError>
where
    F: Fn(&[f64]) -> Result<f64, OcpError>,
{
    let m = w.len();
    let steps: Vec<f64> = w.iter().map(|v| FD2_STEP * v.abs().max(1.0)).collect();
    let f0 = psi(w)?;
    let mut fwd = vec![0.0; m];
    let mut out = DMatrix::zeros(m, m);
    for i in 0..m {
        let wi = w[i];
        w[i] = wi + steps[i];
        fwd[i] = psi(w)?;
        w[i] = wi - steps[i];
        let fm = psi(w)?;
        out[(i, i)] = (fwd[i] - 2.0 * f0 + fm) / (steps[i] * steps[i]);
        w[i] = wi;
    }
    for i in 0..m {
        for j in 0..i {
            let (wi, wj) = (w[i], w[j]);
            w[i] = wi + steps[i];
            w[j] = wj + steps[j];
            let fij = psi(w);
            w[i] = wi;
            w[j] = wj;
            let hij = (fij? - fwd[i] - fwd[j] + f0) / (steps[i] * steps[j]);
            out[(i, j)] = hij;
            out[(j, i)] = hij;
        }
    }
    Ok(out)
}

impl NlpProblem for Nlp {
    fn num_variables(&self) -> usize {
        (self.spec.steps + 1) * 2 * self.n + self.spec.steps * self.n
    }

    fn num_constraints(&self) -> usize {
        (self.spec.steps + 2) * 2 * self.n
    }

    fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    fn objective(&self, z: &[f64]) -> f64 {
        let steps = self.spec.steps;
        (0..=steps)
            .map(|k| {
                let u = (k < steps).then(|| self.u_at(z, k));
                node_cost(&self.mb, &self.spec, self.x_at(z, k), u)
            })
            .sum()
    }

    fn objective_gradient(&self, z: &[f64], grad: &mut [f64]) {
        grad.fill(0.0);
        let steps = self.spec.steps;
        for k in 0..=steps {
            let x = self.x_at(z, k);
            let off = self.x_offset(k);
            if k < steps {
                for (i, (v, w)) in x.iter().zip(&self.spec.state_weight).enumerate() {
                    grad[off + i] += 2.0 * w * v;
                }
                let uo = self.u_offset(k);
                for (i, (v, w)) in self.u_at(z, k).iter().zip(&self.spec.control_weight).enumerate() {
                    grad[uo + i] = 2.0 * w * v;
                }
            }
            if self.penalized_node(k) {
                for (w, v, row) in self.cartesian_terms(x) {
                    for (i, r) in row.iter().enumerate() {
                        grad[off + i] += 2.0 * w * v * r;
                    }
                }
            }
        }
    }

    fn objective_hessian(&self, z: &[f64]) -> Vec<(usize, usize, f64)> {
        let steps = self.spec.steps;
        let n = self.n;
        let mut out = Vec::new();
        for k in 0..=steps {
            let off = self.x_offset(k);
            if k < steps {
                for (i, w) in self.spec.state_weight.iter().enumerate() {
                    out.push((off + i, off + i, 2.0 * w));
                }
                let uo = self.u_offset(k);
                for (i, w) in self.spec.control_weight.iter().enumerate() {
                    out.push((uo + i, uo + i, 2.0 * w));
                }
            }
            if self.penalized_node(k) {
                let x = self.x_at(z, k);
                let terms = self.cartesian_terms(x);
                for (w, _, row) in &terms {
                    for i in 0..n {
                        for j in 0..=i {
                            out.push((off + i, off + j, 2.0 * w * row[i] * row[j]));
                        }
                    }
                }
                if !terms.is_empty() {
                    // Curvature of the end-effector position weighted by the violation.
                    let mut q = x[..n].to_vec();
                    let mut dj = Vec::with_capacity(n);
                    for j in 0..n {
                        let s = FD_STEP * 10.0;
                        let qj = q[j];
                        q[j] = qj + s;
                        let jp = dynamics::ee_jacobian(&self.mb, &DVector::from_column_slice(&q));
                        q[j] = qj - s;
                        let jm = dynamics::ee_jacobian(&self.mb, &DVector::from_column_slice(&q));
                        q[j] = qj;
                        dj.push((jp - jm) / (2.0 * s));
                    }
                    let p = dynamics::fk(&self.mb, &DVector::from_column_slice(&q));
                    for c in &self.spec.cartesian {
                        let v = c.violation(p[c.axis]);
                        if v == 0.0 || c.weight == 0.0 {
                            continue;
                        }
                        for i in 0..n {
                            for j in 0..=i {
                                let d2 = 0.5 * (dj[j][(c.axis, i)] + dj[i][(c.axis, j)]);
                                out.push((off + i, off + j, 2.0 * c.weight * v * d2));
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn constraints(&self, z: &[f64], c: &mut [f64]) {
        let nx = self.state_dim();
        let steps = self.spec.steps;
        let x0 = self.x_at(z, 0);
        for i in 0..nx {
            c[i] = x0[i] - self.spec.x_init[i];
        }
        for k in 0..steps {
            let row = (k + 1) * nx;
            let next = self.x_at(z, k + 1);
            match self.step(self.x_at(z, k), self.u_at(z, k)) {
                Ok(f) => {
                    for i in 0..nx {
                        c[row + i] = next[i] - f[i];
                    }
                }
                Err(_) => c[row..row + nx].fill(f64::NAN),
            }
        }
        let xn = self.x_at(z, steps);
        let row = (steps + 1) * nx;
        for i in 0..nx {
            c[row + i] = xn[i] - self.spec.x_final[i];
        }
    }

    fn constraint_jacobian(&self, z: &[f64]) -> SparseRows {
        let nx = self.state_dim();
        let nu = self.control_dim();
        let steps = self.spec.steps;
        let mut rows = SparseRows::new(self.num_constraints());
        for i in 0..nx {
            rows.push(i, self.x_offset(0) + i, 1.0);
        }
        for k in 0..steps {
            let base = (k + 1) * nx;
            match self.step_jacobian(self.x_at(z, k), self.u_at(z, k)) {
                Ok(sj) => {
                    for i in 0..nx {
                        let r = base + i;
                        for j in 0..nx {
                            rows.push(r, self.x_offset(k) + j, -sj.dx[(i, j)]);
                        }
                        for j in 0..nu {
                            rows.push(r, self.u_offset(k) + j, -sj.du[(i, j)]);
                        }
                        rows.push(r, self.x_offset(k + 1) + i, 1.0);
                    }
                }
                Err(_) => {
                    for i in 0..nx {
                        rows.push(base + i, self.x_offset(k + 1) + i, f64::NAN);
                    }
                }
            }
        }
        let base = (steps + 1) * nx;
        for i in 0..nx {
            rows.push(base + i, self.x_offset(steps) + i, 1.0);
        }
        rows
    }

    fn constraint_hessian(&self, z: &[f64], y: &[f64]) -> Vec<(usize, usize, f64)> {
        let nx = self.state_dim();
        let nu = self.control_dim();
        let mut out = Vec::new();
        for k in 0..self.spec.steps {
            let yk = &y[(k + 1) * nx..(k + 2) * nx];
            if yk.iter().all(|v| *v == 0.0) {
                continue;
            }
            let Ok(hk) = self.stage_hessian(self.x_at(z, k), self.u_at(z, k), yk) else {
                continue;
            };
            let var = |i: usize| if i < nx { self.x_offset(k) + i } else { self.u_offset(k) + i - nx };
            for i in 0..nx + nu {
                for j in 0..=i {
                    let v = hk[(i, j)];
                    if v != 0.0 {
                        // Defects are x_{k+1} - f(x_k, u_k).
                        let (a, b) = (var(i), var(j));
                        let (a, b) = if a >= b { (a, b) } else { (b, a) };
                        out.push((a, b, -v));
                    }
                }
            }
        }
        out
    }

    /// A re-simulation of the controls must stay within `10 * tol_constraint`
    /// of the states.
    fn acceptable(&self, z: &[f64], tol_constraint: f64) -> bool {
        let traj = self.unpack(z);
        let mut x = traj.states[0].clone();
        for (k, u) in traj.controls.iter().enumerate() {
            let Ok(next) = self.step(&x, u) else {
                return false;
            };
            if next.iter().zip(&traj.states[k + 1]).any(|(a, b)| !((a - b).abs() < tol_constraint)) {
                return false;
            }
            x = next;
        }
        true
    }

    /// Stage-wise ordering `x_0, u_0, x_1, u_1, ..., x_N` keeps the normal
    /// matrix banded.
    fn variable_order(&self) -> Vec<usize> {
        let nx = self.state_dim();
        let nu = self.control_dim();
        let mut order = Vec::with_capacity(self.num_variables());
        for k in 0..=self.spec.steps {
            order.extend(self.x_offset(k)..self.x_offset(k) + nx);
            if k < self.spec.steps {
                order.extend(self.u_offset(k)..self.u_offset(k) + nu);
            }
        }
        order
    }
}

/// Warm start: states interpolate linearly between the boundary states and
/// controls hold the gravity-compensating torque of each interpolated pose,
/// both clipped to the variable boxes.
pub fn initial_guess(nlp: &Nlp) -> Trajectory {
    let spec = nlp.spec();
    let n = nlp.control_dim();
    let steps = spec.steps;
    let h = spec.step_size();
    let b = nlp.boxes();
    let clip = |v: f64, lo: f64, hi: f64| v.max(lo).min(hi);
    let states: Vec<Vec<f64>> = (0..=steps)
        .map(|k| {
            let s = k as f64 / steps as f64;
            let mut x: Vec<f64> = spec.x_init.iter().zip(&spec.x_final).map(|(a, c)| a + s * (c - a)).collect();
            for i in 0..n {
                x[i] = clip(x[i], b.q_min[i], b.q_max[i]);
                x[n + i] = clip(x[n + i], b.qd_min[i], b.qd_max[i]);
            }
            x
        })
        .collect();
    let controls = states[..steps]
        .iter()
        .map(|x| {
            let q = DVector::from_column_slice(&x[..n]);
            let tau = dynamics::bias(nlp.multibody(), &q, &DVector::zeros(n));
            let u = match spec.space {
                Space::Joint => tau,
                Space::Actuation => nlp.transmission().motor_torque(&tau),
            };
            u.iter().enumerate().map(|(i, v)| clip(*v, b.u_min[i], b.u_max[i])).collect()
        })
        .collect();
    Trajectory {
        space: spec.space,
        times: (0..=steps).map(|k| k as f64 * h).collect(),
        states,
        controls,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ORIGINAL_GEARS;

    fn reference_nlp(space: Space) -> Nlp {
        let model = RobotModel::reference();
        let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
        build_nlp(&model, &tr, &OcProblemSpec::pick_and_place(space)).unwrap()
    }

    #[test]
    fn layout_sizes() {
        let nlp = reference_nlp(Space::Actuation);
        assert_eq!(nlp.num_variables(), 51 * 8 + 50 * 4);
        assert_eq!(nlp.num_variables(), 608);
        assert_eq!(nlp.constraint_blocks(), 52);
        assert_eq!(nlp.num_constraints(), 52 * 8);
        let mut order = nlp.variable_order();
        order.sort_unstable();
        assert_eq!(order, (0..608).collect::<Vec<_>>());
    }

    #[test]
    fn control_bounds_per_space() {
        let joint = reference_nlp(Space::Joint);
        let expected = [18.7, 8.5, 3.4, 0.0];
        for i in 0..4 {
            assert!((joint.boxes().u_max[i] - expected[i]).abs() < 1e-12);
            assert!((joint.boxes().u_min[i] + expected[i]).abs() < 1e-12);
        }
        let act = reference_nlp(Space::Actuation);
        assert_eq!(act.boxes().u_max, vec![1.7; 4]);
        assert_eq!(act.boxes().u_min, vec![-1.7; 4]);
        // Both formulations share the mapped velocity box.
        assert_eq!(joint.boxes().qd_max, act.boxes().qd_max);
        assert_eq!(act.boxes().qd_max[3], 0.0);
    }

    #[test]
    fn pack_unpack_round_trip() {
        let nlp = reference_nlp(Space::Joint);
        let z: Vec<f64> = (0..nlp.num_variables()).map(|i| (i as f64 * 0.37).sin()).collect();
        let traj = nlp.unpack(&z);
        assert_eq!(nlp.pack(&traj).unwrap(), z);
        assert_eq!(traj.times.len(), 51);
        assert!((traj.times[50] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_trajectory_inside_box_costs_nothing() {
        let mut spec = OcProblemSpec::pick_and_place(Space::Joint);
        spec.cartesian = vec![CartesianBox { axis: 0, lo: -1.0, hi: 1.0, weight: 1e3 }];
        let mb = Multibody::new(&RobotModel::reference());
        let traj = Trajectory {
            space: Space::Joint,
            times: vec![0.0; 51],
            states: vec![vec![0.0; 8]; 51],
            controls: vec![vec![0.0; 4]; 50],
        };
        assert_eq!(cost(&mb, &spec, &traj).unwrap(), 0.0);
    }

    #[test]
    fn single_box_violation_penalty() {
        // Home x is 0.68 m; a box ending at 0.58 leaves 0.1 m of violation.
        let mut spec = OcProblemSpec::pick_and_place(Space::Joint);
        spec.state_weight = vec![0.0; 8];
        spec.control_weight = vec![0.0; 4];
        spec.cartesian = vec![CartesianBox { axis: 0, lo: -1.0, hi: 0.58, weight: 1e3 }];
        spec.cartesian_terminal = false;
        let mb = Multibody::new(&RobotModel::reference());
        let far = vec![0.0; 8];
        let mut inside = vec![0.0; 8];
        inside[0] = 1.2;
        let traj = Trajectory {
            space: Space::Joint,
            times: vec![0.0, 0.1, 0.2],
            states: vec![far, inside.clone(), inside],
            controls: vec![vec![0.0; 4]; 2],
        };
        let c = cost(&mb, &spec, &traj).unwrap();
        assert!((c - 10.0).abs() < 1e-9, "{c}");
    }

    #[test]
    fn cost_rejects_bad_dimensions() {
        let spec = OcProblemSpec::pick_and_place(Space::Joint);
        let mb = Multibody::new(&RobotModel::reference());
        let traj = Trajectory {
            space: Space::Joint,
            times: vec![0.0; 3],
            states: vec![vec![0.0; 8]; 3],
            controls: vec![vec![0.0; 3]; 2],
        };
        assert!(matches!(cost(&mb, &spec, &traj), Err(OcpError::Dimension { .. })));
    }

    #[test]
    fn boundary_outside_box_rejected() {
        let model = RobotModel::reference();
        let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
        let mut spec = OcProblemSpec::pick_and_place(Space::Joint);
        spec.x_final[0] = 3.0;
        assert!(matches!(
            build_nlp(&model, &tr, &spec),
            Err(OcpError::InfeasibleBoundary { which: "final", field: "position", index: 0, .. })
        ));
        let mut spec = OcProblemSpec::pick_and_place(Space::Joint);
        spec.x_init[7] = 0.1; // roll velocity box collapses to zero
        assert!(build_nlp(&model, &tr, &spec).is_err());
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let model = RobotModel::reference().with_payload(0.5);
        let mb = Multibody::new(&model);
        let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
        let q = DVector::from_column_slice(&[0.3, 0.8, -0.2, 0.1]);
        let tau = dynamics::bias(&mb, &q, &DVector::zeros(4));
        let x: Vec<f64> = q.iter().copied().chain([0.0; 4]).collect();
        for integ in [Integrator::SemiImplicitEuler, Integrator::Rk4] {
            let next = step(&mb, &tr, Space::Joint, &x, tau.as_slice(), 0.014, integ).unwrap();
            let next_u =
                step(&mb, &tr, Space::Actuation, &x, tr.motor_torque(&tau).as_slice(), 0.014, integ).unwrap();
            for i in 0..8 {
                assert!((next[i] - x[i]).abs() < 1e-12);
                assert!((next_u[i] - x[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn step_rejects_bad_step_size() {
        let mb = Multibody::new(&RobotModel::reference());
        let tr = Transmission::identity(4);
        assert!(step(&mb, &tr, Space::Joint, &[0.0; 8], &[0.0; 4], 0.0, Integrator::Rk4).is_err());
    }

    #[test]
    fn guess_respects_bounds() {
        for space in [Space::Joint, Space::Actuation] {
            let nlp = reference_nlp(space);
            let z = nlp.pack(&initial_guess(&nlp)).unwrap();
            let (lo, hi) = nlp.bounds();
            for i in 0..z.len() {
                assert!(z[i] >= lo[i] && z[i] <= hi[i], "{space} var {i}");
            }
        }
    }

    #[test]
    fn degenerate_guess_is_constant() {
        let model = RobotModel::reference();
        let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
        let mut spec = OcProblemSpec::pick_and_place(Space::Actuation);
        spec.x_final = spec.x_init.clone();
        let nlp = build_nlp(&model, &tr, &spec).unwrap();
        let g = initial_guess(&nlp);
        assert!(g.states.iter().all(|x| x == &spec.x_init));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let nlp = reference_nlp(Space::Actuation);
        let traj = initial_guess(&nlp);
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 52);
        assert!(text.starts_with("t,q1,q2,q3,q4,qd1,qd2,qd3,qd4,u1,u2,u3,u4"));
        let back = Trajectory::read_csv(buf.as_slice(), Space::Actuation).unwrap();
        assert_eq!(back, traj);
    }
}
