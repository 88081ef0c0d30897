//! Robot description, belt transmission and limit data.
//!
//! A [`RobotModel`] is loaded from a JSON document (see `models/README.md` for
//! the schema) and validated as a whole: [`validate_model`] reports every
//! violation with the path of the offending field rather than stopping at the
//! first one.
//!
//! The belt transmission couples joint and motor coordinates through a
//! constant matrix `G` with `qd_motor = G * qd_joint` and
//! `tau_joint = G^T * tau_motor`. For the four-joint reference arm the matrix is
//! built from four gear ratios by [`build_g`].

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version written to and expected in model files.
pub const SCHEMA_VERSION: u32 = 1;

/// Number of design gear ratios of the reference arm.
pub const NUM_GEARS: usize = 4;

/// Gear ratios of the unmodified reference arm.
pub const ORIGINAL_GEARS: [f64; NUM_GEARS] = [6.0, 3.0, 1.0, 1.0];

/// Mechanical lower bounds on the gear ratios.
pub const GEAR_BOUNDS_LO: [f64; NUM_GEARS] = [1.0, 1.0, 1.0, 1.0];

/// Mechanical upper bounds on the gear ratios.
pub const GEAR_BOUNDS_HI: [f64; NUM_GEARS] = [9.0, 9.0, 3.0, 3.0];

const DEFAULT_MODEL_JSON: &str = include_str!("../models/default.json");

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot read model file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse model: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("model has {} invariant violation(s):\n{}", .0.len(), format_diagnostics(.0))]
    Invalid(Vec<Diagnostic>),
}

/// Errors raised when a gear-ratio vector cannot describe a valid transmission.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    #[error("gear ratio g{index} = {value} must be positive")]
    NonPositiveGear { index: usize, value: f64 },
    #[error("gear ratio g{index} = {value} outside [{lo}, {hi}]")]
    OutOfBounds { index: usize, value: f64, lo: f64, hi: f64 },
    #[error("gear ordering g3 <= g2 < g1 violated by {0:?}")]
    Ordering([f64; NUM_GEARS]),
    #[error("transmission matrix is singular")]
    Singular,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// One invariant violation, located by a field path such as `links[2].mass`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_diagnostics(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| format!("  - {d}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Fixed transform from the parent joint frame to a child joint frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Origin {
    pub xyz: [f64; 3],
    /// Roll, pitch, yaw in radians (applied as `Rz(yaw) * Ry(pitch) * Rx(roll)`).
    #[serde(default)]
    pub rpy: [f64; 3],
}

impl Origin {
    pub fn rotation(&self) -> Matrix3<f64> {
        Rotation3::from_euler_angles(self.rpy[0], self.rpy[1], self.rpy[2]).into_inner()
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.xyz)
    }
}

/// A rigid link and the revolute joint that moves it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    #[serde(default)]
    pub name: String,
    /// Index of the parent link, `None` for a link attached to the base.
    pub parent: Option<usize>,
    /// Joint axis in the link frame.
    pub joint_axis: [f64; 3],
    pub joint_origin: Origin,
    /// kg
    pub mass: f64,
    /// Centre of mass in the link frame, m.
    pub com: [f64; 3],
    /// Rotational inertia about the centre of mass, link frame, kg m^2.
    pub inertia: [[f64; 3]; 3],
}

impl LinkSpec {
    pub fn axis(&self) -> Vector3<f64> {
        Vector3::from(self.joint_axis)
    }

    pub fn com(&self) -> Vector3<f64> {
        Vector3::from(self.com)
    }

    pub fn inertia(&self) -> Matrix3<f64> {
        let r = &self.inertia;
        Matrix3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }
}

/// End-effector frame: a point rigidly attached to one link. The payload
/// point mass sits here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndEffector {
    pub link: usize,
    pub offset: [f64; 3],
}

/// Gear ratios of the model file together with their admissible box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransmissionConfig {
    pub gear_ratios: [f64; NUM_GEARS],
    #[serde(default = "default_bounds_lo")]
    pub bounds_lo: [f64; NUM_GEARS],
    #[serde(default = "default_bounds_hi")]
    pub bounds_hi: [f64; NUM_GEARS],
}

fn default_bounds_lo() -> [f64; NUM_GEARS] {
    GEAR_BOUNDS_LO
}

fn default_bounds_hi() -> [f64; NUM_GEARS] {
    GEAR_BOUNDS_HI
}

/// Joint position boxes and motor velocity/torque boxes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Limits {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    pub qd_u_min: Vec<f64>,
    pub qd_u_max: Vec<f64>,
    pub tau_u_min: Vec<f64>,
    pub tau_u_max: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub gravity: [f64; 3],
    pub links: Vec<LinkSpec>,
    pub end_effector: EndEffector,
    pub transmission: TransmissionConfig,
    pub limits: Limits,
    #[serde(default)]
    pub payload_mass: f64,
}

impl RobotModel {
    /// The reference four-joint belt-driven arm shipped with the crate.
    pub fn reference() -> Self {
        Self::from_json_str(DEFAULT_MODEL_JSON).expect("bundled default model is valid")
    }

    /// Parses and validates a model document.
    pub fn from_json_str(text: &str) -> Result<Self, ModelError> {
        let model: RobotModel = serde_json::from_str(text)?;
        let diags = validate_model(&model);
        if diags.is_empty() {
            Ok(model)
        } else {
            Err(ModelError::Invalid(diags))
        }
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn n_joints(&self) -> usize {
        self.links.len()
    }

    /// Copy of the model carrying `mass` kg at the end effector.
    pub fn with_payload(&self, mass: f64) -> Self {
        RobotModel {
            payload_mass: mass,
            ..self.clone()
        }
    }

    pub fn gravity(&self) -> Vector3<f64> {
        Vector3::from(self.gravity)
    }

    /// Moving mass of the links, payload excluded.
    pub fn link_mass(&self) -> f64 {
        self.links.iter().map(|l| l.mass).sum()
    }
}

/// Reads, parses and validates a model file.
pub fn load_model(path: impl AsRef<Path>) -> Result<RobotModel, ModelError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RobotModel::from_json_str(&text)
}

/// Checks every model invariant and returns all violations found.
pub fn validate_model(model: &RobotModel) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut push = |path: String, message: String| out.push(Diagnostic { path, message });

    if model.schema_version != SCHEMA_VERSION {
        push(
            "schema_version".into(),
            format!("unsupported version {}, expected {SCHEMA_VERSION}", model.schema_version),
        );
    }
    if model.gravity.iter().any(|g| !g.is_finite()) {
        push("gravity".into(), "entries must be finite".into());
    }

    let n = model.links.len();
    if n == 0 {
        push("links".into(), "at least one link is required".into());
    }
    for (i, link) in model.links.iter().enumerate() {
        let at = |field: &str| format!("links[{i}].{field} ({})", link.name);
        if let Some(p) = link.parent {
            if p >= i {
                push(at("parent"), format!("parent {p} must precede link {i}"));
            }
        }
        let axis = link.axis();
        if (axis.norm() - 1.0).abs() > 1e-12 {
            push(at("joint_axis"), format!("norm {} is not 1", axis.norm()));
        }
        if !(link.mass > 0.0) || !link.mass.is_finite() {
            push(at("mass"), format!("mass {} must be positive", link.mass));
        }
        let inertia = link.inertia();
        if inertia.iter().any(|v| !v.is_finite()) {
            push(at("inertia"), "entries must be finite".into());
        } else {
            if (inertia - inertia.transpose()).abs().max() > 1e-12 {
                push(at("inertia"), "tensor is not symmetric".into());
            }
            let eig = inertia.symmetric_eigenvalues();
            if eig.min() < -1e-12 {
                push(at("inertia"), format!("tensor is not positive semidefinite (eigenvalue {})", eig.min()));
            }
        }
        if link.com.iter().chain(link.joint_origin.xyz.iter()).any(|v| !v.is_finite()) {
            push(at("com"), "com and origin must be finite".into());
        }
    }
    if model.end_effector.link >= n.max(1) {
        push(
            "end_effector.link".into(),
            format!("link {} does not exist", model.end_effector.link),
        );
    }

    let lim = &model.limits;
    let boxes: [(&str, &[f64], &str, &[f64]); 3] = [
        ("q_min", &lim.q_min, "q_max", &lim.q_max),
        ("qd_u_min", &lim.qd_u_min, "qd_u_max", &lim.qd_u_max),
        ("tau_u_min", &lim.tau_u_min, "tau_u_max", &lim.tau_u_max),
    ];
    for (lo_name, lo, hi_name, hi) in boxes {
        for (name, v) in [(lo_name, lo), (hi_name, hi)] {
            if v.len() != n {
                push(format!("limits.{name}"), format!("expected {n} entries, found {}", v.len()));
            }
        }
        for (i, (a, b)) in lo.iter().zip(hi.iter()).enumerate() {
            if !(a < b) {
                push(format!("limits.{lo_name}[{i}]"), format!("{a} must be below {hi_name} {b}"));
            }
        }
    }

    if !(model.payload_mass >= 0.0) || !model.payload_mass.is_finite() {
        push("payload_mass".into(), format!("{} must be >= 0", model.payload_mass));
    }

    let tr = &model.transmission;
    if n != NUM_GEARS {
        push(
            "transmission".into(),
            format!("belt transmission needs {NUM_GEARS} joints, model has {n}"),
        );
    }
    for i in 0..NUM_GEARS {
        if !(tr.bounds_lo[i] < tr.bounds_hi[i]) {
            push(format!("transmission.bounds_lo[{i}]"), "must be below bounds_hi".into());
        }
    }
    if let Err(e) = check_design(&tr.gear_ratios, &tr.bounds_lo, &tr.bounds_hi) {
        push("transmission.gear_ratios".into(), e.to_string());
    }
    out
}

/// Builds the belt coupling matrix from the four gear ratios.
///
/// Rows are motors, columns joints: motor velocity is gear ratio times joint
/// velocity, and joint torque is `G^T` times motor torque. Motors 3 and 4 drive
/// the wrist through a differential (`+g4` / `-g4`).
pub fn build_g(gears: &[f64; NUM_GEARS]) -> Result<DMatrix<f64>, DesignError> {
    for (i, &g) in gears.iter().enumerate() {
        if !(g > 0.0) || !g.is_finite() {
            return Err(DesignError::NonPositiveGear { index: i + 1, value: g });
        }
    }
    let [g1, g2, g3, g4] = *gears;
    Ok(DMatrix::from_row_slice(
        4,
        4,
        &[
            g1, 0.0, 0.0, 0.0, //
            g2, g2, 0.0, 0.0, //
            1.0, g3, g4, g4, //
            1.0, g3, g4, -g4,
        ],
    ))
}

/// Checks the gear-ratio box and the ordering `g3 <= g2 < g1`.
pub fn check_design(
    gears: &[f64; NUM_GEARS],
    lo: &[f64; NUM_GEARS],
    hi: &[f64; NUM_GEARS],
) -> Result<(), DesignError> {
    for i in 0..NUM_GEARS {
        let v = gears[i];
        if !v.is_finite() || v < lo[i] || v > hi[i] {
            return Err(DesignError::OutOfBounds { index: i + 1, value: v, lo: lo[i], hi: hi[i] });
        }
    }
    let [g1, g2, g3, _] = *gears;
    if !(g3 <= g2 && g2 < g1) {
        return Err(DesignError::Ordering(*gears));
    }
    Ok(())
}

/// Constant joint-to-motor coupling with its cached inverses.
#[derive(Debug, Clone, PartialEq)]
pub struct Transmission {
    gear_ratios: Option<[f64; NUM_GEARS]>,
    g: DMatrix<f64>,
    g_inv: DMatrix<f64>,
    g_inv_t: DMatrix<f64>,
}

impl Transmission {
    pub fn from_gears(gears: &[f64; NUM_GEARS]) -> Result<Self, DesignError> {
        let mut t = Self::from_matrix(build_g(gears)?)?;
        t.gear_ratios = Some(*gears);
        Ok(t)
    }

    pub fn from_matrix(g: DMatrix<f64>) -> Result<Self, DesignError> {
        if !g.is_square() {
            return Err(DesignError::Dimension { expected: g.nrows(), got: g.ncols() });
        }
        let g_inv = g.clone().try_inverse().ok_or(DesignError::Singular)?;
        if g_inv.iter().any(|v| !v.is_finite()) {
            return Err(DesignError::Singular);
        }
        let g_inv_t = g_inv.transpose();
        Ok(Transmission { gear_ratios: None, g, g_inv, g_inv_t })
    }

    pub fn identity(n: usize) -> Self {
        Self::from_matrix(DMatrix::identity(n, n)).expect("identity is invertible")
    }

    pub fn gear_ratios(&self) -> Option<[f64; NUM_GEARS]> {
        self.gear_ratios
    }

    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }

    pub fn g_inv(&self) -> &DMatrix<f64> {
        &self.g_inv
    }

    pub fn g_inv_t(&self) -> &DMatrix<f64> {
        &self.g_inv_t
    }

    pub fn dim(&self) -> usize {
        self.g.nrows()
    }

    /// `tau = G^T tau_u`
    pub fn joint_torque(&self, tau_u: &DVector<f64>) -> DVector<f64> {
        self.g.tr_mul(tau_u)
    }

    /// `tau_u = G^-T tau`
    pub fn motor_torque(&self, tau: &DVector<f64>) -> DVector<f64> {
        &self.g_inv_t * tau
    }
}

/// Joint-space boxes obtained by mapping motor boxes elementwise through `G`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub tau_min: Vec<f64>,
    pub tau_max: Vec<f64>,
    pub qd_min: Vec<f64>,
    pub qd_max: Vec<f64>,
}

/// Maps motor torque and velocity boxes to joint space:
/// `tau in [G^T tau_u_min, G^T tau_u_max]`, `qd in [G^-1 qd_u_min, G^-1 qd_u_max]`.
///
/// The bounds are mapped as vectors, not as boxes, so a differential row pair
/// with symmetric motor limits gives a zero-width range.
pub fn joint_limits_from_actuation(
    g: &DMatrix<f64>,
    tau_u_min: &[f64],
    tau_u_max: &[f64],
    qd_u_min: &[f64],
    qd_u_max: &[f64],
) -> Result<JointLimits, DesignError> {
    let m = g.nrows();
    for v in [tau_u_min, tau_u_max, qd_u_min, qd_u_max] {
        if v.len() != m {
            return Err(DesignError::Dimension { expected: m, got: v.len() });
        }
    }
    let tr = Transmission::from_matrix(g.clone())?;
    let map_t = |v: &[f64]| tr.joint_torque(&DVector::from_column_slice(v)).as_slice().to_vec();
    let map_v = |v: &[f64]| (tr.g_inv() * DVector::from_column_slice(v)).as_slice().to_vec();
    Ok(JointLimits {
        tau_min: map_t(tau_u_min),
        tau_max: map_t(tau_u_max),
        qd_min: map_v(qd_u_min),
        qd_max: map_v(qd_u_max),
    })
}
