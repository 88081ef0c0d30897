//! Rigid-body dynamics of the kinematic tree and its actuation-space form.
//!
//! Inverse dynamics uses the recursive Newton-Euler algorithm and the mass
//! matrix the composite-rigid-body algorithm, both with spatial vectors in
//! world coordinates. The payload is a point mass fixed to the end-effector
//! frame and is folded into the inertia of the end-effector link.
//!
//! Joint space: `H(q) qdd + C(q, qd) = tau`.
//! Actuation space, with constant `G`: `H_u qdd_u + C_u = tau_u` where
//! `H_u = G^-T H G^-1`, `C_u = G^-T (C - H G^-1 g_u)` and `qdd_u = G qdd + g_u`.

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, Unit, Vector3};
use thiserror::Error;

use crate::model::{RobotModel, Transmission};
use crate::spatial::{Force, Motion, SpatialInertia};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("{0} matrix is not positive definite")]
    NotPositiveDefinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Robot state `x = [q, qd]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub q: DVector<f64>,
    pub qd: DVector<f64>,
}

impl JointState {
    pub fn new(q: DVector<f64>, qd: DVector<f64>) -> Self {
        JointState { q, qd }
    }

    /// Splits a stacked `[q, qd]` slice.
    pub fn from_stacked(x: &[f64]) -> Self {
        let n = x.len() / 2;
        JointState {
            q: DVector::from_column_slice(&x[..n]),
            qd: DVector::from_column_slice(&x[n..]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qd.iter()).all(|v| v.is_finite())
    }
}

/// `H` and `C` of the joint-space equations of motion.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsTerms {
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
}

/// `H_u`, `C_u` and `g_u` of the actuation-space equations of motion.
#[derive(Debug, Clone, PartialEq)]
pub struct ActuationTerms {
    pub h_u: DMatrix<f64>,
    pub c_u: DVector<f64>,
    pub g_u: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Body {
    parent: Option<usize>,
    axis: Vector3<f64>,
    origin_rot: Matrix3<f64>,
    origin_trans: Vector3<f64>,
    mass: f64,
    com: Vector3<f64>,
    inertia: Matrix3<f64>,
}

/// Dynamics view of a [`RobotModel`], payload included.
#[derive(Debug, Clone)]
pub struct Multibody {
    bodies: Vec<Body>,
    gravity: Vector3<f64>,
    ee_link: usize,
    ee_offset: Vector3<f64>,
    payload: f64,
}

/// Per-configuration world placement of every link.
struct Placement {
    rot: Vec<Matrix3<f64>>,
    pos: Vec<Vector3<f64>>,
    twist: Vec<Motion>,
    inertia: Vec<SpatialInertia>,
    ee: Vector3<f64>,
}

impl Multibody {
    pub fn new(model: &RobotModel) -> Self {
        let bodies = model
            .links
            .iter()
            .map(|l| Body {
                parent: l.parent,
                axis: l.axis(),
                origin_rot: l.joint_origin.rotation(),
                origin_trans: l.joint_origin.translation(),
                mass: l.mass,
                com: l.com(),
                inertia: l.inertia(),
            })
            .collect();
        Multibody {
            bodies,
            gravity: model.gravity(),
            ee_link: model.end_effector.link,
            ee_offset: Vector3::from(model.end_effector.offset),
            payload: model.payload_mass,
        }
    }

    pub fn dof(&self) -> usize {
        self.bodies.len()
    }

    pub fn payload(&self) -> f64 {
        self.payload
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    /// Same tree with a different gravity vector.
    pub fn with_gravity(&self, gravity: Vector3<f64>) -> Self {
        Multibody { gravity, ..self.clone() }
    }

    fn place(&self, q: &[f64]) -> Placement {
        let n = self.dof();
        let mut rot = Vec::with_capacity(n);
        let mut pos = Vec::with_capacity(n);
        let mut twist = Vec::with_capacity(n);
        let mut inertia = Vec::with_capacity(n);
        for (i, b) in self.bodies.iter().enumerate() {
            let (r_par, p_par) = match b.parent {
                Some(p) => (rot[p], pos[p]),
                None => (Matrix3::identity(), Vector3::zeros()),
            };
            let r_joint = r_par * b.origin_rot;
            let p = p_par + r_par * b.origin_trans;
            let axis = r_joint * b.axis;
            let r = r_joint * Rotation3::from_axis_angle(&Unit::new_unchecked(b.axis), q[i]).into_inner();
            let com = p + r * b.com;
            let i_com = r * b.inertia * r.transpose();
            rot.push(r);
            pos.push(p);
            twist.push(Motion::revolute(axis, p));
            inertia.push(SpatialInertia::from_com(b.mass, com, i_com));
        }
        let ee = pos[self.ee_link] + rot[self.ee_link] * self.ee_offset;
        if self.payload > 0.0 {
            inertia[self.ee_link] += SpatialInertia::point_mass(self.payload, ee);
        }
        Placement { rot, pos, twist, inertia, ee }
    }

    fn rnea_placed(&self, pl: &Placement, qd: &[f64], qdd: &[f64], gravity: bool) -> DVector<f64> {
        let n = self.dof();
        let a_base = if gravity {
            Motion::new(Vector3::zeros(), -self.gravity)
        } else {
            Motion::zero()
        };
        let mut vel = Vec::with_capacity(n);
        let mut forces: Vec<Force> = Vec::with_capacity(n);
        let mut acc = Vec::with_capacity(n);
        for (i, b) in self.bodies.iter().enumerate() {
            let (v_par, a_par) = match b.parent {
                Some(p) => (vel[p], acc[p]),
                None => (Motion::zero(), a_base),
            };
            let sqd = pl.twist[i] * qd[i];
            let v = v_par + sqd;
            let a = a_par + pl.twist[i] * qdd[i] + v.cross_motion(&sqd);
            let ia = &pl.inertia[i];
            forces.push(ia.apply(&a) + v.cross_force(&ia.apply(&v)));
            vel.push(v);
            acc.push(a);
        }
        let mut tau = DVector::zeros(n);
        for i in (0..n).rev() {
            tau[i] = pl.twist[i].dot(&forces[i]);
            if let Some(p) = self.bodies[i].parent {
                let f = forces[i];
                forces[p] += f;
            }
        }
        tau
    }

    fn crba_placed(&self, pl: &Placement) -> DMatrix<f64> {
        let n = self.dof();
        let mut composite = pl.inertia.clone();
        for i in (0..n).rev() {
            if let Some(p) = self.bodies[i].parent {
                let c = composite[i];
                composite[p] += c;
            }
        }
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            let f = composite[i].apply(&pl.twist[i]);
            h[(i, i)] = pl.twist[i].dot(&f);
            let mut j = self.bodies[i].parent;
            while let Some(jj) = j {
                let v = pl.twist[jj].dot(&f);
                h[(i, jj)] = v;
                h[(jj, i)] = v;
                j = self.bodies[jj].parent;
            }
        }
        h
    }

    fn check_len(&self, v: &[f64]) -> Result<(), DynamicsError> {
        if v.len() != self.dof() {
            return Err(DynamicsError::Dimension { expected: self.dof(), got: v.len() });
        }
        Ok(())
    }
}

/// Joint-space mass matrix `H(q)` (composite-rigid-body algorithm).
pub fn mass_matrix(mb: &Multibody, q: &DVector<f64>) -> DMatrix<f64> {
    mb.crba_placed(&mb.place(q.as_slice()))
}

/// Inverse dynamics `tau = H qdd + C` (recursive Newton-Euler).
pub fn rnea(mb: &Multibody, q: &DVector<f64>, qd: &DVector<f64>, qdd: &DVector<f64>) -> DVector<f64> {
    let pl = mb.place(q.as_slice());
    mb.rnea_placed(&pl, qd.as_slice(), qdd.as_slice(), true)
}

/// Coriolis, centrifugal and gravity bias `C(q, qd) = rnea(q, qd, 0)`.
pub fn bias(mb: &Multibody, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let pl = mb.place(q.as_slice());
    mb.rnea_placed(&pl, qd.as_slice(), &vec![0.0; mb.dof()], true)
}

pub fn dynamics_terms(mb: &Multibody, q: &DVector<f64>, qd: &DVector<f64>) -> DynamicsTerms {
    let pl = mb.place(q.as_slice());
    DynamicsTerms {
        h: mb.crba_placed(&pl),
        c: mb.rnea_placed(&pl, qd.as_slice(), &vec![0.0; mb.dof()], true),
    }
}

fn check_finite(v: &DVector<f64>, what: &'static str) -> Result<(), DynamicsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(DynamicsError::NonFinite(what))
    }
}

/// Joint accelerations `qdd = H^-1 (tau - C)`.
pub fn forward_dynamics_joint(
    mb: &Multibody,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    mb.check_len(q.as_slice())?;
    mb.check_len(qd.as_slice())?;
    mb.check_len(tau.as_slice())?;
    check_finite(q, "q")?;
    check_finite(qd, "qd")?;
    check_finite(tau, "tau")?;
    let terms = dynamics_terms(mb, q, qd);
    let chol = terms.h.cholesky().ok_or(DynamicsError::NotPositiveDefinite("mass"))?;
    let qdd = chol.solve(&(tau - terms.c));
    check_finite(&qdd, "qdd")?;
    Ok(qdd)
}

/// Transforms joint-space terms into actuation space.
pub fn to_actuation(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    tr: &Transmission,
    g_u: &DVector<f64>,
) -> Result<ActuationTerms, DynamicsError> {
    let n = h.nrows();
    if tr.dim() != n || c.len() != n || g_u.len() != n {
        return Err(DynamicsError::Dimension { expected: n, got: tr.dim() });
    }
    let g_inv = tr.g_inv();
    let g_inv_t = tr.g_inv_t();
    let mut h_u = g_inv_t * h * g_inv;
    // Symmetrize away rounding from the triple product.
    h_u = (&h_u + h_u.transpose()) * 0.5;
    let c_u = g_inv_t * (c - h * (g_inv * g_u));
    Ok(ActuationTerms { h_u, c_u, g_u: g_u.clone() })
}

/// Joint accelerations driven by motor torques `tau_u` through the transmission.
pub fn forward_dynamics_actuation(
    mb: &Multibody,
    tr: &Transmission,
    q: &DVector<f64>,
    qd: &DVector<f64>,
    tau_u: &DVector<f64>,
) -> Result<DVector<f64>, DynamicsError> {
    mb.check_len(q.as_slice())?;
    mb.check_len(qd.as_slice())?;
    mb.check_len(tau_u.as_slice())?;
    check_finite(q, "q")?;
    check_finite(qd, "qd")?;
    check_finite(tau_u, "tau_u")?;
    let terms = dynamics_terms(mb, q, qd);
    // Constant coupling matrix: g_u = dG/dt * qd = 0.
    let g_u = DVector::zeros(mb.dof());
    let act = to_actuation(&terms.h, &terms.c, tr, &g_u)?;
    let chol = act.h_u.cholesky().ok_or(DynamicsError::NotPositiveDefinite("actuation mass"))?;
    let qdd_u = chol.solve(&(tau_u - &act.c_u));
    let qdd = tr.g_inv() * (qdd_u - g_u);
    check_finite(&qdd, "qdd")?;
    Ok(qdd)
}

/// End-effector position in the base frame.
pub fn fk(mb: &Multibody, q: &DVector<f64>) -> Vector3<f64> {
    mb.place(q.as_slice()).ee
}

/// Linear-velocity Jacobian of the end-effector point (3 x n).
pub fn ee_jacobian(mb: &Multibody, q: &DVector<f64>) -> DMatrix<f64> {
    let pl = mb.place(q.as_slice());
    let n = mb.dof();
    let mut jac = DMatrix::zeros(3, n);
    let mut j = Some(mb.ee_link);
    while let Some(jj) = j {
        let col = pl.twist[jj].point_velocity(&pl.ee);
        jac.fixed_view_mut::<3, 1>(0, jj).copy_from(&col);
        j = mb.bodies[jj].parent;
    }
    jac
}

/// Kinetic energy `1/2 qd^T H qd`, evaluated body by body.
pub fn kinetic_energy(mb: &Multibody, q: &DVector<f64>, qd: &DVector<f64>) -> f64 {
    let pl = mb.place(q.as_slice());
    let mut vel: Vec<Motion> = Vec::with_capacity(mb.dof());
    let mut ke = 0.0;
    for (i, b) in mb.bodies.iter().enumerate() {
        let v_par = b.parent.map(|p| vel[p]).unwrap_or_default();
        let v = v_par + pl.twist[i] * qd[i];
        ke += 0.5 * v.dot(&pl.inertia[i].apply(&v));
        vel.push(v);
    }
    ke
}

/// Gravitational potential energy relative to the base origin.
pub fn potential_energy(mb: &Multibody, q: &DVector<f64>) -> f64 {
    let pl = mb.place(q.as_slice());
    pl.inertia.iter().map(|i| -mb.gravity.dot(&i.h)).sum()
}

/// World rotation of every link frame (used by tests and exporters).
pub fn link_rotations(mb: &Multibody, q: &DVector<f64>) -> Vec<Matrix3<f64>> {
    mb.place(q.as_slice()).rot
}

/// World position of every joint origin.
pub fn joint_positions(mb: &Multibody, q: &DVector<f64>) -> Vec<Vector3<f64>> {
    mb.place(q.as_slice()).pos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EndEffector, LinkSpec, Origin, RobotModel, ORIGINAL_GEARS};
    use std::f64::consts::FRAC_PI_2;

    pub(crate) fn pendulum(mass: f64, lc: f64, izz: f64, length: f64) -> RobotModel {
        let mut m = RobotModel::reference();
        m.links = vec![LinkSpec {
            name: "pendulum".into(),
            parent: None,
            joint_axis: [0.0, 1.0, 0.0],
            joint_origin: Origin { xyz: [0.0; 3], rpy: [0.0; 3] },
            mass,
            com: [lc, 0.0, 0.0],
            inertia: [[1e-4, 0.0, 0.0], [0.0, izz, 0.0], [0.0, 0.0, izz]],
        }];
        m.end_effector = EndEffector { link: 0, offset: [length, 0.0, 0.0] };
        m
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn pendulum_mass_matrix_is_constant() {
        let mb = Multibody::new(&pendulum(1.3, 0.2, 0.01, 0.4));
        for q in [0.0, 0.7, -2.0] {
            let h = mass_matrix(&mb, &dv(&[q]));
            assert!((h[(0, 0)] - (1.3 * 0.04 + 0.01)).abs() < 1e-14);
        }
    }

    #[test]
    fn pendulum_horizontal_release() {
        let (m, lc, izz) = (1.3, 0.2, 0.01);
        let mb = Multibody::new(&pendulum(m, lc, izz, 0.4));
        let qdd = forward_dynamics_joint(&mb, &dv(&[0.0]), &dv(&[0.0]), &dv(&[0.0])).unwrap();
        // Positive rotation about +y moves +x towards -z, so gravity accelerates q positively.
        let expected = m * 9.81 * lc / (m * lc * lc + izz);
        assert!((qdd[0] - expected).abs() < 1e-12, "{} vs {}", qdd[0], expected);
    }

    #[test]
    fn pendulum_fk_rotates_about_axis() {
        let mb = Multibody::new(&pendulum(1.0, 0.2, 0.01, 0.4));
        let home = fk(&mb, &dv(&[0.0]));
        assert!((home - Vector3::new(0.4, 0.0, 0.0)).norm() < 1e-15);
        let p = fk(&mb, &dv(&[FRAC_PI_2]));
        let rotated = Rotation3::from_axis_angle(&Vector3::y_axis(), FRAC_PI_2) * home;
        assert!((p - rotated).norm() < 1e-15);
    }

    #[test]
    fn reference_home_position() {
        // 0.30 + 0.25 + 0.05 + 0.08 along x, 0.03 lateral gripper offset.
        let mb = Multibody::new(&RobotModel::reference());
        let p = fk(&mb, &DVector::zeros(4));
        assert!((p - Vector3::new(0.68, 0.03, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn static_no_gravity_gives_zero_torque() {
        let mb = Multibody::new(&RobotModel::reference()).with_gravity(Vector3::zeros());
        let tau = rnea(&mb, &dv(&[0.3, -0.5, 1.1, 0.4]), &DVector::zeros(4), &DVector::zeros(4));
        assert!(tau.amax() < 1e-15);
    }

    #[test]
    fn identity_transmission_preserves_terms() {
        let mb = Multibody::new(&RobotModel::reference());
        let q = dv(&[0.1, 0.2, 0.3, 0.4]);
        let qd = dv(&[0.5, -0.2, 0.1, 0.9]);
        let t = dynamics_terms(&mb, &q, &qd);
        let act = to_actuation(&t.h, &t.c, &Transmission::identity(4), &DVector::zeros(4)).unwrap();
        assert!((&act.h_u - &t.h).amax() < 1e-15);
        assert!((&act.c_u - &t.c).amax() < 1e-15);
        let tau = dv(&[1.0, -1.0, 0.2, 0.05]);
        let a = forward_dynamics_joint(&mb, &q, &qd, &tau).unwrap();
        let b = forward_dynamics_actuation(&mb, &Transmission::identity(4), &q, &qd, &tau).unwrap();
        assert!((a - b).amax() < 1e-12);
    }

    #[test]
    fn bias_cancellation_through_transmission() {
        let mb = Multibody::new(&RobotModel::reference().with_payload(1.0));
        let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
        let q = dv(&[0.4, 0.9, -0.3, 0.2]);
        let qd = dv(&[1.0, -2.0, 0.5, 0.3]);
        let c = bias(&mb, &q, &qd);
        let qdd = forward_dynamics_joint(&mb, &q, &qd, &c).unwrap();
        assert!(qdd.amax() < 1e-10);
        let qdd = forward_dynamics_actuation(&mb, &tr, &q, &qd, &tr.motor_torque(&c)).unwrap();
        assert!(qdd.amax() < 1e-10);
    }

    #[test]
    fn non_finite_input_rejected() {
        let mb = Multibody::new(&RobotModel::reference());
        let err = forward_dynamics_joint(
            &mb,
            &dv(&[0.0, f64::NAN, 0.0, 0.0]),
            &DVector::zeros(4),
            &DVector::zeros(4),
        );
        assert_eq!(err, Err(DynamicsError::NonFinite("q")));
    }

    #[test]
    fn roll_joint_decoupled_without_payload() {
        // Roll axis is principal for the gripper and carries its centre of mass.
        let mb = Multibody::new(&RobotModel::reference());
        let q = dv(&[0.4, 0.9, -0.3, 0.0]);
        let h = mass_matrix(&mb, &q);
        for j in 0..3 {
            assert!(h[(3, j)].abs() < 1e-15);
        }
        assert!(bias(&mb, &q, &dv(&[1.0, 2.0, -1.0, 0.0]))[3].abs() < 1e-14);
        // The lateral gripper offset makes a payload load the roll joint.
        let mbp = Multibody::new(&RobotModel::reference().with_payload(1.0));
        assert!(bias(&mbp, &q, &DVector::zeros(4))[3].abs() > 1e-2);
    }
}
