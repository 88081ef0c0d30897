use codesign_core::dynamics::*;
use codesign_core::model::{RobotModel, Transmission, ORIGINAL_GEARS};
use codesign_core::ocp::{step, Integrator, Space};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference(payload: f64) -> Multibody {
    Multibody::new(&RobotModel::reference().with_payload(payload))
}

fn random_state(rng: &mut ChaCha8Rng) -> (DVector<f64>, DVector<f64>) {
    let lim = RobotModel::reference().limits;
    let q = DVector::from_iterator(4, (0..4).map(|i| rng.random_range(lim.q_min[i]..lim.q_max[i])));
    let qd = DVector::from_iterator(4, (0..4).map(|_| rng.random_range(-3.0..3.0)));
    (q, qd)
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Bias from the Euler-Lagrange equations, with every derivative taken by
/// central differences of the energies and the mass matrix.
fn lagrange_bias(mb: &Multibody, q: &DVector<f64>, qd: &DVector<f64>) -> DVector<f64> {
    let n = q.len();
    let e = 1e-6;
    let mut c = DVector::zeros(n);
    for k in 0..n {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[k] += e;
        qm[k] -= e;
        let dh = (mass_matrix(mb, &qp) - mass_matrix(mb, &qm)) / (2.0 * e);
        c += dh * qd * qd[k];
        let dke = (kinetic_energy(mb, &qp, qd) - kinetic_energy(mb, &qm, qd)) / (2.0 * e);
        let dpe = (potential_energy(mb, &qp) - potential_energy(mb, &qm)) / (2.0 * e);
        c[k] += dpe - dke;
    }
    c
}

#[test]
fn bias_matches_euler_lagrange() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for payload in [0.0, 1.5] {
        let mb = reference(payload);
        for _ in 0..50 {
            let (q, qd) = random_state(&mut rng);
            let c = bias(&mb, &q, &qd);
            let oracle = lagrange_bias(&mb, &q, &qd);
            for i in 0..4 {
                assert!(rel(c[i], oracle[i]) < 1e-6, "payload {payload}: {c} vs {oracle}");
            }
        }
    }
}

#[test]
fn mass_matrix_columns_from_inverse_dynamics() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mb = reference(0.8).with_gravity(Vector3::zeros());
    for _ in 0..50 {
        let (q, _) = random_state(&mut rng);
        let h = mass_matrix(&mb, &q);
        for j in 0..4 {
            let mut e = DVector::zeros(4);
            e[j] = 1.0;
            let col = rnea(&mb, &q, &DVector::zeros(4), &e);
            assert!((col - h.column(j)).amax() < 1e-12);
        }
    }
}

#[test]
fn kinetic_energy_is_half_quadratic_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mb = reference(0.5);
    for _ in 0..50 {
        let (q, qd) = random_state(&mut rng);
        let quad = 0.5 * qd.dot(&(mass_matrix(&mb, &q) * &qd));
        assert!(rel(kinetic_energy(&mb, &q, &qd), quad) < 1e-12);
    }
}

#[test]
fn end_effector_jacobian_matches_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mb = reference(0.0);
    for _ in 0..30 {
        let (q, _) = random_state(&mut rng);
        let jac = ee_jacobian(&mb, &q);
        for j in 0..4 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[j] += 1e-6;
            qm[j] -= 1e-6;
            let fd = (fk(&mb, &qp) - fk(&mb, &qm)) / 2e-6;
            assert!((fd - jac.column(j)).amax() < 1e-8);
        }
    }
}

#[test]
fn gravity_torque_is_potential_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mb = reference(2.0);
    for _ in 0..30 {
        let (q, _) = random_state(&mut rng);
        let g = bias(&mb, &q, &DVector::zeros(4));
        for k in 0..4 {
            let mut qp = q.clone();
            let mut qm = q.clone();
            qp[k] += 1e-6;
            qm[k] -= 1e-6;
            let d = (potential_energy(&mb, &qp) - potential_energy(&mb, &qm)) / 2e-6;
            assert!(rel(g[k], d) < 1e-7);
        }
    }
}

#[test]
fn power_balance_under_torque() {
    // d/dt (T + V) = qd . tau along an accurate trajectory.
    let mb = reference(0.3);
    let tr = Transmission::from_gears(&ORIGINAL_GEARS).unwrap();
    let tau = [0.8, -0.4, 0.1, 0.02];
    let h = 1e-4;
    let mut x = vec![0.3, 0.5, -0.4, 0.2, 0.0, 0.0, 0.0, 0.0];
    let energy = |x: &[f64]| {
        let q = DVector::from_column_slice(&x[..4]);
        let qd = DVector::from_column_slice(&x[4..]);
        kinetic_energy(&mb, &q, &qd) + potential_energy(&mb, &q)
    };
    let e0 = energy(&x);
    let mut work = 0.0;
    for _ in 0..2000 {
        let next = step(&mb, &tr, Space::Joint, &x, &tau, h, Integrator::Rk4).unwrap();
        // Trapezoidal quadrature of the input power.
        let p0: f64 = x[4..].iter().zip(&tau).map(|(v, t)| v * t).sum();
        let p1: f64 = next[4..].iter().zip(&tau).map(|(v, t)| v * t).sum();
        work += 0.5 * h * (p0 + p1);
        x = next;
    }
    assert!((energy(&x) - e0 - work).abs() < 1e-6 * work.abs().max(1.0), "{} vs {work}", energy(&x) - e0);
}

fn actuation_mass(mb: &Multibody, tr: &Transmission, q: &DVector<f64>) -> DMatrix<f64> {
    let t = dynamics_terms(mb, q, &DVector::zeros(4));
    to_actuation(&t.h, &t.c, tr, &DVector::zeros(4)).unwrap().h_u
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn mass_matrix_symmetric_positive_definite(
        q in prop::array::uniform4(-3.0f64..3.0),
        payload in 0.0f64..3.0,
    ) {
        let mb = reference(payload);
        let h = mass_matrix(&mb, &DVector::from_column_slice(&q));
        prop_assert!((&h - h.transpose()).amax() < 1e-10);
        prop_assert!(h.clone().symmetric_eigenvalues().min() > 0.0);
    }

    #[test]
    fn both_spaces_agree_for_mapped_torque(
        q in prop::array::uniform4(-3.0f64..3.0),
        qd in prop::array::uniform4(-5.0f64..5.0),
        tau_u in prop::array::uniform4(-1.7f64..1.7),
        g1 in 1.0f64..9.0, g2f in 0.0f64..1.0, g3f in 0.0f64..1.0, g4 in 1.0f64..3.0,
    ) {
        let g2 = 1.0 + g2f * (g1 - 1.0);
        let g3 = (1.0 + g3f * (g2 - 1.0)).min(3.0);
        let tr = Transmission::from_gears(&[g1, g2, g3, g4]).unwrap();
        let mb = reference(0.7);
        let (q, qd, tau_u) = (DVector::from_column_slice(&q), DVector::from_column_slice(&qd), DVector::from_column_slice(&tau_u));
        let a = forward_dynamics_actuation(&mb, &tr, &q, &qd, &tau_u).unwrap();
        let b = forward_dynamics_joint(&mb, &q, &qd, &tr.joint_torque(&tau_u)).unwrap();
        prop_assert!((&a - &b).amax() < 1e-9 * b.amax().max(1.0));
        let hu = actuation_mass(&mb, &tr, &q);
        let back = tr.g().transpose() * hu * tr.g();
        let h = mass_matrix(&mb, &q);
        prop_assert!((back - &h).amax() < 1e-9 * h.amax());
    }

    #[test]
    fn inverse_of_forward_dynamics(
        q in prop::array::uniform4(-3.0f64..3.0),
        qd in prop::array::uniform4(-5.0f64..5.0),
        tau in prop::array::uniform4(-10.0f64..10.0),
    ) {
        let mb = reference(1.0);
        let (q, qd, tau) = (DVector::from_column_slice(&q), DVector::from_column_slice(&qd), DVector::from_column_slice(&tau));
        let qdd = forward_dynamics_joint(&mb, &q, &qd, &tau).unwrap();
        let back = rnea(&mb, &q, &qd, &qdd);
        prop_assert!((back - &tau).amax() < 1e-9 * tau.amax().max(1.0));
    }
}

#[test]
fn free_motion_conserves_energy() {
    let mb = reference(0.0).with_gravity(Vector3::zeros());
    let tr = Transmission::identity(4);
    let h = 1e-4;
    let mut x = vec![0.2, -0.6, 0.9, 0.3, 2.0, -1.5, 3.0, 4.0];
    let ke = |x: &[f64]| kinetic_energy(&mb, &DVector::from_column_slice(&x[..4]), &DVector::from_column_slice(&x[4..]));
    let e0 = ke(&x);
    for _ in 0..7000 {
        x = step(&mb, &tr, Space::Joint, &x, &[0.0; 4], h, Integrator::Rk4).unwrap();
    }
    assert!(((ke(&x) - e0) / e0).abs() < 1e-6);
}
